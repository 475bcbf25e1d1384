"""Ready-made scenario builders.

single_intersection: the microscopic one-junction setup (fcfs or ca).
grid_network / grid_scenario: a synthetic 4x4 junction grid with boundary
terminals and two hot crossing flows, used by the network experiments.
madrid_like: a small radial-ring network shipped as documentation of the
scenario schema; it is not a calibration target.
"""

from __future__ import annotations

from .engine import ScenarioConfig

GRID_N = 4
GRID_SPACING_M = 500.0
GRID_VMAX_MPS = 13.89


def single_intersection(mode: str = "fcfs", lam: float = 15.0, seed: int = 1,
                        spawn_window_s: float = 1800.0, **kw) -> ScenarioConfig:
    """Four 3-lane approaches feeding one reservation-managed junction."""
    return ScenarioConfig(mode=mode, model="micro", lambda_per_min=lam,
                          seed=seed, spawn_window_s=spawn_window_s, **kw)


def two_vehicle_conflict(seed: int = 1, **kw) -> ScenarioConfig:
    """Two vehicles on crossing straight trajectories, scripted at tick 0."""
    scripted = (
        {"tick": 0, "approach": "N", "turn": "straight", "lane": 1},
        {"tick": 0, "approach": "W", "turn": "straight", "lane": 1},
    )
    return ScenarioConfig(mode="fcfs", model="micro", lambda_per_min=None,
                          spawn_window_s=1.0, seed=seed, scripted=scripted, **kw)


def grid_network(n: int = GRID_N, spacing: float = GRID_SPACING_M,
                 vmax: float = GRID_VMAX_MPS,
                 hot_counts: dict[tuple[str, str], int] | None = None) -> dict:
    """n x n junction grid with a terminal at the end of every row and column.

    Junction J{r}{c} sits at (c*spacing, r*spacing); terminals W{r}/E{r} cap
    row r and S{c}/N{c} cap column c.  Every adjacent pair is joined by one
    link per direction.  The OD list contains every straight-through terminal
    pair (rate-driven background demand) plus optional fixed-count hot flows.
    """
    nodes = []
    links = []
    inter = []

    def J(r, c):
        return f"J{r}{c}"

    for r in range(n):
        for c in range(n):
            nodes.append({"id": J(r, c), "x": c * spacing, "y": r * spacing})
            inter.append({"node": J(r, c)})
    for r in range(n):
        nodes.append({"id": f"W{r}", "x": -spacing, "y": r * spacing})
        nodes.append({"id": f"E{r}", "x": n * spacing, "y": r * spacing})
    for c in range(n):
        nodes.append({"id": f"S{c}", "x": c * spacing, "y": -spacing})
        nodes.append({"id": f"N{c}", "x": c * spacing, "y": n * spacing})

    def both(a, b):
        links.append({"id": f"{a}>{b}", "from": a, "to": b,
                      "length_m": spacing, "vmax_mps": vmax, "lanes": 1})
        links.append({"id": f"{b}>{a}", "from": b, "to": a,
                      "length_m": spacing, "vmax_mps": vmax, "lanes": 1})

    for r in range(n):
        for c in range(n):
            if c + 1 < n:
                both(J(r, c), J(r, c + 1))
            if r + 1 < n:
                both(J(r, c), J(r + 1, c))
    for r in range(n):
        both(f"W{r}", J(r, 0))
        both(J(r, n - 1), f"E{r}")
    for c in range(n):
        both(f"S{c}", J(0, c))
        both(J(n - 1, c), f"N{c}")

    od = []
    for r in range(n):
        od.append({"origin": f"W{r}", "destination": f"E{r}"})
        od.append({"origin": f"E{r}", "destination": f"W{r}"})
    for c in range(n):
        od.append({"origin": f"S{c}", "destination": f"N{c}"})
        od.append({"origin": f"N{c}", "destination": f"S{c}"})
    for (o, d), count in sorted((hot_counts or {}).items()):
        od.append({"origin": o, "destination": d, "count": int(count)})

    return {"name": f"grid{n}x{n}", "dynamics": "meso", "nodes": nodes,
            "links": links, "intersections": inter, "od": od}


HOT_FLOWS = (("W1", "E1"), ("N2", "S2"))


def grid_scenario(mode: str = "fcfs", seed: int = 1, lam: float = 12.0,
                  hot_count: int = 450, spawn_window_s: float = 1800.0,
                  **kw) -> ScenarioConfig:
    """Grid preset with two hot crossing flows meeting at junction J12.

    lam drives the uniform background demand over the straight-through
    terminal pairs; hot_count vehicles per hot flow are spread uniformly over
    the spawn window.
    """
    net = grid_network(hot_counts={pair: hot_count for pair in HOT_FLOWS})
    return ScenarioConfig(mode=mode, model="meso", network=net,
                          lambda_per_min=lam, seed=seed,
                          spawn_window_s=spawn_window_s, **kw)


def madrid_like() -> dict:
    """Radial-and-ring sketch of a city network, documentation only.

    Seven terminal districts around a four-junction inner ring; useful as a
    worked example of the scenario schema, not as a reproduction target.
    """
    nodes = [
        {"id": "R0", "x": 0.0, "y": 500.0},
        {"id": "R1", "x": 500.0, "y": 1000.0},
        {"id": "R2", "x": 1000.0, "y": 500.0},
        {"id": "R3", "x": 500.0, "y": 0.0},
        {"id": "D1", "x": -1000.0, "y": 500.0},
        {"id": "D2", "x": -500.0, "y": 1500.0},
        {"id": "D3", "x": 500.0, "y": 2000.0},
        {"id": "D4", "x": 1500.0, "y": 1500.0},
        {"id": "D5", "x": 2000.0, "y": 500.0},
        {"id": "D6", "x": 1000.0, "y": -800.0},
        {"id": "D7", "x": 0.0, "y": -800.0},
    ]
    pairs = [("R0", "R1"), ("R1", "R2"), ("R2", "R3"), ("R3", "R0"),
             ("D1", "R0"), ("D2", "R0"), ("D2", "R1"), ("D3", "R1"),
             ("D4", "R1"), ("D4", "R2"), ("D5", "R2"), ("D6", "R2"),
             ("D6", "R3"), ("D7", "R3"), ("D7", "R0")]
    xy = {n["id"]: (n["x"], n["y"]) for n in nodes}
    links = []
    for a, b in pairs:
        dx, dy = xy[b][0] - xy[a][0], xy[b][1] - xy[a][1]
        length = max(200.0, round((dx * dx + dy * dy) ** 0.5, 1))
        links.append({"id": f"{a}>{b}", "from": a, "to": b,
                      "length_m": length, "vmax_mps": GRID_VMAX_MPS, "lanes": 1})
        links.append({"id": f"{b}>{a}", "from": b, "to": a,
                      "length_m": length, "vmax_mps": GRID_VMAX_MPS, "lanes": 1})
    inter = [{"node": f"R{i}"} for i in range(4)]
    districts = [f"D{i}" for i in range(1, 8)]
    od = [{"origin": o, "destination": d, "count": 40}
          for o in districts for d in districts if o != d]
    return {"name": "madrid-like", "dynamics": "meso", "nodes": nodes,
            "links": links, "intersections": inter, "od": od}
