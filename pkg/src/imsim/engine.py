"""Scenario orchestration.

Seeded vehicle spawning, the tick loop wiring a control policy (fcfs, ca, cta
or ca-cta) to the vehicle dynamics, metric accumulation and result
persistence.  Two scenario models exist: a microscopic single-intersection
model (fcfs, ca) and a mesoscopic network model (fcfs, cta, ca-cta).  Every
random draw comes from a named sub-stream of the master seed, so reruns with
the same config are byte-identical.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field, fields, replace

from . import __version__
from .auction import AuctionManager
from .driver import (ChoiceSet, DriverProfile, bid_value, choose_route_ca_cta,
                     choose_route_cta, sample_driver)
from .dynamics import CellCrossing, IDMParams, MicroVehicle, meso_advance, micro_step
from .isect import (HEADINGS, LEFT, RIGHT, STRAIGHT, TURNS, FcfsManager,
                    IntersectionGeometry, Reservation, ReservationRequest,
                    Confirmation, heading_key)
from .market import (FundamentalDiagram, IntersectionMarket, PriceVector,
                     build_price_vector, speed_density)
from .roadnet import (Link, NetworkGraph, NoRouteError, Route, k_shortest_routes,
                      load_network)

MODES = ("fcfs", "ca", "cta", "ca-cta")
MODELS = ("micro", "meso")
JAM_SPACING_M = 7.0  # rear-to-front spacing of a standing queue


def substream(seed: int, name: str) -> random.Random:
    """Named child stream of the master seed (string seeding is stable)."""
    return random.Random(f"{seed}:{name}")


def poisson_draw(rng: random.Random, lam: float) -> int:
    if lam < 0:
        raise ValueError("rate must be >= 0")
    if lam == 0:
        return 0
    limit = math.exp(-lam)
    k = 0
    p = rng.random()
    while p > limit:
        p *= rng.random()
        k += 1
    return k


def spawn_poisson(lam_per_min: float, od_pairs, rng: random.Random,
                  dt: float = 1.0, per_pair: bool = False) -> list:
    """OD pairs of the vehicles arriving this tick.

    By default lam_per_min is the network-wide expected arrival count per
    60 s, split uniformly over the OD pairs; per_pair applies the rate to
    every pair independently.
    """
    if lam_per_min <= 0:
        raise ValueError("arrival rate must be > 0")
    od_pairs = list(od_pairs)
    out = []
    if per_pair:
        for pair in od_pairs:
            out.extend([pair] * poisson_draw(rng, lam_per_min / 60.0 * dt))
    else:
        n = poisson_draw(rng, lam_per_min / 60.0 * dt)
        for _ in range(n):
            out.append(od_pairs[rng.randrange(len(od_pairs))])
    return out


def delay(travel_time: float, unhindered_time: float) -> float:
    """Travel time in excess of the vehicle's unhindered time, floored at 0."""
    return max(0.0, travel_time - unhindered_time)


def normalized_delay(travel_time: float, unhindered_shortest: float) -> float:
    """(T - m_T) / m_T against the unhindered shortest-route time m_T."""
    if unhindered_shortest <= 0:
        raise ValueError("unhindered shortest-route time must be > 0")
    return (travel_time - unhindered_shortest) / unhindered_shortest


def moving_average_update(avg: float, new_value: float, n: int) -> float:
    """Incremental mean: avg' = avg + (new - avg) / (n + 1) with n prior trips."""
    return avg + (new_value - avg) / (n + 1)


def above_window(series, mu_opt: float):
    """(t1, t2) bracketing the time the density curve spends above mu_opt.

    Crossing instants are linearly interpolated; None when the curve never
    exceeds mu_opt.
    """
    pts = list(series)
    above = [i for i, (_, mu) in enumerate(pts) if mu > mu_opt]
    if not above:
        return None
    i, j = above[0], above[-1]
    if i == 0:
        t1 = pts[0][0]
    else:
        (ta, ma), (tb, mb) = pts[i - 1], pts[i]
        t1 = ta + (tb - ta) * (mu_opt - ma) / (mb - ma)
    if j == len(pts) - 1:
        t2 = pts[-1][0]
    else:
        (ta, ma), (tb, mb) = pts[j], pts[j + 1]
        t2 = ta + (tb - ta) * (mu_opt - ma) / (mb - ma)
    return t1, t2


def density_integral_above_opt(series, mu_opt: float, window=None) -> float:
    """Integral of max(mu(t), mu_opt) over the above-optimal window, veh*h/km.

    The window defaults to this curve's own above_window; comparisons between
    policies pass a common window explicitly.  Returns 0 when the curve never
    exceeds mu_opt.
    """
    if window is None:
        window = above_window(series, mu_opt)
        if window is None:
            return 0.0
    t1, t2 = window
    if t2 <= t1:
        return 0.0
    pts = list(series)
    total = 0.0
    for (ta, ma), (tb, mb) in zip(pts, pts[1:]):
        lo, hi = max(ta, t1), min(tb, t2)
        if hi <= lo or tb == ta:
            continue

        def mu_at(t):
            return ma + (mb - ma) * (t - ta) / (tb - ta)

        va, vb = mu_at(lo), mu_at(hi)
        cut = [lo, hi]
        # split the segment where it crosses mu_opt so max() stays linear
        if (va - mu_opt) * (vb - mu_opt) < 0:
            cut.insert(1, lo + (hi - lo) * (mu_opt - va) / (vb - va))
        for u0, u1 in zip(cut, cut[1:]):
            f0, f1 = max(mu_at(u0), mu_opt), max(mu_at(u1), mu_opt)
            total += 0.5 * (f0 + f1) * (u1 - u0)
    return total / 3600.0


# ---------------------------------------------------------------------------
# Configuration and results


@dataclass
class ScenarioConfig:
    mode: str = "fcfs"
    model: str = "micro"
    lambda_per_min: float | None = None
    per_pair_lambda: bool = False
    spawn_window_s: float = 1800.0
    seed: int = 1
    dt: float = 1.0
    horizon_extra_s: float = 14400.0
    # auction parameters
    wp: float = 0.15
    np_: float = 0.5
    budget: int = 32
    round_period: int = 2
    # market parameters
    min_price: float = 0.0
    zero_escape: float = 1.0
    price_period_s: float = 10.0
    # drivers
    tracked_endowments: tuple = ()
    k_routes: int = 10
    # micro model
    approach_length_m: float = 200.0
    restart_speed: float = 5.0
    approach_vmax: float = 13.89
    request_period: int = 2
    idm_exponent: float = 1.0
    # network model
    network: dict | None = None
    request_zone_m: float = 200.0
    # instrumentation
    sample_period_s: float = 10.0
    scripted: tuple = ()
    debug_messages: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.model not in MODELS:
            raise ValueError(f"unknown model {self.model!r}")
        if self.mode in ("cta", "ca-cta") and self.model != "meso":
            raise ValueError(f"mode {self.mode!r} requires the meso model")
        if self.lambda_per_min is not None and self.lambda_per_min <= 0:
            raise ValueError("lambda_per_min must be > 0")
        if self.spawn_window_s <= 0 or self.dt <= 0:
            raise ValueError("spawn window and dt must be > 0")
        if self.model == "meso" and self.network is None:
            raise ValueError("meso scenarios require a network document")
        self.tracked_endowments = tuple(self.tracked_endowments)
        self.scripted = tuple(dict(s) for s in self.scripted)

    @classmethod
    def from_dict(cls, doc: dict) -> "ScenarioConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ValueError(f"unknown scenario keys: {', '.join(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    def with_overrides(self, overrides: dict[str, str]) -> "ScenarioConfig":
        """Apply --set key=value strings, coercing to the field's type."""
        changes = {}
        by_name = {f.name: f for f in fields(self)}
        for key, raw in overrides.items():
            if key not in by_name:
                raise ValueError(f"unknown config key {key!r}")
            cur = getattr(self, key)
            if key in ("tracked_endowments", "scripted"):
                changes[key] = tuple(
                    float(x) for x in raw.split(",") if x != "") if raw else ()
            elif key == "network":
                changes[key] = json.loads(raw)
            elif isinstance(cur, bool):
                changes[key] = raw.lower() in ("1", "true", "yes")
            elif isinstance(cur, int) and not isinstance(cur, bool):
                changes[key] = int(raw)
            elif isinstance(cur, float) or (cur is None and key == "lambda_per_min"):
                changes[key] = float(raw)
            else:
                changes[key] = raw
        return replace(self, **changes)


@dataclass
class VehicleRow:
    id: str
    origin: str
    destination: str
    spawn_s: float
    end_s: float | None
    status: str            # completed | in-network | queued
    route: str
    bid: float
    spent: float
    travel_s: float | None
    unhindered_s: float
    shortest_unhindered_s: float
    delay_s: float | None
    normalized_delay: float | None


@dataclass
class RunResults:
    config: dict
    version: str = __version__
    vehicles: list = field(default_factory=list)
    density: list = field(default_factory=list)            # (t, link, veh/km/lane)
    prices: list = field(default_factory=list)             # (t, node, link, price)
    d_series: list = field(default_factory=list)           # (t, approach, lane, d_i)
    auctions: list = field(default_factory=list)           # (t, node, bids, winners, value)
    intersections: list = field(default_factory=list)      # (node, confirmed, rejected, revenue)
    ma_trace: list = field(default_factory=list)           # (n, avg travel time)
    messages: list = field(default_factory=list)
    spawned: int = 0
    completed: int = 0
    total_spent: float = 0.0
    total_revenue: float = 0.0
    partial: bool = False

    # -- serialization ------------------------------------------------------

    _FILES = ("vehicles.csv", "density.csv", "prices.csv", "reservation_distance.csv",
              "auctions.csv", "intersections.csv", "moving_average.csv")

    def manifest(self) -> dict:
        return {
            "version": self.version,
            "config": self.config,
            "spawned": self.spawned,
            "completed": self.completed,
            "total_spent": round(self.total_spent, 6),
            "total_revenue": round(self.total_revenue, 6),
            "partial": self.partial,
        }

    @staticmethod
    def _render(header, rows) -> str:
        def cell(v):
            if v is None:
                return ""
            if isinstance(v, float):
                return repr(v)
            return str(v)

        lines = [",".join(header)]
        lines.extend(",".join(cell(c) for c in row) for row in rows)
        return "\n".join(lines) + "\n"

    def tables(self) -> dict[str, str]:
        out = {
            "vehicles.csv": self._render(
                ("id", "origin", "destination", "spawn_s", "end_s", "status",
                 "route", "bid", "spent", "travel_s", "unhindered_s",
                 "shortest_unhindered_s", "delay_s", "normalized_delay"),
                [(r.id, r.origin, r.destination, r.spawn_s, r.end_s, r.status,
                  r.route, r.bid, r.spent, r.travel_s, r.unhindered_s,
                  r.shortest_unhindered_s, r.delay_s, r.normalized_delay)
                 for r in self.vehicles]),
            "density.csv": self._render(("t_s", "link", "density_veh_km"), self.density),
            "prices.csv": self._render(("t_s", "node", "link", "price"), self.prices),
            "reservation_distance.csv": self._render(
                ("t_s", "approach", "lane", "d_i_m"), self.d_series),
            "intersections.csv": self._render(
                ("node", "confirmed", "rejected", "revenue"), self.intersections),
            "moving_average.csv": self._render(("n", "avg_travel_s"), self.ma_trace),
        }
        if self.config.get("mode") in ("ca", "ca-cta"):
            out["auctions.csv"] = self._render(
                ("t_s", "node", "bids", "winners", "value"), self.auctions)
        return out

    def to_bytes(self) -> bytes:
        blob = [json.dumps(self.manifest(), sort_keys=True)]
        for name, text in sorted(self.tables().items()):
            blob.append(name)
            blob.append(text)
        return "\n".join(blob).encode()

    def write(self, out_dir) -> None:
        from pathlib import Path

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "manifest.json").write_text(
            json.dumps(self.manifest(), indent=2, sort_keys=True) + "\n")
        for name, text in self.tables().items():
            (out / name).write_text(text)
        if self.messages:
            (out / "messages.jsonl").write_text(
                "".join(json.dumps(m, sort_keys=True) + "\n" for m in self.messages))


# ---------------------------------------------------------------------------
# Microscopic single-intersection model


def _exit_label(approach: str, turn: str) -> str:
    from .isect import _turned

    h = _turned(HEADINGS[approach], turn)
    # travelling toward heading h exits on the side opposite heading_key(h)
    key = heading_key(h)
    return {"N": "S", "S": "N", "E": "W", "W": "E"}[key]


@dataclass
class _MicroAgent:
    id: str
    profile: DriverProfile
    approach: str
    lane: int
    turn: str
    body: MicroVehicle
    spawn_s: float
    unhindered_s: float
    state: str = "approach"
    reservation: Reservation | None = None
    crossing: CellCrossing | None = None
    last_request: int = -10**9
    end_s: float | None = None
    spent: float = 0.0


class MicroSimulation:
    """Single intersection with IDM approach lanes and reservation control."""

    def __init__(self, config: ScenarioConfig):
        if config.mode not in ("fcfs", "ca"):
            raise ValueError("micro model supports fcfs and ca modes")
        self.cfg = config
        self.geometry = IntersectionGeometry()
        self.dt = config.dt
        self.L = config.approach_length_m
        self.params = IDMParams(exponent=config.idm_exponent)
        self.spawn_rng = substream(config.seed, "spawn")
        self.profile_rng = substream(config.seed, "profile")
        if config.mode == "ca":
            self.manager = AuctionManager(
                self.geometry, rng=substream(config.seed, "wdp"), dt=self.dt,
                wp=config.wp, np_=config.np_, budget=config.budget,
                round_period=config.round_period, debug=config.debug_messages)
        else:
            self.manager = FcfsManager(self.geometry, dt=self.dt,
                                       debug=config.debug_messages)
        self.lanes: dict[tuple[str, int], list[_MicroAgent]] = {
            (a, l): [] for a in sorted(self.geometry.approaches)
            for l in range(self.geometry.lanes)}
        self.by_id: dict[str, _MicroAgent] = {}
        self.crossing: list[_MicroAgent] = []
        self.queued: list[tuple] = []   # deferred spawn specs
        self.done: list[_MicroAgent] = []
        self._free_cache: dict[tuple, tuple[int, float]] = {}
        self._next_id = 0
        self._tracked_i = 0

    # -- helpers ------------------------------------------------------------

    def _free_run(self, v0: float, v_p: float, dist: float) -> tuple[int, float]:
        """Ticks and speed at which an unhindered vehicle covers dist."""
        if dist <= 1e-9:
            return 1, max(v0, 0.05)
        key = (round(v0 * 20), round(v_p * 20), round(dist * 4))
        hit = self._free_cache.get(key)
        if hit is not None:
            return hit
        pos, v, k = 0.0, v0, 0
        a, e, tile = self.params.accel, self.params.exponent, self.geometry.tile_size
        while pos < dist - 1e-9 and k < 10000:
            v = max(0.0, v + a * (1.0 - (v / v_p) ** e) * self.dt)
            pos = round((pos + v * self.dt) / tile) * tile
            k += 1
        out = (k, max(v, 0.05))
        self._free_cache[key] = out
        return out

    def _spawn_spec(self, approach: str, turn: str, lane: int | None = None):
        if lane is None:
            choices = self.geometry.lanes_for_turn(turn)
            lane = choices[self.spawn_rng.randrange(len(choices))]
        endow = None
        if self.cfg.tracked_endowments:
            endow = self.cfg.tracked_endowments[
                self._tracked_i % len(self.cfg.tracked_endowments)]
            self._tracked_i += 1
        vid = f"v{self._next_id:05d}"
        self._next_id += 1
        profile = sample_driver(self.profile_rng,
                                (approach, _exit_label(approach, turn)), vid,
                                endowment=endow)
        return (vid, profile, approach, lane, turn)

    def _try_insert(self, spec, now: float) -> bool:
        vid, profile, approach, lane, turn = spec
        queue = self.lanes[(approach, lane)]
        v_p = min(profile.v_p, self.cfg.approach_vmax)
        if queue:
            tail = queue[-1]
            gap = tail.body.pos - tail.body.length
            if gap < 8.0:
                return False
            speed = min(v_p, max(0.0, gap - self.params.min_gap)) if gap < 30 else v_p
        else:
            speed = v_p
        k, v_arr = self._free_run(speed, v_p, self.L)
        ghost = ReservationRequest(vid, float(k), max(v_arr, 0.05), approach, lane, turn)
        from .isect import traversal_duration

        unhindered = k * self.dt + traversal_duration(ghost, self.geometry, self.dt)
        body = MicroVehicle(vid, 0.0, speed, v_p, params=self.params, stop_at=self.L)
        agent = _MicroAgent(vid, profile, approach, lane, turn, body,
                            spawn_s=now, unhindered_s=unhindered)
        queue.append(agent)
        self.by_id[vid] = agent
        return True

    def _drop_reservation(self, agent: _MicroAgent) -> None:
        if self.manager.table.holds(agent.id):
            self.manager.table.remove(agent.id)
        agent.reservation = None
        agent.body.stop_at = min(self.L, max(agent.body.pos, 0.0)) \
            if agent.body.pos >= self.L else self.L
        agent.body.target_speed = None

    # -- tick phases --------------------------------------------------------

    def _spawn_phase(self, tick: int, now: float) -> None:
        specs = []
        for s in self.cfg.scripted:
            if int(s.get("tick", 0)) == tick:
                specs.append(self._spawn_spec(s["approach"], s["turn"], s.get("lane")))
        if self.cfg.lambda_per_min and now < self.cfg.spawn_window_s:
            pairs = [(a, t) for a in sorted(self.geometry.approaches) for t in TURNS]
            for approach, turn in spawn_poisson(
                    self.cfg.lambda_per_min, pairs, self.spawn_rng, self.dt,
                    self.cfg.per_pair_lambda):
                specs.append(self._spawn_spec(approach, turn))
        self.queued.extend(specs)
        still = []
        for spec in self.queued:
            if not self._try_insert(spec, now):
                still.append(spec)
        self.queued = still

    def _request_phase(self, tick: int, now: float) -> None:
        for (approach, lane) in sorted(self.lanes):
            for agent in self.lanes[(approach, lane)]:
                body = agent.body
                if agent.reservation is not None:
                    res = agent.reservation
                    remaining = self.L - body.pos
                    tt = res.arrival_time - now
                    if tt <= 1e-9 or remaining / tt > self.cfg.approach_vmax + 0.5:
                        self._drop_reservation(agent)
                    else:
                        body.stop_at = None
                        body.target_speed = remaining / tt
                        continue
                if tick - agent.last_request < self.cfg.request_period:
                    continue
                agent.last_request = tick
                remaining = self.L - body.pos
                k, v_arr = self._free_run(body.speed, body.v_p, remaining)
                v_arr = min(max(v_arr, self.cfg.restart_speed), self.cfg.approach_vmax)
                t_a = now + k * self.dt
                if v_arr * k * self.dt > self.manager.max_request_distance(approach, lane):
                    continue
                req = ReservationRequest(agent.id, t_a, v_arr, approach, lane,
                                         agent.turn, bid=bid_value(agent.profile))
                if self.cfg.mode == "ca":
                    self.manager.submit(req, now)
                else:
                    reply = self.manager.process(req, now)
                    if isinstance(reply, Confirmation):
                        agent.reservation = reply.reservation
                        body.stop_at = None

    def _auction_phase(self, tick: int, now: float) -> None:
        if self.cfg.mode != "ca" or (tick + 1) % self.cfg.round_period != 0:
            return
        n_bids = len(self.manager.pending)
        confirmations, _ = self.manager.run_round(now)
        if n_bids:
            self.auction_log.append(
                (now, "X", n_bids, len(confirmations),
                 round(sum(c.price for c in confirmations), 6)))
        for c in confirmations:
            agent = self.by_id[c.reservation.vehicle_id]
            if agent.state != "approach":
                continue
            agent.reservation = c.reservation
            agent.body.stop_at = None
            agent.spent += c.price
            agent.profile.spent += c.price

    def _move_phase(self, now_after: float) -> None:
        for key in sorted(self.lanes):
            agents = self.lanes[key]
            if not agents:
                continue
            micro_step([a.body for a in agents], self.dt, self.geometry.tile_size)
            entered = []
            for agent in agents:
                if agent.body.pos < self.L - 1e-9:
                    break
                res = agent.reservation
                if res is not None and abs(now_after - res.arrival_time) <= self.dt + 1e-9:
                    agent.state = "crossing"
                    agent.crossing = CellCrossing(res, started_at=now_after)
                    entered.append(agent)
                elif res is not None:
                    self._drop_reservation(agent)
                    agent.body.pos = self.L
                    agent.body.speed = 0.0
                else:
                    agent.body.pos = self.L
                    agent.body.speed = 0.0
            for agent in entered:
                agents.remove(agent)
                self.crossing.append(agent)

    def _crossing_phase(self, now_after: float) -> None:
        finished = [a for a in self.crossing if a.crossing.done(now_after)]
        for agent in finished:
            self.manager.consume(agent.id)
            agent.state = "done"
            agent.end_s = agent.crossing.started_at + agent.crossing.reservation.duration_s
            self.crossing.remove(agent)
            self.done.append(agent)

    # -- main loop ----------------------------------------------------------

    def run(self) -> RunResults:
        cfg = self.cfg
        results = RunResults(config=cfg.to_dict())
        self.auction_log = results.auctions
        horizon = cfg.spawn_window_s + cfg.horizon_extra_s
        sample_every = max(1, int(round(cfg.sample_period_s / self.dt)))
        ma, n_done = 0.0, 0
        tick = 0
        while True:
            now = tick * self.dt
            self._spawn_phase(tick, now)
            active = sum(len(v) for v in self.lanes.values()) + len(self.crossing)
            if now >= cfg.spawn_window_s and active == 0 and not self.queued:
                break
            if now >= horizon:
                results.partial = True
                break
            self._request_phase(tick, now)
            self._auction_phase(tick, now)
            self._move_phase(now + self.dt)
            self._crossing_phase(now + self.dt)
            if tick % sample_every == 0:
                for (a, l) in sorted(self.lanes):
                    d = min(self.manager.dfilter.get(a, l), self.L)
                    results.d_series.append((now, a, l, d))
            tick += 1
        for agent in self.done:
            travel = agent.end_s - agent.spawn_s
            ma = moving_average_update(ma, travel, n_done)
            n_done += 1
            results.ma_trace.append((n_done, ma))
        results.spawned = self._next_id
        results.completed = len(self.done)

        def row(agent: _MicroAgent, status: str) -> VehicleRow:
            travel = (agent.end_s - agent.spawn_s) if agent.end_s is not None else None
            return VehicleRow(
                agent.id, agent.approach, _exit_label(agent.approach, agent.turn),
                agent.spawn_s, agent.end_s, status,
                f"{agent.approach}:{agent.lane}:{agent.turn}",
                agent.profile.valuation, agent.spent, travel, agent.unhindered_s,
                agent.unhindered_s,
                delay(travel, agent.unhindered_s) if travel is not None else None,
                normalized_delay(travel, agent.unhindered_s) if travel is not None else None)

        rows = [row(a, "completed") for a in self.done]
        for lane in sorted(self.lanes):
            rows.extend(row(a, "in-network") for a in self.lanes[lane])
        rows.extend(row(a, "in-network") for a in self.crossing)
        for spec in self.queued:
            vid, profile, approach, lane, turn = spec
            rows.append(VehicleRow(vid, approach, _exit_label(approach, turn),
                                   cfg.spawn_window_s, None, "queued",
                                   f"{approach}:{lane}:{turn}", profile.valuation,
                                   0.0, None, 0.0, 0.0, None, None))
        rows.sort(key=lambda r: r.id)
        results.vehicles = rows
        revenue = getattr(self.manager, "revenue", 0.0)
        results.intersections.append(
            ("X", self.manager.confirmed_count, self.manager.rejected_count,
             round(revenue, 6)))
        results.total_revenue = revenue
        results.total_spent = sum(r.spent for r in rows)
        if cfg.debug_messages:
            results.messages = list(self.manager.messages)
        if results.partial:
            results.vehicles = rows
        return results


# ---------------------------------------------------------------------------
# Mesoscopic network model


@dataclass
class _MesoAgent:
    id: str
    profile: DriverProfile
    destination: str
    route: list[Link]          # remaining links, current first
    link: Link
    x: float
    speed: float
    spawn_s: float
    shortest_unhindered_s: float
    taken: list = field(default_factory=list)
    state: str = "driving"
    reservation: Reservation | None = None
    crossing: CellCrossing | None = None
    cross_node: str | None = None
    current_bid: float = 0.0
    last_request: int = -10**9
    end_s: float | None = None
    spent: float = 0.0


class MesoSimulation:
    """Network of priced intersections with density-based link dynamics."""

    VEH_LEN = 4.0

    def __init__(self, config: ScenarioConfig):
        if config.mode == "ca":
            raise ValueError("meso model supports fcfs, cta and ca-cta modes")
        self.cfg = config
        self.dt = config.dt
        self.graph = load_network(config.network)
        self.diagram = FundamentalDiagram()
        self.geometry = IntersectionGeometry(
            tile_size_m=5.0, lane_width_m=5.0, lanes=1,
            vehicle_length_m=self.VEH_LEN, vehicle_width_m=2.0)
        self.spawn_rng = substream(config.seed, "spawn")
        self.profile_rng = substream(config.seed, "profile")
        self.choice_rng = substream(config.seed, "choice")
        nodes = sorted(self.graph.intersections) or sorted(self.graph.junction_nodes())
        self.junctions = nodes
        self.managers: dict[str, FcfsManager | AuctionManager] = {}
        for node in nodes:
            if config.mode == "ca-cta":
                self.managers[node] = AuctionManager(
                    self.geometry, rng=substream(config.seed, f"wdp:{node}"),
                    dt=self.dt, wp=config.wp, np_=config.np_, budget=config.budget,
                    round_period=config.round_period, reserve_prices={})
            else:
                self.managers[node] = FcfsManager(self.geometry, dt=self.dt)
        self.markets: dict[str, IntersectionMarket] = {}
        if config.mode in ("cta", "ca-cta"):
            for node in nodes:
                self.markets[node] = IntersectionMarket.for_node(
                    self.graph, node, self.diagram,
                    min_price=config.min_price, zero_escape=config.zero_escape)
        self.prices: PriceVector = build_price_vector(self.markets.values())
        # approach key of every in-link at every junction
        self.approach_of: dict[tuple[str, str], str] = {}
        for node in nodes:
            for link in self.graph.in_links[node]:
                self.approach_of[(node, link.id)] = heading_key(self._heading(link))
        self._sync_reserves()
        self.on_link: dict[str, list[_MesoAgent]] = {l: [] for l in sorted(self.graph.links)}
        self.exit_queue: dict[str, list[_MesoAgent]] = {l: [] for l in self.on_link}
        self.by_id: dict[str, _MesoAgent] = {}
        self.crossing: list[_MesoAgent] = []
        self.done: list[_MesoAgent] = []
        self.queued: list[tuple] = []
        self.revenue_by_node: dict[str, float] = {n: 0.0 for n in nodes}
        self._route_cache: dict[tuple[str, str], list[Route]] = {}
        self._schedule = self._build_schedule()
        self._next_id = 0
        self._tracked_i = 0

    # -- helpers ------------------------------------------------------------

    def _heading(self, link: Link):
        x0, y0 = self.graph.nodes[link.from_node]
        x1, y1 = self.graph.nodes[link.to_node]
        n = math.hypot(x1 - x0, y1 - y0) or 1.0
        return ((x1 - x0) / n, (y1 - y0) / n)

    def _turn(self, link_in: Link, link_out: Link) -> str:
        from .isect import _turned

        h_in = self._heading(link_in)
        h_out = self._heading(link_out)

        def snap(h):
            return HEADINGS[heading_key(h)]

        h_in, h_out = snap(h_in), snap(h_out)
        if h_out == h_in:
            return STRAIGHT
        if h_out == _turned(h_in, LEFT):
            return LEFT
        if h_out == _turned(h_in, RIGHT):
            return RIGHT
        raise ValueError(f"u-turn from {link_in.id} to {link_out.id}")

    def _density(self, link: Link, extra: int = 0) -> float:
        n = len(self.on_link[link.id]) + extra
        return n / ((link.length_m / 1000.0) * link.lanes)

    def _ref_speed(self, link: Link, v_p: float, extra: int = 0) -> float:
        return min(v_p, speed_density(self._density(link, extra), self.diagram),
                   link.vmax_mps)

    def _jam_cap(self, link: Link) -> int:
        return int(self.diagram.jam_density_veh_km * (link.length_m / 1000.0) * link.lanes)

    def _routes(self, origin: str, dest: str) -> list[Route]:
        key = (origin, dest)
        if key not in self._route_cache:
            self._route_cache[key] = k_shortest_routes(
                self.graph, origin, dest, self.cfg.k_routes)
        return self._route_cache[key]

    def _crossing_time(self, link_in: Link, link_out: Link, v: float) -> float:
        node = link_in.to_node
        approach = self.approach_of[(node, link_in.id)]
        turn = self._turn(link_in, link_out)
        return self.geometry.traversal_time(approach, 0, turn, v)

    def _unhindered_time(self, links: list[Link], v_p: float) -> float:
        """Free-flow traversal of a link sequence by a lone vehicle."""
        total = 0.0
        for i, link in enumerate(links):
            v = min(v_p, speed_density(1.0 / ((link.length_m / 1000.0) * link.lanes),
                                       self.diagram), link.vmax_mps)
            total += link.length_m / v
            if i + 1 < len(links) and link.to_node in self.managers:
                total += self._crossing_time(link, links[i + 1], v)
        return total

    def _sync_reserves(self) -> None:
        if self.cfg.mode != "ca-cta":
            return
        for node, market in self.markets.items():
            mgr = self.managers[node]
            mgr.reserve_prices = {
                self.approach_of[(node, lid)]: p
                for lid, p in market.prices().items()}

    def _choose_route(self, origin: str, dest: str, profile: DriverProfile):
        routes = self._routes(origin, dest)
        mode = self.cfg.mode
        if mode == "fcfs":
            return routes[0]
        if mode == "cta":
            return choose_route_cta(
                ChoiceSet.build(routes, self.graph, self.prices), profile)
        reserves = {lid: self.prices.get(lid, 0.0) for lid in self.graph.priced_links}
        return choose_route_ca_cta(routes, self.graph, reserves, profile)

    def _build_schedule(self) -> dict[int, list[tuple[str, str]]]:
        """Tick -> OD pairs for entries with explicit per-pair counts."""
        schedule: dict[int, list[tuple[str, str]]] = {}
        window = self.cfg.spawn_window_s
        for od in self.graph.od:
            if od.count is None:
                continue
            for _ in range(int(od.count)):
                t = int(self.spawn_rng.random() * window / self.dt)
                schedule.setdefault(t, []).append((od.origin, od.destination))
        return schedule

    def _spawn_spec(self, origin: str, dest: str):
        endow = None
        if self.cfg.tracked_endowments:
            endow = self.cfg.tracked_endowments[
                self._tracked_i % len(self.cfg.tracked_endowments)]
            self._tracked_i += 1
        vid = f"v{self._next_id:05d}"
        self._next_id += 1
        profile = sample_driver(self.profile_rng, (origin, dest), vid, endowment=endow)
        return (vid, profile, origin, dest)

    def _try_insert(self, spec, now: float) -> bool:
        vid, profile, origin, dest = spec
        try:
            route = self._choose_route(origin, dest, profile)
        except NoRouteError:
            return False
        first = route.links[0]
        holders = self.on_link[first.id]
        if len(holders) >= self._jam_cap(first) or any(
                a.x < JAM_SPACING_M + 1.0 for a in holders):
            return False
        m_t = self._unhindered_time(list(self._routes(origin, dest)[0].links),
                                    profile.v_p)
        agent = _MesoAgent(vid, profile, dest, list(route.links), first, 0.0,
                           self._ref_speed(first, profile.v_p, extra=1),
                           spawn_s=now, shortest_unhindered_s=m_t)
        agent.current_bid = bid_value(profile)
        agent.taken.append(first.id)
        holders.append(agent)
        self.by_id[vid] = agent
        return True

    def _drop_reservation(self, agent: _MesoAgent) -> None:
        if agent.cross_node is not None:
            mgr = self.managers[agent.cross_node]
            if mgr.table.holds(agent.id):
                mgr.table.remove(agent.id)
        agent.reservation = None
        agent.cross_node = None

    # -- tick phases --------------------------------------------------------

    def _price_phase(self, tick: int, now: float, results: RunResults) -> None:
        if not self.markets:
            return
        every = max(1, int(round(self.cfg.price_period_s / self.dt)))
        if tick == 0 or tick % every != 0:
            return
        for node in self.junctions:
            market = self.markets[node]
            demand = {l.id: len(self.on_link[l.id])
                      for l in self.graph.in_links[node]}
            market.update(demand)
            for lid, price in sorted(market.prices().items()):
                results.prices.append((now, node, lid, round(price, 6)))
        self.prices = build_price_vector(self.markets.values())
        self._sync_reserves()

    def _spawn_phase(self, tick: int, now: float) -> None:
        specs = [self._spawn_spec(o, d) for (o, d) in self._schedule.pop(tick, [])]
        if self.cfg.lambda_per_min and now < self.cfg.spawn_window_s:
            pairs = [(od.origin, od.destination) for od in self.graph.od
                     if od.count is None]
            if pairs:
                for o, d in spawn_poisson(self.cfg.lambda_per_min, pairs,
                                          self.spawn_rng, self.dt,
                                          self.cfg.per_pair_lambda):
                    specs.append(self._spawn_spec(o, d))
        self.queued.extend(specs)
        still = []
        for spec in self.queued:
            if not self._try_insert(spec, now):
                still.append(spec)
        self.queued = still

    def _request_phase(self, tick: int, now: float) -> None:
        for link_id in sorted(self.on_link):
            agents = self.on_link[link_id]
            if not agents:
                continue
            link = self.graph.links[link_id]
            node = link.to_node
            if node not in self.managers:
                continue
            mgr = self.managers[node]
            approach = self.approach_of[(node, link_id)]
            for agent in sorted(agents, key=lambda a: -a.x):
                if len(agent.route) < 2:
                    continue  # link ends at the destination side of the junction
                remaining = link.length_m - agent.x
                if agent.reservation is not None:
                    tt = agent.reservation.arrival_time - now
                    if tt <= 1e-9 or remaining / tt > link.vmax_mps + 2.0:
                        self._drop_reservation(agent)
                    else:
                        continue
                if remaining > self.cfg.request_zone_m:
                    continue
                if tick - agent.last_request < self.cfg.request_period:
                    continue
                agent.last_request = tick
                v_est = max(agent.speed, 1.0)
                k = max(1, int(math.ceil(remaining / (v_est * self.dt))))
                v_arr = min(max(agent.speed, self.cfg.restart_speed), link.vmax_mps)
                if v_arr * k * self.dt > mgr.max_request_distance(approach, 0):
                    continue
                turn = self._turn(link, agent.route[1])
                req = ReservationRequest(agent.id, now + k * self.dt, v_arr,
                                         approach, 0, turn, bid=agent.current_bid)
                if self.cfg.mode == "ca-cta":
                    mgr.submit(req, now)
                else:
                    reply = mgr.process(req, now)
                    if isinstance(reply, Confirmation):
                        agent.reservation = reply.reservation
                        agent.cross_node = node
                        if self.cfg.mode == "cta":
                            price = self.prices.get(link_id, 0.0)
                            agent.spent += price
                            agent.profile.spent += price
                            self.revenue_by_node[node] += price

    def _auction_phase(self, tick: int, now: float, results: RunResults) -> None:
        if self.cfg.mode != "ca-cta" or (tick + 1) % self.cfg.round_period != 0:
            return
        for node in self.junctions:
            mgr = self.managers[node]
            n_bids = len(mgr.pending)
            if n_bids == 0:
                continue
            confirmations, rejections = mgr.run_round(now)
            results.auctions.append(
                (now, node, n_bids, len(confirmations),
                 round(sum(c.price for c in confirmations), 6)))
            for c in confirmations:
                agent = self.by_id[c.reservation.vehicle_id]
                agent.reservation = c.reservation
                agent.cross_node = node
                agent.spent += c.price
                agent.profile.spent += c.price
                self.revenue_by_node[node] += c.price
            for r in rejections:
                if r.reason == "below_reserve":
                    # the vehicle is committed to this approach; it raises its
                    # bid to the reserve rather than blocking the lane forever
                    agent = self.by_id.get(r.vehicle_id)
                    if agent is not None:
                        reserve = mgr.reserve_prices.get(
                            self.approach_of[(node, agent.link.id)], 0.0)
                        agent.current_bid = max(agent.current_bid, reserve)

    def _enter_link(self, agent: _MesoAgent, link: Link, x: float, now: float) -> None:
        agent.link = link
        agent.x = x
        agent.taken.append(link.id)
        self.on_link[link.id].append(agent)
        if self.cfg.mode in ("cta", "ca-cta") and link.to_node != agent.destination:
            try:
                tail = self._choose_route(link.to_node, agent.destination, agent.profile)
                agent.route = [link] + list(tail.links)
            except NoRouteError:
                pass  # cut off: keep the previously planned route

    def _move_phase(self, tick: int, now_after: float) -> None:
        for link_id in sorted(self.on_link):
            agents = self.on_link[link_id]
            if not agents:
                continue
            link = self.graph.links[link_id]
            is_junction = link.to_node in self.managers
            dens_speed = min(speed_density(self._density(link), self.diagram),
                             link.vmax_mps)
            agents.sort(key=lambda a: (-a.x, a.id))
            barrier = math.inf   # rear of the vehicle ahead minus jam spacing
            prev_speed = 0.0
            exiting = []
            for agent in agents:
                nxt = agent.route[1] if len(agent.route) > 1 else None
                y_me = min(agent.profile.v_p, dens_speed)
                y_next = self._ref_speed(nxt, agent.profile.v_p, extra=1) \
                    if nxt is not None else y_me
                w = min(max(agent.x / link.length_m, 0.0), 1.0)
                target = (1.0 - w) * y_me + w * y_next
                res = agent.reservation
                if res is not None:
                    tt = res.arrival_time - (now_after - self.dt)
                    if tt > 1e-9:
                        target = min(max((link.length_m - agent.x) / tt, 0.0),
                                     link.vmax_mps)
                speed, x = meso_advance(agent.speed, target, agent.x, self.dt)
                if x > barrier:
                    x = max(barrier, agent.x)
                    speed = min(speed, prev_speed)
                if x >= link.length_m - 1e-9:
                    if link.to_node == agent.destination and len(agent.route) == 1:
                        exiting.append((agent, "done"))
                        continue
                    if is_junction:
                        if res is not None and \
                                abs(now_after - res.arrival_time) <= self.dt + 1e-9:
                            exiting.append((agent, "cross"))
                            continue
                        if res is not None:
                            self._drop_reservation(agent)
                        x, speed = link.length_m, 0.0
                    elif len(agent.route) > 1:
                        nxt_link = agent.route[1]
                        holders = self.on_link[nxt_link.id]
                        if len(holders) < self._jam_cap(nxt_link) and not any(
                                a.x < JAM_SPACING_M for a in holders):
                            exiting.append((agent, "transfer"))
                            continue
                        x, speed = link.length_m, 0.0
                    else:
                        x, speed = link.length_m, 0.0
                agent.x, agent.speed = x, speed
                barrier = agent.x - JAM_SPACING_M
                prev_speed = agent.speed
            for agent, action in exiting:
                agents.remove(agent)
                if action == "done":
                    agent.state = "done"
                    agent.end_s = now_after
                    self.done.append(agent)
                elif action == "cross":
                    agent.state = "crossing"
                    agent.crossing = CellCrossing(agent.reservation, started_at=now_after)
                    agent.route = agent.route[1:]
                    self.crossing.append(agent)
                else:
                    nxt_link = agent.route[1]
                    agent.route = agent.route[1:]
                    agent.speed = min(agent.speed,
                                      self._ref_speed(nxt_link, agent.profile.v_p, extra=1))
                    self._enter_link(agent, nxt_link, 0.0, now_after)

    def _crossing_phase(self, now_after: float) -> None:
        finished = [a for a in self.crossing if a.crossing.done(now_after)]
        for agent in finished:
            node = agent.cross_node
            self.managers[node].consume(agent.id)
            agent.reservation = None
            agent.cross_node = None
            self.crossing.remove(agent)
            nxt = agent.route[0]
            self.exit_queue[nxt.id].append(agent)
        for link_id in sorted(self.exit_queue):
            waiting = self.exit_queue[link_id]
            if not waiting:
                continue
            link = self.graph.links[link_id]
            placed = []
            for agent in waiting:
                holders = self.on_link[link_id]
                if len(holders) >= self._jam_cap(link) or any(
                        a.x < JAM_SPACING_M for a in holders):
                    break
                agent.speed = min(agent.crossing.reservation.arrival_speed,
                                  self._ref_speed(link, agent.profile.v_p, extra=1))
                agent.crossing = None
                agent.state = "driving"
                self._enter_link(agent, link, 0.0, now_after)
                placed.append(agent)
            self.exit_queue[link_id] = [a for a in waiting if a not in placed]

    # -- main loop ----------------------------------------------------------

    def run(self) -> RunResults:
        cfg = self.cfg
        results = RunResults(config=cfg.to_dict())
        horizon = cfg.spawn_window_s + cfg.horizon_extra_s
        sample_every = max(1, int(round(cfg.sample_period_s / self.dt)))
        tick = 0
        while True:
            now = tick * self.dt
            self._price_phase(tick, now, results)
            self._spawn_phase(tick, now)
            active = sum(len(v) for v in self.on_link.values()) + len(self.crossing) \
                + sum(len(v) for v in self.exit_queue.values())
            if now >= cfg.spawn_window_s and active == 0 and not self.queued \
                    and not self._schedule:
                break
            if now >= horizon:
                results.partial = True
                break
            self._request_phase(tick, now)
            self._auction_phase(tick, now, results)
            self._move_phase(tick, now + self.dt)
            self._crossing_phase(now + self.dt)
            if tick % sample_every == 0:
                for link_id in sorted(self.on_link):
                    link = self.graph.links[link_id]
                    results.density.append(
                        (now, link_id, round(self._density(link), 6)))
            tick += 1
        ma, n_done = 0.0, 0
        self.done.sort(key=lambda a: (a.end_s, a.id))
        for agent in self.done:
            ma = moving_average_update(ma, agent.end_s - agent.spawn_s, n_done)
            n_done += 1
            results.ma_trace.append((n_done, ma))
        results.spawned = self._next_id
        results.completed = len(self.done)

        def row(agent: _MesoAgent, status: str) -> VehicleRow:
            travel = (agent.end_s - agent.spawn_s) if agent.end_s is not None else None
            taken_links = [self.graph.links[l] for l in agent.taken]
            unhindered = self._unhindered_time(taken_links, agent.profile.v_p)
            return VehicleRow(
                agent.id, taken_links[0].from_node, agent.destination,
                agent.spawn_s, agent.end_s, status, ";".join(agent.taken),
                agent.profile.valuation, agent.spent, travel, unhindered,
                agent.shortest_unhindered_s,
                delay(travel, unhindered) if travel is not None else None,
                normalized_delay(travel, agent.shortest_unhindered_s)
                if travel is not None else None)

        rows = [row(a, "completed") for a in self.done]
        for link_id in sorted(self.on_link):
            rows.extend(row(a, "in-network") for a in self.on_link[link_id])
            rows.extend(row(a, "in-network") for a in self.exit_queue[link_id])
        rows.extend(row(a, "in-network") for a in self.crossing)
        for spec in self.queued:
            vid, profile, origin, dest = spec
            rows.append(VehicleRow(vid, origin, dest, cfg.spawn_window_s, None,
                                   "queued", "", profile.valuation, 0.0, None,
                                   0.0, 0.0, None, None))
        rows.sort(key=lambda r: r.id)
        results.vehicles = rows
        for node in self.junctions:
            mgr = self.managers[node]
            results.intersections.append(
                (node, mgr.confirmed_count, mgr.rejected_count,
                 round(self.revenue_by_node[node], 6)))
        results.total_revenue = sum(self.revenue_by_node.values())
        results.total_spent = sum(r.spent for r in rows)
        return results


def run(config: ScenarioConfig) -> RunResults:
    """Execute a scenario and return its full results."""
    if config.model == "micro":
        return MicroSimulation(config).run()
    return MesoSimulation(config).run()
