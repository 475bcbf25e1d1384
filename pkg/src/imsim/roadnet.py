"""Road-network graph, scenario loading, route enumeration and route attributes.

The scenario document is plain JSON:

    {
      "name": "...",
      "dynamics": "micro" | "meso",
      "nodes": [{"id": "n1", "x": 0.0, "y": 0.0}, ...],
      "links": [{"id": "l1", "from": "n1", "to": "n2", "length_m": 500.0,
                 "vmax_mps": 13.89, "lanes": 1, "section_m": 500.0}, ...],
      "intersections": [{"node": "n2", "geometry": {"tile_size_m": 5.0,
                         "lane_width_m": 7.5, "lanes": 1}}, ...],
      "od": [{"origin": "n1", "destination": "n3", "count": 100}, ...]
    }

OD entries carry either a fixed "count" or a Poisson "rate" (expected
vehicles per 60 s).  The document round-trips losslessly through
``json.load`` / ``json.dump``.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from pathlib import Path


class ScenarioError(ValueError):
    """Raised when a scenario document violates the schema."""


class NoRouteError(ValueError):
    """Raised when no path exists between an OD pair."""


@dataclass(frozen=True)
class Link:
    id: str
    from_node: str
    to_node: str
    length_m: float
    vmax_mps: float
    lanes: int = 1
    section_m: float = 500.0

    def __post_init__(self):
        if self.length_m <= 0:
            raise ScenarioError(f"link {self.id!r}: non-positive length {self.length_m}")
        if self.vmax_mps <= 0:
            raise ScenarioError(f"link {self.id!r}: non-positive vmax {self.vmax_mps}")
        if self.lanes < 1:
            raise ScenarioError(f"link {self.id!r}: lane count must be >= 1")
        if self.section_m <= 0:
            raise ScenarioError(f"link {self.id!r}: non-positive section length")

    @property
    def free_flow_time(self) -> float:
        return self.length_m / self.vmax_mps


@dataclass(frozen=True)
class Route:
    """An ordered, loopless sequence of links with cached free-flow time."""

    links: tuple[Link, ...]
    free_flow_time: float = field(compare=False, default=0.0)

    @property
    def id(self) -> tuple[str, ...]:
        return tuple(l.id for l in self.links)

    @property
    def nodes(self) -> tuple[str, ...]:
        return (self.links[0].from_node,) + tuple(l.to_node for l in self.links)

    def __len__(self) -> int:
        return len(self.links)


def make_route(links) -> Route:
    links = tuple(links)
    if not links:
        raise ValueError("route must contain at least one link")
    for a, b in zip(links, links[1:]):
        if a.to_node != b.from_node:
            raise ValueError(f"links {a.id!r} and {b.id!r} do not share a node")
    return Route(links, free_flow_time=sum(l.free_flow_time for l in links))


@dataclass
class ODEntry:
    origin: str
    destination: str
    count: int | None = None
    rate: float | None = None


class NetworkGraph:
    """Immutable after construction; safe for concurrent readers."""

    def __init__(self, nodes, links, intersections, od, name="scenario", dynamics="meso",
                 extra=None):
        self.name = name
        self.dynamics = dynamics
        self.nodes: dict[str, tuple[float, float]] = dict(nodes)
        self.links: dict[str, Link] = {l.id: l for l in links}
        # geometry config per intersection node, consumed by isect
        self.intersections: dict[str, dict] = dict(intersections)
        self.od: list[ODEntry] = list(od)
        self.extra: dict = dict(extra or {})

        self.out_links: dict[str, list[Link]] = {n: [] for n in self.nodes}
        self.in_links: dict[str, list[Link]] = {n: [] for n in self.nodes}
        for l in self.links.values():
            if l.from_node not in self.nodes:
                raise ScenarioError(f"link {l.id!r}: unknown from-node {l.from_node!r}")
            if l.to_node not in self.nodes:
                raise ScenarioError(f"link {l.id!r}: unknown to-node {l.to_node!r}")
            self.out_links[l.from_node].append(l)
            self.in_links[l.to_node].append(l)
        for n in self.out_links:
            self.out_links[n].sort(key=lambda l: l.id)
            self.in_links[n].sort(key=lambda l: l.id)

        for n in self.intersections:
            if n not in self.nodes:
                raise ScenarioError(f"intersection references unknown node {n!r}")

        # Links whose downstream node is a managed intersection carry a price.
        self.priced_links: dict[str, str] = {}
        for n in self.intersections:
            for l in self.in_links[n]:
                self.priced_links[l.id] = n

        for entry in self.od:
            if entry.origin not in self.nodes:
                raise ScenarioError(f"OD entry references unknown origin {entry.origin!r}")
            if entry.destination not in self.nodes:
                raise ScenarioError(f"OD entry references unknown destination {entry.destination!r}")

    def junction_nodes(self) -> set[str]:
        """Nodes connecting three or more distinct roads."""
        out = set()
        for n in self.nodes:
            neighbours = {l.to_node for l in self.out_links[n]}
            neighbours |= {l.from_node for l in self.in_links[n]}
            if len(neighbours) >= 3:
                out.add(n)
        return out


def load_network(doc) -> NetworkGraph:
    """Build a validated graph from a scenario document (dict, JSON string or path)."""
    if isinstance(doc, (str, Path)):
        p = Path(doc)
        if p.exists():
            with open(p) as fh:
                doc = json.load(fh)
        else:
            doc = json.loads(doc)
    if not isinstance(doc, dict):
        raise ScenarioError("scenario document must be a JSON object")
    for key in ("nodes", "links"):
        if key not in doc or not isinstance(doc[key], list):
            raise ScenarioError(f"scenario document missing {key!r} list")

    nodes = {}
    for n in doc["nodes"]:
        try:
            nodes[str(n["id"])] = (float(n["x"]), float(n["y"]))
        except (KeyError, TypeError, ValueError) as e:
            raise ScenarioError(f"malformed node entry {n!r}: {e}") from None

    links = []
    for raw in doc["links"]:
        try:
            links.append(Link(
                id=str(raw["id"]),
                from_node=str(raw["from"]),
                to_node=str(raw["to"]),
                length_m=float(raw["length_m"]),
                vmax_mps=float(raw["vmax_mps"]),
                lanes=int(raw.get("lanes", 1)),
                section_m=float(raw.get("section_m", 500.0)),
            ))
        except (KeyError, TypeError, ValueError) as e:
            raise ScenarioError(f"malformed link entry {raw!r}: {e}") from None
    seen = set()
    for l in links:
        if l.id in seen:
            raise ScenarioError(f"duplicate link id {l.id!r}")
        seen.add(l.id)

    intersections = {}
    for raw in doc.get("intersections", []):
        try:
            intersections[str(raw["node"])] = dict(raw.get("geometry", {}))
        except (KeyError, TypeError) as e:
            raise ScenarioError(f"malformed intersection entry {raw!r}: {e}") from None

    od = []
    for raw in doc.get("od", []):
        try:
            od.append(ODEntry(
                origin=str(raw["origin"]),
                destination=str(raw["destination"]),
                count=int(raw["count"]) if "count" in raw else None,
                rate=float(raw["rate"]) if "rate" in raw else None,
            ))
        except (KeyError, TypeError, ValueError) as e:
            raise ScenarioError(f"malformed OD entry {raw!r}: {e}") from None

    known = {"name", "dynamics", "nodes", "links", "intersections", "od"}
    extra = {k: v for k, v in doc.items() if k not in known}
    return NetworkGraph(nodes, links, intersections, od,
                        name=doc.get("name", "scenario"),
                        dynamics=doc.get("dynamics", "meso"),
                        extra=extra)


def _dijkstra(graph: NetworkGraph, origin: str, destination: str, banned_nodes,
              banned_links) -> Route | None:
    """Cheapest free-flow-time path; ties broken by lexicographic link-id order."""
    # heap entries: (cost, link-id path, current node)
    heap = [(0.0, (), origin)]
    best: dict[str, tuple[float, tuple[str, ...]]] = {}
    while heap:
        cost, path, node = heapq.heappop(heap)
        if node == destination:
            return make_route(graph.links[lid] for lid in path)
        if node in best and best[node] < (cost, path):
            continue
        best[node] = (cost, path)
        for l in graph.out_links[node]:
            if l.id in banned_links or l.to_node in banned_nodes:
                continue
            cand = (cost + l.free_flow_time, path + (l.id,))
            if l.to_node not in best or cand < best[l.to_node]:
                best[l.to_node] = cand
                heapq.heappush(heap, (cand[0], cand[1], l.to_node))
    return None


def k_shortest_routes(graph: NetworkGraph, origin: str, destination: str, k: int) -> list[Route]:
    """Yen's loopless k-shortest paths by free-flow time.

    Returns up to k routes sorted ascending by free-flow time, ties broken by
    lexicographic link-id order. Raises NoRouteError when no path exists.
    """
    if origin == destination:
        raise ValueError("origin and destination must differ")
    if origin not in graph.nodes or destination not in graph.nodes:
        raise ValueError("origin and destination must exist in the graph")
    first = _dijkstra(graph, origin, destination, frozenset(), frozenset())
    if first is None:
        raise NoRouteError(f"no path from {origin!r} to {destination!r}")

    routes = [first]
    # candidates keyed for dedup; heap ordered by (time, link ids)
    candidates: list[tuple[float, tuple[str, ...]]] = []
    cand_seen: set[tuple[str, ...]] = set()

    while len(routes) < k:
        prev = routes[-1]
        prev_nodes = prev.nodes
        for i in range(len(prev.links)):
            spur_node = prev_nodes[i]
            root = prev.links[:i]
            banned_links = set()
            for r in routes:
                if r.links[:i] == root and len(r.links) > i:
                    banned_links.add(r.links[i].id)
            banned_nodes = set(prev_nodes[:i])
            spur = _dijkstra(graph, spur_node, destination, banned_nodes, banned_links)
            if spur is None:
                continue
            total_ids = tuple(l.id for l in root) + spur.id
            if total_ids in cand_seen or any(r.id == total_ids for r in routes):
                continue
            cand_seen.add(total_ids)
            # summed via make_route so float ties match the enumeration oracle
            total_time = make_route(graph.links[lid] for lid in total_ids).free_flow_time
            heapq.heappush(candidates, (total_time, total_ids))
        if not candidates:
            break
        _, ids = heapq.heappop(candidates)
        routes.append(make_route(graph.links[lid] for lid in ids))

    routes.sort(key=lambda r: (r.free_flow_time, r.id))
    return routes[:k]


def free_flow_time(route: Route) -> float:
    """Travel time of the route at free flow (sum of length/vmax per link)."""
    return sum(l.free_flow_time for l in route.links)


def route_price(route: Route, graph: NetworkGraph, price_view) -> float:
    """Total reservation price along the route.

    Only links that feed a managed intersection carry a price; price_view maps
    link id to its current posted or reserve price.
    """
    total = 0.0
    for l in route.links:
        if l.id in graph.priced_links:
            total += price_view[l.id]
    return total
