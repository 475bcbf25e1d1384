"""Driver-agent decision making.

Profiles are sampled from the population distributions (preferred speed,
time/cost weights, private valuation); route choice maximises a normalised
multi-attribute utility over a k-shortest choice set, with the CA-CTA variant
filtering out routes whose reserve prices exceed the driver's valuation.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from .roadnet import NetworkGraph, Route, k_shortest_routes, route_price

KMH = 1 / 3.6


@dataclass
class DriverProfile:
    id: str
    origin: str
    destination: str
    v_p: float                # preferred speed, m/s
    w_time: float             # weight of the travel-time attribute
    valuation: float          # private bid value, money cents
    spent: float = 0.0

    @property
    def w_cost(self) -> float:
        return 1.0 - self.w_time


def sample_driver(rng: random.Random, od_pair: tuple[str, str], driver_id: str,
                  endowment: float | None = None) -> DriverProfile:
    """Draw a profile: v_p ~ N(40, 5) km/h truncated to [30, 50], w_T ~ U[0, 1],
    valuation ~ N(100, 25) cents (or a fixed tracked endowment)."""
    while True:
        v_kmh = rng.gauss(40.0, 5.0)
        if 30.0 <= v_kmh <= 50.0:
            break
    w_t = rng.random()
    b = max(0.0, rng.gauss(100.0, 25.0))
    if endowment is not None:
        b = float(endowment)
    return DriverProfile(driver_id, od_pair[0], od_pair[1],
                         v_p=v_kmh * KMH, w_time=w_t, valuation=b)


@dataclass
class ChoiceSet:
    """Routes with their attributes and the normalisation bounds."""

    routes: list[Route]
    times: list[float]
    prices: list[float]
    max_time: float = field(init=False)
    min_time: float = field(init=False)
    max_price: float = field(init=False)
    min_price: float = field(init=False)

    def __post_init__(self):
        if not self.routes:
            raise ValueError("choice set must be non-empty")
        self.max_time = max(self.times)
        self.min_time = min(self.times)
        self.max_price = max(self.prices)
        self.min_price = min(self.prices)

    @classmethod
    def build(cls, routes, graph: NetworkGraph, price_view) -> "ChoiceSet":
        routes = list(routes)
        return cls(routes,
                   [r.free_flow_time for r in routes],
                   [route_price(r, graph, price_view) for r in routes])


def route_utility(index: int, choice_set: ChoiceSet, profile: DriverProfile) -> float:
    """Weighted sum of the normalised time and cost attributes, in [0, 1].

    Degenerate bounds (all routes equal on an attribute) contribute utility 1:
    the attribute cannot discriminate between members.
    """
    cs = choice_set
    if cs.max_time > cs.min_time:
        u_t = (cs.max_time - cs.times[index]) / (cs.max_time - cs.min_time)
    else:
        u_t = 1.0
    if cs.max_price > cs.min_price:
        u_k = (cs.max_price - cs.prices[index]) / (cs.max_price - cs.min_price)
    else:
        u_k = 1.0
    return profile.w_time * u_t + profile.w_cost * u_k


def choose_route_cta(choice_set: ChoiceSet, profile: DriverProfile) -> Route:
    """Deterministic utility maximiser; ties go to the faster route, then to
    lexicographic route id."""
    best = min(
        range(len(choice_set.routes)),
        key=lambda i: (-route_utility(i, choice_set, profile),
                       choice_set.times[i], choice_set.routes[i].id))
    return choice_set.routes[best]


def reevaluate_route(graph: NetworkGraph, current_node: str, destination: str,
                     price_view, profile: DriverProfile, k: int = 10) -> Route:
    """Rebuild the choice set from the current node and re-maximise utility.

    Called on every link entry; raises NoRouteError when the driver is cut off
    (callers keep the current route and flag the vehicle).
    """
    routes = k_shortest_routes(graph, current_node, destination, k)
    return choose_route_cta(ChoiceSet.build(routes, graph, price_view), profile)


def choose_route_ca_cta(routes, graph: NetworkGraph, reserve_view,
                        profile: DriverProfile) -> Route:
    """Budget-filtered shortest route.

    Keeps routes whose every priced link has reserve price <= the driver's
    valuation and returns the fastest of them.  If the filter empties the set,
    falls back to the route whose highest per-link reserve price is smallest
    (drivers never stall at the origin).
    """
    routes = list(routes)
    if not routes:
        raise ValueError("route list must be non-empty")

    def max_reserve(route: Route) -> float:
        prices = [reserve_view[l.id] for l in route.links if l.id in graph.priced_links]
        return max(prices) if prices else 0.0

    affordable = [r for r in routes if max_reserve(r) <= profile.valuation]
    if affordable:
        return min(affordable, key=lambda r: (r.free_flow_time, r.id))
    return min(routes, key=lambda r: (max_reserve(r), r.free_flow_time, r.id))


def bid_value(profile: DriverProfile) -> float:
    """The endowment is allocated entirely as the bid, held constant across
    resubmissions (which only update the arrival estimate)."""
    return profile.valuation
