"""Competitive pricing of intersection reservations.

Each intersection manager independently adjusts the price (CTA) or reserve
price (CA-CTA) of each of its incoming links: raised under excess demand,
lowered under excess supply, floored at a minimum price.  Supply derives from
the fundamental diagram of traffic flow: an incoming link is considered
over-demanded once it holds more than 50% of its optimal-density vehicle
count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .roadnet import Link, NetworkGraph


@dataclass(frozen=True)
class FundamentalDiagram:
    """Greenshields flow-density relation: v(mu) = v_free * (1 - mu/mu_jam)."""

    jam_density_veh_km: float = 120.0
    free_speed_mps: float = 13.89

    def __post_init__(self):
        if self.jam_density_veh_km <= 0 or self.free_speed_mps <= 0:
            raise ValueError("fundamental diagram parameters must be positive")

    @property
    def optimal_density_veh_km(self) -> float:
        # flow = mu * v(mu) is maximised at half the jam density
        return self.jam_density_veh_km / 2.0


def speed_density(mu_veh_km: float, diagram: FundamentalDiagram) -> float:
    """Link mean speed (m/s) at density mu (veh/km/lane)."""
    if mu_veh_km < 0:
        raise ValueError("density must be >= 0")
    return diagram.free_speed_mps * max(0.0, 1.0 - mu_veh_km / diagram.jam_density_veh_km)


def supply(link: Link, diagram: FundamentalDiagram) -> int:
    """Vehicles served before the manager considers the link over-demanded:
    half the optimal-density count, rounded half-up."""
    s = supply_fractional(link, diagram)
    return int(math.floor(s + 0.5))


def supply_fractional(link: Link, diagram: FundamentalDiagram) -> float:
    return 0.5 * diagram.optimal_density_veh_km * (link.length_m / 1000.0) * link.lanes


def excess_demand(demand: int, supply_: float) -> float:
    """z = d - s; positive under excess demand."""
    if demand < 0:
        raise ValueError("demand must be >= 0")
    return demand - supply_


@dataclass
class LinkMarketState:
    """Price state of one incoming link of one intersection."""

    link_id: str
    price: float
    supply: float  # fractional, used in the update division
    min_price: float = 0.0
    zero_escape: float = 1.0  # epsilon; 0 disables the amendment
    demand: int = 0

    def __post_init__(self):
        if self.supply <= 0:
            raise ValueError(f"link {self.link_id!r}: supply must be > 0")
        if self.price < self.min_price or self.min_price < 0:
            raise ValueError(f"link {self.link_id!r}: require price >= min_price >= 0")


def update_price(state: LinkMarketState) -> float:
    """Multiplicative tatonnement step, p' = max(delta, p + p_eff * z / s).

    p_eff = max(p, epsilon): with the literal rule, p = 0 is a fixed point
    regardless of excess demand; the epsilon term restores the intended
    dynamics and reduces to the plain rule whenever p >= epsilon.
    """
    z = excess_demand(state.demand, state.supply)
    p_eff = max(state.price, state.zero_escape)
    new_price = max(state.min_price, state.price + p_eff * z / state.supply)
    state.price = new_price
    return new_price


class PriceVector:
    """Read-only snapshot of every (intersection, incoming link) price."""

    def __init__(self, prices: dict[str, float]):
        self._prices = dict(prices)

    def __getitem__(self, link_id: str) -> float:
        return self._prices[link_id]

    def get(self, link_id: str, default: float = 0.0) -> float:
        return self._prices.get(link_id, default)

    def items(self):
        return self._prices.items()

    def __len__(self):
        return len(self._prices)


@dataclass
class IntersectionMarket:
    """Price states for all incoming links of one intersection.

    Updated at the pricing cadence by that intersection's manager only; other
    components read published PriceVector snapshots.
    """

    node: str
    states: dict[str, LinkMarketState] = field(default_factory=dict)

    @classmethod
    def for_node(cls, graph: NetworkGraph, node: str, diagram: FundamentalDiagram,
                 min_price: float = 0.0, zero_escape: float = 1.0) -> "IntersectionMarket":
        states = {}
        for link in graph.in_links[node]:
            states[link.id] = LinkMarketState(
                link_id=link.id, price=min_price,
                supply=supply_fractional(link, diagram),
                min_price=min_price, zero_escape=zero_escape)
        return cls(node, states)

    def update(self, demand_by_link: dict[str, int]) -> None:
        for link_id, state in self.states.items():
            state.demand = demand_by_link.get(link_id, 0)
            update_price(state)

    def prices(self) -> dict[str, float]:
        return {lid: s.price for lid, s in self.states.items()}


def build_price_vector(markets) -> PriceVector:
    prices: dict[str, float] = {}
    for m in markets:
        prices.update(m.prices())
    return PriceVector(prices)
