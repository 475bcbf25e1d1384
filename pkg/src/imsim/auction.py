"""Combinatorial-auction allocation of intersection reservations.

Bids claim bundles of space-time tiles.  The winner determination problem
(WDP) is solved by an anytime stochastic local search parameterised by a walk
probability ``wp`` and a novelty probability ``np``; an exact branch-and-bound
solver serves as oracle.  Payments are first-price: a winner pays exactly its
submitted bid.
"""

from __future__ import annotations

import math
import random
import time
from dataclasses import dataclass, field

from .isect import (Confirmation, DistanceFilter, IntersectionGeometry, Rejection,
                    Reservation, ReservationRequest, ReservationTable,
                    reservation_distance, trajectory_tiles, traversal_duration)


class BidViolation(ValueError):
    """Resubmitted bid value below the withdrawn bid's value."""


class OracleCapExceeded(ValueError):
    """Exact WDP requested on a larger instance than the configured cap."""


@dataclass
class Bid:
    request: ReservationRequest
    value: float
    items: frozenset[int]
    age: int = 0

    def __post_init__(self):
        if self.value < 0:
            raise ValueError("bid value must be >= 0")
        if not self.items:
            raise ValueError("bid bundle must be non-empty")

    @property
    def bid_id(self) -> str:
        return self.request.vehicle_id


@dataclass(frozen=True)
class WinnerSet:
    bids: tuple[Bid, ...]
    value: float

    @staticmethod
    def empty() -> "WinnerSet":
        return WinnerSet((), 0.0)


def validate_bid(new_value: float, prior_value: float | None) -> bool:
    """Withdraw-and-resubmit rule: the new value may not undercut the prior one."""
    if prior_value is not None and new_value < prior_value:
        raise BidViolation(
            f"resubmitted value {new_value} below prior bid {prior_value}")
    return True


class BidSet:
    """Live bids of one round with the shared-item neighbourhood index."""

    def __init__(self, bids):
        by_vehicle: dict[str, Bid] = {}
        for b in bids:
            by_vehicle[b.bid_id] = b  # later submission supersedes
        self.bids: list[Bid] = list(by_vehicle.values())
        n = len(self.bids)
        # item -> bid indices, then pairwise conflict bitmasks
        index: dict[int, list[int]] = {}
        for i, b in enumerate(self.bids):
            for it in b.items:
                index.setdefault(it, []).append(i)
        self.neighbors = [0] * n
        for holders in index.values():
            if len(holders) < 2:
                continue
            for i in holders:
                for j in holders:
                    if i != j:
                        self.neighbors[i] |= 1 << j
        self.item_index = index

    def __len__(self) -> int:
        return len(self.bids)


def _top_two(order, values, ids, ages, in_a_mask, n):
    """Highest and second-highest of B\\A by value; value ties broken by older
    age, then lexicographic id.  Returns indices (or None)."""
    picked = []
    pos = 0
    while len(picked) < 2 and pos < n:
        i = order[pos]
        pos += 1
        if (in_a_mask >> i) & 1:
            continue
        # gather the whole equal-value group that is still available
        group = [i]
        while pos < n:
            j = order[pos]
            if values[j] != values[i]:
                break
            pos += 1
            if not (in_a_mask >> j) & 1:
                group.append(j)
        if len(group) > 1:
            group.sort(key=lambda g: (-ages[g], ids[g]))
        picked.extend(group[: 2 - len(picked)])
    h = picked[0] if picked else None
    s = picked[1] if len(picked) > 1 else None
    return h, s


def wdp_stochastic(bidset: BidSet, budget: int, wp: float, np_: float,
                   rng: random.Random) -> WinnerSet:
    """Anytime stochastic local search for the winner determination problem.

    budget counts outer passes; each pass runs |B| insertion steps over a
    candidate set A, evicting the neighbourhood of every inserted bid and
    tracking the best-valued candidate seen.  Deterministic given rng.
    """
    if not 0.0 <= wp <= 1.0 or not 0.0 <= np_ <= 1.0:
        raise ValueError("wp and np must lie in [0, 1]")
    if budget <= 0:
        raise ValueError("budget must be > 0 passes")
    n = len(bidset)
    if n == 0:
        return WinnerSet.empty()

    bids = bidset.bids
    values = [b.value for b in bids]
    ids = [b.bid_id for b in bids]
    neighbors = bidset.neighbors
    order = sorted(range(n), key=lambda i: (-values[i], ids[i]))
    rnd = rng.random

    best_mask = 0
    best_value = -1.0
    last_selected = [0] * n  # age_i = clock - last_selected[i]
    clock = 0

    for _ in range(budget):
        a_mask = 0
        a_value = 0.0
        for _ in range(n):
            clock += 1
            if rnd() < wp:
                # uniform random bid from B \ A
                avail = [i for i in range(n) if not (a_mask >> i) & 1]
                if not avail:
                    continue
                pick = avail[int(rnd() * len(avail))]
            else:
                ages = [clock - ls for ls in last_selected]
                h, s = _top_two(order, values, ids, ages, a_mask, n)
                if h is None:
                    continue
                if s is None or ages[h] >= ages[s]:
                    pick = h
                else:
                    pick = s if rnd() < np_ else h
            evicted = a_mask & neighbors[pick]
            if evicted:
                m = evicted
                while m:
                    low = m & -m
                    a_value -= values[low.bit_length() - 1]
                    m ^= low
            a_mask = (a_mask | (1 << pick)) & ~neighbors[pick]
            a_value += values[pick]
            last_selected[pick] = clock
            if a_value > best_value:
                best_value = a_value
                best_mask = a_mask
    chosen = tuple(bids[i] for i in range(n) if (best_mask >> i) & 1)
    return WinnerSet(chosen, sum(b.value for b in chosen))


def wdp_exact(bidset: BidSet, cap: int = 24) -> WinnerSet:
    """Maximum-value conflict-free subset via branch and bound.

    Ties on total value resolve to the lexicographically smallest id tuple.
    Intended as a test oracle; raises OracleCapExceeded above cap.
    """
    n = len(bidset)
    if n > cap:
        raise OracleCapExceeded(f"{n} bids exceeds the oracle cap of {cap}")
    if n == 0:
        return WinnerSet.empty()
    bids = bidset.bids
    order = sorted(range(n), key=lambda i: (-bids[i].value, bids[i].bid_id))
    values = [bids[order[k]].value for k in range(n)]
    # conflict masks re-indexed to the sorted order
    pos = {order[k]: k for k in range(n)}
    neigh = [0] * n
    for k in range(n):
        m = bidset.neighbors[order[k]]
        while m:
            low = m & -m
            neigh[k] |= 1 << pos[low.bit_length() - 1]
            m ^= low

    best = {"value": -1.0, "mask": 0, "ids": ()}

    def ids_of(mask):
        return tuple(sorted(bids[order[k]].bid_id for k in range(n) if (mask >> k) & 1))

    def consider(value, mask):
        if value > best["value"] + 1e-12:
            best.update(value=value, mask=mask, ids=ids_of(mask))
        elif abs(value - best["value"]) <= 1e-12:
            ids = ids_of(mask)
            if ids < best["ids"]:
                best.update(value=value, mask=mask, ids=ids)

    def rec(k, excluded, value, mask):
        # remaining upper bound
        bound = value
        for j in range(k, n):
            if not (excluded >> j) & 1:
                bound += values[j]
        if bound < best["value"] - 1e-12:
            return
        j = k
        while j < n and (excluded >> j) & 1:
            j += 1
        if j == n:
            consider(value, mask)
            return
        # branch: take j, then skip j
        rec(j + 1, excluded | neigh[j] | (1 << j), value + values[j], mask | (1 << j))
        rec(j + 1, excluded | (1 << j), value, mask)

    rec(0, 0, 0.0, 0)
    chosen = tuple(bids[order[k]] for k in range(n) if (best["mask"] >> k) & 1)
    return WinnerSet(chosen, sum(b.value for b in chosen))


def calibrate_budget(seconds: float = 1.0, n_bids: int = 80, seed: int = 0,
                     sample_passes: int = 30) -> int:
    """Map a wall-clock WDP allowance to an outer-pass budget.

    Measures passes/second of the stochastic search on a generated instance of
    n_bids bids and returns the pass count equivalent to `seconds`.
    """
    geometry = IntersectionGeometry()
    rng = random.Random(seed)
    bidset = generate_instance(rng, n_bids, geometry)
    t0 = time.perf_counter()
    wdp_stochastic(bidset, sample_passes, 0.15, 0.5, random.Random(seed))
    elapsed = max(time.perf_counter() - t0, 1e-6)
    return max(1, int(sample_passes / elapsed * seconds))


def generate_instance(rng: random.Random, n_bids: int,
                      geometry: IntersectionGeometry | None = None,
                      dt: float = 1.0) -> BidSet:
    """Random intersection-like WDP instance: bundles come from actual
    constant-speed trajectories, values from the N(100, 25) endowment draw."""
    if geometry is None:
        geometry = IntersectionGeometry()
    bids = []
    for i in range(n_bids):
        approach = geometry.approaches[rng.randrange(len(geometry.approaches))]
        turn = ("left", "straight", "right")[rng.randrange(3)]
        lane = geometry.lanes_for_turn(turn)[rng.randrange(len(geometry.lanes_for_turn(turn)))]
        t_a = float(rng.randrange(0, 12))
        v_a = 4.0 + rng.random() * 10.0
        value = max(1.0, rng.gauss(100.0, 25.0))
        req = ReservationRequest(f"v{i:03d}", t_a, v_a, approach, lane, turn, bid=value)
        bids.append(Bid(req, value, trajectory_tiles(req, geometry, dt)))
    return BidSet(bids)


@dataclass
class AuctionManager:
    """Auction-policy intersection state.

    Rounds alternate one collection window and one WDP window (round_period
    ticks in total).  Bids arriving while a round is being cleared join the
    next round's bid set.  Confirmed reservations are immutable: conflicting
    later bids are rejected regardless of value.
    """

    geometry: IntersectionGeometry
    rng: random.Random
    dt: float = 1.0
    wp: float = 0.15
    np_: float = 0.5
    budget: int = 32
    round_period: int = 2
    reserve_prices: dict[str, float] | None = None
    table: ReservationTable = field(default_factory=ReservationTable)
    dfilter: DistanceFilter = field(default_factory=DistanceFilter)
    pending: list[tuple[ReservationRequest, float]] = field(default_factory=list)
    prior_values: dict[str, float] = field(default_factory=dict)
    rejected_count: int = 0
    confirmed_count: int = 0
    revenue: float = 0.0
    debug: bool = False
    messages: list = field(default_factory=list)

    def submit(self, request: ReservationRequest, now: float) -> None:
        if request.bid is None:
            raise ValueError("auction-policy intersections require a bid value")
        self.pending.append((request, now))
        if self.debug:
            self.messages.append({
                "t": now, "type": "REQUEST", "vehicle": request.vehicle_id,
                "arrival_time": request.arrival_time, "bid": request.bid,
            })

    def withdraw(self, vehicle_id: str) -> None:
        """Vehicle gives up on its pending bid (e.g. re-routing away)."""
        self.pending = [(r, t) for (r, t) in self.pending if r.vehicle_id != vehicle_id]

    def consume(self, vehicle_id: str) -> None:
        self.table.remove(vehicle_id)
        self.prior_values.pop(vehicle_id, None)

    def max_request_distance(self, approach: str, lane: int) -> float:
        return self.dfilter.get(approach, lane)

    def run_round(self, now: float) -> tuple[list[Confirmation], list[Rejection]]:
        incoming, self.pending = self.pending, []
        confirmations, rejections = run_auction_round(
            incoming, self.table, self.geometry, self.dfilter, now,
            dt=self.dt, budget=self.budget, wp=self.wp, np_=self.np_,
            rng=self.rng, prior_values=self.prior_values,
            reserve_prices=self.reserve_prices)
        self.confirmed_count += len(confirmations)
        self.rejected_count += len(rejections)
        for c in confirmations:
            self.revenue += c.price
        if self.debug:
            for c in confirmations:
                self.messages.append({"t": now, "type": "CONFIRM",
                                      "vehicle": c.reservation.vehicle_id,
                                      "price": c.price})
            for r in rejections:
                self.messages.append({"t": now, "type": "REJECT",
                                      "vehicle": r.vehicle_id, "reason": r.reason})
        return confirmations, rejections


def run_auction_round(incoming, table: ReservationTable,
                      geometry: IntersectionGeometry, dfilter: DistanceFilter,
                      now: float, dt: float = 1.0, budget: int = 32,
                      wp: float = 0.15, np_: float = 0.5,
                      rng: random.Random | None = None,
                      prior_values: dict[str, float] | None = None,
                      reserve_prices: dict[str, float] | None = None):
    """Clear one auction round.

    incoming: iterable of (request, submit_time) pairs, in submission order.
    Returns (confirmations, rejections); first-price payments are attached to
    the confirmations.
    """
    rng = rng or random.Random(0)
    prior_values = prior_values if prior_values is not None else {}

    survivors: dict[str, Bid] = {}
    rejections: list[Rejection] = []
    distance: dict[str, float] = {}
    for request, _ in incoming:
        vid = request.vehicle_id
        d = reservation_distance(request, now)
        distance[vid] = d
        # (a) reservation-distance pre-filter, rejected without processing
        if d > dfilter.get(request.approach, request.lane):
            survivors.pop(vid, None)
            rejections.append(Rejection(vid, "distance_filtered"))
            continue
        # (b) withdraw-and-resubmit value rule
        try:
            validate_bid(request.bid, prior_values.get(vid))
        except BidViolation as e:
            survivors.pop(vid, None)
            rejections.append(Rejection(vid, "bid_violation", str(e)))
            continue
        prior_values[vid] = request.bid
        # reserve price gate (CA-CTA): below-reserve bids never enter the bid set
        if reserve_prices is not None:
            reserve = reserve_prices.get(request.approach, 0.0)
            if request.bid < reserve:
                survivors.pop(vid, None)
                rejections.append(Rejection(
                    vid, "below_reserve", f"bid {request.bid} < reserve {reserve}"))
                continue
        # a re-bidding vehicle first loses its previous booking
        if table.holds(vid):
            table.remove(vid)
        items = trajectory_tiles(request, geometry, dt)
        # (c) confirmed reservations are immutable
        if table.conflicts(items, vid):
            dfilter.note_conflict(request.approach, request.lane, d)
            survivors.pop(vid, None)
            rejections.append(Rejection(vid, "conflict"))
            continue
        survivors[vid] = Bid(request, request.bid, items)

    rejected_ids = {r.vehicle_id for r in rejections}
    live = [b for vid, b in survivors.items() if vid not in rejected_ids]
    if not live:
        return [], rejections

    bidset = BidSet(live)
    winners = wdp_stochastic(bidset, budget, wp, np_, rng)
    winner_ids = {b.bid_id for b in winners.bids}

    confirmations = []
    for b in winners.bids:
        req = b.request
        res = Reservation(req.vehicle_id, b.items, req.arrival_time,
                          req.arrival_speed, req.approach, req.lane, req.turn,
                          traversal_duration(req, geometry, dt))
        table.book(res)
        dfilter.reset(req.approach, req.lane)
        confirmations.append(Confirmation(res, price=b.value))
    for b in bidset.bids:
        if b.bid_id not in winner_ids:
            req = b.request
            dfilter.note_conflict(req.approach, req.lane, distance[req.vehicle_id])
            rejections.append(Rejection(req.vehicle_id, "outbid"))
    return confirmations, rejections
