"""Intersection geometry, space-time tile occupancy and the reservation protocol.

An intersection is a square box of side ``2 * lanes * lane_width`` metres,
rasterised into square tiles.  Vehicles traverse it at constant speed along a
per-(approach, lane, turn) trajectory built from an entry segment, a circular
arc and an exit segment.  Bookings are kept per (tile, time-step); a
(tile, step) pair is encoded as the integer ``step * n_tiles + tile_index``.

Right-hand driving: incoming lanes sit to the right of the road axis, lane 0
is the leftmost (innermost) lane.  Left turns are permitted from lane 0 only,
right turns from the rightmost lane only, straight from any lane.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

LEFT = "left"
STRAIGHT = "straight"
RIGHT = "right"
TURNS = (LEFT, STRAIGHT, RIGHT)

# approach key -> unit heading of travel INTO the intersection
HEADINGS = {"S": (0.0, 1.0), "N": (0.0, -1.0), "W": (1.0, 0.0), "E": (-1.0, 0.0)}


class IllegalMoveError(ValueError):
    """Lane/turn combination not permitted by the geometry."""


class UnknownVehicleError(KeyError):
    """Vehicle id without a confirmed reservation."""


def _right_of(h):
    return (h[1], -h[0])


def _turned(h, turn):
    if turn == STRAIGHT:
        return h
    if turn == RIGHT:
        return (h[1], -h[0])
    if turn == LEFT:
        return (-h[1], h[0])
    raise IllegalMoveError(f"unknown turn type {turn!r}")


def heading_key(vec) -> str:
    """Snap a direction vector to the compass approach key it travels toward."""
    x, y = vec
    if abs(x) >= abs(y):
        return "W" if x > 0 else "E"
    return "S" if y > 0 else "N"


@dataclass(frozen=True)
class ReservationRequest:
    """A vehicle's claim on intersection space-time (REQUEST message fields)."""

    vehicle_id: str
    arrival_time: float
    arrival_speed: float
    approach: str
    lane: int
    turn: str
    bid: float | None = None

    def __post_init__(self):
        if self.arrival_speed <= 0:
            raise ValueError(f"request {self.vehicle_id}: arrival speed must be > 0")
        if self.turn not in TURNS:
            raise ValueError(f"request {self.vehicle_id}: bad turn {self.turn!r}")


@dataclass(frozen=True)
class Reservation:
    vehicle_id: str
    items: frozenset[int]
    arrival_time: float
    arrival_speed: float
    approach: str
    lane: int
    turn: str
    duration_s: float


@dataclass(frozen=True)
class Confirmation:
    reservation: Reservation
    price: float = 0.0  # first-price payment (CA modes) or posted price (CTA)


@dataclass(frozen=True)
class Rejection:
    vehicle_id: str
    reason: str  # distance_filtered | conflict | bid_violation | below_reserve | outbid
    detail: str = ""


class _Path:
    """Piecewise entry-segment / arc / exit-segment trajectory centreline."""

    def __init__(self, p0, u, p1, w):
        self.p0, self.u, self.p1, self.w = p0, u, p1, w
        if u == w:  # straight
            self.d_entry = math.hypot(p1[0] - p0[0], p1[1] - p0[1])
            self.r = 0.0
            self.arc_len = 0.0
            self.d_exit = 0.0
        else:
            # X = intersection of the entry line and the (reversed) exit line
            # p0 + t*u = p1 - s*w ; u and w are perpendicular unit vectors
            dx, dy = p1[0] - p0[0], p1[1] - p0[1]
            det = -u[0] * w[1] + u[1] * w[0]
            t = (-dx * w[1] + dy * w[0]) / det
            s = (u[0] * dy - u[1] * dx) / det
            r = min(t, s)
            if r <= 0:
                raise IllegalMoveError("degenerate turn geometry")
            self.r = r
            self.d_entry = t - r
            self.d_exit = s - r
            self.arc_len = r * math.pi / 2.0
            t0 = (p0[0] + self.d_entry * u[0], p0[1] + self.d_entry * u[1])
            # arc centre sits on the inside of the turn
            n = _right_of(u)
            self.ccw = (u[0] * w[1] - u[1] * w[0]) > 0  # left turns sweep ccw
            sign = -1.0 if self.ccw else 1.0
            self.centre = (t0[0] + sign * r * n[0], t0[1] + sign * r * n[1])
            self.a0 = math.atan2(t0[1] - self.centre[1], t0[0] - self.centre[0])
        self.length = self.d_entry + self.arc_len + self.d_exit

    def pose(self, s: float):
        """Centre position and unit heading at arclength s (extended beyond ends)."""
        if s <= self.d_entry:
            return (self.p0[0] + s * self.u[0], self.p0[1] + s * self.u[1]), self.u
        if s >= self.d_entry + self.arc_len:
            e = s - self.length
            return (self.p1[0] + e * self.w[0], self.p1[1] + e * self.w[1]), self.w
        frac = (s - self.d_entry) / self.r
        ang = self.a0 + (frac if self.ccw else -frac)
        pos = (self.centre[0] + self.r * math.cos(ang),
               self.centre[1] + self.r * math.sin(ang))
        tang = (-math.sin(ang), math.cos(ang)) if self.ccw else (math.sin(ang), -math.cos(ang))
        return pos, tang


class IntersectionGeometry:
    """Tile grid plus per-(approach, lane, turn) trajectories.

    Defaults follow the single-intersection setup: 4 approaches of 3 lanes,
    3 m lanes rasterised into 0.25 m tiles and a 2 m x 4 m vehicle footprint.
    Network intersections use the same machinery with 5 m cells and one lane
    per approach.
    """

    def __init__(self, tile_size_m=0.25, lane_width_m=3.0, lanes=3,
                 approaches=("N", "E", "S", "W"), vehicle_length_m=4.0,
                 vehicle_width_m=2.0, substeps=10):
        if tile_size_m <= 0:
            raise ValueError("tile size must be > 0")
        self.tile_size = tile_size_m
        self.lane_width = lane_width_m
        self.lanes = lanes
        self.approaches = tuple(approaches)
        for a in self.approaches:
            if a not in HEADINGS:
                raise ValueError(f"unknown approach key {a!r}")
        self.veh_len = vehicle_length_m
        self.veh_wid = vehicle_width_m
        self.substeps = substeps
        self.side = 2.0 * lanes * lane_width_m
        self.nx = max(1, math.ceil(self.side / tile_size_m - 1e-9))
        self.n_tiles = self.nx * self.nx
        self._paths: dict[tuple[str, int, str], _Path] = {}
        self._tile_cache: dict[tuple, tuple[tuple[int, ...], float]] = {}

    @classmethod
    def from_config(cls, cfg: dict) -> "IntersectionGeometry":
        return cls(
            tile_size_m=cfg.get("tile_size_m", 0.25),
            lane_width_m=cfg.get("lane_width_m", 3.0),
            lanes=cfg.get("lanes", 3),
            approaches=tuple(cfg.get("approaches", ("N", "E", "S", "W"))),
            vehicle_length_m=cfg.get("vehicle_length_m", 4.0),
            vehicle_width_m=cfg.get("vehicle_width_m", 2.0),
            substeps=cfg.get("substeps", 10),
        )

    def lane_permits(self, lane: int, turn: str) -> bool:
        if lane < 0 or lane >= self.lanes:
            return False
        if turn == LEFT:
            return lane == 0
        if turn == RIGHT:
            return lane == self.lanes - 1
        return turn == STRAIGHT

    def lanes_for_turn(self, turn: str) -> list[int]:
        return [i for i in range(self.lanes) if self.lane_permits(i, turn)]

    def _entry_point(self, approach: str, lane: int):
        h = HEADINGS[approach]
        r = _right_of(h)
        c = self.side / 2.0
        off = (lane + 0.5) * self.lane_width
        return (c - h[0] * c + r[0] * off, c - h[1] * c + r[1] * off)

    def _exit_point(self, heading, lane: int):
        r = _right_of(heading)
        c = self.side / 2.0
        off = (lane + 0.5) * self.lane_width
        return (c + heading[0] * c + r[0] * off, c + heading[1] * c + r[1] * off)

    def exit_lane(self, lane: int, turn: str) -> int:
        if turn == STRAIGHT:
            return lane
        return 0 if turn == LEFT else self.lanes - 1

    def path(self, approach: str, lane: int, turn: str) -> _Path:
        key = (approach, lane, turn)
        if key not in self._paths:
            if approach not in self.approaches or not self.lane_permits(lane, turn):
                raise IllegalMoveError(
                    f"approach {approach!r} lane {lane} does not permit {turn!r}")
            h = HEADINGS[approach]
            w = _turned(h, turn)
            p0 = self._entry_point(approach, lane)
            p1 = self._exit_point(w, self.exit_lane(lane, turn))
            self._paths[key] = _Path(p0, h, p1, w)
        return self._paths[key]

    def traversal_time(self, approach: str, lane: int, turn: str, v: float) -> float:
        """Seconds for front entry through rear exit at constant speed v."""
        return (self.path(approach, lane, turn).length + self.veh_len) / v

    def _relative_tiles(self, approach, lane, turn, v, frac, dt):
        """(tile-index, step-offset) items for a traversal starting at step 0 + frac."""
        path = self.path(approach, lane, turn)
        total = path.length + self.veh_len
        duration = total / v
        n_samples = int(math.ceil(duration / dt * self.substeps)) + 1
        ts = self.tile_size
        hl, hw = self.veh_len / 2.0, self.veh_wid / 2.0
        items = set()
        for k in range(n_samples + 1):
            t = min(k * dt / self.substeps, duration)
            step = int(math.floor((frac + t) / dt))
            s = -hl + v * t
            (cx, cy), hdg = path.pose(s)
            nx_, ny_ = _right_of(hdg)
            ex = abs(hdg[0]) * hl + abs(nx_) * hw
            ey = abs(hdg[1]) * hl + abs(ny_) * hw
            ix0 = max(0, int(math.floor((cx - ex) / ts)))
            ix1 = min(self.nx - 1, int(math.floor((cx + ex) / ts - 1e-9)))
            iy0 = max(0, int(math.floor((cy - ey) / ts)))
            iy1 = min(self.nx - 1, int(math.floor((cy + ey) / ts - 1e-9)))
            base = step * self.n_tiles
            for iy in range(iy0, iy1 + 1):
                row = base + iy * self.nx
                for ix in range(ix0, ix1 + 1):
                    items.add(row + ix)
        return tuple(sorted(items)), duration

    def decode(self, item: int) -> tuple[int, int, int]:
        """Encoded item -> (step, ix, iy)."""
        step, tidx = divmod(item, self.n_tiles)
        iy, ix = divmod(tidx, self.nx)
        return step, ix, iy


def trajectory_tiles(request: ReservationRequest, geometry: IntersectionGeometry,
                     dt: float = 1.0) -> frozenset[int]:
    """Space-time tiles swept by a constant-speed traversal starting at t_a.

    Occupancy is conservative: the footprint is sampled ``substeps`` times per
    tick and a tile touched at any sampled instant occupies the whole step.
    """
    items, _ = _cached_traversal(request, geometry, dt)
    return items


def traversal_duration(request: ReservationRequest, geometry: IntersectionGeometry,
                       dt: float = 1.0) -> float:
    return _cached_traversal(request, geometry, dt)[1]


def _cached_traversal(request, geometry, dt):
    base_step = int(math.floor(request.arrival_time / dt))
    frac = request.arrival_time - base_step * dt
    v_q = round(request.arrival_speed * 20.0) / 20.0  # 0.05 m/s buckets
    v_q = max(v_q, 0.05)
    key = (request.approach, request.lane, request.turn, v_q, round(frac / dt, 3))
    cached = geometry._tile_cache.get(key)
    if cached is None:
        cached = geometry._relative_tiles(request.approach, request.lane, request.turn,
                                          v_q, frac, dt)
        geometry._tile_cache[key] = cached
    rel, duration = cached
    shift = base_step * geometry.n_tiles
    return frozenset(i + shift for i in rel), duration


class ReservationTable:
    """Confirmed space-time bookings of one intersection."""

    def __init__(self):
        self._items: dict[int, str] = {}
        self._by_vehicle: dict[str, Reservation] = {}

    def conflicts(self, items, requester: str | None = None) -> bool:
        """True iff items intersect a booking held by another vehicle."""
        for it in items:
            owner = self._items.get(it)
            if owner is not None and owner != requester:
                return True
        return False

    def book(self, reservation: Reservation) -> None:
        if reservation.vehicle_id in self._by_vehicle:
            self.remove(reservation.vehicle_id)
        for it in reservation.items:
            assert it not in self._items, "double booking"
            self._items[it] = reservation.vehicle_id
        self._by_vehicle[reservation.vehicle_id] = reservation

    def remove(self, vehicle_id: str) -> Reservation:
        try:
            res = self._by_vehicle.pop(vehicle_id)
        except KeyError:
            raise UnknownVehicleError(vehicle_id) from None
        for it in res.items:
            del self._items[it]
        return res

    def get(self, vehicle_id: str) -> Reservation | None:
        return self._by_vehicle.get(vehicle_id)

    def holds(self, vehicle_id: str) -> bool:
        return vehicle_id in self._by_vehicle

    def __len__(self) -> int:
        return len(self._by_vehicle)

    @property
    def booked_items(self) -> int:
        return len(self._items)


def conflicts(items, table: ReservationTable, requester: str | None = None) -> bool:
    """True iff the tile-time set intersects a booking not owned by requester."""
    return table.conflicts(items, requester)


class DistanceFilter:
    """Per-(approach, lane) maximum reservation distance d_i, initially infinite."""

    def __init__(self):
        self._d: dict[tuple[str, int], float] = {}

    def get(self, approach: str, lane: int) -> float:
        return self._d.get((approach, lane), math.inf)

    def note_conflict(self, approach: str, lane: int, d: float) -> None:
        self._d[(approach, lane)] = min(self.get(approach, lane), d)

    def reset(self, approach: str, lane: int) -> None:
        self._d[(approach, lane)] = math.inf

    def snapshot(self) -> dict[tuple[str, int], float]:
        return dict(self._d)


def reservation_distance(request: ReservationRequest, now: float) -> float:
    """Constant-speed distance estimate d(r) = v_a * (t_a - now)."""
    return request.arrival_speed * (request.arrival_time - now)


def fcfs_process(request: ReservationRequest, table: ReservationTable,
                 geometry: IntersectionGeometry, dfilter: DistanceFilter,
                 now: float, dt: float = 1.0) -> Confirmation | Rejection:
    """First-come-first-served request processing.

    Order of operations: distance pre-filter (reject without processing),
    removal of the requester's prior reservation, trajectory simulation,
    conflict check with d_i update on rejection, d_i reset and booking on
    confirmation.
    """
    d = reservation_distance(request, now)
    if d > dfilter.get(request.approach, request.lane):
        return Rejection(request.vehicle_id, "distance_filtered",
                         f"d(r)={d:.2f} > d_i={dfilter.get(request.approach, request.lane):.2f}")
    if table.holds(request.vehicle_id):
        table.remove(request.vehicle_id)
    items = trajectory_tiles(request, geometry, dt)
    if table.conflicts(items, request.vehicle_id):
        dfilter.note_conflict(request.approach, request.lane, d)
        return Rejection(request.vehicle_id, "conflict")
    dfilter.reset(request.approach, request.lane)
    res = Reservation(request.vehicle_id, items, request.arrival_time,
                      request.arrival_speed, request.approach, request.lane,
                      request.turn, traversal_duration(request, geometry, dt))
    table.book(res)
    return Confirmation(res)


def consume_reservation(vehicle_id: str, table: ReservationTable) -> None:
    """Remove the booking of a vehicle that has exited the intersection."""
    table.remove(vehicle_id)


@dataclass
class FcfsManager:
    """One intersection's FCFS state: single-writer, serialized mutations."""

    geometry: IntersectionGeometry
    dt: float = 1.0
    debug: bool = False
    table: ReservationTable = field(default_factory=ReservationTable)
    dfilter: DistanceFilter = field(default_factory=DistanceFilter)
    rejected_count: int = 0
    confirmed_count: int = 0
    messages: list = field(default_factory=list)

    def process(self, request: ReservationRequest, now: float):
        reply = fcfs_process(request, self.table, self.geometry, self.dfilter, now, self.dt)
        if isinstance(reply, Rejection):
            self.rejected_count += 1
        else:
            self.confirmed_count += 1
        if self.debug:
            self.messages.append({
                "t": now, "type": "REQUEST", "vehicle": request.vehicle_id,
                "arrival_time": request.arrival_time, "arrival_speed": request.arrival_speed,
                "lane": request.lane, "turn": request.turn, "bid": request.bid,
            })
            if isinstance(reply, Rejection):
                self.messages.append({"t": now, "type": "REJECT",
                                      "vehicle": request.vehicle_id, "reason": reply.reason})
            else:
                self.messages.append({"t": now, "type": "CONFIRM",
                                      "vehicle": request.vehicle_id})
        return reply

    def consume(self, vehicle_id: str) -> None:
        consume_reservation(vehicle_id, self.table)

    def max_request_distance(self, approach: str, lane: int) -> float:
        """Published d_i, read by drivers before sending a request."""
        return self.dfilter.get(approach, lane)
