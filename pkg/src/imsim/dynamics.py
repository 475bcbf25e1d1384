"""Vehicle motion models.

Microscopic car-following (Intelligent Driver Model) drives the approaches of
the single-intersection scenario; a density-based mesoscopic model drives the
links of the network scenario; intersections themselves are traversed at the
constant speed booked in the reservation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .isect import Reservation


@dataclass(frozen=True)
class IDMParams:
    accel: float = 0.3        # a, m/s^2
    decel: float = 3.0        # g (the parameter list's b), m/s^2
    headway: float = 1.5      # T, s
    min_gap: float = 2.0      # s0, m
    exponent: float = 1.0     # power on v/v_p; 1 as printed, 4 for standard IDM

    def __post_init__(self):
        if self.accel <= 0 or self.decel <= 0 or self.min_gap <= 0:
            raise ValueError("IDM parameters must be positive")


def idm_acceleration(v: float, s: float, dv: float, v_p: float,
                     params: IDMParams = IDMParams()) -> float:
    """dv/dt = a * [1 - (v/v_p)^e - (s*/s)^2], free road modelled as s = inf."""
    if s <= 0:
        raise ValueError("gap must be > 0 (free road is s = inf)")
    free = (v / v_p) ** params.exponent if v > 0 else 0.0
    if math.isinf(s):
        brake = 0.0
    else:
        s_star = params.min_gap + v * params.headway + \
            v * dv / (2.0 * math.sqrt(params.accel * params.decel))
        brake = (s_star / s) ** 2
    return params.accel * (1.0 - free - brake)


@dataclass
class MicroVehicle:
    """One vehicle on a single-intersection approach lane.

    pos is the front-bumper position in metres from the lane start, quantized
    to the tile grid after every step.
    """

    id: str
    pos: float
    speed: float
    v_p: float
    length: float = 4.0
    params: IDMParams = field(default_factory=IDMParams)
    stop_at: float | None = None       # hard stop line (no reservation)
    target_speed: float | None = None  # reservation-tracking speed cap


def micro_step(lane_vehicles: list[MicroVehicle], dt: float = 1.0,
               tile: float = 0.25) -> None:
    """Advance one lane (ordered leader-first, no lane changes) by one tick.

    Speed from IDM against the leader (or free road), optionally capped by a
    stop-line constraint and by a reservation-tracking target speed; position
    snapped to the nearest tile.  A hard clamp guarantees the follower never
    overlaps its leader and never crosses its stop line.
    """
    leader_rear: float | None = None
    leader_speed = 0.0
    for veh in lane_vehicles:
        if leader_rear is None:
            acc = idm_acceleration(veh.speed, math.inf, 0.0, veh.v_p, veh.params)
        else:
            gap = max(leader_rear - veh.pos, 1e-3)
            acc = idm_acceleration(veh.speed, gap, veh.speed - leader_speed,
                                   veh.v_p, veh.params)
        if veh.stop_at is not None:
            gap = veh.stop_at - veh.pos
            if gap <= 0.0:
                acc = min(acc, -veh.speed / dt)
            else:
                acc = min(acc, idm_acceleration(veh.speed, gap, veh.speed,
                                                veh.v_p, veh.params))
        new_speed = max(0.0, veh.speed + acc * dt)
        if veh.target_speed is not None:
            # approach the reservation speed without over- or under-shooting it
            dv = veh.target_speed - veh.speed
            dv = max(-veh.params.decel * dt, min(veh.params.accel * dt, dv))
            new_speed = min(new_speed, max(0.0, veh.speed + dv))
        new_pos = veh.pos + new_speed * dt
        if veh.stop_at is not None and new_pos > veh.stop_at:
            new_pos = veh.stop_at
            new_speed = 0.0
        if leader_rear is not None and new_pos > leader_rear - 1e-9:
            new_pos = leader_rear
            new_speed = min(new_speed, leader_speed)
        new_pos = round(new_pos / tile) * tile
        if leader_rear is not None and new_pos > leader_rear:
            new_pos = math.floor(leader_rear / tile) * tile
        veh.speed = new_speed
        veh.pos = new_pos
        leader_rear = veh.pos - veh.length
        leader_speed = veh.speed


def meso_target_speed(x: float, length: float, y_current: float, y_next: float) -> float:
    """Blend of this link's and the next link's reference speeds by progress."""
    if not 0.0 <= x <= length:
        raise ValueError("position must lie within the link")
    w = x / length
    return (1.0 - w) * y_current + w * y_next


def reference_speed(density_veh_km: float, vmax: float, v_p: float, diagram) -> float:
    """min of the driver's desired speed, the density speed and the limit."""
    from .market import speed_density
    return min(v_p, speed_density(density_veh_km, diagram), vmax)


@dataclass
class MesoVehicleState:
    link_id: str
    x: float
    speed: float


def meso_advance(speed: float, target: float, x: float, dt: float = 1.0,
                 max_acc: float = 2.0, max_dec: float = 4.0) -> tuple[float, float]:
    """One mesoscopic tick: speed moves toward the target within the
    type-specific accel/decel bounds, position by the trapezoidal rule."""
    dv = target - speed
    dv = max(-max_dec * dt, min(max_acc * dt, dv))
    new_speed = max(0.0, speed + dv)
    new_x = x + 0.5 * (speed + new_speed) * dt
    return new_speed, new_x


@dataclass
class CellCrossing:
    """Constant-speed traversal of an intersection on its booked schedule."""

    reservation: Reservation
    started_at: float

    def progress(self, now: float) -> float:
        return max(0.0, now - self.started_at) * self.reservation.arrival_speed

    def done(self, now: float) -> bool:
        return now + 1e-9 >= self.started_at + self.reservation.duration_s

    def off_schedule(self, dt: float = 1.0) -> bool:
        """Protocol violation: entry more than one tick away from the booking."""
        return abs(self.started_at - self.reservation.arrival_time) > dt + 1e-9
