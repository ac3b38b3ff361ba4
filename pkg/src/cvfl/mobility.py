"""Vehicle fleets on a straight multi-lane road and the two timing quantities
derived from their motion: standing time inside the cell and V2V link lifetime.

Coordinates are one-dimensional. ``position`` is measured along the road axis
in ``[0, D]``; vehicles with ``direction == +1`` travel towards ``D`` and
vehicles with ``direction == -1`` travel towards ``0``.
"""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass, replace

import numpy as np

from .exceptions import ConfigurationError, DomainError

KMH_TO_MS = 1000.0 / 3600.0


@dataclass(frozen=True)
class VehicleKinematics:
    id: int
    lane: int
    direction: int
    position: float
    speed: float

    @property
    def velocity(self) -> float:
        """Signed velocity along the road axis (m/s)."""
        return self.direction * self.speed

    def travelled(self, coverage_diameter: float) -> float:
        """Distance already covered inside the cell along the travel direction."""
        if self.direction >= 0:
            return self.position
        return coverage_diameter - self.position


@dataclass(frozen=True)
class MobilityConfig:
    """Road geometry and traffic model.

    ``lane_bounds_kmh`` holds one ``(v_lo, v_hi)`` pair per lane of a single
    carriageway; with ``lanes`` larger than the number of pairs the bounds
    repeat, so six lanes and three pairs give three lanes per direction.
    The first half of the lanes drive in the ``+1`` direction.
    """

    coverage_diameter: float = 2000.0
    transmission_range: float = 300.0
    lanes: int = 6
    lane_bounds_kmh: tuple[tuple[float, float], ...] = (
        (60.0, 80.0),
        (80.0, 100.0),
        (100.0, 120.0),
    )
    vehicle_density: float = 0.0025
    parked: bool = False

    def __post_init__(self):
        if self.coverage_diameter <= 0:
            raise ConfigurationError("coverage_diameter must be positive")
        if self.transmission_range <= 0:
            raise ConfigurationError("transmission_range must be positive")
        if self.lanes < 1:
            raise ConfigurationError("lanes must be >= 1")
        if not self.lane_bounds_kmh:
            raise ConfigurationError("lane_bounds_kmh must not be empty")
        for lo, hi in self.lane_bounds_kmh:
            if not (0 < lo < hi):
                raise ConfigurationError(
                    f"lane velocity bounds must satisfy 0 < v_lo < v_hi, got ({lo}, {hi})"
                )
        if self.vehicle_density < 0:
            raise ConfigurationError("vehicle_density must be non-negative")
        # tuples survive a JSON round trip as lists
        object.__setattr__(
            self, "lane_bounds_kmh", tuple(tuple(map(float, b)) for b in self.lane_bounds_kmh)
        )

    def lane_bounds_ms(self, lane: int) -> tuple[float, float]:
        lo, hi = self.lane_bounds_kmh[lane % len(self.lane_bounds_kmh)]
        return lo * KMH_TO_MS, hi * KMH_TO_MS

    def lane_direction(self, lane: int) -> int:
        if self.lanes == 1:
            return 1
        return 1 if lane < (self.lanes + 1) // 2 else -1


def truncated_gaussian(rng: np.random.Generator, lo: float, hi: float, size: int) -> np.ndarray:
    """Draw from N(mid, ((hi - lo) / 4)^2) truncated to ``[lo, hi]`` by rejection."""
    mean = 0.5 * (lo + hi)
    sigma = (hi - lo) / 4.0
    out = np.empty(size)
    filled = 0
    while filled < size:
        draw = rng.normal(mean, sigma, size=max(2 * (size - filled), 8))
        draw = draw[(draw >= lo) & (draw <= hi)]
        take = min(size - filled, draw.size)
        out[filled : filled + take] = draw[:take]
        filled += take
    return out


def spawn_fleet(config: MobilityConfig, count_or_density, seed) -> list[VehicleKinematics]:
    """Generate a fleet of vehicles.

    Parameters
    ----------
    config : MobilityConfig
    count_or_density : int or float or None
        An ``int`` requests exactly that many vehicles, each on a uniformly
        chosen lane at a uniform position. A ``float`` is a per-lane Poisson
        intensity in vehicles per meter; ``None`` uses ``config.vehicle_density``.
    seed : int or sequence of int
        Anything accepted by :func:`numpy.random.default_rng`.
    """
    rng = np.random.default_rng(seed)
    D = config.coverage_diameter
    if count_or_density is None:
        count_or_density = config.vehicle_density

    if isinstance(count_or_density, (int, np.integer)) and not isinstance(count_or_density, bool):
        count = int(count_or_density)
        if count < 0:
            raise ConfigurationError("vehicle count must be non-negative")
        lanes = rng.integers(0, config.lanes, size=count)
        positions = rng.uniform(0.0, D, size=count)
    else:
        density = float(count_or_density)
        if density < 0:
            raise ConfigurationError("vehicle density must be non-negative")
        per_lane = rng.poisson(density * D, size=config.lanes)
        lanes = np.repeat(np.arange(config.lanes), per_lane)
        positions = rng.uniform(0.0, D, size=lanes.size)

    speeds = np.zeros(lanes.size)
    if not config.parked:
        for lane in range(config.lanes):
            mask = lanes == lane
            n = int(mask.sum())
            if n:
                lo, hi = config.lane_bounds_ms(lane)
                speeds[mask] = truncated_gaussian(rng, lo, hi, n)

    return [
        VehicleKinematics(
            id=i,
            lane=int(lane),
            direction=config.lane_direction(int(lane)),
            position=float(pos),
            speed=float(v),
        )
        for i, (lane, pos, v) in enumerate(zip(lanes, positions, speeds))
    ]


def advance_fleet(fleet, dt: float, config: MobilityConfig) -> list[VehicleKinematics]:
    """Move every vehicle by ``velocity * dt``; vehicles leaving the cell re-enter
    at the opposite edge so the fleet size stays constant."""
    D = config.coverage_diameter
    return [replace(v, position=float((v.position + v.velocity * dt) % D)) for v in fleet]


def standing_time(v: VehicleKinematics, config: MobilityConfig) -> float:
    """Remaining time (s) before ``v`` leaves the coverage area: ``(D - x) / speed``."""
    D = config.coverage_diameter
    x = v.travelled(D)
    if not (0.0 <= x <= D):
        raise DomainError(f"travelled distance {x} outside [0, {D}]")
    if v.speed == 0:
        return math.inf
    return (D - x) / v.speed


def link_lifetime(k: VehicleKinematics, h: VehicleKinematics, config: MobilityConfig) -> float:
    """Time (s) vehicles ``k`` and ``h`` stay within transmission range.

    Returns 0 when they are already out of range and ``inf`` when they move
    with the same signed velocity.
    """
    tr = config.transmission_range
    gap = k.position - h.position
    if abs(gap) > tr:
        return 0.0
    dv = k.velocity - h.velocity
    if dv == 0:
        return math.inf
    # same as (-dv*gap + |dv|*tr) / dv**2 without squaring a tiny dv to zero;
    # the cap keeps inf reserved for co-moving pairs
    value = (tr - math.copysign(1.0, dv) * gap) / abs(dv)
    return min(max(value, 0.0), sys.float_info.max)


def link_lifetime_matrix(rows, cols, config: MobilityConfig) -> np.ndarray:
    return np.array([[link_lifetime(k, h, config) for h in cols] for k in rows], dtype=float).reshape(
        len(rows), len(cols)
    )
