"""Uplink channel model, per-RB Shannon rates and the RB cost of a vehicle.

All arithmetic is in linear units; dB-valued configuration fields are
converted on access.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigurationError, DomainError
from .mobility import MobilityConfig, VehicleKinematics, standing_time


def db_to_linear(db):
    return 10.0 ** (np.asarray(db, dtype=float) / 10.0)


def dbm_to_watts(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


@dataclass(frozen=True)
class RadioConfig:
    """Radio and timing parameters.

    The path-loss law is ``reference_loss_db + 10 * exponent * log10(d)`` with
    ``d`` in meters; the defaults equal 128.1 dB at 1 km with exponent 3.76.
    ``noise_dbm`` is the noise power over one RB.
    """

    rb_bandwidth: float = 180e3
    transmit_power: float = 0.1
    noise_dbm: float = -114.0
    shadowing_sigma_db: float = 3.0
    antenna_gain_dbi: float = 3.0
    bs_antenna_gain_dbi: float = 0.0
    antenna_height: float = 1.5
    bs_height: float = 25.0
    bs_offset: float = 35.0
    pathloss_exponent: float = 3.76
    reference_loss_db: float = 128.1 - 37.6 * 3.0
    total_rbs: int = 4
    v2v_rbs: int = 4
    model_size_bits: float = 160e3
    t_agg: float = 0.5
    delta: float = 2.0

    def __post_init__(self):
        if self.rb_bandwidth <= 0:
            raise ConfigurationError("rb_bandwidth must be positive")
        if self.transmit_power <= 0:
            raise ConfigurationError("transmit_power must be positive")
        if self.total_rbs < 0:
            raise ConfigurationError("total_rbs must be non-negative")
        if self.v2v_rbs < 1:
            raise ConfigurationError("v2v_rbs must be >= 1")
        if self.model_size_bits <= 0:
            raise ConfigurationError("model_size_bits must be positive")
        if self.shadowing_sigma_db < 0:
            raise ConfigurationError("shadowing_sigma_db must be non-negative")
        if self.t_agg < 0 or self.delta < 0:
            raise ConfigurationError("t_agg and delta must be non-negative")

    @property
    def noise_watts(self) -> float:
        return dbm_to_watts(self.noise_dbm)


@dataclass(frozen=True)
class ChannelRealization:
    ids: tuple[int, ...]
    gains: np.ndarray  # (vehicles, rbs) linear power gains
    distances: np.ndarray

    def row(self, vehicle_id: int) -> np.ndarray:
        return self.gains[self.ids.index(vehicle_id)]


@dataclass(frozen=True)
class RBCost:
    """Outcome of the RB cost evaluation for one vehicle.

    ``cost`` is ``None`` and ``feasible`` is False when the deadline is
    already dead or even every RB together cannot reach ``r_min``.
    """

    r_min: float
    cost: int | None
    rbs: tuple[int, ...]
    rates: np.ndarray

    @property
    def feasible(self) -> bool:
        return self.cost is not None


def pathloss_gain(distance, radio: RadioConfig):
    """Linear gain of the distance-dependent path loss (distances clamped at 1 m)."""
    d = np.maximum(np.asarray(distance, dtype=float), 1.0)
    loss_db = radio.reference_loss_db + 10.0 * radio.pathloss_exponent * np.log10(d)
    return db_to_linear(-loss_db)


def distance_to_bs(v: VehicleKinematics, radio: RadioConfig, bs_position: float) -> float:
    return math.sqrt(
        (v.position - bs_position) ** 2
        + radio.bs_offset**2
        + (radio.bs_height - radio.antenna_height) ** 2
    )


def draw_gains(
    fleet,
    radio: RadioConfig,
    seed,
    *,
    bs_position: float = 0.0,
    shadowing: bool = True,
    fading: bool = True,
) -> ChannelRealization:
    """Draw one block-fading realization of the uplink gains.

    Shadowing is one log-normal draw per vehicle, fading one unit-mean
    exponential (Rayleigh power) draw per vehicle and RB.
    """
    rng = np.random.default_rng(seed)
    n, q = len(fleet), radio.total_rbs
    distances = np.array([distance_to_bs(v, radio, bs_position) for v in fleet], dtype=float)
    base = pathloss_gain(distances, radio) * db_to_linear(
        radio.antenna_gain_dbi + radio.bs_antenna_gain_dbi
    )
    # draws happen unconditionally so toggling one factor leaves the other stream intact
    shadow_db = rng.normal(0.0, 1.0, size=n) * radio.shadowing_sigma_db
    rayleigh = rng.exponential(1.0, size=(n, q))
    gains = np.repeat(base[:, None], q, axis=1)
    if shadowing:
        gains = gains * db_to_linear(shadow_db)[:, None]
    if fading:
        gains = gains * rayleigh
    return ChannelRealization(ids=tuple(v.id for v in fleet), gains=gains, distances=distances)


def rb_rate(P, G, N0, B):
    """Shannon rate ``B * log2(1 + P * G / N0)`` in bits/s; array-friendly."""
    P, G, N0, B = (np.asarray(a, dtype=float) for a in (P, G, N0, B))
    if np.any(P <= 0) or np.any(G <= 0) or np.any(N0 <= 0) or np.any(B <= 0):
        raise DomainError("rb_rate inputs must be strictly positive")
    rate = B * np.log2(1.0 + P * G / N0)
    return float(rate) if rate.ndim == 0 else rate


def training_time(num_samples: int, epochs: int, per_sample_cost: float) -> float:
    return per_sample_cost * num_samples * epochs


def upload_budget(v: VehicleKinematics, t_train: float, radio: RadioConfig, mobility: MobilityConfig) -> float:
    """Seconds left for the uplink once training, aggregation and waiting are paid."""
    return standing_time(v, mobility) - t_train - radio.t_agg - radio.delta


def greedy_prefix(rates, r_min: float, candidates=None):
    """Smallest set of RBs, taken in decreasing-rate order, whose rates reach ``r_min``.

    ``candidates`` restricts the pool (RB indices); ties go to the lower index.
    Returns the chosen RB indices or ``None`` if the pool cannot reach ``r_min``.
    """
    rates = np.asarray(rates, dtype=float)
    pool = np.arange(rates.size) if candidates is None else np.asarray(sorted(candidates), dtype=int)
    if pool.size == 0:
        return None
    order = pool[np.argsort(-rates[pool], kind="stable")]
    total = 0.0
    for i, q in enumerate(order):
        total += rates[q]
        if total >= r_min:
            return tuple(int(x) for x in order[: i + 1])
    return None


def min_rate_and_cost(v: VehicleKinematics, budget: float, realization: ChannelRealization, radio: RadioConfig) -> RBCost:
    gains = realization.row(v.id)
    rates = rb_rate(radio.transmit_power, gains, radio.noise_watts, radio.rb_bandwidth)
    if budget <= 0:
        return RBCost(r_min=math.inf, cost=None, rbs=(), rates=rates)
    r_min = radio.model_size_bits / budget
    chosen = greedy_prefix(rates, r_min)
    if chosen is None:
        return RBCost(r_min=r_min, cost=None, rbs=(), rates=rates)
    return RBCost(r_min=r_min, cost=len(chosen), rbs=chosen, rates=rates)


def v2v_gain(k: VehicleKinematics, h: VehicleKinematics, radio: RadioConfig, lane_width: float = 3.5) -> float:
    """Mean V2V power gain (no fading): path loss plus both vehicle antennas."""
    d = math.hypot(k.position - h.position, (k.lane - h.lane) * lane_width)
    return float(pathloss_gain(d, radio) * db_to_linear(2 * radio.antenna_gain_dbi))


def v2v_upload_time(k: VehicleKinematics, h: VehicleKinematics, rb_share: float, radio: RadioConfig) -> float:
    """Seconds to push one model from ``k`` to ``h`` over ``rb_share`` V2V RBs."""
    if rb_share <= 0:
        return math.inf
    rate = rb_share * rb_rate(radio.transmit_power, v2v_gain(k, h, radio), radio.noise_watts, radio.rb_bandwidth)
    return radio.model_size_bits / rate
