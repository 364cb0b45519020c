"""Satellite geometry, link rates, and round time/energy accounting.

Orbits are circular: a slot is (RAAN, phase, altitude, inclination) and
position follows Kepler's third law with Earth rotation applied for the
Earth-fixed frame.  The accounting side is deliberately boring: every sum
runs in ascending client id so reported totals can be reproduced
bit-for-bit from the per-client event log.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

MU_EARTH_M3_S2 = 3.986004418e14     # gravitational parameter
R_EARTH_M = 6.371e6                 # mean Earth radius
EARTH_ROT_RAD_S = 7.2921159e-5      # sidereal rotation rate
SPEED_OF_LIGHT_M_S = 2.99792458e8

EVENT_LOG_HEADER = "round,client_id,t_cmp_s,t_com_s,bits_up,e_tx_j,e_cmp_j,participated"


@dataclass(frozen=True)
class OrbitalSlot:
    """Circular-orbit slot: plane orientation plus in-plane phase."""

    plane_raan_deg: float
    phase_deg: float
    altitude_km: float
    inclination_deg: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.phase_deg < 360.0:
            raise ValueError(f"phase_deg must be in [0,360), got {self.phase_deg}")
        if self.altitude_km <= 0.0:
            raise ValueError("altitude_km must be positive")


@dataclass(frozen=True)
class LinkBudget:
    rate_bps: float
    channel_gain: float
    distance_m: float


@dataclass(frozen=True)
class EnergyReport:
    """Round energy split: uplink transmission plus local computation."""

    e_tx_j: float
    e_cmp_j: float

    @property
    def e_total_j(self) -> float:
        return self.e_tx_j + self.e_cmp_j


@dataclass(frozen=True)
class TimeReport:
    """Round processing time decomposed per client and per cluster.

    ``total_s`` is the sum over clusters of (slowest participant + fixed
    aggregation delay + broadcast delay); ``recompute()`` re-derives it
    from the parts so accounting closure is testable.
    """

    per_client_s: dict[int, float]
    cluster_max_s: dict[int, float]
    t_broc_s: dict[int, float]
    t_sk_s: float
    total_s: float

    def recompute(self) -> float:
        total = 0.0
        for k in sorted(self.cluster_max_s):
            total += self.cluster_max_s[k] + self.t_sk_s + self.t_broc_s[k]
        return total


@dataclass(frozen=True)
class EventRow:
    """One event-log line: what a single client did in a single round."""

    round: int
    client_id: int
    t_cmp_s: float
    t_com_s: float
    bits_up: int
    e_tx_j: float
    e_cmp_j: float
    participated: bool

    def csv_row(self) -> str:
        return ",".join([
            str(self.round), str(self.client_id), repr(self.t_cmp_s),
            repr(self.t_com_s), str(self.bits_up), repr(self.e_tx_j),
            repr(self.e_cmp_j), "1" if self.participated else "0",
        ])


# --------------------------------------------------------------------------
# Geometry
# --------------------------------------------------------------------------

def orbital_rate_rad_s(altitude_km: float) -> float:
    """Mean motion of a circular orbit at the given altitude."""
    a = R_EARTH_M + altitude_km * 1e3
    return math.sqrt(MU_EARTH_M3_S2 / a ** 3)


def propagate_eci(slot: OrbitalSlot, t_s: float) -> np.ndarray:
    """Inertial position (meters) of a slot after ``t_s`` seconds."""
    if t_s < 0:
        raise ValueError("t_s must be >= 0")
    a = R_EARTH_M + slot.altitude_km * 1e3
    u = math.radians(slot.phase_deg) + orbital_rate_rad_s(slot.altitude_km) * t_s
    inc = math.radians(slot.inclination_deg)
    raan = math.radians(slot.plane_raan_deg)
    # in-plane position, then rotate by inclination about x, then RAAN about z
    x_p, y_p = a * math.cos(u), a * math.sin(u)
    x_i = x_p
    y_i = y_p * math.cos(inc)
    z_i = y_p * math.sin(inc)
    x = x_i * math.cos(raan) - y_i * math.sin(raan)
    y = x_i * math.sin(raan) + y_i * math.cos(raan)
    return np.array([x, y, z_i])


def propagate(slot: OrbitalSlot, t_s: float) -> np.ndarray:
    """Earth-fixed position (meters): inertial position with Earth rotation removed."""
    pos = propagate_eci(slot, t_s)
    theta = EARTH_ROT_RAD_S * t_s
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    x = pos[0] * cos_t + pos[1] * sin_t
    y = -pos[0] * sin_t + pos[1] * cos_t
    return np.array([x, y, pos[2]])


def geodetic_to_ecef(lat_deg: float, lon_deg: float, radius_m: float = R_EARTH_M) -> np.ndarray:
    """Spherical-Earth surface point in the Earth-fixed frame."""
    lat, lon = math.radians(lat_deg), math.radians(lon_deg)
    return np.array([
        radius_m * math.cos(lat) * math.cos(lon),
        radius_m * math.cos(lat) * math.sin(lon),
        radius_m * math.sin(lat),
    ])


def has_line_of_sight(p1: np.ndarray, p2: np.ndarray, body_radius_m: float = R_EARTH_M) -> bool:
    """True when the segment between two positions clears the Earth sphere."""
    d = p2 - p1
    dd = float(d @ d)
    if dd == 0.0:
        return float(p1 @ p1) >= body_radius_m ** 2
    # closest point of the segment to the Earth centre
    s = float(np.clip(-(p1 @ d) / dd, 0.0, 1.0))
    closest = p1 + s * d
    return float(closest @ closest) >= body_radius_m ** 2


def free_space_gain(distance_m: float, carrier_hz: float) -> float:
    """Free-space path gain (c / 4 pi d f)^2, clamped into (0, 1]."""
    if carrier_hz <= 0:
        raise ValueError("carrier_hz must be positive")
    if distance_m <= 0:
        return 1.0
    gain = (SPEED_OF_LIGHT_M_S / (4.0 * math.pi * distance_m * carrier_hz)) ** 2
    return min(gain, 1.0)


def noise_power_w(noise_density_dbm_hz: float, bandwidth_hz: float) -> float:
    """Noise power over the receiver bandwidth from a dBm/Hz density."""
    density_w_hz = 10.0 ** ((noise_density_dbm_hz - 30.0) / 10.0)
    return density_w_hz * bandwidth_hz


# --------------------------------------------------------------------------
# Per-client cost model
# --------------------------------------------------------------------------

def link_rate(bandwidth_hz: float, tx_power_w: float, gain: float, noise_w: float) -> float:
    """Achievable rate B * log2(1 + P*h/N) in bits/second."""
    if bandwidth_hz <= 0:
        raise ValueError("bandwidth_hz must be positive")
    if noise_w <= 0:
        raise ValueError("noise_w must be positive")
    if not 0.0 < gain <= 1.0:
        raise ValueError(f"gain must be in (0,1], got {gain}")
    return bandwidth_hz * math.log2(1.0 + tx_power_w * gain / noise_w)


def comp_time(num_samples: float, cycles_per_sample: float, cpu_freq_hz: float) -> float:
    """Local training time: samples * cycles-per-sample / CPU frequency."""
    if cpu_freq_hz <= 0:
        raise ValueError("cpu_freq_hz must be positive")
    return float(num_samples * cycles_per_sample / cpu_freq_hz)


def comm_time(payload_bits: float, rate_bps: float) -> float:
    """Upload time for a payload; a non-positive rate means no visible link."""
    if rate_bps <= 0:
        raise ValueError("rate_bps must be positive (no visible link this round)")
    return payload_bits / rate_bps


def round_time(per_cluster_times: Mapping[int, Mapping[int, float]],
               t_sk_s: float,
               t_broc_s: Mapping[int, float]) -> TimeReport:
    """Fold participant completion times into the round's processing time.

    ``per_cluster_times`` maps cluster index to {client_id: T_i} over that
    cluster's participants.  Each cluster contributes its slowest
    participant plus the aggregation delay plus its broadcast delay; the
    total sums clusters in ascending index order.
    """
    per_client: dict[int, float] = {}
    cluster_max: dict[int, float] = {}
    broc: dict[int, float] = {}
    total = 0.0
    for k in sorted(per_cluster_times):
        times = per_cluster_times[k]
        if not times:
            raise ValueError(f"cluster {k}: empty participant set")
        per_client.update(times)
        cluster_max[k] = max(times[i] for i in sorted(times))
        broc[k] = float(t_broc_s[k])
        total += cluster_max[k] + t_sk_s + broc[k]
    return TimeReport(per_client_s=per_client, cluster_max_s=cluster_max,
                      t_broc_s=broc, t_sk_s=t_sk_s, total_s=total)


def energy_report(t_cmp_s: Mapping[int, float],
                  cpu_freq_hz: Mapping[int, float],
                  payload_bits: Mapping[int, float],
                  rate_bps: Mapping[int, float],
                  tx_power_w: Mapping[int, float],
                  energy_coeff: float) -> EnergyReport:
    """Total round energy: uplink P*bits/rate plus compute eps0*f^3*t.

    ``t_cmp_s`` covers every client that executed local work this round;
    ``payload_bits`` only clients that actually transmitted.  Sums run in
    ascending client id.
    """
    e_tx = 0.0
    for i in sorted(payload_bits):
        e_tx += float(tx_power_w[i]) * (float(payload_bits[i]) / float(rate_bps[i]))
    e_cmp = 0.0
    for i in sorted(t_cmp_s):
        e_cmp += float(energy_coeff) * float(cpu_freq_hz[i]) ** 3 * float(t_cmp_s[i])
    return EnergyReport(e_tx_j=e_tx, e_cmp_j=e_cmp)


def objective(time_report: TimeReport, energy: EnergyReport) -> tuple[float, float]:
    """The (processing time, energy) pair minimised by the framework design.

    No scalarisation: both are recorded verbatim in the round metrics.
    """
    return (time_report.total_s, energy.e_total_j)
