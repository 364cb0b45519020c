"""Core data types, configuration schema, and seeded randomness.

Everything downstream (constellation geometry, clustering, training,
compression, aggregation) consumes the types defined here.  The guiding
rule is that a run is a pure function of its ``ExperimentConfig``: every
source of randomness is a named stream derived from the experiment seed,
so reordering or parallelising client work cannot change results.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Any, Mapping, Optional

import numpy as np

# Named RNG streams.  Each consumer owns a disjoint stream so that the
# draw sequence of one phase can never leak into another.
STREAM_SYNTH = 0
STREAM_PARTITION = 1
STREAM_CODEC = 2
STREAM_CLUSTERING = 3
STREAM_GS = 4
STREAM_CLIENT_INIT = 5
STREAM_MODEL_INIT = 6
STREAM_CLIENT_BASE = 100  # client i draws from stream STREAM_CLIENT_BASE + i

_SEED_MASK = (1 << 64) - 1


class ConfigError(ValueError):
    """Raised when a configuration file or value is invalid."""


class SeededRng:
    """One deterministic random stream.

    The pair ``(seed, stream_id)`` fully determines the draw sequence on
    every platform (PCG64 seeded through ``SeedSequence`` spawn keys).
    """

    def __init__(self, seed: int, stream_id: int):
        if not 0 <= seed <= _SEED_MASK:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = seed
        self.stream_id = stream_id
        ss = np.random.SeedSequence(entropy=seed, spawn_key=(stream_id,))
        self.gen = np.random.Generator(np.random.PCG64(ss))

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed}, stream_id={self.stream_id})"


def client_stream(seed: int, client_id: int) -> SeededRng:
    """Training-time stream owned exclusively by one client."""
    return SeededRng(seed, STREAM_CLIENT_BASE + client_id)


def ensure_finite(vec: np.ndarray, context: str) -> np.ndarray:
    """Assert a parameter/update vector contains no NaN or Inf."""
    if not np.all(np.isfinite(vec)):
        raise FloatingPointError(f"non-finite values in {context}")
    return vec


# --------------------------------------------------------------------------
# Experiment configuration
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    """Flat experiment configuration.

    Field names are exactly the keys accepted in config files
    (``key = value`` lines, ``#`` comments).  Defaults follow the common
    desk-scale scenario: 20 satellites in 4 clusters at 1300 km / 53 deg,
    ka-band links, 0.6 selection rate, 0.01 gradient-change threshold.
    """

    # federation shape
    num_clients: int = 20
    num_clusters: int = 4
    rounds: int = 200
    local_epochs: int = 1
    # semi-supervised training
    confidence: float = 0.95        # pseudo-label acceptance threshold
    beta: float = 1.0               # Beta(mu, mu) parameter for patch mixing
    loss_weight: float = 0.5        # weight between confident-set and mixed-set losses
    learning_rate: float = 0.01
    batch_size: int = 64
    momentum: float = 0.9
    # clustering
    cluster_weight: float = 0.4     # gradient-vs-position balance in joint features
    recluster_interval: int = 50
    # selection / aggregation
    selection_rate: float = 0.6
    gs_interval: int = 1            # rounds between ground-station aggregations
    normalize_weights: bool = False
    t_sk_s: float = 0.0             # fixed intra-cluster aggregation delay
    # compression
    compression_enabled: bool = True
    keep_fraction: float = 0.125    # retained coordinate fraction k/d
    gradient_threshold: float = 0.01
    # geometry / radio
    altitude_km: float = 1300.0
    inclination_deg: float = 53.0
    num_planes: int = 4
    carrier_hz: float = 27.0e9
    bandwidth_hz: float = 2.0e7
    noise_density: float = -174.0   # dBm/Hz
    tx_power_w: float = 1000.0      # 30 dBW
    gs_lat_deg: float = 0.0
    gs_lon_deg: float = 0.0
    # client hardware
    cpu_freq_hz: float = 5.0e10     # 50 GC/s
    cpu_freq_jitter: float = 0.5    # +- fraction drawn per client
    cycles_per_sample: float = 5.0e8
    energy_coeff: float = 1.0e-28   # J*s^2/cycle^3
    # model substrate
    model_kind: str = "mlp"         # "mlp" or "logistic"
    hidden_width: int = 32
    # synthetic data
    num_classes: int = 4
    samples_per_class: int = 500
    blob_separation: float = 1.5
    # reproducibility
    seed: int = 1


_BOOL_WORDS = {"true": True, "yes": True, "on": True, "1": True,
               "false": False, "no": False, "off": False, "0": False}


def _coerce(name: str, raw: Any, target: type) -> Any:
    if isinstance(raw, target) and not (target is int and isinstance(raw, bool)):
        return raw
    text = str(raw).strip()
    try:
        if target is bool:
            return _BOOL_WORDS[text.lower()]
        if target is int:
            val = float(text)
            if val != int(val):
                raise ValueError
            return int(val)
        if target is float:
            return float(text)
        return text
    except (ValueError, KeyError):
        raise ConfigError(f"cannot parse value {raw!r} for key '{name}'") from None


def parse_config(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines into a raw string mapping.

    Blank lines and ``#`` comments (full-line or trailing) are ignored.
    """
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = stripped.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key '{key}'")
        out[key] = value.strip()
    return out


def config_from_mapping(raw: Mapping[str, Any]) -> ExperimentConfig:
    """Build a config from a raw mapping, filling defaults for absent keys."""
    known = {f.name: f.type for f in fields(ExperimentConfig)}
    types = {"int": int, "float": float, "bool": bool, "str": str}
    values: dict[str, Any] = {}
    for key, raw_value in raw.items():
        if key not in known:
            raise ConfigError(f"unknown config key '{key}'")
        values[key] = _coerce(key, raw_value, types[known[key]])
    return ExperimentConfig(**values)


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigError(message)


def validate_config(cfg: ExperimentConfig) -> ExperimentConfig:
    """Check every invariant; return the config unchanged iff all hold."""
    _require(cfg.num_clients >= 1, "num_clients must be >= 1")
    _require(cfg.num_clusters >= 1, "num_clusters must be >= 1")
    _require(cfg.num_clusters <= cfg.num_clients, "K exceeds C: num_clusters must be <= num_clients")
    _require(cfg.rounds >= 0, "rounds must be >= 0")
    _require(cfg.local_epochs >= 0, "local_epochs must be >= 0")
    _require(0.0 < cfg.confidence < 1.0, "confidence out of (0,1)")
    _require(cfg.beta > 0.0, "beta must be positive")
    _require(0.0 <= cfg.loss_weight <= 1.0, "loss_weight out of [0,1]")
    _require(0.0 <= cfg.cluster_weight <= 1.0, "cluster_weight out of [0,1]")
    _require(0.0 < cfg.selection_rate <= 1.0, "selection rate out of (0,1]")
    _require(cfg.selection_rate * cfg.num_clients / cfg.num_clusters >= 1.0,
             "selection_rate * num_clients / num_clusters < 1: no selectable participant per cluster")
    _require(cfg.gradient_threshold > 0.0, "gradient_threshold must be positive")
    _require(cfg.learning_rate > 0.0, "learning_rate must be positive")
    _require(cfg.batch_size >= 1, "batch_size must be >= 1")
    _require(0.0 <= cfg.momentum <= 1.0, "momentum out of [0,1]")
    _require(0 <= cfg.seed <= _SEED_MASK, "seed must be a 64-bit unsigned integer")
    _require(cfg.altitude_km > 0.0, "altitude_km must be positive")
    _require(0.0 <= cfg.inclination_deg <= 180.0, "inclination_deg out of [0,180]")
    _require(cfg.num_planes >= 1, "num_planes must be >= 1")
    _require(cfg.carrier_hz > 0.0, "carrier_hz must be positive")
    _require(cfg.bandwidth_hz > 0.0, "bandwidth_hz must be positive")
    _require(cfg.tx_power_w > 0.0, "tx_power_w must be positive")
    _require(-90.0 <= cfg.gs_lat_deg <= 90.0, "gs_lat_deg out of [-90,90]")
    _require(cfg.cpu_freq_hz > 0.0, "cpu_freq_hz must be positive")
    _require(0.0 <= cfg.cpu_freq_jitter < 1.0, "cpu_freq_jitter out of [0,1)")
    _require(cfg.cycles_per_sample >= 0.0, "cycles_per_sample must be >= 0")
    _require(cfg.energy_coeff >= 0.0, "energy_coeff must be >= 0")
    _require(cfg.recluster_interval >= 1, "recluster_interval must be >= 1")
    _require(cfg.gs_interval >= 1, "gs_interval must be >= 1")
    _require(cfg.t_sk_s >= 0.0, "t_sk_s must be >= 0")
    _require(0.0 < cfg.keep_fraction <= 1.0, "keep_fraction out of (0,1]")
    _require(cfg.model_kind in ("mlp", "logistic"), "model_kind must be 'mlp' or 'logistic'")
    _require(cfg.hidden_width >= 1, "hidden_width must be >= 1")
    _require(cfg.num_classes >= 2, "num_classes must be >= 2")
    _require(cfg.num_classes <= 254, "num_classes must fit the shard label byte (<= 254)")
    _require(cfg.samples_per_class >= 0, "samples_per_class must be >= 0")
    _require(cfg.blob_separation >= 0.0, "blob_separation must be >= 0")
    return cfg


def serialize_config(cfg: ExperimentConfig) -> str:
    """Render a config as parseable ``key = value`` text."""
    lines = []
    for f in fields(ExperimentConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, float):
            text = repr(value)
        else:
            text = str(value)
        lines.append(f"{f.name} = {text}")
    return "\n".join(lines) + "\n"


def load_config(path: str, overrides: Optional[Mapping[str, str]] = None) -> ExperimentConfig:
    """Read, override, and validate a config file."""
    with open(path, "r", encoding="utf-8") as fh:
        raw = parse_config(fh.read())
    if overrides:
        raw.update(overrides)
    return validate_config(config_from_mapping(raw))


# --------------------------------------------------------------------------
# Simulation records
# --------------------------------------------------------------------------

@dataclass
class ClientState:
    """One satellite client: identity, orbit slot, shard, and link/compute budget."""

    id: int
    orbit_plane: int
    phase_deg: float
    dataset: Any = None                     # learner.Shard
    local_model: Optional[np.ndarray] = None
    last_participation_round: Optional[int] = None
    completion_time_s: float = 0.0
    last_t_cmp_s: float = 0.0
    cpu_freq_hz: float = 5.0e10
    cycles_per_sample: float = 5.0e8
    bandwidth_hz: float = 2.0e7
    tx_power_w: float = 1000.0
    last_delta: Optional[np.ndarray] = None        # previous raw update; drives bit-width choice
    similarity_delta: Optional[np.ndarray] = None  # latest raw update; feeds clustering

    def __post_init__(self) -> None:
        if self.cpu_freq_hz <= 0:
            raise ValueError(f"client {self.id}: cpu_freq_hz must be positive")
        if self.bandwidth_hz <= 0:
            raise ValueError(f"client {self.id}: bandwidth_hz must be positive")
        if self.tx_power_w <= 0:
            raise ValueError(f"client {self.id}: tx_power_w must be positive")


@dataclass
class GroundStation:
    """Terrestrial node holding the only labeled shard; anchors global aggregation."""

    id: int
    lat_deg: float
    lon_deg: float
    labeled_shard: Any = None               # learner.Shard
    attached_ps_ids: set[int] = field(default_factory=set)


@dataclass
class RoundMetrics:
    """One row of the metrics CSV; see harness.METRICS_HEADER for the layout."""

    round: int
    wall_clock_s: float
    accuracy: float
    loss: float
    e_tx_j: float
    e_cmp_j: float
    bytes_up: int
    bytes_down: int
    participants: int
    skipped: int

    def csv_row(self) -> str:
        return ",".join([
            str(self.round), repr(self.wall_clock_s), repr(self.accuracy),
            repr(self.loss), repr(self.e_tx_j), repr(self.e_cmp_j),
            str(self.bytes_up), str(self.bytes_down),
            str(self.participants), str(self.skipped),
        ])
