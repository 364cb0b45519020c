"""Experiment harness: synthetic data, non-IID partitioning, run loop, artifacts.

A run is reproducible byte-for-byte: the dataset, partition, geometry,
training, and codec all draw from named streams of the experiment seed,
and every emitted file is written atomically (temp file + rename) with
``repr``-formatted floats so equal runs produce equal bytes.
"""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import aggregation, clustering, constellation, learner
from .domain import (STREAM_CLIENT_INIT, STREAM_CLUSTERING, STREAM_CODEC,
                     STREAM_GS, STREAM_MODEL_INIT, STREAM_PARTITION,
                     STREAM_SYNTH, ClientState, ConfigError, ExperimentConfig,
                     GroundStation, RoundMetrics, SeededRng, client_stream,
                     load_config)

METRICS_HEADER = ("round,wall_clock_s,accuracy,loss,e_tx_j,e_cmp_j,"
                  "bytes_up,bytes_down,participants,skipped")
EVAL_FRACTION = 0.1
GS_LABELED_FRACTION = 0.1
DESIGNATED_CLASS_SHARE = 0.2

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3


def synth_dataset(num_classes: int, per_class: int, rng: SeededRng, *,
                  height: int = 8, width: int = 8, channels: int = 1,
                  separation: float = 0.6) -> learner.Shard:
    """Class-conditional Gaussian blobs over the feature grid.

    Each class gets a mean pattern drawn N(0, separation^2) per feature;
    samples add unit Gaussian noise.  Rows are shuffled so shards drawn
    from prefixes are class-balanced in expectation.
    """
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    d = height * width * channels
    means = rng.gen.normal(0.0, separation, size=(num_classes, d))
    features = np.repeat(means, per_class, axis=0) \
        + rng.gen.standard_normal((num_classes * per_class, d))
    labels = np.repeat(np.arange(num_classes, dtype=np.int16), per_class)
    perm = rng.gen.permutation(num_classes * per_class)
    return learner.Shard(features=features[perm], labels=labels[perm],
                         height=height, width=width, channels=channels,
                         num_classes=num_classes)


def split_stratified(shard: learner.Shard, fraction: float,
                     rng: SeededRng) -> tuple[learner.Shard, learner.Shard]:
    """Split off a class-stratified fraction; returns (taken, rest)."""
    take_rows: list[np.ndarray] = []
    rest_rows: list[np.ndarray] = []
    for c in range(shard.num_classes):
        idx = np.flatnonzero(shard.labels == c)
        idx = idx[rng.gen.permutation(idx.size)]
        k = int(round(fraction * idx.size))
        take_rows.append(idx[:k])
        rest_rows.append(idx[k:])
    take = np.sort(np.concatenate(take_rows))
    rest = np.sort(np.concatenate(rest_rows))

    def sub(rows: np.ndarray) -> learner.Shard:
        return learner.Shard(features=shard.features[rows].copy(),
                             labels=shard.labels[rows].copy(),
                             height=shard.height, width=shard.width,
                             channels=shard.channels,
                             num_classes=shard.num_classes)

    return sub(take), sub(rest)


@dataclass(frozen=True)
class PartitionReport:
    """Ground truth kept aside for audits; never visible to clients."""

    designated_class: list[int]
    true_labels: list[np.ndarray]


def partition_noniid(pool: learner.Shard, num_clients: int, rng: SeededRng,
                     labeled_fraction: float = GS_LABELED_FRACTION,
                     designated_share: float = DESIGNATED_CLASS_SHARE,
                     ) -> tuple[learner.Shard, list[learner.Shard], PartitionReport]:
    """Reserve a stratified labeled shard for the ground station, then deal
    the rest to clients with a class skew.

    Each client's designated class (round-robin over classes) supplies
    ``designated_share`` of its shard; the remainder is drawn uniformly
    over the other classes.  Client shards have their labels stripped.
    """
    if len(pool) < num_clients * 10:
        raise ValueError(f"dataset too small: {len(pool)} samples for "
                         f"{num_clients} clients")
    gs_shard, rest = split_stratified(pool, labeled_fraction, rng)
    num_classes = pool.num_classes
    pools = {c: list(rng.gen.permutation(np.flatnonzero(rest.labels == c)))
             for c in range(num_classes)}
    n = len(rest)
    base, extra = divmod(n, num_clients)
    shards: list[learner.Shard] = []
    designated: list[int] = []
    true_labels: list[np.ndarray] = []
    for i in range(num_clients):
        size = base + (1 if i < extra else 0)
        target = i % num_classes
        designated.append(target)
        rows: list[int] = []
        n_des = int(round(designated_share * size))
        while len(rows) < n_des and pools[target]:
            rows.append(int(pools[target].pop()))
        while len(rows) < size:
            others = [c for c in range(num_classes) if c != target and pools[c]]
            if others:
                c = int(others[rng.gen.integers(len(others))])
            else:
                stocked = [c for c in range(num_classes) if pools[c]]
                c = int(stocked[rng.gen.integers(len(stocked))])
            rows.append(int(pools[c].pop()))
        order = np.sort(np.asarray(rows, dtype=np.int64))
        true_labels.append(rest.labels[order].copy())
        shards.append(learner.Shard(
            features=rest.features[order].copy(),
            labels=np.full(order.size, -1, dtype=np.int16),
            height=rest.height, width=rest.width, channels=rest.channels,
            num_classes=num_classes))
    return gs_shard, shards, PartitionReport(designated_class=designated,
                                             true_labels=true_labels)


def build_data(cfg: ExperimentConfig, rng: SeededRng
               ) -> tuple[learner.Shard, learner.Shard, list[learner.Shard], PartitionReport]:
    """Synthesize and split: (eval shard, GS labeled shard, client shards, audit)."""
    synth_rng = SeededRng(cfg.seed, STREAM_SYNTH)
    full = synth_dataset(cfg.num_classes, cfg.samples_per_class, synth_rng,
                         separation=cfg.blob_separation)
    eval_shard, pool = split_stratified(full, EVAL_FRACTION, rng)
    gs_shard, client_shards, report = partition_noniid(pool, cfg.num_clients, rng)
    return eval_shard, gs_shard, client_shards, report


def _make_slots(cfg: ExperimentConfig) -> dict[int, constellation.OrbitalSlot]:
    """Spread clients over planes, evenly phased with a per-plane stagger."""
    plane_counts = [0] * cfg.num_planes
    for i in range(cfg.num_clients):
        plane_counts[i % cfg.num_planes] += 1
    slots = {}
    for i in range(cfg.num_clients):
        plane = i % cfg.num_planes
        slot_in_plane = i // cfg.num_planes
        count = plane_counts[plane]
        phase = (360.0 * (slot_in_plane + plane / cfg.num_planes) / count) % 360.0
        slots[i] = constellation.OrbitalSlot(
            plane_raan_deg=360.0 * plane / cfg.num_planes,
            phase_deg=phase, altitude_km=cfg.altitude_km,
            inclination_deg=cfg.inclination_deg)
    return slots


def build_state(cfg: ExperimentConfig) -> aggregation.SimulationState:
    """Assemble data, geometry, and the warm-up clustering pass.

    The warm-up runs the supervised phase once, has every client execute
    one unfiltered pseudo-label epoch from that common model, and seeds
    the first cluster assignment from those updates.  It is setup, not a
    round: nothing is aggregated and nothing is metered.
    """
    partition_rng = SeededRng(cfg.seed, STREAM_PARTITION)
    eval_shard, gs_shard, client_shards, _ = build_data(cfg, partition_rng)

    model = learner.build_model(
        n_features=eval_shard.n_features, num_classes=cfg.num_classes,
        kind=cfg.model_kind, hidden_width=cfg.hidden_width)
    w0 = model.init_params(SeededRng(cfg.seed, STREAM_MODEL_INIT))

    init_rng = SeededRng(cfg.seed, STREAM_CLIENT_INIT)
    jitter = init_rng.gen.uniform(-cfg.cpu_freq_jitter, cfg.cpu_freq_jitter,
                                  size=cfg.num_clients)
    clients = [
        ClientState(id=i, orbit_plane=i % cfg.num_planes,
                    phase_deg=0.0, dataset=client_shards[i],
                    cpu_freq_hz=float(cfg.cpu_freq_hz * (1.0 + jitter[i])),
                    cycles_per_sample=cfg.cycles_per_sample,
                    bandwidth_hz=cfg.bandwidth_hz,
                    tx_power_w=cfg.tx_power_w)
        for i in range(cfg.num_clients)
    ]
    slots = _make_slots(cfg)
    for c in clients:
        c.phase_deg = slots[c.id].phase_deg
    gs = GroundStation(id=0, lat_deg=cfg.gs_lat_deg, lon_deg=cfg.gs_lon_deg,
                       labeled_shard=gs_shard)

    gs_rng = SeededRng(cfg.seed, STREAM_GS)
    client_rngs = {i: client_stream(cfg.seed, i) for i in range(cfg.num_clients)}

    # warm-up: supervised phase, one pseudo-label epoch per client
    w_warm, _, _ = learner.supervised_train(
        model, gs_shard, w0, gs_rng, epochs=max(1, cfg.local_epochs),
        lr=cfg.learning_rate, momentum=cfg.momentum, batch_size=cfg.batch_size)
    positions = {i: constellation.propagate(slots[i], 0.0)
                 for i in range(cfg.num_clients)}
    updates = []
    for c in clients:
        delta = learner.warmup_update(model, c.dataset, w_warm,
                                      client_rngs[c.id], lr=cfg.learning_rate,
                                      momentum=cfg.momentum,
                                      batch_size=cfg.batch_size)
        c.similarity_delta = delta
        c.last_t_cmp_s = constellation.comp_time(
            2 * len(c.dataset), c.cycles_per_sample, c.cpu_freq_hz)
        updates.append(delta)
    comp_loads = {c.id: c.last_t_cmp_s for c in clients}
    cluster_rng = SeededRng(cfg.seed, STREAM_CLUSTERING)
    assignment = clustering.assign_clusters(
        updates, positions, comp_loads, cfg.num_clusters, cfg.cluster_weight,
        cluster_rng)
    gs.attached_ps_ids = set(int(p) for p in assignment.ps_ids)

    return aggregation.SimulationState(
        cfg=cfg, model=model, clients=clients, slots=slots, gs=gs,
        eval_shard=eval_shard, assignment=assignment,
        cluster_models={k: w_warm.copy() for k in range(cfg.num_clusters)},
        w_global=w_warm,
        noise_w=constellation.noise_power_w(cfg.noise_density, cfg.bandwidth_hz),
        gs_rng=gs_rng, codec_rng=SeededRng(cfg.seed, STREAM_CODEC),
        cluster_rng=cluster_rng, client_rngs=client_rngs,
        history=aggregation._fresh_history(cfg.num_clusters))


@dataclass
class RunResult:
    """Everything a finished run produced, still in memory."""

    state: aggregation.SimulationState
    records: list[aggregation.RoundRecord]

    @property
    def metrics(self) -> list[RoundMetrics]:
        return [r.metrics for r in self.records]

    def events(self) -> list[constellation.EventRow]:
        return [e for r in self.records for e in r.events]

    def wire_updates(self) -> list[bytes]:
        return [w for r in self.records for w in r.wire_updates]

    def metrics_csv(self) -> str:
        lines = [METRICS_HEADER]
        lines.extend(m.csv_row() for m in self.metrics)
        return "\n".join(lines) + "\n"

    def event_csv(self) -> str:
        lines = [constellation.EVENT_LOG_HEADER]
        lines.extend(e.csv_row() for e in self.events())
        return "\n".join(lines) + "\n"


def run_simulation(cfg: ExperimentConfig,
                   stop_at_accuracy: Optional[float] = None) -> RunResult:
    """Warm-up clustering, then the configured number of rounds."""
    state = build_state(cfg)
    records: list[aggregation.RoundRecord] = []
    for m in range(1, cfg.rounds + 1):
        record = aggregation.run_round(state, m)
        records.append(record)
        if stop_at_accuracy is not None and record.metrics.accuracy >= stop_at_accuracy:
            break
    return RunResult(state=state, records=records)


def atomic_write_text(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_artifacts(result: RunResult, out_dir: str, make_plots: bool = True) -> list[str]:
    """Write metrics CSV, event log, and plots; returns the paths written."""
    os.makedirs(out_dir, exist_ok=True)
    metrics_path = os.path.join(out_dir, "metrics.csv")
    events_path = os.path.join(out_dir, "events.csv")
    atomic_write_text(metrics_path, result.metrics_csv())
    atomic_write_text(events_path, result.event_csv())
    written = [metrics_path, events_path]
    if make_plots:
        from . import plots
        written.extend(plots.emit_plots(metrics_path, out_dir))
    return written


def run_experiment(config_path: str, out_dir: str,
                   overrides: Optional[dict[str, str]] = None,
                   stop_at_accuracy: Optional[float] = None,
                   make_plots: bool = True) -> int:
    """CLI entry: load config, simulate, emit artifacts.

    Exit codes: 0 ok, 2 configuration error, 3 I/O error.
    """
    try:
        cfg = load_config(config_path, overrides)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        result = run_simulation(cfg, stop_at_accuracy=stop_at_accuracy)
        write_artifacts(result, out_dir, make_plots=make_plots)
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK
