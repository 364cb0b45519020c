"""Participant selection, staleness-weighted aggregation, and the round pipeline.

A round runs: ground-station supervised phase and global broadcast (on its
cadence), per-cluster semi-supervised client training, compression and
upload, selection of the fastest fraction of finishers per cluster,
staleness-weighted intra-cluster aggregation, ground-station aggregation
(on its cadence), then time/energy accounting.  All reductions run in
ascending id order so the outcome is independent of how client work is
scheduled.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from . import clustering, compression, constellation, learner
from .domain import (ClientState, ExperimentConfig, GroundStation,
                     RoundMetrics, SeededRng, ensure_finite)

HISTORY_WINDOW_ROUNDS = 5  # completion-time window for the adaptive threshold


@dataclass(frozen=True)
class ParticipantSet:
    """The clients whose updates enter one cluster's aggregation this round."""

    round: int
    cluster: int
    client_ids: tuple[int, ...]
    staleness: dict[int, int]
    threshold_s: float


def staleness_weight(phi: float) -> float:
    """Inverse-staleness weight 1/phi; raw values below 1 clamp to 1."""
    return 1.0 / max(1.0, float(phi))


def select_participants(completion_times: Mapping[int, float],
                        cluster_size: int, epsilon: float,
                        history: Sequence[float]) -> tuple[list[int], float]:
    """Pick the fastest ``floor(epsilon * cluster_size)`` finishers (at least one).

    Ties at the cutoff break to the lower client id.  The returned
    threshold is the epsilon-quantile of completion times pooled over the
    recent window plus the current round (current round only when there is
    no history yet); it tracks what the fastest fraction costs.
    """
    if not completion_times:
        raise ValueError("no clients finished in this cluster")
    n_target = max(1, math.floor(epsilon * cluster_size))
    order = sorted(completion_times.items(), key=lambda kv: (kv[1], kv[0]))
    selected = sorted(cid for cid, _ in order[:n_target])
    pool = list(history)
    pool.extend(completion_times[i] for i in sorted(completion_times))
    threshold = float(np.quantile(np.asarray(pool, dtype=np.float64), epsilon))
    return selected, threshold


def weighted_update_sum(participant_ids: Sequence[int],
                        updates: Mapping[int, np.ndarray],
                        data_sizes: Mapping[int, int],
                        staleness: Mapping[int, int],
                        normalize: bool = False) -> np.ndarray:
    """The aggregation increment: sum of (|D_i|/|D_m|) * (1/phi_i) * update_i.

    Summation runs in ascending client id.  With ``normalize`` the
    coefficients are rescaled to sum to one (ablation only; the stock rule
    lets stale rounds damp the step).
    """
    ids = sorted(int(i) for i in participant_ids)
    if not ids:
        raise ValueError("empty participant set")
    d_m = sum(int(data_sizes[i]) for i in ids)
    total = np.zeros_like(updates[ids[0]])
    coeff_sum = 0.0
    for i in ids:
        coeff = (data_sizes[i] / d_m) * staleness_weight(staleness[i])
        coeff_sum += coeff
        total = total + coeff * updates[i]
    if normalize and coeff_sum > 0.0:
        total = total / coeff_sum
    return total


def intra_cluster_aggregate(w_k: np.ndarray,
                            participant_ids: Sequence[int],
                            updates: Mapping[int, np.ndarray],
                            data_sizes: Mapping[int, int],
                            staleness: Mapping[int, int],
                            normalize: bool = False) -> np.ndarray:
    """Apply the staleness-weighted participant updates to the cluster model."""
    return w_k + weighted_update_sum(participant_ids, updates, data_sizes,
                                     staleness, normalize)


def gs_aggregate(cluster_models: Mapping[int, np.ndarray],
                 cluster_data_sizes: Mapping[int, int]) -> np.ndarray:
    """Data-size-weighted average of cluster models, ascending cluster index."""
    keys = sorted(cluster_models)
    if not keys:
        raise ValueError("no cluster models to aggregate")
    total_data = sum(int(cluster_data_sizes[k]) for k in keys)
    if total_data <= 0:
        raise ValueError("total data size must be positive")
    out = np.zeros_like(cluster_models[keys[0]])
    for k in keys:
        out = out + (cluster_data_sizes[k] / total_data) * cluster_models[k]
    return out


# --------------------------------------------------------------------------
# Round orchestration
# --------------------------------------------------------------------------

@dataclass
class SimulationState:
    """Everything a round needs; fully determined by the experiment config."""

    cfg: ExperimentConfig
    model: learner.MlpClassifier
    clients: list[ClientState]
    slots: dict[int, constellation.OrbitalSlot]
    gs: GroundStation
    eval_shard: learner.Shard
    assignment: clustering.ClusterAssignment
    cluster_models: dict[int, np.ndarray]
    w_global: np.ndarray
    noise_w: float
    gs_rng: SeededRng
    codec_rng: SeededRng
    cluster_rng: SeededRng
    client_rngs: dict[int, SeededRng]
    sim_time_s: float = 0.0
    history: dict[int, deque] = field(default_factory=dict)

    def positions(self) -> dict[int, np.ndarray]:
        return {c.id: constellation.propagate(self.slots[c.id], self.sim_time_s)
                for c in self.clients}

    def cluster_data_sizes(self) -> dict[int, int]:
        sizes = {}
        for k in range(self.assignment.num_clusters):
            sizes[k] = int(sum(len(self.clients[i].dataset)
                               for i in self.assignment.members(k)))
        return sizes

    def global_view(self) -> np.ndarray:
        """Data-weighted average of the current cluster models."""
        return gs_aggregate(self.cluster_models, self.cluster_data_sizes())


@dataclass
class RoundRecord:
    metrics: RoundMetrics
    events: list[constellation.EventRow]
    time_report: constellation.TimeReport
    energy: constellation.EnergyReport
    participant_sets: dict[int, ParticipantSet]
    wire_updates: list[bytes]


def _fresh_history(num_clusters: int) -> dict[int, deque]:
    return {k: deque(maxlen=HISTORY_WINDOW_ROUNDS - 1) for k in range(num_clusters)}


def recluster(state: SimulationState) -> None:
    """Re-derive clusters and parameter servers from the latest updates and positions."""
    cfg = state.cfg
    updates = [state.clients[i].similarity_delta for i in range(len(state.clients))]
    positions = state.positions()
    comp_loads = {c.id: c.last_t_cmp_s for c in state.clients}
    seed_model = state.global_view()
    state.assignment = clustering.assign_clusters(
        updates, positions, comp_loads, cfg.num_clusters, cfg.cluster_weight,
        state.cluster_rng)
    state.cluster_models = {k: seed_model.copy()
                            for k in range(cfg.num_clusters)}
    state.history = _fresh_history(cfg.num_clusters)
    state.gs.attached_ps_ids = set(int(p) for p in state.assignment.ps_ids)


def _broadcast_delay(state: SimulationState, positions: Mapping[int, np.ndarray],
                     cluster: int, payload_bits: float) -> float:
    """Broadcast time from the cluster's PS to its farthest member."""
    ps_id = int(state.assignment.ps_ids[cluster])
    ps = state.clients[ps_id]
    members = state.assignment.members(cluster)
    max_dist = max(float(np.linalg.norm(positions[int(i)] - positions[ps_id]))
                   for i in members)
    gain = constellation.free_space_gain(max_dist, state.cfg.carrier_hz)
    rate = constellation.link_rate(ps.bandwidth_hz, ps.tx_power_w, gain,
                                   state.noise_w)
    return constellation.comm_time(payload_bits, rate)


def run_round(state: SimulationState, m: int) -> RoundRecord:
    """Execute FL round ``m`` (1-based) and return its full record."""
    cfg = state.cfg
    model = state.model
    dense_bits = model.param_count * 32
    bytes_down = 0

    if m > 1 and (m - 1) % cfg.recluster_interval == 0:
        recluster(state)

    # supervised phase at the ground station, then global broadcast to PSs
    if (m - 1) % cfg.gs_interval == 0:
        state.w_global, _, _ = learner.supervised_train(
            model, state.gs.labeled_shard, state.w_global, state.gs_rng,
            epochs=cfg.local_epochs, lr=cfg.learning_rate,
            momentum=cfg.momentum, batch_size=cfg.batch_size)
        for k in sorted(state.cluster_models):
            state.cluster_models[k] = state.w_global.copy()
        bytes_down += cfg.num_clusters * (dense_bits // 8)

    positions = state.positions()
    num_clusters = state.assignment.num_clusters
    labels = state.assignment.labels

    t_broc = {k: _broadcast_delay(state, positions, k, dense_bits)
              for k in range(num_clusters)}
    bytes_down += num_clusters * (dense_bits // 8)

    # local training; clients with no line of sight to their PS skip outright
    results: dict[int, Optional[learner.LocalTrainResult]] = {}
    for client in state.clients:
        k = int(labels[client.id])
        ps_id = int(state.assignment.ps_ids[k])
        if client.id != ps_id and not constellation.has_line_of_sight(
                positions[client.id], positions[ps_id]):
            results[client.id] = None
            continue
        client.local_model = state.cluster_models[k].copy()
        results[client.id] = learner.local_train(
            model, client.dataset, client.local_model,
            state.client_rngs[client.id], epochs=cfg.local_epochs,
            lr=cfg.learning_rate, momentum=cfg.momentum, tau=cfg.confidence,
            mu=cfg.beta, loss_weight=cfg.loss_weight,
            batch_size=cfg.batch_size)

    # compression and upload costs, ascending id
    t_cmp: dict[int, float] = {}
    t_com: dict[int, float] = {}
    rates: dict[int, float] = {}
    payload_bits: dict[int, int] = {}
    decoded: dict[int, np.ndarray] = {}
    wire_updates: list[bytes] = []
    completion: dict[int, dict[int, float]] = {k: {} for k in range(num_clusters)}
    skipped = 0
    k_keep = max(1, int(cfg.keep_fraction * model.param_count))

    for client in state.clients:
        cid = client.id
        res = results[cid]
        if res is None:  # no visible link: never received the model
            skipped += 1
            continue
        t_cmp[cid] = constellation.comp_time(
            res.samples_processed, client.cycles_per_sample, client.cpu_freq_hz)
        client.last_t_cmp_s = t_cmp[cid]
        if res.skipped:
            skipped += 1
            continue
        delta = res.delta
        if cfg.compression_enabled:
            prev = client.last_delta if client.last_delta is not None \
                else np.zeros_like(delta)
            cu = compression.compress_update(delta, prev, k_keep,
                                             cfg.gradient_threshold,
                                             state.codec_rng,
                                             client_id=cid, round_index=m)
            wire = compression.encode_wire(cu)
            decoded[cid] = compression.decode(cu)
            wire_updates.append(wire)
            payload_bits[cid] = len(wire) * 8
        else:
            decoded[cid] = delta
            payload_bits[cid] = dense_bits
        client.last_delta = delta
        client.similarity_delta = delta
        k = int(labels[cid])
        ps_id = int(state.assignment.ps_ids[k])
        dist = float(np.linalg.norm(positions[cid] - positions[ps_id]))
        gain = constellation.free_space_gain(dist, cfg.carrier_hz)
        rates[cid] = constellation.link_rate(client.bandwidth_hz,
                                             client.tx_power_w, gain,
                                             state.noise_w)
        t_com[cid] = constellation.comm_time(payload_bits[cid], rates[cid])
        completion[k][cid] = t_cmp[cid] + t_com[cid]
        client.completion_time_s = completion[k][cid]

    # staleness-weighted aggregation per cluster
    participant_sets: dict[int, ParticipantSet] = {}
    per_cluster_times: dict[int, dict[int, float]] = {}
    data_sizes = {c.id: len(c.dataset) for c in state.clients}
    for k in range(num_clusters):
        finishers = completion[k]
        if not finishers:
            continue
        cluster_size = int(state.assignment.members(k).size)
        selected, threshold = select_participants(
            finishers, cluster_size, cfg.selection_rate,
            [t for times in state.history[k] for t in times])
        staleness = {}
        for i in selected:
            last = state.clients[i].last_participation_round
            staleness[i] = 1 if last is None else max(1, m - last)
        state.cluster_models[k] = intra_cluster_aggregate(
            state.cluster_models[k], selected, decoded, data_sizes,
            staleness, normalize=cfg.normalize_weights)
        ensure_finite(state.cluster_models[k], f"cluster {k} model")
        for i in selected:
            state.clients[i].last_participation_round = m
        participant_sets[k] = ParticipantSet(
            round=m, cluster=k, client_ids=tuple(selected),
            staleness=staleness, threshold_s=threshold)
        per_cluster_times[k] = {i: finishers[i] for i in selected}
        state.history[k].append([finishers[i] for i in sorted(finishers)])

    # ground-station aggregation on its cadence; metrics always report the
    # data-weighted global view
    w_view = state.global_view()
    if m % cfg.gs_interval == 0:
        state.w_global = w_view.copy()

    time_report = constellation.round_time(per_cluster_times, cfg.t_sk_s, t_broc)
    cpu = {c.id: c.cpu_freq_hz for c in state.clients}
    power = {c.id: c.tx_power_w for c in state.clients}
    energy = constellation.energy_report(t_cmp, cpu, payload_bits, rates,
                                         power, cfg.energy_coeff)
    state.sim_time_s += time_report.total_s

    events = []
    selected_ids = {i for ps in participant_sets.values() for i in ps.client_ids}
    for client in state.clients:
        cid = client.id
        cmp_s = t_cmp.get(cid, 0.0)
        bits = payload_bits.get(cid, 0)
        e_tx = power[cid] * (bits / rates[cid]) if cid in payload_bits else 0.0
        e_cmp = cfg.energy_coeff * cpu[cid] ** 3 * cmp_s
        events.append(constellation.EventRow(
            round=m, client_id=cid, t_cmp_s=cmp_s,
            t_com_s=t_com.get(cid, 0.0), bits_up=bits, e_tx_j=e_tx,
            e_cmp_j=e_cmp, participated=cid in selected_ids))

    accuracy, loss = learner.evaluate(model, w_view, state.eval_shard)
    metrics = RoundMetrics(
        round=m, wall_clock_s=time_report.total_s, accuracy=accuracy,
        loss=loss, e_tx_j=energy.e_tx_j, e_cmp_j=energy.e_cmp_j,
        bytes_up=sum(payload_bits[i] // 8 for i in sorted(payload_bits)),
        bytes_down=bytes_down,
        participants=sum(len(ps.client_ids) for ps in participant_sets.values()),
        skipped=skipped)
    return RoundRecord(metrics=metrics, events=events, time_report=time_report,
                       energy=energy, participant_sets=participant_sets,
                       wire_updates=wire_updates)
