"""The per-round state machine tying training, clustering, labeling, and
the latency model together.

Each round: schedule devices per edge, train the survivors from their
cluster's model, run the labeling phase where triggered, aggregate per
cluster, test split conditions on a cadence, refresh the shared global
model from devices still in unsplit clusters, check for cloud-level
merges, then account the round's wall-clock time. Every step is
deterministic given the run seed.
"""

from __future__ import annotations

import hashlib
import logging
import math
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .clustering import (
    ACTIVE,
    STOPPED,
    ClusterTree,
    bipartition,
    check_split_conditions,
    cosine_similarity,
    similarity_matrix,
)
from .errors import StateError
from .labeling import (
    inject,
    labeling_accuracy,
    objective_value,
    pseudo_label,
    select_best_model,
)
from .models import GradientUpdate, ModelParams, evaluate, gradient, init_params, loss, sgd_train
from .network import edge_round_time, global_round_time, rayleigh_fading, schedule_round
from .seeding import fading_seed, init_seed, training_seed

log = logging.getLogger(__name__)

# Relative stationarity thresholds used when the config leaves them unset.
RELATIVE_EPS1_FACTOR = 0.4
RELATIVE_EPS2_FACTOR = 1.6

# A device counts as fully pseudo-labeled at this pool fraction.
LABEL_DONE_FRACTION = 0.9

GLOBAL_MODEL_ID = -1


@dataclass(frozen=True)
class TrainingSpec:
    dim_in: int
    n_classes: int
    hidden: int = 0
    learning_rate: float = 0.01
    epochs: int = 5
    batch_size: int = 32


@dataclass(frozen=True)
class ClusterSpec:
    enabled: bool = True
    eps1: float | None = None
    eps2: float | None = None
    split_interval: int = 5
    gamma_merge: float = 0.9
    merge_log_only: bool = False
    use_weight_deltas: bool = False


@dataclass(frozen=True)
class LabelSpec:
    enabled: bool = True
    phi: float = 0.8
    label_interval: int = 10
    lam: float = 1.0
    inference_cycles_per_sample: float = 20.0
    candidate_scope: str = "cloud"
    # Label with the shared global model instead of specialized ones
    # (the non-clustered semi-supervised baseline).
    use_global_model: bool = False


@dataclass(frozen=True)
class TimingSpec:
    cycles_per_sample: float = 20.0
    fading: str = "off"
    time_budget_s: float = math.inf


@dataclass(frozen=True)
class RunSpec:
    rounds: int
    seed: int
    convergence_eps: float = 1e-4
    convergence_window: int = 10


@dataclass(frozen=True)
class AggregationRecord:
    """Provenance of one weighted average (weights already normalized)."""

    round_no: int
    scope: str
    target: int | None
    contributors: tuple
    weights: tuple

    def __post_init__(self):
        if any(w <= 0 for w in self.weights):
            raise ValueError("aggregation weights must be positive")
        if abs(sum(self.weights) - 1.0) > 1e-12:
            raise ValueError("aggregation weights must sum to 1")


@dataclass(frozen=True)
class MetricsRow:
    round_no: int
    duration_s: float
    cumulative_time_s: float
    acc_min: float
    acc_mean: float
    acc_max: float
    labeling_accuracy_mean: float | None
    injected_fraction: float
    clusters: int
    objective: float
    drops: int
    mean_labeling_latency_s: float


def edge_aggregate(models: list, weights: list) -> ModelParams:
    """Weighted average of flat parameter vectors, weights normalized by
    their sum. Callers pass contributors in ascending id order so the
    accumulation is bit-reproducible."""
    if not models or len(models) != len(weights):
        raise ValueError("models and weights must be nonempty and aligned")
    w = np.array([float(x) for x in weights])
    if np.any(w <= 0):
        raise ValueError("aggregation weights must be positive")
    first = models[0]
    for m in models[1:]:
        if (m.dim_in, m.dim_out, m.hidden) != (first.dim_in, first.dim_out, first.hidden):
            raise ValueError("cannot aggregate models with different shapes")
    wn = w / w.sum()
    acc = np.zeros_like(first.weights)
    for wi, m in zip(wn, models):
        acc = acc + wi * m.weights
    return first.with_weights(acc)


def cloud_aggregate(models: list, weights: list) -> ModelParams:
    """Same arithmetic as edge_aggregate, applied over edge or cluster
    contributions at the cloud tier."""
    return edge_aggregate(models, weights)


def _plain(obj):
    """Recursively convert numpy scalars/arrays for JSON-lines emission."""
    if isinstance(obj, dict):
        return {_plain(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    return obj


class Simulation:
    """Deterministic multi-round run over a fixed population of devices."""

    def __init__(
        self,
        devices: list,
        radios: list,
        edges: list,
        channel,
        training: TrainingSpec,
        clustering: ClusterSpec,
        labeling: LabelSpec,
        timing: TimingSpec,
        run_spec: RunSpec,
    ):
        if [d.device_id for d in devices] != list(range(len(devices))):
            raise ValueError("devices must be ordered by contiguous device_id from 0")
        if len(radios) != len(devices) or [r.device_id for r in radios] != [
            d.device_id for d in devices
        ]:
            raise ValueError("radios must align one-to-one with devices")
        if not edges:
            raise ValueError("at least one edge is required")
        edge_ids = [e.edge_id for e in edges]
        if len(set(edge_ids)) != len(edge_ids):
            raise ValueError("edge ids must be unique")
        unknown = {r.edge_id for r in radios} - set(edge_ids)
        if unknown:
            raise ValueError(f"radios reference unknown edges {sorted(unknown)}")
        for eid in edge_ids:
            if not any(r.edge_id == eid for r in radios):
                raise ValueError(f"edge {eid} has no devices")

        self.devices = list(devices)
        self.radios = list(radios)
        self.edges = sorted(edges, key=lambda e: e.edge_id)
        self.channel = channel
        self.training = training
        self.clustering = clustering
        self.labeling = labeling
        self.timing = timing
        self.run_spec = run_spec

        self.global_model = init_params(
            training.dim_in, training.n_classes, training.hidden,
            seed=init_seed(run_spec.seed),
        )
        self.payload_bits = self.global_model.size_bits
        self.tree = ClusterTree()
        self.node_birth: dict = {}
        for edge in self.edges:
            members = [r.device_id for r in self.radios if r.edge_id == edge.edge_id]
            root_id = self.tree.add_root(
                edge.edge_id, members,
                self.global_model.with_weights(self.global_model.weights.copy()),
            )
            self.node_birth[root_id] = 0

        self.round_no = 0
        self.cumulative_time_s = 0.0
        self.metrics: list = []
        self.events: list = []
        self.records: list = []
        self.loss_history = defaultdict(list)
        self.last_label_round: dict = {}
        self.last_selection: dict = {}
        self.last_utilities: dict = {}
        self.label_crossing = {
            d.device_id: 0.0
            for d in self.devices
            if d.injected_fraction >= LABEL_DONE_FRACTION
        }
        self.termination_reason = None

    # ------------------------------------------------------------ helpers

    def _event(self, payload: dict):
        self.events.append(_plain(payload))

    def _is_unsplit_root(self, node) -> bool:
        return node.parent is None and node.is_leaf and not self.tree.is_merge_product(node)

    def device_model(self, device_id: int) -> ModelParams:
        """The model a device currently runs: its cluster's specialized
        model, or the shared global model before its cluster ever split."""
        node = self.tree.cluster_of(device_id)
        if self._is_unsplit_root(node):
            return self.global_model
        return node.model

    def global_hash(self) -> str:
        return hashlib.sha256(
            np.ascontiguousarray(self.global_model.weights).tobytes()
        ).hexdigest()

    def _candidate_models(self, device_id: int, r: int) -> dict:
        if self.labeling.use_global_model:
            return {GLOBAL_MODEL_ID: self.global_model}
        if self.labeling.candidate_scope == "edge":
            nodes = self.tree.specialized(edge_id=self.radios[device_id].edge_id)
        else:
            nodes = self.tree.specialized()
        # A cluster's model reflects its own members' training only from the
        # second round after creation; before that it is a copy of its parent.
        return {
            n.cluster_id: n.model
            for n in nodes
            if r - self.node_birth.get(n.cluster_id, 0) >= 2
        }

    def _label_trigger(self, device_id: int, r: int) -> bool:
        dev = self.devices[device_id]
        if dev.unlabeled_remaining == 0:
            return False
        last = self.last_label_round.get(device_id)
        if last is not None and r - last < self.labeling.label_interval:
            return False
        if r < self.labeling.label_interval:
            return False
        if self.labeling.use_global_model:
            return True
        root = self.tree.root_of_edge(self.radios[device_id].edge_id)
        return not root.is_leaf

    def _similarity_gradient(self, node, device_id: int, r: int) -> GradientUpdate:
        batch = self.devices[device_id].train_batch()
        if self.clustering.use_weight_deltas:
            tr = self.training
            after = sgd_train(
                node.model, batch, tr.epochs, tr.batch_size, tr.learning_rate,
                training_seed(self.run_spec.seed, r, device_id),
            )
            return GradientUpdate(node.model.weights - after.weights, len(batch))
        return gradient(node.model, batch)

    # ------------------------------------------------------------ round

    def run_round(self) -> MetricsRow:
        if self.termination_reason is not None:
            raise StateError("run already terminated")
        r = self.round_no + 1
        tr = self.training

        fading = None
        if self.timing.fading == "rayleigh":
            rng = np.random.default_rng(fading_seed(self.run_spec.seed, r))
            fading = rayleigh_fading([d.device_id for d in self.devices], rng)

        leaf_at_training = {
            d.device_id: self.tree.cluster_of(d.device_id) for d in self.devices
        }

        # (1) scheduling per edge
        schedules = {}
        for edge in self.edges:
            eligible = [
                radio
                for radio in self.radios
                if radio.edge_id == edge.edge_id
                and leaf_at_training[radio.device_id].status == ACTIVE
            ]
            workloads = {radio.device_id: self.devices[radio.device_id].labeled_size
                         for radio in eligible}
            entry = schedule_round(
                edge, eligible, workloads, self.channel, self.payload_bits,
                tr.epochs, self.timing.cycles_per_sample, fading,
            )
            schedules[edge.edge_id] = entry
            self._event({
                "type": "schedule", "round": r, "edge": edge.edge_id,
                "selected": list(entry.selected), "dropped": list(entry.dropped),
                "deadline_s": entry.deadline_s, "beta": entry.beta,
                "est_times": {d: entry.est_times[d] for d in sorted(entry.est_times)},
            })
            if entry.selected and entry.idle:
                log.warning("edge %d: every scheduled device missed the deadline in round %d",
                            edge.edge_id, r)

        # (2) local training from the cluster's current model
        trained = {}
        for edge in self.edges:
            for k in schedules[edge.edge_id].participating:
                node = leaf_at_training[k]
                start = self.global_model if self._is_unsplit_root(node) else node.model
                trained[k] = sgd_train(
                    start, self.devices[k].train_batch(), tr.epochs, tr.batch_size,
                    tr.learning_rate, training_seed(self.run_spec.seed, r, k),
                )

        # (3) labeling phase
        if self.labeling.enabled:
            self._labeling_phase(r)

        # (4) aggregation per cluster (for an unsplit root this is the edge
        # aggregate; injected samples already count toward the weights)
        by_cluster = defaultdict(list)
        for k in sorted(trained):
            by_cluster[leaf_at_training[k].cluster_id].append(k)
        pre_split = [k for k in sorted(trained) if self._is_unsplit_root(leaf_at_training[k])]

        for cid in sorted(by_cluster):
            node = self.tree.node(cid)
            members = by_cluster[cid]
            weights = [self.devices[k].labeled_size for k in members]
            node.model = edge_aggregate([trained[k] for k in members], weights)
            wn = np.array(weights, dtype=float)
            wn = wn / wn.sum()
            scope = "edge" if self._is_unsplit_root(node) else "cluster"
            rec = AggregationRecord(r, scope, cid, tuple(members), tuple(float(x) for x in wn))
            self.records.append(rec)
            self._event({
                "type": "aggregate", "round": r, "scope": scope, "cluster": cid,
                "contributors": list(members), "weights": list(rec.weights),
            })
        for node in self.tree.active_leaves():
            if node.members and node.cluster_id not in by_cluster:
                log.warning("cluster %d: no device update arrived in round %d",
                            node.cluster_id, r)

        # (5) split checks on a cadence
        if self.clustering.enabled and r % self.clustering.split_interval == 0:
            self._split_checks(r)

        # (6) cloud refresh of the shared model from unsplit-cluster devices
        if pre_split:
            weights = [self.devices[k].labeled_size for k in pre_split]
            self.global_model = cloud_aggregate([trained[k] for k in pre_split], weights)
            wn = np.array(weights, dtype=float)
            wn = wn / wn.sum()
            rec = AggregationRecord(r, "global", None, tuple(pre_split),
                                    tuple(float(x) for x in wn))
            self.records.append(rec)
            self._event({
                "type": "aggregate", "round": r, "scope": "global", "cluster": None,
                "contributors": list(pre_split), "weights": list(rec.weights),
            })

        # (7) cloud similarity check over specialized models, on the same
        # cadence as splits so fresh clusters train before being compared
        if self.clustering.enabled and r % self.clustering.split_interval == 0:
            self._merge_check(r)

        # (8) latency accounting and metrics
        edge_times, cloud_times, idle = {}, {}, set()
        drops = 0
        for edge in self.edges:
            entry = schedules[edge.edge_id]
            t, is_idle = edge_round_time(entry, entry.est_times)
            edge_times[edge.edge_id] = t
            cloud_times[edge.edge_id] = self.payload_bits / edge.cloud_rate_bps
            if is_idle:
                idle.add(edge.edge_id)
            drops += len(entry.dropped)
        duration = global_round_time(edge_times, cloud_times, idle)
        self.cumulative_time_s += duration

        for dev in self.devices:
            k = dev.device_id
            if k not in self.label_crossing and dev.injected_fraction >= LABEL_DONE_FRACTION:
                self.label_crossing[k] = self.cumulative_time_s

        row = self._emit_metrics(r, duration, drops)
        self._event({
            "type": "round", "round": r, "duration_s": duration,
            "cumulative_time_s": self.cumulative_time_s,
            "global_hash": self.global_hash(),
            "specialized": len(self.tree.specialized()),
            "tree": self.tree.snapshot(),
        })
        self.round_no = r
        return row

    def _labeling_phase(self, r: int):
        for dev in self.devices:
            k = dev.device_id
            if not self._label_trigger(k, r):
                continue
            candidates = self._candidate_models(k, r)
            if not candidates:
                continue
            decision, scores = select_best_model(
                dev, candidates, self.labeling.phi, self.radios[k].f_hz,
                self.labeling.inference_cycles_per_sample,
            )
            self.last_label_round[k] = r
            self.last_selection[k] = decision
            self.last_utilities[k] = scores
            chosen = scores[decision.chosen_model_id]
            self._event({
                "type": "selection", "round": r, "device": k,
                "chosen_model": decision.chosen_model_id, "z": decision.z,
                "val_accuracy": chosen.val_accuracy, "coverage": chosen.coverage,
                "est_label_latency_s": chosen.est_label_latency,
            })
            idx, feats = dev.pending_features()
            batch = pseudo_label(
                candidates[decision.chosen_model_id], feats, self.labeling.phi,
                device_id=k, source_model_id=decision.chosen_model_id,
                round_no=r, pool_indices=idx,
            )
            added = inject(dev, batch)
            if added:
                self._event({
                    "type": "injection", "round": r, "device": k, "count": added,
                    "source_model": decision.chosen_model_id,
                    "mean_confidence": float(batch.confidences.mean()),
                    "pool_remaining": dev.unlabeled_remaining,
                })

    def _split_checks(self, r: int):
        for node in list(self.tree.active_leaves()):
            members = sorted(node.members)
            if not members:
                continue
            grads = {k: self._similarity_gradient(node, k, r) for k in members}
            weights = {k: self.devices[k].labeled_size for k in members}
            norms = [g.norm for g in grads.values()]
            eps1, eps2 = self.clustering.eps1, self.clustering.eps2
            if eps1 is None:
                eps1 = RELATIVE_EPS1_FACTOR * float(np.mean(norms))
            if eps2 is None:
                eps2 = RELATIVE_EPS2_FACTOR * eps1
            if eps1 <= 0 or eps2 <= 0:
                # Every member gradient vanished; the cluster is done.
                self.tree.stop(node.cluster_id)
                self._event({"type": "stop", "round": r, "cluster": node.cluster_id,
                             "agg_norm": 0.0, "max_norm": 0.0})
                continue
            res = check_split_conditions(grads, weights, eps1, eps2)
            if res.split:
                if len(members) < 2:
                    log.warning("cluster %d: split conditions met with a single member, skipping",
                                node.cluster_id)
                    continue
                if any(n == 0 for n in norms):
                    log.warning("cluster %d: zero-norm member gradient, skipping split in round %d",
                                node.cluster_id, r)
                    continue
                c1, c2 = bipartition(similarity_matrix(grads))
                children = self.tree.split(node.cluster_id, (c1, c2))
                for child in children:
                    self.node_birth[child] = r
                self._event({
                    "type": "split", "round": r, "cluster": node.cluster_id,
                    "children": list(children), "parts": [list(c1), list(c2)],
                    "agg_norm": res.agg_norm, "max_norm": res.max_norm,
                    "eps1": eps1, "eps2": eps2,
                })
            elif res.agg_norm < eps1:
                self.tree.stop(node.cluster_id)
                self._event({"type": "stop", "round": r, "cluster": node.cluster_id,
                             "agg_norm": res.agg_norm, "max_norm": res.max_norm})

    def _merge_check(self, r: int):
        spec_nodes = self.tree.specialized()
        if len(spec_nodes) <= 2:
            return
        centered = {}
        for n in spec_nodes:
            # A cluster split off this round still carries its parent's
            # exact weights; comparing it now would always re-merge it.
            if self.node_birth.get(n.cluster_id, -1) == r:
                continue
            v = n.model.weights - self.global_model.weights
            if np.linalg.norm(v) == 0:
                log.warning("cluster %d: coincides with the global model, skipping merge check",
                            n.cluster_id)
                continue
            centered[n.cluster_id] = v
        ids = sorted(centered)
        parent = {c: c for c in ids}

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        sims = {}
        for i, a in enumerate(ids):
            for b in ids[i + 1:]:
                s = cosine_similarity(centered[a], centered[b])
                sims[(a, b)] = s
                if s > self.clustering.gamma_merge:
                    parent[find(b)] = find(a)
        groups = defaultdict(list)
        for c in ids:
            groups[find(c)].append(c)
        for gid in sorted(groups):
            group = sorted(groups[gid])
            if len(group) < 2:
                continue
            nodes = [self.tree.node(c) for c in group]
            weights = [
                sum(self.devices[k].labeled_size for k in n.members) for n in nodes
            ]
            merged_model = edge_aggregate([n.model for n in nodes], weights)
            acted = not self.clustering.merge_log_only
            event = {
                "type": "merge", "round": r, "clusters": group,
                "similarities": [[a, b, sims[(a, b)]] for (a, b) in sims
                                 if a in group and b in group],
                "acted": acted,
            }
            if acted:
                new_id = self.tree.merge(group, merged_model)
                self.node_birth[new_id] = r
                if all(n.status == STOPPED for n in nodes):
                    self.tree.node(new_id).status = STOPPED
                event["merged_into"] = new_id
                wn = np.array(weights, dtype=float)
                wn = wn / wn.sum()
                self.records.append(AggregationRecord(
                    r, "merge", new_id, tuple(group), tuple(float(x) for x in wn)
                ))
            self._event(event)

    def _emit_metrics(self, r: int, duration: float, drops: int) -> MetricsRow:
        device_losses, accs = {}, []
        for dev in self.devices:
            model = self.device_model(dev.device_id)
            accs.append(evaluate(model, dev.test))
            device_losses[dev.device_id] = loss(model, dev.train_batch())

        for node in self.tree.active_leaves():
            vals = [device_losses[k] for k in node.members]
            self.loss_history[node.cluster_id].append(float(np.mean(vals)))

        lab = [labeling_accuracy(d) for d in self.devices]
        present = [v for v in lab if v is not None]
        lab_mean = float(np.mean(present)) if present else None
        injected = float(np.mean([d.injected_fraction for d in self.devices]))
        objective = objective_value(
            device_losses, self.last_selection, self.last_utilities, self.labeling.lam
        )
        latency = float(np.mean([
            self.label_crossing.get(d.device_id, self.cumulative_time_s)
            for d in self.devices
        ]))
        row = MetricsRow(
            round_no=r,
            duration_s=duration,
            cumulative_time_s=self.cumulative_time_s,
            acc_min=float(np.min(accs)),
            acc_mean=float(np.mean(accs)),
            acc_max=float(np.max(accs)),
            labeling_accuracy_mean=lab_mean,
            injected_fraction=injected,
            clusters=len(self.tree.specialized()),
            objective=float(objective),
            drops=drops,
            mean_labeling_latency_s=latency,
        )
        self.metrics.append(row)
        return row

    # ------------------------------------------------------------ run

    def check_termination(self):
        """Reason string when the run should stop after the current round."""
        if self.cumulative_time_s >= self.timing.time_budget_s:
            return "time budget"
        active = self.tree.active_leaves()
        if not active:
            return "convergence"
        window = self.run_spec.convergence_window
        converged = True
        for node in active:
            hist = self.loss_history[node.cluster_id]
            if len(hist) < window + 1:
                converged = False
                break
            base = hist[-(window + 1)]
            if (base - hist[-1]) / max(abs(base), 1e-12) >= self.run_spec.convergence_eps:
                converged = False
                break
        if converged:
            return "convergence"
        if self.round_no >= self.run_spec.rounds:
            return "round budget"
        return None

    def run(self) -> str:
        """Round loop until a budget or convergence fires; returns the reason."""
        if self.termination_reason is not None:
            raise StateError("run already terminated")
        if self.run_spec.rounds == 0:
            self.termination_reason = "round budget"
        while self.termination_reason is None:
            self.run_round()
            self.termination_reason = self.check_termination()
        self._event({
            "type": "termination", "round": self.round_no,
            "reason": self.termination_reason,
            "cumulative_time_s": self.cumulative_time_s,
        })
        return self.termination_reason
