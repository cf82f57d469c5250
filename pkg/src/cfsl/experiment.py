"""Experiment driver: builds a population from a config, runs it, and
writes metrics/event artifacts.

All artifacts are deterministic for a given config and seed: CSV text is
assembled in memory with fixed column order and repr() floats, JSON lines
use sorted keys, and files land via temp-file-plus-rename so readers
never see partial output. Wall-clock time is logged but kept out of
every artifact.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
import os
import time
from dataclasses import dataclass

import numpy as np

from .config import ExperimentConfig
from .data import (
    DeviceDataset,
    LabeledBatch,
    load_csv_dataset,
    make_task_universe,
    partition_devices,
)
from .errors import ConfigError
from .network import ChannelModel, EdgeConfig, db_to_linear, sample_radios
from .orchestrator import (
    ClusterSpec,
    LabelSpec,
    RunSpec,
    Simulation,
    TimingSpec,
    TrainingSpec,
)
from .seeding import DATA_STREAM, sweep_seed

log = logging.getLogger(__name__)

# Frozen metrics schema. Downstream plot tooling keys on these names;
# only ever append.
METRIC_COLUMNS = (
    "baseline",
    "seed",
    "labeled_fraction",
    "phi",
    "round",
    "cumulative_time_s",
    "acc_min",
    "acc_mean",
    "acc_max",
    "labeling_accuracy_mean",
    "injected_fraction",
    "clusters",
    "objective",
    "drops",
    "mean_labeling_latency_s",
)

SWEEP_AXES = ("labeled_fraction", "phi", "seed")


@dataclass
class RunResult:
    baseline: str
    seed: int
    out_dir: str
    metrics_path: str
    events_path: str
    rows: list
    reason: str
    sim: Simulation


def _variant(cfg: ExperimentConfig):
    """Effective knobs for the configured baseline.

    cfsl runs as configured. The two cfl variants disable self-labeling
    (fully-labeled additionally lifts the labeled fraction to 1); the two
    hfl variants disable cluster splitting, with hfl-ssl labeling from
    the shared global model instead of specialized ones.
    """
    b = cfg.run.baseline
    labeled_fraction = cfg.data.labeled_fraction
    clustering_on = cfg.clustering.enabled
    ssl_on = cfg.ssl.enabled
    use_global = False
    if b == "cfl-fully-labeled":
        labeled_fraction = 1.0
        ssl_on = False
    elif b == "cfl-labeled-only":
        ssl_on = False
    elif b == "hfl-ssl":
        clustering_on = False
        use_global = True
    elif b == "hfl-labeled-only":
        clustering_on = False
        ssl_on = False
    return labeled_fraction, clustering_on, ssl_on, use_global


def _edge_assignment(n_devices: int, n_edges: int, scheme: str) -> list:
    if scheme == "round-robin":
        return [k % n_edges for k in range(n_devices)]
    # blocks: contiguous device ranges, remainder spread over the first edges
    base, rem = divmod(n_devices, n_edges)
    out = []
    for n in range(n_edges):
        out.extend([n] * (base + (1 if n < rem else 0)))
    return out


def _csv_devices(cfg: ExperimentConfig, data_seed_val: int) -> list:
    """Deal CSV rows round-robin across devices.

    External data has no per-device draw to replicate, so labeled and
    unlabeled rows are dealt in file order. Ground truth of unlabeled
    rows is unknown (-1), which makes labeling accuracy undefined, and
    each device's holdout doubles as its test set.
    """
    d = cfg.data
    labeled, unlabeled = load_csv_dataset(d.csv_path, d.features, d.classes)
    n_devices = cfg.topology.devices
    if len(labeled) < n_devices:
        raise ConfigError(
            "data.csv_path",
            f"{len(labeled)} labeled rows cannot cover {n_devices} devices",
        )
    whitelist = tuple(range(d.classes))
    devices = []
    for k in range(n_devices):
        lab = LabeledBatch(labeled.features[k::n_devices], labeled.labels[k::n_devices])
        pool = unlabeled[k::n_devices]
        rng = np.random.default_rng(
            np.random.SeedSequence([int(data_seed_val), DATA_STREAM, 2, k])
        )
        n_hold = int(round(d.holdout_fraction * len(lab)))
        holdout = np.sort(rng.choice(len(lab), size=n_hold, replace=False))
        test = lab.subset(holdout) if n_hold else lab
        devices.append(
            DeviceDataset(
                device_id=k,
                labeled=lab,
                unlabeled_features=pool,
                hidden_truth=np.full(pool.shape[0], -1, dtype=np.int64),
                distribution_id=-1,
                class_whitelist=whitelist,
                holdout_indices=holdout,
                test=test,
            )
        )
    return devices


def build_simulation(cfg: ExperimentConfig) -> Simulation:
    """Materialize the full population and specs for one run."""
    labeled_fraction, clustering_on, ssl_on, use_global = _variant(cfg)
    topo, d, m, net = cfg.topology, cfg.data, cfg.model, cfg.network
    data_seed_val = d.seed if d.seed is not None else cfg.run.seed

    if d.mode == "csv":
        devices = _csv_devices(cfg, data_seed_val)
    else:
        universe = make_task_universe(
            d.distributions,
            d.classes,
            d.features,
            mode=d.mode,
            seed=data_seed_val,
            separation=d.separation,
            noise_scale=d.noise_scale,
        )
        devices = partition_devices(
            universe,
            topo.devices,
            d.samples_per_device,
            labeled_fraction,
            max_classes=d.max_classes_per_device,
            distribution_assignment=d.distribution_assignment,
            seed=data_seed_val,
            holdout_fraction=d.holdout_fraction,
            test_samples=d.test_samples_per_device,
        )

    edge_of = _edge_assignment(topo.devices, topo.edges, topo.edge_assignment)
    radios = sample_radios(
        edge_of,
        cfg.run.seed,
        cpu_min_hz=net.cpu_min_hz,
        cpu_max_hz=net.cpu_max_hz,
        power_min_dbm=net.power_min_dbm,
        power_max_dbm=net.power_max_dbm,
        distance_min_m=net.distance_min_m,
        distance_max_m=net.distance_max_m,
    )
    edges = []
    for n in range(topo.edges):
        members = edge_of.count(n)
        # auto subchannels: half the edge's devices, rounded up
        q = net.subchannels if net.subchannels is not None else math.ceil(members / 2)
        edges.append(
            EdgeConfig(
                edge_id=n,
                bandwidth_hz=net.bandwidth_hz,
                subchannels=q,
                cloud_rate_bps=net.cloud_rate_bps,
                deadline_policy=net.deadline_policy,
                deadline_kappa=net.deadline_kappa,
                deadline_s=net.deadline_s,
            )
        )
    channel = ChannelModel(db_to_linear(net.ref_gain_db), net.ref_distance_m, net.noise_w)

    return Simulation(
        devices=devices,
        radios=radios,
        edges=edges,
        channel=channel,
        training=TrainingSpec(
            dim_in=d.features,
            n_classes=d.classes,
            hidden=m.hidden,
            learning_rate=m.learning_rate,
            epochs=m.epochs,
            batch_size=m.batch_size,
        ),
        clustering=ClusterSpec(
            enabled=clustering_on,
            eps1=cfg.clustering.eps1,
            eps2=cfg.clustering.eps2,
            split_interval=cfg.clustering.split_interval,
            gamma_merge=cfg.clustering.gamma_merge,
            merge_log_only=cfg.clustering.merge_log_only,
            use_weight_deltas=cfg.clustering.use_weight_deltas,
        ),
        labeling=LabelSpec(
            enabled=ssl_on,
            phi=cfg.ssl.phi,
            label_interval=cfg.ssl.label_interval,
            lam=cfg.ssl.lam,
            inference_cycles_per_sample=cfg.ssl.inference_cycles_per_sample,
            candidate_scope=cfg.ssl.candidate_scope,
            use_global_model=use_global,
        ),
        timing=TimingSpec(
            cycles_per_sample=net.cycles_per_sample,
            fading=net.fading,
            time_budget_s=net.time_budget_s,
        ),
        run_spec=RunSpec(
            rounds=cfg.run.rounds,
            seed=cfg.run.seed,
            convergence_eps=cfg.run.convergence_eps,
            convergence_window=cfg.run.convergence_window,
        ),
    )


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _csv_text(columns, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row[c]) for c in columns])
    return buf.getvalue()


def _atomic_write(path: str, text: str):
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _json_safe(obj):
    """Strict-JSON view: infinities become the string "inf"."""
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, float) and math.isinf(obj):
        return "inf" if obj > 0 else "-inf"
    return obj


def metrics_rows(cfg: ExperimentConfig, sim: Simulation) -> list:
    labeled_fraction, _, _, _ = _variant(cfg)
    rows = []
    for m in sim.metrics:
        rows.append(
            {
                "baseline": cfg.run.baseline,
                "seed": cfg.run.seed,
                "labeled_fraction": float(labeled_fraction),
                "phi": float(cfg.ssl.phi),
                "round": m.round_no,
                "cumulative_time_s": m.cumulative_time_s,
                "acc_min": m.acc_min,
                "acc_mean": m.acc_mean,
                "acc_max": m.acc_max,
                "labeling_accuracy_mean": m.labeling_accuracy_mean,
                "injected_fraction": m.injected_fraction,
                "clusters": m.clusters,
                "objective": m.objective,
                "drops": m.drops,
                "mean_labeling_latency_s": m.mean_labeling_latency_s,
            }
        )
    return rows


def run_experiment(cfg: ExperimentConfig) -> RunResult:
    """Run one configured experiment and write metrics.csv + events.jsonl."""
    t0 = time.monotonic()
    sim = build_simulation(cfg)
    reason = sim.run()
    rows = metrics_rows(cfg, sim)

    out_dir = cfg.run.out_dir
    os.makedirs(out_dir, exist_ok=True)
    metrics_path = os.path.join(out_dir, "metrics.csv")
    events_path = os.path.join(out_dir, "events.jsonl")

    _atomic_write(metrics_path, _csv_text(METRIC_COLUMNS, rows))

    header = {
        "type": "run_header",
        "baseline": cfg.run.baseline,
        "seed": cfg.run.seed,
        "config": _json_safe(cfg.resolved()),
        "defaults_applied": sorted(cfg.defaults_applied),
    }
    lines = [json.dumps(header, sort_keys=True)]
    lines.extend(json.dumps(ev, sort_keys=True) for ev in sim.events)
    _atomic_write(events_path, "\n".join(lines) + "\n")

    log.info(
        "run %s seed=%d: %d rounds, stopped on %s, wall time %.3fs",
        cfg.run.baseline, cfg.run.seed, len(sim.metrics), reason,
        time.monotonic() - t0,
    )
    return RunResult(
        baseline=cfg.run.baseline,
        seed=cfg.run.seed,
        out_dir=out_dir,
        metrics_path=metrics_path,
        events_path=events_path,
        rows=rows,
        reason=reason,
        sim=sim,
    )


def _parse_axis_value(axis: str, raw):
    try:
        if axis == "seed":
            value = int(str(raw))
        else:
            value = float(str(raw))
    except ValueError:
        raise ConfigError("sweep.values", f"bad value {raw!r} for axis {axis}") from None
    if axis == "labeled_fraction" and not 0 < value <= 1:
        raise ConfigError("sweep.values", f"labeled_fraction {raw!r} outside (0, 1]")
    if axis == "phi" and not 0 <= value <= 1:
        raise ConfigError("sweep.values", f"phi {raw!r} outside [0, 1]")
    return value


def sweep(cfg: ExperimentConfig, axis: str, values) -> dict:
    """Run one experiment per axis value under value-named subdirectories.

    Each run gets a seed derived from the base seed and "axis=value" (for
    the seed axis, the value itself), so runs stay decorrelated without
    hiding the derivation. A failing run is recorded and the sweep
    continues; completed runs are concatenated into sweep_metrics.csv
    with an explicit axis column.
    """
    if axis not in SWEEP_AXES:
        raise ConfigError("sweep.axis", f"must be one of {', '.join(SWEEP_AXES)}")
    values = list(values)
    if not values:
        raise ConfigError("sweep.values", "need at least one value")

    base_out = cfg.run.out_dir
    combined = []
    completed = []
    failed = {}
    for raw in values:
        value = _parse_axis_value(axis, raw)
        token = str(value)
        sub = copy.deepcopy(cfg)
        if axis == "labeled_fraction":
            sub.data.labeled_fraction = value
        elif axis == "phi":
            sub.ssl.phi = value
        sub.run.seed = sweep_seed(cfg.run.seed, axis, value)
        sub.run.out_dir = os.path.join(base_out, f"{axis}={token}")
        try:
            result = run_experiment(sub)
        except Exception as exc:  # keep sweeping; report at the end
            log.error("sweep %s=%s failed: %s", axis, token, exc)
            failed[token] = f"{type(exc).__name__}: {exc}"
            continue
        completed.append(token)
        combined.extend({"axis": f"{axis}={token}", **row} for row in result.rows)

    os.makedirs(base_out, exist_ok=True)
    combined_path = os.path.join(base_out, "sweep_metrics.csv")
    _atomic_write(combined_path, _csv_text(("axis",) + METRIC_COLUMNS, combined))
    summary = {
        "axis": axis,
        "completed": completed,
        "failed": failed,
        "combined_path": combined_path,
    }
    _atomic_write(
        os.path.join(base_out, "sweep_summary.json"),
        json.dumps({k: summary[k] for k in ("axis", "completed", "failed")},
                   sort_keys=True, indent=2) + "\n",
    )
    return summary


FIGURE_COLUMNS = {
    "accuracy": ("baseline", "labeled_fraction", "acc_min", "acc_mean", "acc_max", "n_runs"),
    "labeling-accuracy": ("baseline", "labeled_fraction", "phi",
                          "labeling_accuracy_mean", "n_runs"),
    "labeling-latency": ("baseline", "labeled_fraction", "phi",
                         "mean_labeling_latency_s", "n_runs"),
}


def _final_rows(metrics_path: str) -> list:
    with open(metrics_path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        names = reader.fieldnames or []
        missing = [c for c in METRIC_COLUMNS if c not in names]
        if missing:
            raise ValueError(f"{metrics_path}: missing columns {', '.join(missing)}")
        rows = list(reader)
    final = {}
    for row in rows:
        key = (row["baseline"], row["seed"], row["labeled_fraction"], row["phi"])
        if key not in final or int(row["round"]) > int(final[key]["round"]):
            final[key] = row
    return list(final.values())


def _mean_of(rows, column):
    values = [float(r[column]) for r in rows if r[column] != ""]
    if not values:
        return None, 0
    return sum(values) / len(values), len(values)


def emit_plot_data(metrics_path: str, figure: str, out_path: str | None = None):
    """Reduce a metrics file to one plot-ready table.

    Uses each run's final round, then averages across runs sharing the
    grouping key (baseline and labeled fraction, plus phi for the
    labeling figures). n_runs counts the runs that contributed a value.
    Returns (path, rows).
    """
    if figure not in FIGURE_COLUMNS:
        raise ConfigError("plot.figure", f"must be one of {', '.join(FIGURE_COLUMNS)}")
    finals = _final_rows(metrics_path)

    if figure == "accuracy":
        group_keys = ("baseline", "labeled_fraction")
        value_cols = ("acc_min", "acc_mean", "acc_max")
    elif figure == "labeling-accuracy":
        group_keys = ("baseline", "labeled_fraction", "phi")
        value_cols = ("labeling_accuracy_mean",)
    else:
        group_keys = ("baseline", "labeled_fraction", "phi")
        value_cols = ("mean_labeling_latency_s",)

    groups = {}
    for row in finals:
        groups.setdefault(tuple(row[k] for k in group_keys), []).append(row)

    out_rows = []
    for key in sorted(groups, key=lambda k: (k[0],) + tuple(float(x) for x in k[1:])):
        members = groups[key]
        row = dict(zip(group_keys, key))
        n_runs = len(members)
        for col in value_cols:
            mean, n_with = _mean_of(members, col)
            row[col] = mean
            n_runs = min(n_runs, n_with) if mean is not None else 0
        row["n_runs"] = n_runs
        out_rows.append(row)

    if out_path is None:
        stem = figure.replace("-", "_") + ".csv"
        out_path = os.path.join(os.path.dirname(metrics_path) or ".", stem)
    _atomic_write(out_path, _csv_text(FIGURE_COLUMNS[figure], out_rows))
    return out_path, out_rows
