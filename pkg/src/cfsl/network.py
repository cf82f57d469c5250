"""Wireless latency model: path loss, Shannon rates, scheduling, deadlines.

Closed-form timing only. A device's round cost is local compute time
(epochs * samples * cycles-per-sample / CPU frequency) plus upload time
(model bits / achieved rate) on its OFDMA sub-channel; an edge's round
time is the slowest surviving device; a global round is the slowest edge
including its backhaul to the cloud. Broadcast time is treated as zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .seeding import RADIO_STREAM


def db_to_linear(db: float) -> float:
    return 10.0 ** (db / 10.0)


def dbm_to_watts(dbm: float) -> float:
    return 1e-3 * 10.0 ** (dbm / 10.0)


def channel_gain(distance_m: float, ref_gain_linear: float, ref_distance_m: float) -> float:
    """Fourth-power path-loss gain g0 * (d0 / d)^4."""
    if distance_m <= 0 or ref_distance_m <= 0:
        raise ValueError("distances must be > 0")
    return ref_gain_linear * (ref_distance_m / distance_m) ** 4


def data_rate(beta: float, bandwidth_hz: float, gain: float, power_w: float, noise_w: float) -> float:
    """Shannon rate on a beta-wide slice of the band, in bits/s."""
    if not 0 < beta <= 1:
        raise ValueError("beta must be in (0, 1]")
    if bandwidth_hz <= 0 or noise_w <= 0:
        raise ValueError("bandwidth and noise power must be > 0")
    if gain < 0 or power_w < 0:
        raise ValueError("gain and transmit power must be >= 0")
    return beta * bandwidth_hz * math.log2(1.0 + gain * power_w / noise_w)


def compute_time(epochs: int, n_samples: int, cycles_per_sample: float, f_hz: float) -> float:
    """Local training time: epochs * samples * cycles / frequency."""
    if f_hz <= 0:
        raise ValueError("CPU frequency must be > 0")
    if epochs < 0 or n_samples < 0 or cycles_per_sample < 0:
        raise ValueError("workload terms must be >= 0")
    return epochs * n_samples * cycles_per_sample / f_hz


def upload_time(payload_bits: float, rate_bps: float) -> float:
    if rate_bps <= 0:
        raise ValueError("rate must be > 0")
    if payload_bits < 0:
        raise ValueError("payload must be >= 0")
    return payload_bits / rate_bps


@dataclass(frozen=True)
class DeviceRadio:
    """Fixed radio/compute attributes of one device."""

    device_id: int
    f_hz: float
    power_w: float
    distance_m: float
    edge_id: int

    def __post_init__(self):
        if self.f_hz <= 0:
            raise ValueError(f"device {self.device_id}: CPU frequency must be > 0")
        if self.power_w < 0:
            raise ValueError(f"device {self.device_id}: transmit power must be >= 0")
        if self.distance_m <= 0:
            raise ValueError(f"device {self.device_id}: distance must be > 0")


@dataclass(frozen=True)
class ChannelModel:
    """Shared channel constants (reference gain is linear, not dB)."""

    ref_gain_linear: float
    ref_distance_m: float
    noise_w: float


@dataclass(frozen=True)
class EdgeConfig:
    edge_id: int
    bandwidth_hz: float
    subchannels: int
    cloud_rate_bps: float
    deadline_policy: str = "median"
    deadline_kappa: float = 2.0
    deadline_s: float | None = None

    def __post_init__(self):
        if self.bandwidth_hz <= 0 or self.cloud_rate_bps <= 0:
            raise ValueError(f"edge {self.edge_id}: bandwidth and cloud rate must be > 0")
        if self.subchannels < 1:
            raise ValueError(f"edge {self.edge_id}: needs at least one sub-channel")
        if self.deadline_policy not in ("median", "fixed"):
            raise ValueError(f"edge {self.edge_id}: unknown deadline policy {self.deadline_policy!r}")
        if self.deadline_policy == "median" and self.deadline_kappa <= 0:
            raise ValueError(f"edge {self.edge_id}: deadline_kappa must be > 0")
        if self.deadline_policy == "fixed" and (self.deadline_s is None or self.deadline_s <= 0):
            raise ValueError(f"edge {self.edge_id}: fixed policy needs deadline_s > 0")


@dataclass(frozen=True)
class ScheduleEntry:
    """One edge's selection for one round.

    selected/dropped are device-id tuples in ascending order; est_times
    covers every eligible device (the basis for selection and deadline).
    """

    edge_id: int
    selected: tuple
    beta: float
    deadline_s: float
    dropped: tuple
    est_times: dict

    @property
    def participating(self) -> tuple:
        return tuple(d for d in self.selected if d not in self.dropped)

    @property
    def idle(self) -> bool:
        return not self.participating


def device_round_time(
    radio: DeviceRadio,
    beta: float,
    bandwidth_hz: float,
    channel: ChannelModel,
    payload_bits: float,
    epochs: int,
    workload: int,
    cycles_per_sample: float,
    fading: float = 1.0,
):
    """(compute seconds, upload seconds) for one device this round."""
    if fading < 0:
        raise ValueError("fading multiplier must be >= 0")
    gain = channel_gain(radio.distance_m, channel.ref_gain_linear, channel.ref_distance_m)
    rate = data_rate(beta, bandwidth_hz, gain * fading, radio.power_w, channel.noise_w)
    t_cmp = compute_time(epochs, workload, cycles_per_sample, radio.f_hz)
    if rate == 0:
        return t_cmp, math.inf
    return t_cmp, upload_time(payload_bits, rate)


def schedule_round(
    edge: EdgeConfig,
    radios: list,
    workloads: dict,
    channel: ChannelModel,
    payload_bits: float,
    epochs: int,
    cycles_per_sample: float,
    fading: dict | None = None,
) -> ScheduleEntry:
    """Pick up to Q devices, fastest estimated round time first.

    Every scheduled device gets one sub-channel (beta = 1/Q). The
    deadline is kappa times the median selected estimate, or a fixed
    configured value; estimates above it are dropped before training.
    """
    beta = 1.0 / edge.subchannels
    est = {}
    for radio in radios:
        mult = 1.0 if fading is None else fading[radio.device_id]
        t_cmp, t_com = device_round_time(
            radio, beta, edge.bandwidth_hz, channel, payload_bits,
            epochs, workloads[radio.device_id], cycles_per_sample, mult,
        )
        est[radio.device_id] = t_cmp + t_com
    order = sorted(est, key=lambda d: (est[d], d))
    selected = tuple(sorted(order[: edge.subchannels]))
    if not selected:
        return ScheduleEntry(edge.edge_id, (), beta, 0.0, (), est)
    if edge.deadline_policy == "fixed":
        deadline = float(edge.deadline_s)
    else:
        deadline = edge.deadline_kappa * float(np.median([est[d] for d in selected]))
    dropped = tuple(d for d in selected if est[d] > deadline)
    return ScheduleEntry(edge.edge_id, selected, beta, deadline, dropped, est)


def edge_round_time(entry: ScheduleEntry, actual_times: dict):
    """(slowest surviving device's seconds, idle flag) for one edge."""
    participating = entry.participating
    if not participating:
        return 0.0, True
    missing = [d for d in participating if d not in actual_times]
    if missing:
        raise ValueError(f"missing actual times for devices {missing}")
    return max(actual_times[d] for d in participating), False


def global_round_time(edge_times: dict, cloud_times: dict, idle_edges=()) -> float:
    """Slowest edge's round time plus its cloud upload; idle edges are
    skipped (they shipped nothing). All edges idle gives a zero-length round."""
    if not edge_times:
        raise ValueError("global_round_time needs at least one edge")
    idle = set(idle_edges)
    totals = [
        edge_times[e] + cloud_times[e] for e in sorted(edge_times) if e not in idle
    ]
    if not totals:
        return 0.0
    return max(totals)


def sample_radios(
    edge_ids: list,
    seed,
    cpu_min_hz: float = 1e9,
    cpu_max_hz: float = 9e9,
    power_min_dbm: float = -10.0,
    power_max_dbm: float = 20.0,
    distance_min_m: float = 2.0,
    distance_max_m: float = 50.0,
) -> list:
    """Draw per-device radio attributes, uniform in the configured ranges
    (transmit power uniform in dBm, then converted to watts)."""
    if cpu_min_hz > cpu_max_hz or power_min_dbm > power_max_dbm or distance_min_m > distance_max_m:
        raise ValueError("range minima must not exceed maxima")
    radios = []
    for k, edge_id in enumerate(edge_ids):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), RADIO_STREAM, k]))
        radios.append(
            DeviceRadio(
                device_id=k,
                f_hz=float(rng.uniform(cpu_min_hz, cpu_max_hz)),
                power_w=dbm_to_watts(float(rng.uniform(power_min_dbm, power_max_dbm))),
                distance_m=float(rng.uniform(distance_min_m, distance_max_m)),
                edge_id=edge_id,
            )
        )
    return radios


def rayleigh_fading(device_ids, rng: np.random.Generator) -> dict:
    """Unit-mean exponential power-fading multipliers, one per device,
    drawn in ascending device order for reproducibility."""
    return {d: float(rng.exponential(1.0)) for d in sorted(device_ids)}
