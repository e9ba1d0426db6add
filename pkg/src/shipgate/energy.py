"""Energy and latency accounting for single-stage and cascaded pipelines."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .exceptions import InvalidInputError

J_PER_WH = 3600.0

# Reference constants for the gate (AKD1000) and detector (YOLOv5m on Jetson Nano).
GATE_STATIC_W = 0.921
GATE_DYNAMIC_W = 0.44
GATE_FPS = 85.7
DETECTOR_W = 7.81
DETECTOR_FPS = 2.7
GATE_TABLE_DYNAMIC_W = 0.4408
GATE_TABLE_BATCH_S = 1.16795
GATE_TABLE_BATCH = 100


@dataclass(frozen=True)
class StageCost:
    """Power draw and throughput of one pipeline stage.

    ``dynamic_W`` is the activity-dependent draw, ``static_W`` the baseline.
    Stages without a static/dynamic split put their whole draw in ``dynamic_W``.
    """

    name: str
    dynamic_W: float
    throughput_fps: float
    static_W: float = 0.0

    def __post_init__(self):
        for label, value in (("dynamic_W", self.dynamic_W), ("static_W", self.static_W)):
            if not math.isfinite(value) or value < 0:
                raise InvalidInputError(f"{self.name}: {label} must be finite and non-negative")
        if not (math.isfinite(self.throughput_fps) and self.throughput_fps > 0):
            raise InvalidInputError(f"{self.name}: throughput_fps must be positive")

    @property
    def power_W(self) -> float:
        return self.static_W + self.dynamic_W

    def to_dict(self) -> dict:
        d = asdict(self)
        d["power_W"] = self.power_W
        return d


def gate_stage(static_W=GATE_STATIC_W, dynamic_W=GATE_DYNAMIC_W, fps=GATE_FPS) -> StageCost:
    return StageCost("gate", dynamic_W, fps, static_W)


def detector_stage(power_W=DETECTOR_W, fps=DETECTOR_FPS) -> StageCost:
    return StageCost("detector", power_W, fps)


def wh_to_joules(wh: float) -> float:
    return wh * J_PER_WH


def joules_to_wh(joules: float) -> float:
    return joules / J_PER_WH


def per_image_energy(stage: StageCost) -> float:
    """Joules per image at full throughput."""
    return stage.power_W / stage.throughput_fps


def stage_energy(n_images: int, stage: StageCost) -> float:
    """Joules to push ``n_images`` through ``stage``."""
    if n_images < 0:
        raise InvalidInputError("n_images must be non-negative")
    return n_images * stage.power_W / stage.throughput_fps


def batch_energy(dynamic_W: float, duration_s: float, batch_size: int) -> dict:
    """Dynamic energy and throughput for a timed batch."""
    if duration_s <= 0 or batch_size <= 0:
        raise InvalidInputError("duration and batch size must be positive")
    energy = dynamic_W * duration_s
    return {
        "energy_per_batch_J": energy,
        "energy_per_sample_J": energy / batch_size,
        "duration_per_sample_s": duration_s / batch_size,
        "throughput_fps": batch_size / duration_s,
    }


def cascade_energy(
    n_total: int,
    n_flagged: int,
    gate: StageCost,
    detector: StageCost,
    duty_cycle: bool = False,
) -> dict:
    """Gate runs on every image, the detector only on flagged ones.

    By default the gate is charged ``static + dynamic`` power for its own busy
    time only. With ``duty_cycle`` the gate's static draw runs for the whole
    pipeline wall-clock time (gate busy time plus detector busy time), while
    its dynamic draw is still charged for gate busy time.
    """
    if n_total < 0 or n_flagged < 0:
        raise InvalidInputError("image counts must be non-negative")
    if n_flagged > n_total:
        raise InvalidInputError(f"n_flagged ({n_flagged}) exceeds n_total ({n_total})")
    detector_J = stage_energy(n_flagged, detector)
    if duty_cycle:
        gate_busy = n_total / gate.throughput_fps
        wall = gate_busy + n_flagged / detector.throughput_fps
        gate_J = gate.dynamic_W * gate_busy + gate.static_W * wall
    else:
        gate_J = stage_energy(n_total, gate)
    return {"gate_J": gate_J, "detector_J": detector_J, "total_J": gate_J + detector_J}


def break_even_flag_rate(gate: StageCost, detector: StageCost) -> float:
    """Largest flagged fraction at which the cascade is no worse than detector-only.

    A value ``<= 0`` means the cascade never wins.
    """
    return 1.0 - per_image_energy(gate) / per_image_energy(detector)


def energy_report(
    n_total: int,
    n_flagged: int,
    gate: StageCost,
    detector: StageCost,
    duty_cycle: bool = False,
) -> dict:
    parts = cascade_energy(n_total, n_flagged, gate, detector, duty_cycle)
    detector_only = stage_energy(n_total, detector)
    f_star = break_even_flag_rate(gate, detector)
    return {
        "stages": [gate.to_dict(), detector.to_dict()],
        "n_total": n_total,
        "n_flagged": n_flagged,
        "mode": "duty-cycle" if duty_cycle else "per-image",
        "gate_J": parts["gate_J"],
        "detector_J": parts["detector_J"],
        "total_J": parts["total_J"],
        "detector_only_J": detector_only,
        "reduction_ratio": detector_only / parts["total_J"] if parts["total_J"] > 0 else math.inf,
        "break_even_fraction": f_star,
        "cascade_can_win": f_star > 0,
    }


@dataclass(frozen=True)
class LayerEnergyFit:
    alpha: float  # mJ per input event
    beta: float  # mJ per layer
    r_squared: float

    def predict(self, events) -> np.ndarray:
        return self.alpha * np.asarray(events, dtype=np.float64) + self.beta


def fit_layer_energy(points) -> LayerEnergyFit:
    """Least-squares line ``energy_mJ = alpha * events + beta`` over ``(events, mJ)`` pairs."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
        raise InvalidInputError("need at least two (events, energy) pairs")
    x, y = pts[:, 0], pts[:, 1]
    if np.all(x == x[0]):
        raise InvalidInputError("all event counts are identical; slope is undetermined")
    design = np.column_stack([x, np.ones_like(x)])
    (alpha, beta), *_ = np.linalg.lstsq(design, y, rcond=None)
    residual = y - (alpha * x + beta)
    ss_res = float(residual @ residual)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return LayerEnergyFit(float(alpha), float(beta), min(max(r2, 0.0), 1.0))


def layer_increments(cumulative) -> np.ndarray:
    """Per-layer contribution from measurements taken as layers are added one by one."""
    return np.diff(np.asarray(cumulative, dtype=np.float64), prepend=0.0)


@dataclass(frozen=True)
class EventCostModel:
    """Linear per-layer cost model driven by event and op counts.

    Energy is ``alpha_mJ * input_events + beta_mJ``; latency is
    ``synaptic_ops / ops_per_ms``. The defaults are placeholders, not
    measurements; use :meth:`calibrated` to pin totals to a reference.
    """

    alpha_mJ: float = 1e-6
    beta_mJ: float = 0.0
    ops_per_ms: float = 1e7

    def __post_init__(self):
        if not self.ops_per_ms > 0:
            raise InvalidInputError("ops_per_ms must be positive")

    def layer_energy_mJ(self, events) -> float:
        return self.alpha_mJ * float(events) + self.beta_mJ

    def latency_ms(self, ops) -> float:
        return float(ops) / self.ops_per_ms

    @classmethod
    def from_fit(cls, fit: LayerEnergyFit, ops_per_ms: float = 1e7) -> "EventCostModel":
        return cls(fit.alpha, fit.beta, ops_per_ms)

    def calibrated(self, stats, total_energy_mJ: float, total_latency_ms: float) -> "EventCostModel":
        """Rescale so ``stats`` sum to the given per-image energy and latency.

        ``beta_mJ`` is kept; ``alpha_mJ`` absorbs the remaining energy.
        """
        events = sum(float(s.input_events) for s in stats)
        ops = sum(float(s.synaptic_ops) for s in stats)
        if events <= 0 or ops <= 0:
            raise InvalidInputError("cannot calibrate on stats without events")
        alpha = (total_energy_mJ - self.beta_mJ * len(stats)) / events
        return EventCostModel(alpha, self.beta_mJ, ops / total_latency_ms)
