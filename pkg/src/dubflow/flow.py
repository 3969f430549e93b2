"""Optimal-transport conditional flow matching over speech feature sequences.

Training regresses a velocity field onto straight-line probability paths
between Gaussian noise and data features; a small width ``sigma_min`` keeps
the path non-degenerate at the data end. The stage-2 objective adds a
log-domain duration term from a separate predictor.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Union

import numpy as np
import torch

from .conditions import Conclusion, DubbingConditions, VisualFeatureSeq

ArrayLike = Union[np.ndarray, torch.Tensor]


@dataclass
class FlowConfig:
    sigma_min: float = 1e-4

    def __post_init__(self) -> None:
        if not 0.0 <= self.sigma_min < 1.0:
            raise ValueError("sigma_min must lie in [0, 1)")


@dataclass(frozen=True)
class FeatureSeq:
    """A speech feature sequence: (frames, dims) values on a fixed time grid."""

    frames: np.ndarray
    frame_hop: float

    def __post_init__(self) -> None:
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[0] < 1 or frames.shape[1] < 1:
            raise ValueError("frames must be a non-empty (F, D) array")
        if not np.isfinite(frames).all():
            raise ValueError("frames must be finite")
        if not self.frame_hop > 0:
            raise ValueError("frame_hop must be positive")
        object.__setattr__(self, "frames", frames)

    @property
    def duration_s(self) -> float:
        return self.frames.shape[0] * self.frame_hop


def save_features(path: Path | str, seq: FeatureSeq) -> None:
    """Write one frame per row as delimited text, plus a JSON sidecar."""
    path = Path(path)
    np.savetxt(path, seq.frames, fmt="%.10e")
    meta = {"frame_hop": seq.frame_hop, "dim": int(seq.frames.shape[1])}
    path.with_suffix(path.suffix + ".meta.json").write_text(
        json.dumps(meta, sort_keys=True) + "\n"
    )


def load_features(path: Path | str) -> FeatureSeq:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".meta.json").read_text())
    frames = np.loadtxt(path, dtype=np.float64, ndmin=2)
    if frames.shape[1] != meta["dim"]:
        raise ValueError(f"{path}: dim mismatch with sidecar")
    return FeatureSeq(frames=frames, frame_hop=float(meta["frame_hop"]))


@dataclass
class PathSample:
    """One point on a noise-to-data path with its regression target."""

    tau: float
    x_tau: ArrayLike
    u_target: ArrayLike


class VelocityModel(Protocol):
    """Anything that maps (features, time, conditions) to a velocity field."""

    def evaluate(
        self, x: torch.Tensor, tau: float, conds: DubbingConditions
    ) -> torch.Tensor: ...


def sample_ot_path(
    x0: ArrayLike, x1: ArrayLike, tau: float, sigma_min: float
) -> PathSample:
    """Interpolate noise toward data and return the target velocity.

    The path is x_tau = (1 - (1 - sigma_min) tau) x0 + tau x1 with constant
    target velocity x1 - (1 - sigma_min) x0. Works for numpy arrays and
    torch tensors alike.
    """
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    if not 0.0 <= sigma_min < 1.0:
        raise ValueError("sigma_min must lie in [0, 1)")
    if x0.shape != x1.shape:
        raise ValueError(f"shape mismatch: {x0.shape} vs {x1.shape}")
    shrink = 1.0 - (1.0 - sigma_min) * tau
    x_tau = shrink * x0 + tau * x1
    u_target = x1 - (1.0 - sigma_min) * x0
    return PathSample(tau=tau, x_tau=x_tau, u_target=u_target)


def _as_double(x: np.ndarray) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def cfm_loss(
    model: VelocityModel,
    batch: list[tuple[np.ndarray, DubbingConditions]],
    rng: np.random.Generator,
    sigma_min: float = 1e-4,
) -> torch.Tensor:
    """Monte-Carlo flow-matching regression loss over a batch.

    Per item, one time draw and one noise draw form a path sample; the model
    velocity is regressed onto the target with mean squared error. When a
    speech prompt is present its frames are prepended as clean observed
    context and the loss is masked to the target rows.
    """
    if not batch:
        raise ValueError("empty batch")
    losses = []
    for x1_np, conds in batch:
        x1 = _as_double(x1_np)
        tau = float(rng.uniform())
        x0 = _as_double(rng.standard_normal(x1.shape))
        path = sample_ot_path(x0, x1, tau, sigma_min)
        if conds.prompt is not None:
            context = _as_double(conds.prompt.frames)
            x_in = torch.cat([context, path.x_tau], dim=0)
            skip = context.shape[0]
        else:
            x_in = path.x_tau
            skip = 0
        v = model.evaluate(x_in, tau, conds)
        if v.shape != x_in.shape:
            raise ValueError("velocity model changed the feature shape")
        losses.append(((v[skip:] - path.u_target) ** 2).mean())
    return torch.stack(losses).mean()


Real = Union[float, torch.Tensor]


def duration_loss(pred_seconds: Real, true_seconds: float) -> Real:
    """Absolute error between log durations."""
    if not float(true_seconds) > 0:
        raise ValueError("true duration must be positive")
    if isinstance(pred_seconds, torch.Tensor):
        if not bool((pred_seconds > 0).all()):
            raise ValueError("predicted duration must be positive")
        return (torch.log(pred_seconds) - math.log(float(true_seconds))).abs()
    if not float(pred_seconds) > 0:
        raise ValueError("predicted duration must be positive")
    return abs(math.log(float(pred_seconds)) - math.log(float(true_seconds)))


class DurationModel(Protocol):
    def predict_seconds_t(
        self, visual: VisualFeatureSeq, conclusion: Conclusion | None
    ) -> torch.Tensor: ...


@dataclass
class Stage2Item:
    """One tuning example: target features, generation conditions, and the
    un-dropped inputs the duration predictor reads."""

    target: np.ndarray
    conds: DubbingConditions
    visual: VisualFeatureSeq
    conclusion: Conclusion | None
    duration_s: float


def stage2_loss(
    vel_model: VelocityModel,
    dur_model: DurationModel,
    items: list[Stage2Item],
    rng: np.random.Generator,
    sigma_min: float = 1e-4,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Joint tuning objective: flow-matching regression plus duration term."""
    if not items:
        raise ValueError("empty batch")
    flow = cfm_loss(
        vel_model, [(it.target, it.conds) for it in items], rng, sigma_min
    )
    dur_terms = [
        duration_loss(dur_model.predict_seconds_t(it.visual, it.conclusion), it.duration_s)
        for it in items
    ]
    dur = torch.stack(dur_terms).mean()
    total = flow + dur
    return total, {"cfm": float(flow.detach()), "duration": float(dur.detach())}
