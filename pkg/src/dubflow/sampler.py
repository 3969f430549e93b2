"""Guided sampling from a trained velocity field.

Guidance blends four evaluations of one model under nested condition
patterns: fully conditioned, visual dropped, visual and conclusion dropped,
and fully null. Each scale amplifies the velocity difference contributed by
one condition slot. Integration is a fixed-step ODE solve from Gaussian
noise; speech-prompt frames, when present, are held fixed as clean context
rows and only the target rows evolve.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import torch

from .conditions import Conclusion, DubbingConditions, VisualFeatureSeq
from .flow import FeatureSeq, VelocityModel
from .nets import DurationPredictor

SCHEMES = ("euler", "midpoint")


class IntegrationError(RuntimeError):
    """Raised when the ODE state stops being finite."""


@dataclass
class GuidanceScales:
    visual: float = 2.0
    conclusion: float = 2.0
    transcript: float = 2.0

    def __post_init__(self) -> None:
        for name in ("visual", "conclusion", "transcript"):
            value = float(getattr(self, name))
            if not (np.isfinite(value) and value >= 0):
                raise ValueError(f"{name} scale must be finite and non-negative")


@dataclass
class SamplerConfig:
    steps: int = 32
    scheme: str = "euler"

    def __post_init__(self) -> None:
        if int(self.steps) < 1:
            raise ValueError("steps must be at least 1")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}")


def guided_velocity(
    model: VelocityModel,
    x: torch.Tensor,
    tau: float,
    conds: DubbingConditions,
    scales: GuidanceScales,
) -> torch.Tensor:
    """Combine four condition patterns of one model into a guided velocity.

    Exactly four model evaluations are made; the fully-null evaluation
    serves as the base of the combination. The weighted-sum form below is
    algebraically the telescoping three-bracket combination, written so that
    unit scales reduce bitwise to the fully-conditional velocity and zero
    scales to the fully-null one. The speech prompt, not being a guided
    slot, stays present in every pattern.
    """
    v_full = model.evaluate(x, tau, conds)
    v_no_vis = model.evaluate(x, tau, dataclasses.replace(conds, visual=None))
    v_tr_only = model.evaluate(
        x, tau, dataclasses.replace(conds, visual=None, conclusion=None)
    )
    v_null = model.evaluate(
        x, tau, dataclasses.replace(conds, visual=None, conclusion=None, transcript=None)
    )
    lam_v, lam_c, lam_t = scales.visual, scales.conclusion, scales.transcript
    return (
        (1.0 - lam_t) * v_null
        + (lam_t - lam_c) * v_tr_only
        + (lam_c - lam_v) * v_no_vis
        + lam_v * v_full
    )


def integrate(
    model: VelocityModel,
    conds: DubbingConditions,
    scales: GuidanceScales,
    config: SamplerConfig,
    target_frames: int,
    feature_dim: int,
    frame_hop: float,
    rng: np.random.Generator,
) -> FeatureSeq:
    """Solve the guided flow from noise to features over uniform time steps.

    Starts from standard Gaussian noise on the target rows; prompt context
    rows are fixed at their clean values for the whole trajectory. Raises
    :class:`IntegrationError` naming the step index if the state leaves the
    finite range.
    """
    if target_frames < 1:
        raise ValueError("target_frames must be at least 1")
    noise = rng.standard_normal((target_frames, feature_dim))
    x = torch.as_tensor(noise, dtype=torch.float64)
    skip = 0
    if conds.prompt is not None:
        context = torch.as_tensor(conds.prompt.frames, dtype=torch.float64)
        if context.shape[1] != feature_dim:
            raise ValueError("prompt feature dimension mismatch")
        x = torch.cat([context, x], dim=0)
        skip = context.shape[0]

    dt = 1.0 / config.steps
    with torch.no_grad():
        for k in range(config.steps):
            tau = k * dt
            if config.scheme == "euler":
                g = guided_velocity(model, x, tau, conds, scales)
                x[skip:] = x[skip:] + dt * g[skip:]
            else:
                g = guided_velocity(model, x, tau, conds, scales)
                x_mid = x.clone()
                x_mid[skip:] = x[skip:] + 0.5 * dt * g[skip:]
                g_mid = guided_velocity(model, x_mid, tau + 0.5 * dt, conds, scales)
                x[skip:] = x[skip:] + dt * g_mid[skip:]
            if not bool(torch.isfinite(x).all()):
                raise IntegrationError(f"non-finite state at step {k}")
    return FeatureSeq(frames=x[skip:].numpy(), frame_hop=frame_hop)


def predict_duration(
    dur_model: DurationPredictor,
    visual: VisualFeatureSeq,
    conclusion: Conclusion | None,
) -> int:
    """Predicted target length in frames: at least one, rounded from seconds."""
    seconds = dur_model.predict_seconds(visual, conclusion)
    return max(1, int(round(seconds / dur_model.frame_hop)))
