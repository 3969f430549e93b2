"""Rule-based rewards for reasoning traces.

Two binary signals are computed from raw trace text: the format flag (does
the text satisfy the trace grammar) and the outcome flag (is the concluded
scene type correct). The matching losses are binary cross-entropies between
those flags and the policy's self-predicted probabilities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .traces import LABEL_AXES, Conclusion, CoTTrace, parse_trace

PROB_EPS = 1e-7

Real = float | torch.Tensor


def clamp_prob(p: Real) -> Real:
    """Clamp a probability strictly inside (0, 1) with margin ``PROB_EPS``."""
    if isinstance(p, torch.Tensor):
        if not torch.isfinite(p).all():
            raise ValueError("probability must be finite")
        return p.clamp(PROB_EPS, 1.0 - PROB_EPS)
    p = float(p)
    if not math.isfinite(p):
        raise ValueError("probability must be finite")
    return min(max(p, PROB_EPS), 1.0 - PROB_EPS)


@dataclass(frozen=True)
class RewardFlags:
    """Rule-derived binary rewards for one trace: format and outcome."""

    f_true: int
    o_true: int

    def __post_init__(self) -> None:
        if self.f_true not in (0, 1) or self.o_true not in (0, 1):
            raise ValueError("reward flags must be 0 or 1")
        if self.o_true == 1 and self.f_true == 0:
            raise ValueError("correct outcome requires correct format")


@dataclass
class RewardProbs:
    """Model-predicted probabilities of correct format and correct outcome."""

    p_f: float
    p_o: float

    def __post_init__(self) -> None:
        self.p_f = clamp_prob(self.p_f)
        self.p_o = clamp_prob(self.p_o)


def _flag_cross_entropy(p: Real, flag: int) -> Real:
    if flag not in (0, 1):
        raise ValueError(f"flag must be 0 or 1, got {flag!r}")
    p = clamp_prob(p)
    if isinstance(p, torch.Tensor):
        return -(flag * torch.log(p) + (1 - flag) * torch.log1p(-p))
    return -(flag * math.log(p) + (1 - flag) * math.log1p(-p))


def format_loss(p_f: Real, f_true: int) -> Real:
    """Cross-entropy between the format flag and the predicted probability."""
    return _flag_cross_entropy(p_f, f_true)


def outcome_loss(p_o: Real, o_true: int) -> Real:
    """Cross-entropy between the outcome flag and the predicted probability."""
    return _flag_cross_entropy(p_o, o_true)


def outcome_check(pred: Conclusion, gold: Conclusion) -> int:
    """Outcome flag: 1 iff the predicted scene type equals the gold scene type.

    Speaker attributes do not gate the flag; their agreement is reported
    separately by :func:`attribute_matches`.
    """
    return int(pred.scene == gold.scene)


def attribute_matches(pred: Conclusion, gold: Conclusion) -> dict[str, int]:
    """Per-axis agreement between two conclusions (auxiliary diagnostics)."""
    return {
        axis: int(getattr(pred, axis) == getattr(gold, axis)) for axis in LABEL_AXES
    }


def score_trace(text: str, gold: Conclusion) -> RewardFlags:
    """Score raw trace text against the gold conclusion.

    Malformed text earns (0, 0); well-formed text earns format 1 and the
    scene-equality outcome flag. (0, 1) is unreachable by construction.
    """
    parsed = parse_trace(text)
    if not isinstance(parsed, CoTTrace):
        return RewardFlags(f_true=0, o_true=0)
    return RewardFlags(f_true=1, o_true=outcome_check(parsed.conclusion, gold))
