"""Desk-scale torch models for the generation stage.

All models run in float64 on CPU and are initialized from an explicit seed
so training runs are reproducible bit for bit.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

from .conditions import (
    Conclusion,
    DubbingConditions,
    LabelEmbedder,
    VisualFeatureSeq,
    encode_conclusion,
)


def _time_basis(tau: float) -> torch.Tensor:
    two_pi = 2.0 * math.pi
    return torch.tensor(
        [
            tau,
            math.sin(two_pi * tau),
            math.cos(two_pi * tau),
            math.sin(2.0 * two_pi * tau),
            math.cos(2.0 * two_pi * tau),
        ],
        dtype=torch.float64,
    )


def _init_linear(layer: nn.Linear, gen: torch.Generator, scale: float | None = None) -> None:
    fan_in = layer.weight.shape[1]
    std = scale if scale is not None else 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        layer.weight.copy_(
            torch.randn(layer.weight.shape, generator=gen, dtype=torch.float64) * std
        )
        layer.bias.zero_()


def _zero_linear(layer: nn.Linear) -> None:
    with torch.no_grad():
        layer.weight.zero_()
        layer.bias.zero_()


class ConditionalVelocityNet(nn.Module):
    """Per-frame velocity field with droppable condition pathways.

    The trunk mixes the noisy frame, a fixed time basis, the aligned
    transcript token embedding, a pooled clean-context (speech prompt)
    vector, and a context flag. Visual and conclusion conditions enter
    through separate single-layer branches whose weights start at zero, so
    freshly added branches do not disturb a pretrained trunk; each droppable
    slot owns a learned null vector (also starting at zero) that substitutes
    for absent input.
    """

    def __init__(
        self,
        feature_dim: int,
        visual_dim: int,
        vocab_size: int,
        hidden: int = 64,
        cond_embed_dim: int = 8,
        token_embed_dim: int = 8,
        embed_seed: int = 77,
        seed: int = 0,
    ) -> None:
        super().__init__()
        self.feature_dim = feature_dim
        self.visual_dim = visual_dim
        self.vocab_size = vocab_size
        self.embedder = LabelEmbedder.random_projection(cond_embed_dim, embed_seed)

        gen = torch.Generator().manual_seed(seed)
        self.in_frame = nn.Linear(feature_dim, hidden).double()
        self.in_time = nn.Linear(5, hidden).double()
        self.in_flag = nn.Linear(1, hidden).double()
        self.in_prompt = nn.Linear(feature_dim, hidden).double()
        self.in_token = nn.Linear(token_embed_dim, hidden).double()
        self.hidden_out = nn.Linear(hidden, feature_dim).double()
        self.skip = nn.Linear(feature_dim, feature_dim).double()
        for layer in (self.in_frame, self.in_time, self.in_flag, self.in_prompt, self.in_token):
            _init_linear(layer, gen)
        _init_linear(self.hidden_out, gen)
        _zero_linear(self.skip)

        self.token_table = nn.Parameter(
            torch.randn(vocab_size, token_embed_dim, generator=gen, dtype=torch.float64)
            / math.sqrt(token_embed_dim)
        )
        self.null_token = nn.Parameter(torch.zeros(token_embed_dim, dtype=torch.float64))
        self.null_prompt = nn.Parameter(torch.zeros(feature_dim, dtype=torch.float64))

        self.branch_visual = nn.Linear(visual_dim, hidden).double()
        self.branch_conclusion = nn.Linear(4 * cond_embed_dim, hidden).double()
        _zero_linear(self.branch_visual)
        _zero_linear(self.branch_conclusion)
        self.null_visual = nn.Parameter(torch.zeros(visual_dim, dtype=torch.float64))
        self.null_conclusion = nn.Parameter(
            torch.zeros(4 * cond_embed_dim, dtype=torch.float64)
        )

    def trunk_parameters(self) -> list[nn.Parameter]:
        params = []
        for module in (
            self.in_frame,
            self.in_time,
            self.in_flag,
            self.in_prompt,
            self.in_token,
            self.hidden_out,
            self.skip,
        ):
            params.extend(module.parameters())
        params.extend([self.token_table, self.null_token, self.null_prompt])
        return params

    def branch_parameters(self) -> list[nn.Parameter]:
        return [
            *self.branch_visual.parameters(),
            *self.branch_conclusion.parameters(),
            self.null_visual,
            self.null_conclusion,
        ]

    def _token_rows(
        self, conds: DubbingConditions, total: int, skip: int
    ) -> torch.Tensor:
        rows = self.null_token.unsqueeze(0).expand(total, -1).clone()
        if conds.transcript is not None and total > skip:
            ids = conds.transcript.ids
            n = len(ids)
            target = total - skip
            # Uniform alignment: target frame f carries token floor(f * n / target).
            idx = np.minimum((np.arange(target) * n) // target, n - 1)
            rows[skip:] = self.token_table[torch.as_tensor(ids[idx], dtype=torch.long)]
        return rows

    def evaluate(
        self, x: torch.Tensor, tau: float, conds: DubbingConditions
    ) -> torch.Tensor:
        if x.ndim != 2 or x.shape[1] != self.feature_dim:
            raise ValueError(f"expected (F, {self.feature_dim}) input, got {tuple(x.shape)}")
        total = x.shape[0]
        skip = 0 if conds.prompt is None else int(conds.prompt.frames.shape[0])
        if skip >= total:
            raise ValueError("prompt context must leave at least one target row")

        flags = torch.zeros(total, 1, dtype=torch.float64)
        if skip > 0:
            flags[:skip] = 1.0
            prompt_vec = x[:skip].mean(dim=0)
        else:
            prompt_vec = self.null_prompt

        if conds.visual is not None:
            vis_vec = torch.as_tensor(conds.visual.frames.mean(axis=0))
        else:
            vis_vec = self.null_visual
        if conds.conclusion is not None:
            conc_vec = torch.as_tensor(
                encode_conclusion(conds.conclusion, self.embedder).reshape(-1)
            )
        else:
            conc_vec = self.null_conclusion

        h = (
            self.in_frame(x)
            + self.in_time(_time_basis(tau))
            + self.in_flag(flags)
            + self.in_prompt(prompt_vec)
            + self.in_token(self._token_rows(conds, total, skip))
            + self.branch_visual(vis_vec)
            + self.branch_conclusion(conc_vec)
        )
        return self.hidden_out(torch.tanh(h)) + self.skip(x)


class BinnedAffineVelocity(nn.Module):
    """Scalar velocity field, affine in x with per-time-bin coefficients.

    Minimal reference model for one-dimensional transport checks: frames are
    independent scalar samples, and conditions are ignored.
    """

    def __init__(self, bins: int = 50) -> None:
        super().__init__()
        self.bins = bins
        self.slope = nn.Parameter(torch.zeros(bins, dtype=torch.float64))
        self.offset = nn.Parameter(torch.zeros(bins, dtype=torch.float64))

    def _bin(self, tau: float) -> int:
        return min(self.bins - 1, int(tau * self.bins))

    def evaluate(
        self, x: torch.Tensor, tau: float, conds: DubbingConditions | None = None
    ) -> torch.Tensor:
        b = self._bin(tau)
        return self.slope[b] * x + self.offset[b]


class DurationPredictor(nn.Module):
    """Predicts speech duration in seconds from visual input and conclusion.

    Carries the feature frame hop so predictions can be converted to frame
    counts downstream.
    """

    def __init__(
        self,
        visual_dim: int,
        frame_hop: float,
        hidden: int = 32,
        cond_embed_dim: int = 8,
        embed_seed: int = 78,
        seed: int = 1,
    ) -> None:
        super().__init__()
        if not frame_hop > 0:
            raise ValueError("frame_hop must be positive")
        self.visual_dim = visual_dim
        self.frame_hop = frame_hop
        self.embedder = LabelEmbedder.random_projection(cond_embed_dim, embed_seed)
        self.null_conclusion = nn.Parameter(
            torch.zeros(4 * cond_embed_dim, dtype=torch.float64)
        )
        in_dim = 1 + visual_dim + 4 * cond_embed_dim
        self.body = nn.Linear(in_dim, hidden).double()
        self.head = nn.Linear(hidden, 1).double()
        gen = torch.Generator().manual_seed(seed)
        _init_linear(self.body, gen)
        _init_linear(self.head, gen, scale=0.1)

    def predict_seconds_t(
        self, visual: VisualFeatureSeq, conclusion: Conclusion | None
    ) -> torch.Tensor:
        if visual.frames.shape[1] != self.visual_dim:
            raise ValueError("visual dimension mismatch")
        if conclusion is not None:
            conc = torch.as_tensor(encode_conclusion(conclusion, self.embedder).reshape(-1))
        else:
            conc = self.null_conclusion
        inp = torch.cat(
            [
                torch.tensor([visual.duration_s], dtype=torch.float64),
                torch.as_tensor(visual.frames.mean(axis=0)),
                conc,
            ]
        )
        raw = self.head(torch.tanh(self.body(inp))).squeeze(-1)
        return torch.nn.functional.softplus(raw) + 1e-3

    def predict_seconds(
        self, visual: VisualFeatureSeq, conclusion: Conclusion | None
    ) -> float:
        with torch.no_grad():
            return float(self.predict_seconds_t(visual, conclusion))
