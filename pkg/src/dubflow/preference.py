"""Mixed preference optimization over a pluggable trace policy.

The objective blends five terms computed per preference pair: a DPO term on
the chosen/rejected log-ratio margin, a BCO-style quality term that scores
each response against a reward shift, a length-normalized generation term on
the chosen response, and cross-entropy format/outcome terms against the
rule rewards. Desk scale uses a small categorical policy whose trace
log-probability is the sum of its chosen head log-probabilities plus a
well-formedness bit.
"""

from __future__ import annotations

import copy
import dataclasses
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .rewards import RewardFlags, format_loss, outcome_loss, score_trace
from .traces import (
    AXIS_VOCAB,
    LABEL_AXES,
    SCENE_LABELS,
    MUTATION_KINDS,
    Conclusion,
    CoTTrace,
    apply_mutation,
    find_conclusion_labels,
    parse_trace,
    render_trace,
)

Real = float | torch.Tensor


def _check_finite(name: str, value: Real) -> None:
    if isinstance(value, torch.Tensor):
        ok = bool(torch.isfinite(value).all())
    else:
        ok = math.isfinite(float(value))
    if not ok:
        raise ValueError(f"{name} must be finite")


def _softplus(x: Real) -> Real:
    """Numerically stable log(1 + exp(x)) for floats and tensors."""
    if isinstance(x, torch.Tensor):
        return F.softplus(x)
    x = float(x)
    if x > 0:
        return x + math.log1p(math.exp(-x))
    return math.log1p(math.exp(x))


@dataclass
class PolicyLogProbs:
    """Log-probabilities of one preference pair under policy and reference.

    ``len_c`` counts the scored components of the chosen response and
    normalizes the generation term.
    """

    lp_theta_c: Real
    lp_ref_c: Real
    lp_theta_r: Real
    lp_ref_r: Real
    len_c: int = 1

    def __post_init__(self) -> None:
        for name in ("lp_theta_c", "lp_ref_c", "lp_theta_r", "lp_ref_r"):
            _check_finite(name, getattr(self, name))
        if int(self.len_c) < 1:
            raise ValueError("len_c must be a positive integer")


@dataclass
class DPOConfig:
    beta: float = 0.1
    delta: float = 0.0
    length_normalized: bool = False

    def __post_init__(self) -> None:
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        _check_finite("delta", self.delta)


@dataclass
class MPOWeights:
    """Non-negative mixing weights for the five objective terms."""

    w_p: float = 1.0
    w_q: float = 1.0
    w_g: float = 1.0
    w_f: float = 1.0
    w_c: float = 1.0

    def __post_init__(self) -> None:
        for name in ("w_p", "w_q", "w_g", "w_f", "w_c"):
            value = float(getattr(self, name))
            if not (math.isfinite(value) and value >= 0):
                raise ValueError(f"{name} must be finite and non-negative")


def dpo_loss(lp: PolicyLogProbs, beta: float) -> Real:
    """Preference loss on the margin of chosen vs rejected log-ratios.

    Equals ln 2 when the policy matches the reference; decreases as the
    chosen log-ratio outgrows the rejected one.
    """
    if not beta > 0:
        raise ValueError("beta must be positive")
    margin = (lp.lp_theta_c - lp.lp_ref_c) - (lp.lp_theta_r - lp.lp_ref_r)
    return _softplus(-beta * margin)


def bco_loss(lp: PolicyLogProbs, beta: float, delta: float) -> tuple[Real, Real, Real]:
    """Per-response quality losses against the reward shift ``delta``.

    Returns (chosen term, rejected term, their sum). The chosen response is
    pushed above the shift, the rejected one below it; each term is ln 2 at
    the reference point with ``delta`` = 0.
    """
    if not beta > 0:
        raise ValueError("beta must be positive")
    _check_finite("delta", delta)
    reward_c = beta * (lp.lp_theta_c - lp.lp_ref_c) - delta
    reward_r = beta * (lp.lp_theta_r - lp.lp_ref_r) - delta
    plus = _softplus(-reward_c)
    minus = _softplus(reward_r)
    return plus, minus, plus + minus


def gen_loss(lp_theta_c: Real, len_c: int) -> Real:
    """Length-normalized negative log-likelihood of the chosen response."""
    if int(len_c) < 1:
        raise ValueError("len_c must be a positive integer")
    _check_finite("lp_theta_c", lp_theta_c)
    return -lp_theta_c / int(len_c)


def mpo_total(
    weights: MPOWeights, l_p: Real, l_q: Real, l_g: Real, l_f: Real, l_c: Real
) -> Real:
    """Weighted sum of the five objective terms."""
    return (
        weights.w_p * l_p
        + weights.w_q * l_q
        + weights.w_g * l_g
        + weights.w_f * l_f
        + weights.w_c * l_c
    )


# ---------------------------------------------------------------------------
# Desk-scale categorical trace policy.


class TracePolicy(nn.Module):
    """Small differentiable policy over trace components.

    A pooled feature vector feeds a tanh backbone with one categorical head
    per label axis plus three scalar heads: the probability of emitting a
    well-formed trace and the self-predicted format/outcome probabilities.
    Head output layers start at zero so an untrained policy ties every label
    (argmax falls back to index 0) and predicts 0.5 on every scalar head.
    """

    def __init__(self, feature_dim: int, hidden: int = 32, seed: int = 0) -> None:
        super().__init__()
        self.feature_dim = feature_dim
        self.backbone = nn.Linear(feature_dim, hidden).double()
        self.axis_heads = nn.ModuleDict(
            {axis: nn.Linear(hidden, len(AXIS_VOCAB[axis])).double() for axis in LABEL_AXES}
        )
        self.wellformed_head = nn.Linear(hidden, 1).double()
        self.format_head = nn.Linear(hidden, 1).double()
        self.outcome_head = nn.Linear(hidden, 1).double()
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            w = self.backbone.weight
            w.copy_(torch.randn(w.shape, generator=gen, dtype=torch.float64) * 0.5)
            self.backbone.bias.zero_()
            for head in [
                *self.axis_heads.values(),
                self.wellformed_head,
                self.format_head,
                self.outcome_head,
            ]:
                head.weight.zero_()
                head.bias.zero_()

    def _hidden(self, features: torch.Tensor) -> torch.Tensor:
        return torch.tanh(self.backbone(features))

    @staticmethod
    def _to_tensor(features: np.ndarray) -> torch.Tensor:
        return torch.as_tensor(np.asarray(features, dtype=np.float64))

    def axis_log_probs(self, features: np.ndarray) -> dict[str, torch.Tensor]:
        h = self._hidden(self._to_tensor(features))
        return {axis: F.log_softmax(self.axis_heads[axis](h), dim=-1) for axis in LABEL_AXES}

    def wellformed_logit(self, features: np.ndarray) -> torch.Tensor:
        return self.wellformed_head(self._hidden(self._to_tensor(features))).squeeze(-1)

    def reward_probs_t(self, features: np.ndarray) -> tuple[torch.Tensor, torch.Tensor]:
        h = self._hidden(self._to_tensor(features))
        p_f = torch.sigmoid(self.format_head(h)).squeeze(-1)
        p_o = torch.sigmoid(self.outcome_head(h)).squeeze(-1)
        return p_f, p_o

    def predict(self, features: np.ndarray) -> Conclusion:
        with torch.no_grad():
            logps = self.axis_log_probs(features)
        values = {
            axis: AXIS_VOCAB[axis][int(torch.argmax(logps[axis]))] for axis in LABEL_AXES
        }
        return Conclusion(**values)

    def sample_conclusion(self, features: np.ndarray, rng: np.random.Generator) -> Conclusion:
        with torch.no_grad():
            logps = self.axis_log_probs(features)
        values: dict[str, str] = {}
        for axis in LABEL_AXES:
            probs = torch.exp(logps[axis]).numpy()
            probs = probs / probs.sum()
            values[axis] = AXIS_VOCAB[axis][int(rng.choice(len(probs), p=probs))]
        return Conclusion(**values)

    def sample_trace(
        self, features: np.ndarray, template_text: str, rng: np.random.Generator
    ) -> str:
        """Sample a trace: conclusion from the heads, well-formedness as a coin.

        ``template_text`` supplies the prose scaffolding; a failed coin flips
        the output through a random grammar mutation.
        """
        conclusion = self.sample_conclusion(features, rng)
        text = replace_conclusion(template_text, conclusion)
        with torch.no_grad():
            p_wf = torch.sigmoid(self.wellformed_logit(features)).item()
        if rng.random() >= p_wf:
            kind = MUTATION_KINDS[int(rng.integers(len(MUTATION_KINDS)))]
            text = apply_mutation(text, kind, rng)
        return text

    def trace_log_prob(self, features: np.ndarray, text: str) -> tuple[torch.Tensor, int]:
        """Log-probability of trace text: well-formedness bit plus label terms.

        Returns the differentiable log-prob and the number of scored
        components (1 for the bit, plus one per recovered label).
        """
        parsed = parse_trace(text)
        wf_logit = self.wellformed_logit(features)
        if isinstance(parsed, CoTTrace):
            labels = parsed.conclusion.as_dict()
            lp = F.logsigmoid(wf_logit)
        else:
            labels = find_conclusion_labels(text)
            lp = F.logsigmoid(-wf_logit)
        logps = self.axis_log_probs(features)
        for axis, value in labels.items():
            lp = lp + logps[axis][AXIS_VOCAB[axis].index(value)]
        return lp, 1 + len(labels)


def replace_conclusion(text: str, conclusion: Conclusion) -> str:
    """Re-render valid trace text with a different conclusion."""
    parsed = parse_trace(text)
    if not isinstance(parsed, CoTTrace):
        raise ValueError("replace_conclusion requires valid trace text")
    return render_trace(dataclasses.replace(parsed, conclusion=conclusion))


def wrong_scene_conclusion(gold: Conclusion, rng: np.random.Generator) -> Conclusion:
    """Corrupt the scene label to a uniformly chosen different one."""
    others = [s for s in SCENE_LABELS if s != gold.scene]
    return dataclasses.replace(gold, scene=others[int(rng.integers(len(others)))])


@dataclass
class PreferenceSample:
    """One training pair: shared features, chosen and rejected trace text.

    ``flags`` carries the rule rewards of the policy's own rollout for this
    prompt, and ``len_c`` the scored component count of the chosen response.
    """

    features: np.ndarray
    chosen_text: str
    rejected_text: str
    flags: RewardFlags
    len_c: int


def build_preference_batch(
    policy: TracePolicy,
    items: list[tuple[np.ndarray, Conclusion, str]],
    rng: np.random.Generator,
    mutation_share: float = 0.5,
) -> list[PreferenceSample]:
    """Synthesize preference pairs from gold traces.

    Each item is (features, gold conclusion, gold trace text). The chosen
    response is the gold text; the rejected one is either a format mutation
    of it or a wrong-scene rewrite. Rule rewards come from scoring a fresh
    policy rollout.
    """
    batch: list[PreferenceSample] = []
    for features, gold, gold_text in items:
        if rng.random() < mutation_share:
            kind = MUTATION_KINDS[int(rng.integers(len(MUTATION_KINDS)))]
            rejected = apply_mutation(gold_text, kind, rng)
        else:
            rejected = replace_conclusion(gold_text, wrong_scene_conclusion(gold, rng))
        rollout = policy.sample_trace(features, gold_text, rng)
        flags = score_trace(rollout, gold)
        with torch.no_grad():
            _, len_c = policy.trace_log_prob(features, gold_text)
        batch.append(
            PreferenceSample(
                features=features,
                chosen_text=gold_text,
                rejected_text=rejected,
                flags=flags,
                len_c=len_c,
            )
        )
    return batch


def _gradient_step(policy: nn.Module, lr: float) -> float:
    """Apply one plain gradient-descent step; returns the update norm."""
    sq = 0.0
    with torch.no_grad():
        for p in policy.parameters():
            if p.grad is None:
                continue
            sq += float((p.grad**2).sum())
            p -= lr * p.grad
    policy.zero_grad(set_to_none=True)
    return lr * math.sqrt(sq)


def sft_step(
    policy: TracePolicy,
    items: list[tuple[np.ndarray, str]],
    lr: float,
) -> float:
    """One supervised step: mean length-normalized NLL of gold traces."""
    losses = []
    for features, text in items:
        lp, n = policy.trace_log_prob(features, text)
        losses.append(gen_loss(lp, n))
    loss = torch.stack(losses).mean()
    policy.zero_grad(set_to_none=True)
    loss.backward()
    _gradient_step(policy, lr)
    return float(loss.detach())


def mpo_step(
    policy: TracePolicy,
    ref_policy: TracePolicy,
    batch: list[PreferenceSample],
    cfg: DPOConfig,
    weights: MPOWeights,
    lr: float,
) -> tuple[float, dict[str, float], float]:
    """One mixed-objective gradient step over a preference batch.

    Returns the batch-mean total, the per-term means, and the applied
    parameter-update norm. With all weights zero the parameters are left
    unchanged; with only the generation weight active the step reduces to a
    supervised step on the chosen responses.
    """
    if not batch:
        raise ValueError("empty preference batch")
    terms: dict[str, list[torch.Tensor]] = {k: [] for k in ("L_p", "L_q", "L_g", "L_f", "L_c")}
    totals: list[torch.Tensor] = []
    for sample in batch:
        lp_tc, n_c = policy.trace_log_prob(sample.features, sample.chosen_text)
        lp_tr, n_r = policy.trace_log_prob(sample.features, sample.rejected_text)
        with torch.no_grad():
            lp_rc, _ = ref_policy.trace_log_prob(sample.features, sample.chosen_text)
            lp_rr, _ = ref_policy.trace_log_prob(sample.features, sample.rejected_text)
        if cfg.length_normalized:
            lps = PolicyLogProbs(
                lp_tc / n_c, lp_rc / n_c, lp_tr / n_r, lp_rr / n_r, len_c=sample.len_c
            )
        else:
            lps = PolicyLogProbs(lp_tc, lp_rc, lp_tr, lp_rr, len_c=sample.len_c)
        l_p = dpo_loss(lps, cfg.beta)
        _, _, l_q = bco_loss(lps, cfg.beta, cfg.delta)
        l_g = gen_loss(lp_tc, sample.len_c)
        p_f, p_o = policy.reward_probs_t(sample.features)
        l_f = format_loss(p_f, sample.flags.f_true)
        l_c = outcome_loss(p_o, sample.flags.o_true)
        for key, value in zip(terms, (l_p, l_q, l_g, l_f, l_c)):
            terms[key].append(value)
        totals.append(mpo_total(weights, l_p, l_q, l_g, l_f, l_c))
    total = torch.stack(totals).mean()
    policy.zero_grad(set_to_none=True)
    total.backward()
    update_norm = _gradient_step(policy, lr)
    breakdown = {k: float(torch.stack(v).mean().detach()) for k, v in terms.items()}
    return float(total.detach()), breakdown, update_norm


def clone_reference(policy: TracePolicy) -> TracePolicy:
    """Deep-copy a policy and freeze it as the preference reference."""
    ref = copy.deepcopy(policy)
    for p in ref.parameters():
        p.requires_grad_(False)
    return ref
