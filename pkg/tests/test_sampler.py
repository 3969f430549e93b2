from __future__ import annotations

import numpy as np
import pytest
import torch

from dubflow.conditions import (
    SpeechPrompt,
    TokenSeq,
    VisualFeatureSeq,
    assemble_conditions,
)
from dubflow.nets import DurationPredictor
from dubflow.sampler import (
    GuidanceScales,
    IntegrationError,
    SamplerConfig,
    guided_velocity,
    integrate,
    predict_duration,
)
from dubflow.traces import Conclusion


def _bundle(with_prompt: bool = False):
    return assemble_conditions(
        VisualFeatureSeq(frames=np.ones((3, 2)), fps=25.0),
        Conclusion("dialogue", "male", "adult", "happy"),
        TokenSeq(ids=np.array([1, 2])),
        SpeechPrompt(frames=np.zeros((2, 3))) if with_prompt else None,
    )


class _PatternModel:
    """Velocity depends only on which condition slots are present."""

    def __init__(self, seed: int, dim: int = 3) -> None:
        rng = np.random.default_rng(seed)
        self.tables = {}
        for key in range(8):
            self.tables[key] = torch.as_tensor(rng.normal(size=dim))
        self.calls: list[tuple[bool, bool, bool, bool]] = []

    def evaluate(self, x, tau, conds):
        pattern = (
            conds.visual is not None,
            conds.conclusion is not None,
            conds.transcript is not None,
            conds.prompt is not None,
        )
        self.calls.append(pattern)
        key = pattern[0] * 4 + pattern[1] * 2 + pattern[2] * 1
        return torch.zeros_like(x) + self.tables[key]


def test_guided_velocity_makes_exactly_four_calls():
    model = _PatternModel(0)
    x = torch.zeros(4, 3, dtype=torch.float64)
    guided_velocity(model, x, 0.5, _bundle(with_prompt=True), GuidanceScales())
    assert len(model.calls) == 4
    # Patterns: full, no-visual, transcript-only, all-null; prompt always kept.
    assert model.calls == [
        (True, True, True, True),
        (False, True, True, True),
        (False, False, True, True),
        (False, False, False, True),
    ]


def test_unit_scales_reduce_bitwise_to_full():
    for seed in range(50):
        model = _PatternModel(seed)
        x = torch.zeros(2, 3, dtype=torch.float64)
        conds = _bundle()
        g = guided_velocity(model, x, 0.3, conds, GuidanceScales(1.0, 1.0, 1.0))
        v_full = model.evaluate(x, 0.3, conds)
        assert torch.equal(g, v_full)


def test_zero_scales_reduce_bitwise_to_null():
    import dataclasses

    for seed in range(50):
        model = _PatternModel(seed)
        x = torch.zeros(2, 3, dtype=torch.float64)
        conds = _bundle()
        g = guided_velocity(model, x, 0.3, conds, GuidanceScales(0.0, 0.0, 0.0))
        null = dataclasses.replace(conds, visual=None, conclusion=None, transcript=None)
        assert torch.equal(g, model.evaluate(x, 0.3, null))


def test_guided_velocity_matches_bracket_form():
    import dataclasses

    rng = np.random.default_rng(99)
    for _ in range(50):
        model = _PatternModel(int(rng.integers(1 << 30)))
        lam_v, lam_c, lam_t = rng.uniform(0.0, 4.0, size=3)
        x = torch.zeros(2, 3, dtype=torch.float64)
        conds = _bundle()
        g = guided_velocity(model, x, 0.1, conds, GuidanceScales(lam_v, lam_c, lam_t))
        v_full = model.evaluate(x, 0.1, conds)
        v_nv = model.evaluate(x, 0.1, dataclasses.replace(conds, visual=None))
        v_tr = model.evaluate(
            x, 0.1, dataclasses.replace(conds, visual=None, conclusion=None)
        )
        v_null = model.evaluate(
            x, 0.1, dataclasses.replace(conds, visual=None, conclusion=None, transcript=None)
        )
        bracket = (
            v_null
            + lam_t * (v_tr - v_null)
            + lam_c * (v_nv - v_tr)
            + lam_v * (v_full - v_nv)
        )
        assert torch.allclose(g, bracket, atol=1e-12)


def test_scales_validated():
    with pytest.raises(ValueError):
        GuidanceScales(visual=-1.0)
    with pytest.raises(ValueError):
        GuidanceScales(transcript=float("nan"))
    with pytest.raises(ValueError):
        SamplerConfig(steps=0)
    with pytest.raises(ValueError):
        SamplerConfig(scheme="rk4")


class _FixedField:
    def __init__(self, fn):
        self.fn = fn

    def evaluate(self, x, tau, conds):
        return self.fn(x, tau)


def test_integrate_constant_field_lands_on_shift():
    c = torch.tensor([2.0, -1.0], dtype=torch.float64)
    model = _FixedField(lambda x, tau: torch.zeros_like(x) + c)
    for scheme in ("euler", "midpoint"):
        rng = np.random.default_rng(5)
        noise = np.random.default_rng(5).standard_normal((6, 2))
        seq = integrate(
            model,
            assemble_conditions(None, None, None, None),
            GuidanceScales(1.0, 1.0, 1.0),
            SamplerConfig(steps=32, scheme=scheme),
            target_frames=6,
            feature_dim=2,
            frame_hop=0.01,
            rng=rng,
        )
        assert np.allclose(seq.frames, noise + c.numpy(), atol=1e-12)


def test_integrate_schemes_match_closed_forms_for_linear_time_field():
    a = 3.0
    model = _FixedField(lambda x, tau: torch.full_like(x, a * tau))
    n = 16

    def run(scheme):
        return integrate(
            model,
            assemble_conditions(None, None, None, None),
            GuidanceScales(1.0, 1.0, 1.0),
            SamplerConfig(steps=n, scheme=scheme),
            target_frames=1,
            feature_dim=1,
            frame_hop=0.01,
            rng=np.random.default_rng(2),
        ).frames[0, 0]

    x0 = float(np.random.default_rng(2).standard_normal((1, 1))[0, 0])
    # Left Riemann sum for Euler; the midpoint rule integrates a*tau exactly.
    euler_expected = x0 + a * sum(k / n for k in range(n)) / n
    midpoint_expected = x0 + a * 0.5
    assert run("euler") == pytest.approx(euler_expected, abs=1e-12)
    assert run("midpoint") == pytest.approx(midpoint_expected, abs=1e-12)


def test_integrate_keeps_prompt_rows_fixed_and_excluded():
    seen_context = []

    def fn(x, tau):
        seen_context.append(x[:2].clone())
        return torch.ones_like(x)

    prompt = SpeechPrompt(frames=np.full((2, 2), 7.0))
    seq = integrate(
        _FixedField(fn),
        assemble_conditions(None, None, None, prompt),
        GuidanceScales(1.0, 1.0, 1.0),
        SamplerConfig(steps=4, scheme="euler"),
        target_frames=3,
        feature_dim=2,
        frame_hop=0.01,
        rng=np.random.default_rng(0),
    )
    assert seq.frames.shape == (3, 2)
    for ctx in seen_context:
        assert torch.equal(ctx, torch.full((2, 2), 7.0, dtype=torch.float64))


def test_integrate_rejects_prompt_dim_mismatch():
    prompt = SpeechPrompt(frames=np.zeros((2, 5)))
    with pytest.raises(ValueError):
        integrate(
            _FixedField(lambda x, tau: torch.zeros_like(x)),
            assemble_conditions(None, None, None, prompt),
            GuidanceScales(),
            SamplerConfig(steps=2),
            target_frames=3,
            feature_dim=2,
            frame_hop=0.01,
            rng=np.random.default_rng(0),
        )


def test_integrate_flags_divergence_with_step_index():
    model = _FixedField(lambda x, tau: torch.full_like(x, float("inf")))
    with pytest.raises(IntegrationError, match="step 0"):
        integrate(
            model,
            assemble_conditions(None, None, None, None),
            GuidanceScales(),
            SamplerConfig(steps=4),
            target_frames=2,
            feature_dim=2,
            frame_hop=0.01,
            rng=np.random.default_rng(0),
        )


def test_predict_duration_rounds_to_frames():
    dur = DurationPredictor(visual_dim=3, frame_hop=0.01, seed=0)
    visual = VisualFeatureSeq(frames=np.zeros((4, 3)), fps=25.0)
    frames = predict_duration(dur, visual, None)
    assert frames >= 1
    assert frames == max(1, int(round(dur.predict_seconds(visual, None) / 0.01)))
