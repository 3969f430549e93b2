from __future__ import annotations

import dataclasses

import numpy as np
import pytest
import torch

from dubflow.conditions import (
    SpeechPrompt,
    TokenSeq,
    VisualFeatureSeq,
    assemble_conditions,
)
from dubflow.nets import BinnedAffineVelocity, ConditionalVelocityNet, DurationPredictor
from dubflow.traces import Conclusion


def _net(seed: int = 0) -> ConditionalVelocityNet:
    return ConditionalVelocityNet(
        feature_dim=4, visual_dim=3, vocab_size=10, hidden=16, seed=seed
    )


def _conds(visual=True, conclusion=True, transcript=True, prompt=False):
    return assemble_conditions(
        VisualFeatureSeq(frames=np.ones((5, 3)), fps=25.0) if visual else None,
        Conclusion("dialogue", "male", "adult", "happy") if conclusion else None,
        TokenSeq(ids=np.array([1, 2, 3])) if transcript else None,
        SpeechPrompt(frames=np.full((2, 4), 0.5)) if prompt else None,
    )


def test_fresh_branches_do_not_change_the_trunk_output():
    net = _net()
    x = torch.randn(6, 4, dtype=torch.float64)
    with torch.no_grad():
        with_conds = net.evaluate(x, 0.3, _conds())
        trunk_only = net.evaluate(x, 0.3, _conds(visual=False, conclusion=False))
    assert torch.equal(with_conds, trunk_only)


def test_branches_respond_after_perturbation():
    net = _net()
    with torch.no_grad():
        net.branch_visual.weight.fill_(0.1)
    x = torch.randn(6, 4, dtype=torch.float64)
    with torch.no_grad():
        a = net.evaluate(x, 0.3, _conds())
        b = net.evaluate(x, 0.3, _conds(visual=False))
    assert not torch.equal(a, b)


def test_branch_gradients_flow_at_zero_init():
    # Zero weights are not a saddle: the branch input is non-zero, so the
    # first gradient step can move the branch weights.
    net = _net()
    x = torch.randn(4, 4, dtype=torch.float64)
    out = net.evaluate(x, 0.2, _conds())
    out.square().mean().backward()
    assert float(net.branch_visual.weight.grad.abs().sum()) > 0.0
    assert float(net.branch_conclusion.weight.grad.abs().sum()) > 0.0


def test_trunk_and_branch_parameters_partition_everything():
    net = _net()
    trunk = {id(p) for p in net.trunk_parameters()}
    branch = {id(p) for p in net.branch_parameters()}
    everything = {id(p) for p in net.parameters()}
    assert trunk | branch == everything
    assert trunk & branch == set()


def test_token_rows_follow_uniform_alignment():
    net = _net()
    conds = dataclasses.replace(_conds(), transcript=TokenSeq(ids=np.array([3, 7])))
    with torch.no_grad():
        rows = net._token_rows(conds, total=6, skip=0)
        # Two tokens over six rows: the first three rows carry token 3.
        for row in range(3):
            assert torch.equal(rows[row], net.token_table[3])
        for row in range(3, 6):
            assert torch.equal(rows[row], net.token_table[7])


def test_context_rows_get_null_token_embedding():
    net = _net()
    with torch.no_grad():
        net.null_token.fill_(0.25)
        rows = net._token_rows(_conds(), total=5, skip=2)
        assert torch.equal(rows[0], torch.full((8,), 0.25, dtype=torch.float64))
        assert torch.equal(rows[1], torch.full((8,), 0.25, dtype=torch.float64))
        assert not torch.equal(rows[2], rows[1])


def test_evaluate_validates_shapes():
    net = _net()
    with pytest.raises(ValueError):
        net.evaluate(torch.zeros(3, 5, dtype=torch.float64), 0.1, _conds())
    # A prompt that leaves no target rows is rejected.
    conds = _conds(prompt=True)
    with pytest.raises(ValueError):
        net.evaluate(torch.zeros(2, 4, dtype=torch.float64), 0.1, conds)


def test_evaluate_is_deterministic_per_seed():
    x = torch.ones(3, 4, dtype=torch.float64)
    with torch.no_grad():
        a = _net(seed=5).evaluate(x, 0.7, _conds())
        b = _net(seed=5).evaluate(x, 0.7, _conds())
        c = _net(seed=6).evaluate(x, 0.7, _conds())
    assert torch.equal(a, b)
    assert not torch.equal(a, c)


def test_binned_affine_velocity_bins_and_zero_init():
    model = BinnedAffineVelocity(bins=10)
    x = torch.ones(4, 1, dtype=torch.float64)
    with torch.no_grad():
        assert torch.equal(model.evaluate(x, 0.0, None), torch.zeros_like(x))
    assert model._bin(0.0) == 0
    assert model._bin(0.999) == 9
    assert model._bin(1.0) == 9  # clamped into the last bin


def test_duration_predictor_outputs_positive_seconds():
    dur = DurationPredictor(visual_dim=3, frame_hop=0.01, seed=1)
    visual = VisualFeatureSeq(frames=np.random.default_rng(0).normal(size=(6, 3)), fps=25.0)
    for conclusion in (None, Conclusion("dialogue", "male", "adult", "happy")):
        assert dur.predict_seconds(visual, conclusion) > 0.0


def test_duration_predictor_uses_conclusion():
    dur = DurationPredictor(visual_dim=3, frame_hop=0.01, seed=1)
    with torch.no_grad():
        for p in dur.parameters():
            p.add_(torch.randn(p.shape, dtype=torch.float64) * 0.1)
    visual = VisualFeatureSeq(frames=np.ones((4, 3)), fps=25.0)
    a = dur.predict_seconds(visual, Conclusion("dialogue", "male", "adult", "happy"))
    b = dur.predict_seconds(visual, Conclusion("dialogue", "male", "child", "happy"))
    assert a != b
