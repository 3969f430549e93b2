from __future__ import annotations

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dubflow.conditions import SpeechPrompt, assemble_conditions
from dubflow.flow import (
    FeatureSeq,
    FlowConfig,
    cfm_loss,
    duration_loss,
    load_features,
    sample_ot_path,
    save_features,
)

_NULL = assemble_conditions(None, None, None, None)


def test_flow_config_bounds():
    FlowConfig(sigma_min=0.0)
    with pytest.raises(ValueError):
        FlowConfig(sigma_min=1.0)
    with pytest.raises(ValueError):
        FlowConfig(sigma_min=-0.1)


def test_path_endpoints():
    rng = np.random.default_rng(0)
    x0, x1 = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
    start = sample_ot_path(x0, x1, 0.0, 1e-4)
    end = sample_ot_path(x0, x1, 1.0, 1e-4)
    assert np.array_equal(start.x_tau, x0)
    assert np.allclose(end.x_tau, 1e-4 * x0 + x1)


@given(tau=st.floats(0.0, 1.0), sigma=st.floats(0.0, 0.5))
@settings(max_examples=100, deadline=None)
def test_path_algebra(tau, sigma):
    rng = np.random.default_rng(17)
    x0, x1 = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    path = sample_ot_path(x0, x1, tau, sigma)
    assert np.allclose(path.x_tau, (1.0 - (1.0 - sigma) * tau) * x0 + tau * x1)
    # The target velocity is the time derivative of the path, constant in tau.
    assert np.allclose(path.u_target, x1 - (1.0 - sigma) * x0)


def test_path_velocity_is_difference_quotient():
    rng = np.random.default_rng(3)
    x0, x1 = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    h = 1e-6
    a = sample_ot_path(x0, x1, 0.4 - h, 0.01)
    b = sample_ot_path(x0, x1, 0.4 + h, 0.01)
    fd = (b.x_tau - a.x_tau) / (2 * h)
    assert np.allclose(fd, sample_ot_path(x0, x1, 0.4, 0.01).u_target, atol=1e-8)


def test_path_input_validation():
    x = np.zeros((2, 2))
    with pytest.raises(ValueError):
        sample_ot_path(x, x, -0.1, 0.0)
    with pytest.raises(ValueError):
        sample_ot_path(x, x, 0.5, 1.0)
    with pytest.raises(ValueError):
        sample_ot_path(np.zeros((2, 2)), np.zeros((3, 2)), 0.5, 0.0)


def test_path_works_on_torch_tensors():
    x0 = torch.randn(3, 2, dtype=torch.float64)
    x1 = torch.randn(3, 2, dtype=torch.float64)
    path = sample_ot_path(x0, x1, 0.3, 0.01)
    assert isinstance(path.x_tau, torch.Tensor)
    assert torch.allclose(path.u_target, x1 - 0.99 * x0)


class _PerfectModel:
    """Returns exactly the path's target velocity by inverting the path."""

    def __init__(self, x1: np.ndarray) -> None:
        self.x1 = torch.as_tensor(x1, dtype=torch.float64)

    def evaluate(self, x, tau, conds):
        x0 = (x - tau * self.x1) / (1.0 - tau)
        return self.x1 - x0


def test_cfm_loss_zero_for_perfect_model():
    rng = np.random.default_rng(5)
    x1 = rng.normal(size=(6, 3))
    loss = cfm_loss(_PerfectModel(x1), [(x1, _NULL)] * 4, rng, sigma_min=0.0)
    assert float(loss) < 1e-24


class _ConstantModel:
    def __init__(self, value: float, dim: int) -> None:
        self.value = value
        self.dim = dim

    def evaluate(self, x, tau, conds):
        return torch.full_like(x, self.value)


def test_cfm_loss_prompt_rows_are_masked():
    rng = np.random.default_rng(11)
    x1 = np.zeros((4, 2))
    prompt = SpeechPrompt(frames=np.full((3, 2), 9.0))
    with_prompt = assemble_conditions(None, None, None, prompt)

    class _Probe:
        def __init__(self):
            self.rows = None

        def evaluate(self, x, tau, conds):
            self.rows = x.shape[0]
            out = torch.zeros_like(x)
            out[:3] = 1e6  # junk on context rows must not reach the loss
            return out

    probe = _Probe()
    loss = cfm_loss(probe, [(x1, with_prompt)], rng, sigma_min=0.0)
    assert probe.rows == 7
    assert float(loss) < 1e4  # squared noise scale, nowhere near 1e12


def test_cfm_loss_rejects_shape_change():
    class _Bad:
        def evaluate(self, x, tau, conds):
            return x[:, :1]

    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        cfm_loss(_Bad(), [(np.zeros((3, 2)), _NULL)], rng)


def test_cfm_loss_empty_batch_rejected():
    with pytest.raises(ValueError):
        cfm_loss(_ConstantModel(0.0, 2), [], np.random.default_rng(0))


def test_cfm_loss_decreases_under_training():
    # A trainable constant field fit to a fixed target drives the loss down.
    rng = np.random.default_rng(23)
    x1 = np.full((8, 2), 3.0)

    class _Learned(torch.nn.Module):
        def __init__(self):
            super().__init__()
            self.c = torch.nn.Parameter(torch.zeros(2, dtype=torch.float64))

        def evaluate(self, x, tau, conds):
            return self.c.expand_as(x)

    model = _Learned()
    opt = torch.optim.SGD(model.parameters(), lr=0.2)
    losses = []
    for _ in range(60):
        loss = cfm_loss(model, [(x1, _NULL)] * 4, rng, sigma_min=0.0)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    assert losses[-1] < losses[0]
    # The optimum of a constant field is E[x1 - x0] = x1 mean.
    assert torch.allclose(
        model.c.detach(), torch.full((2,), 3.0, dtype=torch.float64), atol=0.5
    )


def test_duration_loss_log_domain():
    assert duration_loss(2.0, 2.0) == 0.0
    assert duration_loss(4.0, 2.0) == pytest.approx(math.log(2.0))
    assert duration_loss(1.0, 2.0) == pytest.approx(math.log(2.0))
    with pytest.raises(ValueError):
        duration_loss(0.0, 2.0)
    with pytest.raises(ValueError):
        duration_loss(1.0, 0.0)


def test_duration_loss_tensor_path():
    pred = torch.tensor(4.0, dtype=torch.float64, requires_grad=True)
    loss = duration_loss(pred, 2.0)
    loss.backward()
    assert float(loss.detach()) == pytest.approx(math.log(2.0))
    assert float(pred.grad) == pytest.approx(0.25)  # d|log p - log t|/dp = 1/p


def test_feature_seq_validation():
    with pytest.raises(ValueError):
        FeatureSeq(frames=np.zeros((0, 2)), frame_hop=0.01)
    with pytest.raises(ValueError):
        FeatureSeq(frames=np.array([[np.inf, 0.0]]), frame_hop=0.01)
    with pytest.raises(ValueError):
        FeatureSeq(frames=np.zeros((2, 2)), frame_hop=0.0)
    seq = FeatureSeq(frames=np.zeros((250, 2)), frame_hop=0.01)
    assert seq.duration_s == pytest.approx(2.5)


def test_features_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    seq = FeatureSeq(frames=rng.normal(size=(7, 5)), frame_hop=0.02)
    path = tmp_path / "clip.txt"
    save_features(path, seq)
    back = load_features(path)
    assert np.allclose(back.frames, seq.frames, rtol=0, atol=1e-9)
    assert back.frame_hop == seq.frame_hop
    # Saving the loaded copy reproduces the file byte for byte.
    save_features(tmp_path / "again.txt", back)
    assert (tmp_path / "again.txt").read_bytes() == path.read_bytes()


def test_load_features_checks_sidecar_dim(tmp_path):
    seq = FeatureSeq(frames=np.zeros((3, 4)), frame_hop=0.01)
    save_features(tmp_path / "c.txt", seq)
    meta = tmp_path / "c.txt.meta.json"
    meta.write_text(meta.read_text().replace('"dim": 4', '"dim": 5'))
    with pytest.raises(ValueError):
        load_features(tmp_path / "c.txt")
