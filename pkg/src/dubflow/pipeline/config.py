"""Run configuration: one flat, human-readable key-value file.

Configs are YAML mappings of scalar values. Unknown keys are rejected so a
typo cannot silently fall back to a default; every run directory receives a
snapshot of the resolved config.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import yaml

from ..sampler import SCHEMES


@dataclass
class RunConfig:
    seed: int = 0

    # Synthetic data.
    data_items: int = 120
    data_val_share: float = 0.125
    data_fps: float = 25.0
    data_frame_hop: float = 0.01
    data_feature_dim: int = 12
    data_visual_dim: int = 8
    data_min_tokens: int = 3
    data_max_tokens: int = 8

    # Stage 1.1: supervised trace training.
    sft_hidden: int = 32
    sft_lr: float = 0.5
    sft_steps: int = 300
    sft_batch: int = 16

    # Stage 1.2: mixed preference optimization.
    mpo_beta: float = 0.1
    mpo_delta: float = 0.0
    mpo_length_normalized: bool = False
    mpo_lr: float = 0.2
    mpo_steps: int = 150
    mpo_batch: int = 16
    mpo_w_p: float = 1.0
    mpo_w_q: float = 1.0
    mpo_w_g: float = 1.0
    mpo_w_f: float = 1.0
    mpo_w_c: float = 1.0

    # Stage 2.1: flow-matching pretraining (transcript + prompt only).
    flow_sigma_min: float = 1e-4
    cfm_hidden: int = 64
    cfm_lr: float = 0.02
    cfm_steps: int = 800
    cfm_batch: int = 8
    cfm_dropout: float = 0.1
    cfm_prompt_share: float = 0.5

    # Stage 2.2: condition-branch tuning plus duration predictor.
    tune_lr: float = 0.02
    tune_steps: int = 400
    tune_batch: int = 8
    tune_dropout: float = 0.05

    # Sampling and guidance.
    sampler_steps: int = 32
    sampler_scheme: str = "euler"
    guidance_visual: float = 2.0
    guidance_conclusion: float = 2.0
    guidance_transcript: float = 2.0
    prompt_max_frames: int = 40

    # Inference and evaluation.
    infer_split: str = "test"
    infer_max_items: int = 0
    eval_cepstral_order: int = 8

    def __post_init__(self) -> None:
        if self.data_items < 3:
            raise ValueError("data_items must be at least 3")
        if not 0.0 <= self.data_val_share < 1.0:
            raise ValueError("data_val_share must lie in [0, 1)")
        if self.data_min_tokens < 1 or self.data_max_tokens < self.data_min_tokens:
            raise ValueError("token count range is invalid")
        for name in ("data_fps", "data_frame_hop", "sft_lr", "mpo_lr", "cfm_lr", "tune_lr"):
            if not float(getattr(self, name)) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.flow_sigma_min < 1.0:
            raise ValueError("flow_sigma_min must lie in [0, 1)")
        for name in ("cfm_dropout", "tune_dropout", "cfm_prompt_share"):
            if not 0.0 <= float(getattr(self, name)) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.sampler_scheme not in SCHEMES:
            raise ValueError(f"sampler_scheme must be one of {SCHEMES}")
        if self.sampler_steps < 1:
            raise ValueError("sampler_steps must be at least 1")
        if self.infer_split not in ("train", "val", "test"):
            raise ValueError("infer_split must be train, val, or test")
        if self.eval_cepstral_order < 1:
            raise ValueError("eval_cepstral_order must be at least 1")


def load_config(path: Path | str) -> RunConfig:
    """Read a YAML key-value file over the defaults; unknown keys error out."""
    raw = yaml.safe_load(Path(path).read_text())
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ValueError("config must be a flat key-value mapping")
    known = {f.name: f.type for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    return RunConfig(**raw)


def save_config(cfg: RunConfig, path: Path | str) -> None:
    Path(path).write_text(
        yaml.safe_dump(dataclasses.asdict(cfg), sort_keys=True, default_flow_style=False)
    )
