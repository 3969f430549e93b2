from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from dubflow.pipeline.config import RunConfig
from dubflow.pipeline.stages import (
    run_stage_cfm,
    run_stage_mpo,
    run_stage_sft,
    run_stage_tune,
)
from dubflow.pipeline.synth import synth_dataset
from dubflow.traces import Conclusion, CoTTrace, render_trace

# One line per acceptance check, echoed after the run so they survive
# pytest's output capture.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)


def small_config(**overrides) -> RunConfig:
    base = dict(
        seed=11,
        data_items=48,
        sft_steps=60,
        sft_batch=8,
        mpo_steps=15,
        mpo_batch=6,
        cfm_steps=60,
        cfm_batch=8,
        tune_steps=100,
        tune_batch=8,
        sampler_steps=8,
        infer_max_items=2,
    )
    base.update(overrides)
    return RunConfig(**base)


def make_trace(
    scene: str = "dialogue",
    gender: str = "female",
    age: str = "adult",
    emotion: str = "happy",
) -> CoTTrace:
    return CoTTrace(
        summary="Two people at a table.",
        caption="A calm indoor scene.",
        steps=(
            "I count 2 people on screen.",
            "Both of them speak in turn.",
            "Turn-taking marks the clip as dialogue.",
            "The voice sounds like an adult female.",
        ),
        conclusion=Conclusion(scene=scene, gender=gender, age=age, emotion=emotion),
    )


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def trained_run(tmp_path_factory) -> tuple[RunConfig, Path]:
    """One small corpus trained through all four stages, shared read-only."""
    out = tmp_path_factory.mktemp("run")
    cfg = small_config()
    synth_dataset(cfg, out)
    run_stage_sft(cfg, out)
    run_stage_mpo(cfg, out)
    run_stage_cfm(cfg, out)
    run_stage_tune(cfg, out)
    return cfg, out
