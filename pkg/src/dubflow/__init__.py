"""Two-stage movie dubbing toolkit.

Stage 1 trains a reasoning policy over video features: supervised traces
first, then a mixed preference objective that couples pairwise preference,
binary classifier rewards, likelihood, and two trace-level reward channels.
Stage 2 generates speech features with conditional flow matching under
multi-condition guidance, with a prompt-infilling protocol for voice
cloning and a duration predictor for length control.

The :mod:`dubflow.pipeline` subpackage wires both stages into a file-based
CLI; the metric suite in :mod:`dubflow.metrics` scores generations.
"""

from .conditions import (
    DubbingConditions,
    SpeechPrompt,
    TokenSeq,
    VisualFeatureSeq,
    assemble_conditions,
    dropout_conditions,
)
from .flow import FeatureSeq, FlowConfig, cfm_loss, duration_loss, sample_ot_path
from .metrics import cepstra_from_features, cosine_sim, dtw_align, mcd, mcd_sl, wer
from .preference import (
    DPOConfig,
    MPOWeights,
    TracePolicy,
    bco_loss,
    dpo_loss,
    gen_loss,
    mpo_total,
)
from .rewards import format_loss, outcome_check, outcome_loss, score_trace
from .sampler import GuidanceScales, SamplerConfig, guided_velocity, integrate
from .traces import (
    Conclusion,
    CoTTrace,
    FormatReport,
    ViolationCode,
    parse_trace,
    render_trace,
    validate_format,
)

__version__ = "0.1.0"

__all__ = [
    "Conclusion",
    "CoTTrace",
    "DPOConfig",
    "DubbingConditions",
    "FeatureSeq",
    "FlowConfig",
    "FormatReport",
    "GuidanceScales",
    "MPOWeights",
    "SamplerConfig",
    "SpeechPrompt",
    "TokenSeq",
    "TracePolicy",
    "ViolationCode",
    "VisualFeatureSeq",
    "assemble_conditions",
    "bco_loss",
    "cepstra_from_features",
    "cfm_loss",
    "cosine_sim",
    "dpo_loss",
    "dropout_conditions",
    "dtw_align",
    "duration_loss",
    "format_loss",
    "gen_loss",
    "guided_velocity",
    "integrate",
    "mcd",
    "mcd_sl",
    "mpo_total",
    "outcome_check",
    "outcome_loss",
    "parse_trace",
    "render_trace",
    "sample_ot_path",
    "score_trace",
    "validate_format",
    "wer",
    "__version__",
]
