"""Condition bundles for speech-feature generation.

Generation is steered by up to three droppable condition slots (visual
features, a reasoned conclusion, the transcript) plus an optional speech
prompt that is never dropped. An absent slot is the null condition, written
as ``None`` throughout; models substitute their learned null vectors for it.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .traces import AXIS_VOCAB, LABEL_AXES, Conclusion

# The conclusion slot carries plain closed-vocabulary labels.
ConclusionConditions = Conclusion


@dataclass(frozen=True)
class VisualFeatureSeq:
    """Per-frame visual features for one clip, with the clip frame rate."""

    frames: np.ndarray
    fps: float

    def __post_init__(self) -> None:
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[0] < 1 or frames.shape[1] < 1:
            raise ValueError("visual frames must be a non-empty (T, Dv) array")
        if not np.isfinite(frames).all():
            raise ValueError("visual frames must be finite")
        if not self.fps > 0:
            raise ValueError("fps must be positive")
        object.__setattr__(self, "frames", frames)

    @property
    def duration_s(self) -> float:
        return self.frames.shape[0] / self.fps


@dataclass(frozen=True)
class TokenSeq:
    """Transcript as a sequence of non-negative token ids."""

    ids: np.ndarray

    def __post_init__(self) -> None:
        ids = np.asarray(self.ids, dtype=np.int64)
        if ids.ndim != 1 or ids.shape[0] < 1:
            raise ValueError("token ids must be a non-empty 1-d array")
        if (ids < 0).any():
            raise ValueError("token ids must be non-negative")
        object.__setattr__(self, "ids", ids)

    def __len__(self) -> int:
        return int(self.ids.shape[0])


@dataclass(frozen=True)
class SpeechPrompt:
    """Reference speech frames (and optionally their transcript)."""

    frames: np.ndarray
    tokens: TokenSeq | None = None

    def __post_init__(self) -> None:
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[0] < 1:
            raise ValueError("prompt frames must be a non-empty (P, D) array")
        if not np.isfinite(frames).all():
            raise ValueError("prompt frames must be finite")
        object.__setattr__(self, "frames", frames)


@dataclass(frozen=True)
class DubbingConditions:
    """The three droppable slots plus the never-dropped speech prompt."""

    visual: VisualFeatureSeq | None
    conclusion: ConclusionConditions | None
    transcript: TokenSeq | None
    prompt: SpeechPrompt | None = None


def assemble_conditions(
    visual: VisualFeatureSeq | None,
    conclusion: ConclusionConditions | None,
    transcript: TokenSeq | None,
    prompt: SpeechPrompt | None = None,
) -> DubbingConditions:
    """Bundle condition slots, accepting ``None`` as the null condition."""
    if visual is not None and not isinstance(visual, VisualFeatureSeq):
        raise TypeError("visual must be VisualFeatureSeq or None")
    if conclusion is not None and not isinstance(conclusion, Conclusion):
        raise TypeError("conclusion must be Conclusion or None")
    if transcript is not None and not isinstance(transcript, TokenSeq):
        raise TypeError("transcript must be TokenSeq or None")
    if prompt is not None and not isinstance(prompt, SpeechPrompt):
        raise TypeError("prompt must be SpeechPrompt or None")
    return DubbingConditions(visual, conclusion, transcript, prompt)


def dropout_conditions(
    conds: DubbingConditions, p: float, rng: np.random.Generator
) -> DubbingConditions:
    """Independently drop each droppable slot to null with probability ``p``.

    Three uniforms are always consumed, one per slot in (visual, conclusion,
    transcript) order, so the random stream position never depends on the
    bundle contents. The prompt is never dropped.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError("dropout probability must lie in [0, 1]")
    draws = rng.uniform(size=3)
    return replace(
        conds,
        visual=None if draws[0] < p else conds.visual,
        conclusion=None if draws[1] < p else conds.conclusion,
        transcript=None if draws[2] < p else conds.transcript,
    )


class LabelEmbedder:
    """Maps (axis, label) pairs to fixed vectors of a common dimension."""

    def __init__(self, table: dict[tuple[str, str], np.ndarray], dim: int) -> None:
        self.table = table
        self.dim = dim
        for axis in LABEL_AXES:
            for label in AXIS_VOCAB[axis]:
                if (axis, label) not in table:
                    raise ValueError(f"embedder missing ({axis}, {label})")
                if table[(axis, label)].shape != (dim,):
                    raise ValueError("embedding dimensions must agree")

    def lookup(self, axis: str, label: str) -> np.ndarray:
        return self.table[(axis, label)]

    @classmethod
    def one_hot(cls) -> "LabelEmbedder":
        """One global basis vector per label; dim = total vocabulary size."""
        dim = sum(len(AXIS_VOCAB[a]) for a in LABEL_AXES)
        table: dict[tuple[str, str], np.ndarray] = {}
        offset = 0
        for axis in LABEL_AXES:
            for label in AXIS_VOCAB[axis]:
                vec = np.zeros(dim, dtype=np.float64)
                vec[offset] = 1.0
                table[(axis, label)] = vec
                offset += 1
        return cls(table, dim)

    @classmethod
    def random_projection(cls, dim: int, seed: int) -> "LabelEmbedder":
        """Frozen Gaussian embeddings, one per label, scaled by 1/sqrt(dim)."""
        rng = np.random.default_rng(seed)
        table = {
            (axis, label): rng.standard_normal(dim) / np.sqrt(dim)
            for axis in LABEL_AXES
            for label in AXIS_VOCAB[axis]
        }
        return cls(table, dim)


def encode_conclusion(conclusion: Conclusion, embedder: LabelEmbedder) -> np.ndarray:
    """Encode a conclusion as a (4, dim) stack of per-label embeddings.

    Row order follows the label axes (scene, gender, age, emotion), so
    changing one label changes exactly one row.
    """
    rows = [embedder.lookup(axis, getattr(conclusion, axis)) for axis in LABEL_AXES]
    return np.stack(rows, axis=0)
