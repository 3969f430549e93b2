"""Synthetic dubbing corpus with planted, recoverable structure.

Every clip gets visual features whose channels encode the scene cluster, the
on-screen person count, and speaker-attribute levels; target speech features
whose channel bands encode speaker identity, emotion, and the transcript as
codebook blocks; a gold reasoning trace; and a manifest record. All draws
come from one seeded generator, so a config maps to byte-identical files.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..conditions import TokenSeq, VisualFeatureSeq
from ..flow import FeatureSeq, save_features
from ..traces import (
    AGE_LABELS,
    EMOTION_LABELS,
    GENDER_LABELS,
    SCENE_LABELS,
    Conclusion,
    CoTTrace,
    render_trace,
)
from .config import RunConfig

# Feature-channel layout of target speech features.
SPEAKER_SLICE = slice(0, 4)
EMOTION_SLICE = slice(4, 8)
CONTENT_SLICE = slice(8, 12)
MIN_FEATURE_DIM = 12

# Attribute pools for data synthesis exclude the "unknown" escape label.
DATA_GENDERS = tuple(g for g in GENDER_LABELS if g != "unknown")
DATA_AGES = tuple(a for a in AGE_LABELS if a != "unknown")
DATA_EMOTIONS = tuple(e for e in EMOTION_LABELS if e != "unknown")

WORD_VOCAB: tuple[str, ...] = (
    "come", "back", "stay", "here", "look", "there", "tell", "truth",
    "leave", "now", "hold", "still", "every", "word", "matters", "tonight",
    "quiet", "please", "listen", "close", "never", "again", "always", "remember",
)

# Level-1 vs Level-2 sizing ratios the split mirrors, scaled to data_items.
_LEVEL1_TRAIN, _LEVEL1_TEST = 7276, 1100
_LEVEL2_TRAIN, _LEVEL2_TEST = 3486, 388
_LEVEL2_SHARE = (_LEVEL2_TRAIN + _LEVEL2_TEST) / (
    _LEVEL1_TRAIN + _LEVEL1_TEST + _LEVEL2_TRAIN + _LEVEL2_TEST
)
_TEST_SHARE = {
    "level1": _LEVEL1_TEST / (_LEVEL1_TRAIN + _LEVEL1_TEST),
    "level2": _LEVEL2_TEST / (_LEVEL2_TRAIN + _LEVEL2_TEST),
}

_SCENE_CLUSTERS = {
    "dialogue": np.array([3.0, 0.6, 0.6]),
    "monologue": np.array([0.6, 3.0, 0.6]),
    "narration": np.array([0.6, 0.6, 3.0]),
}

_table_rng = np.random.default_rng(20240601)
SPEAKER_LEVELS: dict[tuple[str, str], np.ndarray] = {
    (g, a): 1.5 + _table_rng.uniform(0.0, 2.5, size=4)
    for g in DATA_GENDERS
    for a in DATA_AGES
}
EMOTION_LEVELS: dict[str, np.ndarray] = {
    e: 1.5 + _table_rng.uniform(0.0, 2.5, size=4) for e in DATA_EMOTIONS
}
TOKEN_CODEBOOK: dict[str, np.ndarray] = {
    w: 1.5 + _table_rng.uniform(0.0, 2.5, size=4) for w in WORD_VOCAB
}

_BAND_NOISE = 0.08
_FEATURE_FLOOR = 0.05


@dataclass
class ManifestRecord:
    """One corpus entry, serialized as a single JSON line."""

    id: str
    video_features_path: str
    transcript: str
    scene: str
    gender: str
    age: str
    emotion: str
    features_path: str
    duration_s: float
    split: str
    level: str

    def __post_init__(self) -> None:
        if self.scene not in SCENE_LABELS:
            raise ValueError(f"bad scene {self.scene!r}")
        if self.split not in ("train", "val", "test"):
            raise ValueError(f"bad split {self.split!r}")
        if self.level not in ("level1", "level2"):
            raise ValueError(f"bad level {self.level!r}")
        if not self.duration_s > 0:
            raise ValueError("duration_s must be positive")

    def conclusion(self) -> Conclusion:
        return Conclusion(
            scene=self.scene, gender=self.gender, age=self.age, emotion=self.emotion
        )


def write_manifest(path: Path | str, records: list[ManifestRecord]) -> None:
    lines = [
        json.dumps(dataclasses.asdict(r), sort_keys=True) for r in records
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path: Path | str) -> list[ManifestRecord]:
    records = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            records.append(ManifestRecord(**json.loads(line)))
    return records


def token_ids(words: list[str] | tuple[str, ...]) -> TokenSeq:
    """Map transcript words onto the fixed vocabulary indices."""
    try:
        ids = np.array([WORD_VOCAB.index(w) for w in words], dtype=np.int64)
    except ValueError as exc:
        raise ValueError(f"word outside vocabulary: {exc}") from exc
    return TokenSeq(ids=ids)


def frames_per_token(age: str, emotion: str) -> int:
    """Deterministic speaking rate: slower for older, flatter emotions."""
    return 5 + (DATA_AGES.index(age) if age in DATA_AGES else 1) + (
        1 if emotion in DATA_EMOTIONS and DATA_EMOTIONS.index(emotion) % 2 else 0
    )


def people_count(scene: str, rng: np.random.Generator) -> int:
    if scene == "dialogue":
        return 2 + int(rng.integers(3))
    if scene == "monologue":
        return 1
    return 0


def build_trace(conclusion: Conclusion, count: int) -> CoTTrace:
    """Template a four-step reasoning trace for a clip."""
    scene = conclusion.scene
    if scene == "dialogue":
        summary = f"A conversational clip with {count} people trading lines."
        talking = "Several visible people speak in turn, reacting to each other."
        inference = "Turn-taking between visible speakers marks the clip as dialogue."
    elif scene == "monologue":
        summary = "A clip centered on a single visible speaker."
        talking = "The one visible person speaks continuously to the camera."
        inference = "A single on-screen speaker holding the floor marks a monologue."
    else:
        summary = "A scenery clip carried by an off-screen voice."
        talking = "A voice continues over the shots with nobody on screen speaking."
        inference = "Speech without any visible speaker marks narration."
    art = "an" if conclusion.age[0] in "aeiou" else "a"
    caption = (
        f"The voice suggests {art} {conclusion.age} {conclusion.gender} speaker "
        f"in a {conclusion.emotion} mood."
    )
    steps = (
        f"I count {count} people on screen.",
        talking,
        inference,
        f"The voice fits {art} {conclusion.age} {conclusion.gender} speaker sounding {conclusion.emotion}.",
    )
    return CoTTrace(summary=summary, caption=caption, steps=steps, conclusion=conclusion)


def save_visual(path: Path | str, visual: VisualFeatureSeq) -> None:
    path = Path(path)
    np.savetxt(path, visual.frames, fmt="%.10e")
    meta = {"fps": visual.fps, "dim": int(visual.frames.shape[1])}
    path.with_suffix(path.suffix + ".meta.json").write_text(
        json.dumps(meta, sort_keys=True) + "\n"
    )


def load_visual(path: Path | str) -> VisualFeatureSeq:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".meta.json").read_text())
    frames = np.loadtxt(path, dtype=np.float64, ndmin=2)
    return VisualFeatureSeq(frames=frames, fps=float(meta["fps"]))


def _synth_visual(
    cfg: RunConfig,
    scene: str,
    gender: str,
    age: str,
    emotion: str,
    count: int,
    duration_s: float,
    rng: np.random.Generator,
) -> VisualFeatureSeq:
    frames_n = max(2, int(round(duration_s * cfg.data_fps)))
    dv = cfg.data_visual_dim
    if dv < 8:
        raise ValueError("data_visual_dim must be at least 8")
    frames = np.empty((frames_n, dv))
    frames[:, 0:3] = _SCENE_CLUSTERS[scene] + rng.normal(0.0, 0.25, size=(frames_n, 3))
    frames[:, 3] = count + rng.normal(0.0, 0.05, size=frames_n)
    frames[:, 4] = 0.8 + 1.0 * DATA_GENDERS.index(gender) + rng.normal(0.0, 0.08, frames_n)
    frames[:, 5] = 0.7 + 0.8 * DATA_AGES.index(age) + rng.normal(0.0, 0.08, frames_n)
    frames[:, 6] = 0.5 + 0.45 * DATA_EMOTIONS.index(emotion) + rng.normal(0.0, 0.08, frames_n)
    frames[:, 7:] = 1.0 + rng.normal(0.0, 0.3, size=(frames_n, dv - 7))
    return VisualFeatureSeq(frames=frames, fps=cfg.data_fps)


def _synth_target(
    cfg: RunConfig,
    gender: str,
    age: str,
    emotion: str,
    words: list[str],
    rng: np.random.Generator,
) -> FeatureSeq:
    if cfg.data_feature_dim < MIN_FEATURE_DIM:
        raise ValueError(f"data_feature_dim must be at least {MIN_FEATURE_DIM}")
    fpt = frames_per_token(age, emotion)
    frames_n = fpt * len(words)
    frames = 1.0 + rng.normal(0.0, _BAND_NOISE, size=(frames_n, cfg.data_feature_dim))
    frames[:, SPEAKER_SLICE] = SPEAKER_LEVELS[(gender, age)] + rng.normal(
        0.0, _BAND_NOISE, size=(frames_n, 4)
    )
    frames[:, EMOTION_SLICE] = EMOTION_LEVELS[emotion] + rng.normal(
        0.0, _BAND_NOISE, size=(frames_n, 4)
    )
    n = len(words)
    for f in range(frames_n):
        # Same uniform alignment the generator uses: frame f carries token
        # floor(f * n / F); with F = n * fpt these are exact fpt-long runs.
        frames[f, CONTENT_SLICE] = TOKEN_CODEBOOK[words[(f * n) // frames_n]]
    frames[:, CONTENT_SLICE] += rng.normal(0.0, _BAND_NOISE, size=(frames_n, 4))
    frames = np.maximum(frames, _FEATURE_FLOOR)
    return FeatureSeq(frames=frames, frame_hop=cfg.data_frame_hop)


def _scene_counts(total: int) -> dict[str, int]:
    base, rem = divmod(total, len(SCENE_LABELS))
    return {s: base + (1 if i < rem else 0) for i, s in enumerate(SCENE_LABELS)}


def _assignment_labels(cfg: RunConfig, scene_n: int) -> list[tuple[str, str]]:
    """(level, split) labels for one scene's items, in construction order."""
    n2 = int(round(scene_n * _LEVEL2_SHARE))
    labels: list[tuple[str, str]] = []
    for level, n in (("level1", scene_n - n2), ("level2", n2)):
        if n == 0:
            continue
        test_n = max(1, int(round(n * _TEST_SHARE[level]))) if n >= 3 else 0
        val_n = int(round((n - test_n) * cfg.data_val_share))
        train_n = n - test_n - val_n
        labels.extend([(level, "train")] * train_n)
        labels.extend([(level, "val")] * val_n)
        labels.extend([(level, "test")] * test_n)
    return labels


def synth_dataset(cfg: RunConfig, out_dir: Path | str) -> list[ManifestRecord]:
    """Generate the corpus under ``out_dir``; returns the manifest records.

    Writes visual/ and features/ per-clip files, traces.jsonl with rendered
    gold traces, and manifest.jsonl. Same config, same bytes.
    """
    out = Path(out_dir)
    (out / "visual").mkdir(parents=True, exist_ok=True)
    (out / "features").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([cfg.seed, 101])

    records: list[ManifestRecord] = []
    trace_lines: list[str] = []
    idx = 0
    for scene, scene_n in _scene_counts(cfg.data_items).items():
        labels = _assignment_labels(cfg, scene_n)
        assert len(labels) == scene_n
        for level, split in labels:
            clip_id = f"clip{idx:04d}"
            idx += 1
            gender = DATA_GENDERS[int(rng.integers(len(DATA_GENDERS)))]
            age = DATA_AGES[int(rng.integers(len(DATA_AGES)))]
            emotion = DATA_EMOTIONS[int(rng.integers(len(DATA_EMOTIONS)))]
            n_tokens = int(rng.integers(cfg.data_min_tokens, cfg.data_max_tokens + 1))
            words = [WORD_VOCAB[int(rng.integers(len(WORD_VOCAB)))] for _ in range(n_tokens)]
            count = people_count(scene, rng)

            target = _synth_target(cfg, gender, age, emotion, words, rng)
            duration_s = target.duration_s
            visual = _synth_visual(cfg, scene, gender, age, emotion, count, duration_s, rng)

            visual_path = out / "visual" / f"{clip_id}.txt"
            features_path = out / "features" / f"{clip_id}.txt"
            save_visual(visual_path, visual)
            save_features(features_path, target)

            conclusion = Conclusion(scene=scene, gender=gender, age=age, emotion=emotion)
            trace_lines.append(
                json.dumps(
                    {
                        "id": clip_id,
                        "text": render_trace(build_trace(conclusion, count)),
                        "gold": conclusion.as_dict(),
                    },
                    sort_keys=True,
                )
            )
            records.append(
                ManifestRecord(
                    id=clip_id,
                    video_features_path=str(visual_path.relative_to(out)),
                    transcript=" ".join(words),
                    scene=scene,
                    gender=gender,
                    age=age,
                    emotion=emotion,
                    features_path=str(features_path.relative_to(out)),
                    duration_s=duration_s,
                    split=split,
                    level=level,
                )
            )

    write_manifest(out / "manifest.jsonl", records)
    (out / "traces.jsonl").write_text("\n".join(trace_lines) + "\n")
    return records


def read_traces(path: Path | str) -> dict[str, dict]:
    """Load the gold-trace corpus as id -> {text, gold} records."""
    out: dict[str, dict] = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            rec = json.loads(line)
            out[rec["id"]] = rec
    return out


# ---------------------------------------------------------------------------
# Reference decoders and embeddings used by evaluation.


def speaker_embedding(seq: FeatureSeq) -> np.ndarray:
    """Speaker signature: mean of the speaker band over frames."""
    return seq.frames[:, SPEAKER_SLICE].mean(axis=0)


def emotion_embedding(seq: FeatureSeq) -> np.ndarray:
    """Emotion signature: mean of the emotion band over frames."""
    return seq.frames[:, EMOTION_SLICE].mean(axis=0)


def decode_tokens(seq: FeatureSeq, age: str, emotion: str) -> list[str]:
    """Nearest-codebook transcription of the content band.

    The block count follows the clip's nominal speaking rate, so shorter or
    longer generations decode to fewer or more tokens.
    """
    fpt = frames_per_token(age, emotion)
    frames_n = seq.frames.shape[0]
    n_blocks = max(1, int(round(frames_n / fpt)))
    vocab = list(TOKEN_CODEBOOK)
    codes = np.stack([TOKEN_CODEBOOK[w] for w in vocab])
    words = []
    for k in range(n_blocks):
        lo = (k * frames_n) // n_blocks
        hi = ((k + 1) * frames_n) // n_blocks
        block = seq.frames[lo:hi, CONTENT_SLICE].mean(axis=0)
        words.append(vocab[int(np.argmin(((codes - block) ** 2).sum(axis=1)))])
    return words
