"""Structured reasoning traces for dubbing scene analysis.

A trace is a four-block tagged document: a summary, a caption, exactly four
numbered reasoning steps, and a single-line conclusion naming the scene type
and speaker attributes over closed label vocabularies. This module owns the
grammar: rendering, strict parsing with per-violation diagnostics, and the
mutation helpers used to fuzz the parser and to synthesize rejected responses
for preference training.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field

import numpy as np

SCENE_LABELS: tuple[str, ...] = ("dialogue", "monologue", "narration")
GENDER_LABELS: tuple[str, ...] = ("male", "female", "unknown")
AGE_LABELS: tuple[str, ...] = ("child", "adult", "elder", "unknown")
EMOTION_LABELS: tuple[str, ...] = (
    "neutral",
    "happy",
    "sad",
    "angry",
    "fearful",
    "surprised",
    "unknown",
)

LABEL_AXES: tuple[str, ...] = ("scene", "gender", "age", "emotion")
AXIS_VOCAB: dict[str, tuple[str, ...]] = {
    "scene": SCENE_LABELS,
    "gender": GENDER_LABELS,
    "age": AGE_LABELS,
    "emotion": EMOTION_LABELS,
}

_TAGS: tuple[str, ...] = ("SUMMARY", "CAPTION", "REASONING", "CONCLUSION")
_STEP_COUNT = 4
_STEP_RE = re.compile(r"^Step (\d+)\. (.*)$")
_CONCLUSION_RE = re.compile(
    r"^scene=([a-z]+); gender=([a-z]+); age=([a-z]+); emotion=([a-z]+)$"
)


class TraceInvariantError(ValueError):
    """Raised when a trace violates a grammar invariant at render time."""


class ViolationCode(str, enum.Enum):
    MISSING_TAG = "missing_tag"
    UNCLOSED_TAG = "unclosed_tag"
    MISORDERED_TAG = "misordered_tag"
    DUPLICATE_TAG = "duplicate_tag"
    WRONG_STEP_COUNT = "wrong_step_count"
    EMPTY_SECTION = "empty_section"
    STRAY_TEXT = "stray_text"
    BAD_CONCLUSION = "bad_conclusion"


@dataclass(frozen=True)
class FormatViolation:
    code: ViolationCode
    offset: int
    detail: str


@dataclass
class FormatReport:
    """Outcome of validating raw text against the trace grammar."""

    violations: list[FormatViolation] = field(default_factory=list)

    @property
    def is_valid(self) -> bool:
        return not self.violations

    def codes(self) -> set[ViolationCode]:
        return {v.code for v in self.violations}


@dataclass(frozen=True)
class Conclusion:
    """Closed-vocabulary answer: scene type plus speaker attributes."""

    scene: str
    gender: str
    age: str
    emotion: str

    def __post_init__(self) -> None:
        for axis in LABEL_AXES:
            value = getattr(self, axis)
            if value not in AXIS_VOCAB[axis]:
                raise ValueError(f"{axis} label {value!r} not in vocabulary")

    def as_dict(self) -> dict[str, str]:
        return {axis: getattr(self, axis) for axis in LABEL_AXES}


@dataclass(frozen=True)
class CoTTrace:
    """Structured reasoning trace: summary, caption, four steps, conclusion."""

    summary: str
    caption: str
    steps: tuple[str, str, str, str]
    conclusion: Conclusion

    def __post_init__(self) -> None:
        if len(self.steps) != _STEP_COUNT:
            raise ValueError(f"expected {_STEP_COUNT} steps, got {len(self.steps)}")


def _check_renderable(trace: CoTTrace) -> None:
    sections: list[tuple[str, str]] = [
        ("summary", trace.summary),
        ("caption", trace.caption),
    ]
    sections.extend((f"step {i + 1}", s) for i, s in enumerate(trace.steps))
    for name, text in sections:
        if not isinstance(text, str) or not text.strip():
            raise TraceInvariantError(f"{name} must be non-empty text")
        if text != text.strip():
            raise TraceInvariantError(f"{name} must not carry leading/trailing whitespace")
        for tag in _TAGS:
            if f"<{tag}>" in text or f"</{tag}>" in text:
                raise TraceInvariantError(f"{name} must not contain grammar tags")
    for i, s in enumerate(trace.steps):
        if "\n" in s:
            raise TraceInvariantError(f"step {i + 1} must be a single line")


def render_trace(trace: CoTTrace) -> str:
    """Serialize a trace to canonical tagged text.

    Validates the grammar invariants first and raises
    :class:`TraceInvariantError` naming the violated invariant. The output
    round-trips through :func:`parse_trace` exactly.
    """
    _check_renderable(trace)
    c = trace.conclusion
    step_lines = "\n".join(f"Step {i + 1}. {s}" for i, s in enumerate(trace.steps))
    conclusion_line = (
        f"scene={c.scene}; gender={c.gender}; age={c.age}; emotion={c.emotion}"
    )
    return (
        f"<SUMMARY>{trace.summary}</SUMMARY>\n"
        f"<CAPTION>{trace.caption}</CAPTION>\n"
        f"<REASONING>\n{step_lines}\n</REASONING>\n"
        f"<CONCLUSION>\n{conclusion_line}\n</CONCLUSION>"
    )


def _tag_pair_spans(
    text: str, report: FormatReport
) -> dict[str, tuple[int, int, int, int]]:
    """Locate each tag pair; returns tag -> (open_start, open_end, close_start, close_end)."""
    spans: dict[str, tuple[int, int, int, int]] = {}
    for tag in _TAGS:
        open_tok, close_tok = f"<{tag}>", f"</{tag}>"
        opens = [m.start() for m in re.finditer(re.escape(open_tok), text)]
        closes = [m.start() for m in re.finditer(re.escape(close_tok), text)]
        if not opens and not closes:
            report.violations.append(
                FormatViolation(ViolationCode.MISSING_TAG, 0, f"{open_tok} block absent")
            )
            continue
        if len(opens) > 1 or len(closes) > 1:
            dup_at = (opens + closes)[1] if len(opens) > 1 else closes[1]
            report.violations.append(
                FormatViolation(
                    ViolationCode.DUPLICATE_TAG, dup_at, f"{tag} appears more than once"
                )
            )
            continue
        if opens and not closes:
            report.violations.append(
                FormatViolation(
                    ViolationCode.UNCLOSED_TAG, opens[0], f"{close_tok} missing"
                )
            )
            continue
        if closes and not opens:
            report.violations.append(
                FormatViolation(
                    ViolationCode.MISSING_TAG, closes[0], f"{open_tok} missing"
                )
            )
            continue
        if closes[0] < opens[0]:
            report.violations.append(
                FormatViolation(
                    ViolationCode.MISORDERED_TAG,
                    closes[0],
                    f"{close_tok} precedes {open_tok}",
                )
            )
            continue
        spans[tag] = (opens[0], opens[0] + len(open_tok), closes[0], closes[0] + len(close_tok))
    return spans


def _check_block_order(
    text: str, spans: dict[str, tuple[int, int, int, int]], report: FormatReport
) -> bool:
    ordered = [spans[t] for t in _TAGS]
    ok = True
    for i in range(len(ordered) - 1):
        prev_end = ordered[i][3]
        next_start = ordered[i + 1][0]
        if next_start < prev_end:
            report.violations.append(
                FormatViolation(
                    ViolationCode.MISORDERED_TAG,
                    next_start,
                    f"<{_TAGS[i + 1]}> must follow </{_TAGS[i]}>",
                )
            )
            ok = False
    return ok


def _check_stray_text(
    text: str, spans: dict[str, tuple[int, int, int, int]], report: FormatReport
) -> None:
    gaps: list[tuple[int, int]] = []
    gaps.append((0, spans[_TAGS[0]][0]))
    for i in range(len(_TAGS) - 1):
        gaps.append((spans[_TAGS[i]][3], spans[_TAGS[i + 1]][0]))
    gaps.append((spans[_TAGS[-1]][3], len(text)))
    for start, end in gaps:
        chunk = text[start:end]
        stripped = chunk.strip()
        if stripped:
            at = start + chunk.index(stripped[0])
            report.violations.append(
                FormatViolation(
                    ViolationCode.STRAY_TEXT, at, f"text outside tag blocks: {stripped[:30]!r}"
                )
            )


def _parse_reasoning(
    inner: str, base: int, report: FormatReport
) -> tuple[str, ...] | None:
    lines: list[tuple[int, str]] = []
    pos = 0
    for raw in inner.split("\n"):
        if raw.strip():
            lines.append((base + pos, raw))
        pos += len(raw) + 1
    steps: list[str] = []
    indices: list[int] = []
    for at, line in lines:
        m = _STEP_RE.match(line)
        if m is None:
            report.violations.append(
                FormatViolation(
                    ViolationCode.STRAY_TEXT, at, f"non-step line in REASONING: {line[:30]!r}"
                )
            )
            return None
        indices.append(int(m.group(1)))
        steps.append(m.group(2))
    if len(steps) != _STEP_COUNT:
        report.violations.append(
            FormatViolation(
                ViolationCode.WRONG_STEP_COUNT,
                base,
                f"found {len(steps)} steps, expected {_STEP_COUNT}",
            )
        )
        return None
    if indices != list(range(1, _STEP_COUNT + 1)):
        report.violations.append(
            FormatViolation(
                ViolationCode.WRONG_STEP_COUNT,
                base,
                f"step indices {indices} must be 1..{_STEP_COUNT} in order",
            )
        )
        return None
    for (at, _), step_text in zip(lines, steps):
        if not step_text.strip():
            report.violations.append(
                FormatViolation(ViolationCode.EMPTY_SECTION, at, "empty step text")
            )
            return None
    return tuple(steps)


def _parse_conclusion(inner: str, base: int, report: FormatReport) -> Conclusion | None:
    stripped = inner.strip()
    if not stripped:
        report.violations.append(
            FormatViolation(ViolationCode.EMPTY_SECTION, base, "empty CONCLUSION")
        )
        return None
    if "\n" in stripped:
        report.violations.append(
            FormatViolation(
                ViolationCode.BAD_CONCLUSION, base, "conclusion must be a single line"
            )
        )
        return None
    m = _CONCLUSION_RE.match(stripped)
    if m is None:
        report.violations.append(
            FormatViolation(
                ViolationCode.BAD_CONCLUSION,
                base + inner.index(stripped[0]),
                f"malformed conclusion line: {stripped[:60]!r}",
            )
        )
        return None
    values = dict(zip(LABEL_AXES, m.groups()))
    for axis, value in values.items():
        if value not in AXIS_VOCAB[axis]:
            report.violations.append(
                FormatViolation(
                    ViolationCode.BAD_CONCLUSION,
                    base,
                    f"{axis} label {value!r} not in vocabulary",
                )
            )
            return None
    return Conclusion(**values)


def _parse(text: str) -> tuple[CoTTrace | None, FormatReport]:
    report = FormatReport()
    spans = _tag_pair_spans(text, report)
    if report.violations:
        return None, report
    if not _check_block_order(text, spans, report):
        return None, report
    _check_stray_text(text, spans, report)
    if report.violations:
        return None, report

    summary = text[spans["SUMMARY"][1] : spans["SUMMARY"][2]]
    caption = text[spans["CAPTION"][1] : spans["CAPTION"][2]]
    for name, raw, at in (
        ("SUMMARY", summary, spans["SUMMARY"][1]),
        ("CAPTION", caption, spans["CAPTION"][1]),
    ):
        if not raw.strip():
            report.violations.append(
                FormatViolation(ViolationCode.EMPTY_SECTION, at, f"empty {name}")
            )
    if report.violations:
        return None, report

    steps = _parse_reasoning(
        text[spans["REASONING"][1] : spans["REASONING"][2]],
        spans["REASONING"][1],
        report,
    )
    if steps is None:
        return None, report
    conclusion = _parse_conclusion(
        text[spans["CONCLUSION"][1] : spans["CONCLUSION"][2]],
        spans["CONCLUSION"][1],
        report,
    )
    if conclusion is None:
        return None, report
    return CoTTrace(summary=summary, caption=caption, steps=steps, conclusion=conclusion), report


def parse_trace(text: str) -> CoTTrace | FormatReport:
    """Parse tagged text into a trace, or report every grammar violation found.

    Returns a :class:`CoTTrace` when the text is valid, otherwise a
    :class:`FormatReport` with at least one violation. Never both: a report
    returned from here is never empty.
    """
    trace, report = _parse(text)
    if trace is not None:
        return trace
    return report


def validate_format(text: str) -> tuple[int, FormatReport]:
    """Binary format flag plus the full diagnostic report for raw text."""
    trace, report = _parse(text)
    return (1 if trace is not None else 0), report


def extract_answer(trace: CoTTrace) -> Conclusion:
    """Pull the closed-vocabulary conclusion out of a parsed trace."""
    if not isinstance(trace, CoTTrace):
        raise TypeError("extract_answer expects a parsed CoTTrace")
    return trace.conclusion


def find_conclusion_labels(text: str) -> dict[str, str]:
    """Best-effort label recovery from possibly malformed text.

    Scans lines for the conclusion shape and returns whatever in-vocabulary
    labels the first such line carries. Used when scoring rejected responses
    whose surrounding structure is broken but whose answer line survives.
    """
    for line in text.split("\n"):
        m = _CONCLUSION_RE.match(line.strip())
        if m is None:
            continue
        values = dict(zip(LABEL_AXES, m.groups()))
        return {a: v for a, v in values.items() if v in AXIS_VOCAB[a]}
    return {}


# ---------------------------------------------------------------------------
# Mutations: each class produces text that the parser must reject.

MUTATION_KINDS: tuple[str, ...] = (
    "delete_tag",
    "swap_blocks",
    "duplicate_block",
    "remove_step",
    "blank_section",
)


def _spans_or_raise(text: str) -> dict[str, tuple[int, int, int, int]]:
    report = FormatReport()
    spans = _tag_pair_spans(text, report)
    if report.violations or len(spans) != len(_TAGS):
        raise ValueError("mutation requires well-formed tag structure")
    return spans


def apply_mutation(text: str, kind: str, rng: np.random.Generator) -> str:
    """Apply one grammar-breaking mutation of the given kind to valid trace text.

    The result is guaranteed to differ from the input; feeding it back to
    :func:`parse_trace` must yield a report, which the format fuzz tests
    assert for every kind.
    """
    if kind not in MUTATION_KINDS:
        raise ValueError(f"unknown mutation kind {kind!r}")
    spans = _spans_or_raise(text)

    if kind == "delete_tag":
        tag = _TAGS[int(rng.integers(len(_TAGS)))]
        token = f"<{tag}>" if rng.integers(2) == 0 else f"</{tag}>"
        at = text.index(token)
        return text[:at] + text[at + len(token) :]

    if kind == "swap_blocks":
        i = int(rng.integers(len(_TAGS) - 1))
        a, b = _TAGS[i], _TAGS[i + 1]
        block_a = text[spans[a][0] : spans[a][3]]
        block_b = text[spans[b][0] : spans[b][3]]
        middle = text[spans[a][3] : spans[b][0]]
        return text[: spans[a][0]] + block_b + middle + block_a + text[spans[b][3] :]

    if kind == "duplicate_block":
        tag = _TAGS[int(rng.integers(len(_TAGS)))]
        block = text[spans[tag][0] : spans[tag][3]]
        return text[: spans[tag][3]] + "\n" + block + text[spans[tag][3] :]

    if kind == "remove_step":
        k = int(rng.integers(_STEP_COUNT)) + 1
        lines = text.split("\n")
        keep = [ln for ln in lines if not ln.startswith(f"Step {k}. ")]
        if len(keep) == len(lines):
            raise ValueError(f"step {k} line not found")
        return "\n".join(keep)

    # blank_section
    tag = _TAGS[int(rng.integers(len(_TAGS)))]
    return text[: spans[tag][1]] + text[spans[tag][2] :]
