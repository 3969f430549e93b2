from __future__ import annotations

import numpy as np
import pytest

from dubflow.conditions import (
    DubbingConditions,
    LabelEmbedder,
    SpeechPrompt,
    TokenSeq,
    VisualFeatureSeq,
    assemble_conditions,
    dropout_conditions,
    encode_conclusion,
)
from dubflow.traces import AXIS_VOCAB, LABEL_AXES, Conclusion


def _full_bundle() -> DubbingConditions:
    return assemble_conditions(
        VisualFeatureSeq(frames=np.ones((4, 3)), fps=25.0),
        Conclusion("dialogue", "male", "adult", "happy"),
        TokenSeq(ids=np.array([1, 2, 3])),
        SpeechPrompt(frames=np.ones((5, 2))),
    )


def test_assemble_accepts_nones():
    conds = assemble_conditions(None, None, None, None)
    assert conds.visual is None and conds.conclusion is None
    assert conds.transcript is None and conds.prompt is None


def test_assemble_type_checks():
    with pytest.raises(TypeError):
        assemble_conditions(np.ones((4, 3)), None, None, None)
    with pytest.raises(TypeError):
        assemble_conditions(None, "dialogue", None, None)


def test_visual_seq_validation():
    with pytest.raises(ValueError):
        VisualFeatureSeq(frames=np.ones((0, 3)), fps=25.0)
    with pytest.raises(ValueError):
        VisualFeatureSeq(frames=np.ones((4, 3)), fps=0.0)
    v = VisualFeatureSeq(frames=np.ones((50, 3)), fps=25.0)
    assert v.duration_s == pytest.approx(2.0)


def test_token_seq_validation():
    with pytest.raises(ValueError):
        TokenSeq(ids=np.array([], dtype=np.int64))
    with pytest.raises(ValueError):
        TokenSeq(ids=np.array([1, -2]))
    assert len(TokenSeq(ids=np.array([4, 5, 6]))) == 3


def test_dropout_never_touches_prompt():
    conds = _full_bundle()
    rng = np.random.default_rng(0)
    for _ in range(200):
        dropped = dropout_conditions(conds, 1.0, rng)
        assert dropped.prompt is conds.prompt
        assert dropped.visual is None
        assert dropped.conclusion is None
        assert dropped.transcript is None


def test_dropout_zero_probability_keeps_everything():
    conds = _full_bundle()
    rng = np.random.default_rng(0)
    dropped = dropout_conditions(conds, 0.0, rng)
    assert dropped == conds


def test_dropout_consumes_three_draws_regardless_of_content():
    # Stream position after the call must not depend on the bundle contents.
    empty = assemble_conditions(None, None, None, None)
    full = _full_bundle()
    rng_a = np.random.default_rng(42)
    rng_b = np.random.default_rng(42)
    dropout_conditions(empty, 0.5, rng_a)
    dropout_conditions(full, 0.5, rng_b)
    assert rng_a.uniform() == rng_b.uniform()


def test_dropout_slot_order_is_fixed():
    conds = _full_bundle()
    probe = np.random.default_rng(7)
    draws = probe.uniform(size=3)
    dropped = dropout_conditions(conds, 0.5, np.random.default_rng(7))
    assert (dropped.visual is None) == (draws[0] < 0.5)
    assert (dropped.conclusion is None) == (draws[1] < 0.5)
    assert (dropped.transcript is None) == (draws[2] < 0.5)


def test_dropout_probability_validated():
    with pytest.raises(ValueError):
        dropout_conditions(_full_bundle(), 1.5, np.random.default_rng(0))


def test_one_hot_embedder_covers_every_label():
    emb = LabelEmbedder.one_hot()
    total = sum(len(AXIS_VOCAB[a]) for a in LABEL_AXES)
    assert emb.dim == total
    seen = []
    for axis in LABEL_AXES:
        for label in AXIS_VOCAB[axis]:
            vec = emb.lookup(axis, label)
            assert vec.sum() == 1.0
            seen.append(int(np.argmax(vec)))
    assert sorted(seen) == list(range(total))


def test_random_projection_embedder_is_seed_stable():
    a = LabelEmbedder.random_projection(8, seed=5)
    b = LabelEmbedder.random_projection(8, seed=5)
    c = LabelEmbedder.random_projection(8, seed=6)
    assert np.array_equal(a.lookup("scene", "dialogue"), b.lookup("scene", "dialogue"))
    assert not np.array_equal(a.lookup("scene", "dialogue"), c.lookup("scene", "dialogue"))


def test_encode_conclusion_rows_follow_axes():
    emb = LabelEmbedder.one_hot()
    c1 = Conclusion("dialogue", "male", "adult", "happy")
    c2 = Conclusion("dialogue", "male", "adult", "sad")
    e1 = encode_conclusion(c1, emb)
    e2 = encode_conclusion(c2, emb)
    assert e1.shape == (4, emb.dim)
    diff_rows = [i for i in range(4) if not np.array_equal(e1[i], e2[i])]
    assert diff_rows == [LABEL_AXES.index("emotion")]


def test_embedder_rejects_incomplete_table():
    emb = LabelEmbedder.one_hot()
    table = dict(emb.table)
    table.pop(("scene", "dialogue"))
    with pytest.raises(ValueError):
        LabelEmbedder(table, emb.dim)
