"""End-to-end generation and the objective metric report.

Inference runs the full chain per clip: sample a reasoning trace, parse it,
predict the target length, pick a speech prompt, then integrate the guided
flow. Two prompt settings are produced side by side: ``dub10`` uses the
clip's own reference as the prompt, ``dub20`` borrows another utterance of
the same speaker. A clip whose predicted scene label is wrong gets a random
different-speaker prompt instead in both settings.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..conditions import SpeechPrompt, assemble_conditions
from ..flow import FeatureSeq, load_features, save_features
from ..metrics import cepstra_from_features, cosine_sim, mcd, mcd_sl, wer
from ..sampler import GuidanceScales, SamplerConfig, integrate, predict_duration
from ..traces import CoTTrace, parse_trace, render_trace
from .config import RunConfig
from .stages import load_duration, load_generator, load_policy, write_stage_meta, write_tsv
from .synth import (
    ManifestRecord,
    build_trace,
    decode_tokens,
    emotion_embedding,
    load_visual,
    read_manifest,
    speaker_embedding,
    token_ids,
)

SETTINGS = ("dub10", "dub20")
_SETTING_NAMES = {"dub10": "Dub-1.0", "dub20": "Dub-2.0"}


def _select_prompt(
    record: ManifestRecord,
    pool: list[ManifestRecord],
    setting: str,
    scene_ok: bool,
    rng: np.random.Generator,
) -> tuple[ManifestRecord, str]:
    """Pick the clip whose reference features serve as the speech prompt."""
    if not scene_ok:
        others = [r for r in pool if (r.gender, r.age) != (record.gender, record.age)]
        if not others:
            others = [r for r in pool if r.id != record.id] or [record]
        return others[int(rng.integers(len(others)))], "random_swap"
    if setting == "dub10":
        return record, "own_reference"
    same = [
        r
        for r in pool
        if r.id != record.id and (r.gender, r.age) == (record.gender, record.age)
    ]
    if same:
        return same[0], "same_speaker"
    return record, "own_reference"


def run_infer(cfg: RunConfig, out_dir: Path | str) -> dict:
    """Generate features for every clip of the configured split."""
    out = Path(out_dir)
    records = read_manifest(out / "manifest.jsonl")
    pool = sorted(
        (r for r in records if r.split in ("train", "val")), key=lambda r: r.id
    )
    items = sorted(
        (r for r in records if r.split == cfg.infer_split), key=lambda r: r.id
    )
    if cfg.infer_max_items > 0:
        items = items[: cfg.infer_max_items]
    if not items:
        raise ValueError(f"no records in split {cfg.infer_split!r}")

    policy_path = out / "policy_mpo.pt"
    if not policy_path.exists():
        policy_path = out / "policy_sft.pt"
    policy = load_policy(policy_path)
    net = load_generator(out / "generator_tuned.pt")
    dur = load_duration(out / "duration.pt")

    scales = GuidanceScales(
        cfg.guidance_visual, cfg.guidance_conclusion, cfg.guidance_transcript
    )
    sampler_cfg = SamplerConfig(cfg.sampler_steps, cfg.sampler_scheme)
    rng = np.random.default_rng([cfg.seed, 601])

    gen_root = out / "gen"
    for setting in SETTINGS:
        (gen_root / setting).mkdir(parents=True, exist_ok=True)

    ref_cache: dict[str, np.ndarray] = {}

    def ref_frames(r: ManifestRecord) -> np.ndarray:
        if r.id not in ref_cache:
            ref_cache[r.id] = load_features(out / r.features_path).frames
        return ref_cache[r.id]

    trace_rows = []
    fallbacks = 0
    swaps = dict.fromkeys(SETTINGS, 0)
    for record in items:
        visual = load_visual(out / record.video_features_path)
        pooled = visual.frames.mean(axis=0)
        count = max(1, int(round(pooled[3])))
        template = render_trace(build_trace(policy.predict(pooled), count))
        text = policy.sample_trace(pooled, template, rng)
        parsed = parse_trace(text)
        if isinstance(parsed, CoTTrace):
            conclusion = parsed.conclusion
            codes: list[str] = []
        else:
            conclusion = None
            codes = sorted(c.value for c in parsed.codes())
            fallbacks += 1
        n_frames = predict_duration(dur, visual, conclusion)
        tokens = token_ids(record.transcript.split())
        scene_ok = conclusion is not None and conclusion.scene == record.scene
        for setting in SETTINGS:
            prompt_rec, how = _select_prompt(record, pool, setting, scene_ok, rng)
            if how == "random_swap":
                swaps[setting] += 1
            prompt = SpeechPrompt(
                frames=ref_frames(prompt_rec)[: cfg.prompt_max_frames]
            )
            conds = assemble_conditions(visual, conclusion, tokens, prompt)
            seq = integrate(
                net,
                conds,
                scales,
                sampler_cfg,
                n_frames,
                cfg.data_feature_dim,
                cfg.data_frame_hop,
                rng,
            )
            save_features(gen_root / setting / f"{record.id}.txt", seq)
        trace_rows.append(
            {
                "codes": codes,
                "frames": n_frames,
                "id": record.id,
                "pred": None if conclusion is None else conclusion.as_dict(),
                "text": text,
                "valid": int(conclusion is not None),
            }
        )

    with (gen_root / "traces.jsonl").open("w") as fh:
        for row in trace_rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")

    summary = {"items": len(items), "fallbacks": fallbacks, "prompt_swaps": swaps}
    write_stage_meta(
        out,
        "infer",
        cfg,
        [out / "manifest.jsonl", policy_path, out / "generator_tuned.pt", out / "duration.pt"],
        {**summary, "policy_checkpoint": policy_path.name},
    )
    return summary


def _eval_pair(
    gen_frames: np.ndarray,
    ref_frames: np.ndarray,
    record: ManifestRecord,
    order: int,
    frame_hop: float,
) -> dict[str, float]:
    gen_seq = FeatureSeq(frames=gen_frames, frame_hop=frame_hop)
    ref_seq = FeatureSeq(frames=ref_frames, frame_hop=frame_hop)
    gen_cep = cepstra_from_features(gen_seq, order)
    ref_cep = cepstra_from_features(ref_seq, order)
    ref_words = record.transcript.split()
    hyp_words = decode_tokens(gen_seq, record.age, record.emotion)
    edits = wer(ref_words, hyp_words) * len(ref_words)
    return {
        "mcd": mcd(gen_cep, ref_cep),
        "mcd_sl": mcd_sl(gen_cep, ref_cep),
        "edits": edits,
        "ref_words": float(len(ref_words)),
        "spk": cosine_sim(speaker_embedding(gen_seq), speaker_embedding(ref_seq)),
        "emo": cosine_sim(emotion_embedding(gen_seq), emotion_embedding(ref_seq)),
    }


def run_eval(cfg: RunConfig, out_dir: Path | str) -> dict:
    """Score generated features against references; write the metric table."""
    out = Path(out_dir)
    records = read_manifest(out / "manifest.jsonl")
    items = sorted(
        (r for r in records if r.split == cfg.infer_split), key=lambda r: r.id
    )
    gen_root = out / "gen"
    settings = [s for s in SETTINGS if (gen_root / s).is_dir()]
    if not settings:
        raise ValueError(f"no generated features under {gen_root}")

    order = cfg.eval_cepstral_order
    header = ["Setting", "SPK-SIM(%)", "WER(%)", "EMO-SIM(%)", "MCD", "MCD-SL"]
    item_header = ["setting", "id", "spk", "wer", "emo", "mcd", "mcd_sl"]
    rows = []
    item_rows = []
    aggregates: dict[str, dict[str, float]] = {}

    def _aggregate(name: str, scored: list[dict[str, float]]) -> None:
        n = len(scored)
        total_edits = sum(s["edits"] for s in scored)
        total_words = sum(s["ref_words"] for s in scored)
        agg = {
            "SPK-SIM(%)": 100.0 * sum(s["spk"] for s in scored) / n,
            "WER(%)": 100.0 * total_edits / total_words,
            "EMO-SIM(%)": 100.0 * sum(s["emo"] for s in scored) / n,
            "MCD": sum(s["mcd"] for s in scored) / n,
            "MCD-SL": sum(s["mcd_sl"] for s in scored) / n,
        }
        aggregates[name] = agg
        rows.append(
            [
                name,
                f"{agg['SPK-SIM(%)']:.2f}",
                f"{agg['WER(%)']:.2f}",
                f"{agg['EMO-SIM(%)']:.2f}",
                f"{agg['MCD']:.3f}",
                f"{agg['MCD-SL']:.3f}",
            ]
        )

    hop = cfg.data_frame_hop
    ref_map = {r.id: load_features(out / r.features_path).frames for r in items}
    gt_scored = [_eval_pair(ref_map[r.id], ref_map[r.id], r, order, hop) for r in items]
    if items:
        _aggregate("GT", gt_scored)
        for r, s in zip(items, gt_scored):
            item_rows.append(
                ["GT", r.id]
                + [
                    f"{s['spk']:.4f}",
                    f"{s['edits'] / s['ref_words']:.4f}",
                    f"{s['emo']:.4f}",
                    f"{s['mcd']:.4f}",
                    f"{s['mcd_sl']:.4f}",
                ]
            )
    missing = 0
    for setting in settings:
        scored = []
        for r in items:
            gen_path = gen_root / setting / f"{r.id}.txt"
            if not gen_path.exists():
                missing += 1
                continue
            s = _eval_pair(load_features(gen_path).frames, ref_map[r.id], r, order, hop)
            scored.append(s)
            item_rows.append(
                [_SETTING_NAMES[setting], r.id]
                + [
                    f"{s['spk']:.4f}",
                    f"{s['edits'] / s['ref_words']:.4f}",
                    f"{s['emo']:.4f}",
                    f"{s['mcd']:.4f}",
                    f"{s['mcd_sl']:.4f}",
                ]
            )
        if scored:
            _aggregate(_SETTING_NAMES[setting], scored)

    write_tsv(out / "eval_report.tsv", header, rows)
    write_tsv(out / "eval_items.tsv", item_header, item_rows)
    write_stage_meta(
        out,
        "eval",
        cfg,
        [out / "manifest.jsonl"],
        {"aggregates": aggregates, "missing": missing, "settings": [r[0] for r in rows]},
    )
    return aggregates
