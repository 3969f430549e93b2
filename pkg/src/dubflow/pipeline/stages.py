"""Training-stage runners: supervised traces, preference mix, flow, tuning.

Each runner reads its inputs from the shared run directory, trains
deterministically from the config seed, and writes a checkpoint, a training
curve, a report, and a meta record with content hashes of its inputs.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path

import numpy as np
import torch

from ..conditions import SpeechPrompt, TokenSeq, assemble_conditions, dropout_conditions
from ..flow import Stage2Item, cfm_loss, load_features, stage2_loss
from ..nets import ConditionalVelocityNet, DurationPredictor
from ..preference import (
    DPOConfig,
    MPOWeights,
    TracePolicy,
    build_preference_batch,
    clone_reference,
    mpo_step,
    sft_step,
)
from ..traces import SCENE_LABELS, validate_format
from .config import RunConfig, save_config
from .synth import (
    WORD_VOCAB,
    ManifestRecord,
    frames_per_token,
    load_visual,
    read_manifest,
    read_traces,
    token_ids,
)

_RECALL_COLUMNS = dict(zip(("A.Recall", "B.Recall", "C.Recall"), SCENE_LABELS))


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_stage_meta(
    out: Path, stage: str, cfg: RunConfig, inputs: list[Path], extra: dict
) -> None:
    """Record seed, config, and input content hashes for one stage run."""
    meta = {
        "stage": stage,
        "seed": cfg.seed,
        "config": dataclasses.asdict(cfg),
        "inputs": {p.name: _sha256(p) for p in sorted(inputs)},
    }
    meta.update(extra)
    (out / f"{stage}_meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
    save_config(cfg, out / "config.snapshot.yaml")


def write_tsv(path: Path, header: list[str], rows: list[list[str]]) -> None:
    lines = ["\t".join(header)] + ["\t".join(r) for r in rows]
    path.write_text("\n".join(lines) + "\n")


def _pooled_visual(out: Path, record: ManifestRecord) -> np.ndarray:
    return load_visual(out / record.video_features_path).frames.mean(axis=0)


def _records_by_split(records: list[ManifestRecord]) -> dict[str, list[ManifestRecord]]:
    by_split: dict[str, list[ManifestRecord]] = {"train": [], "val": [], "test": []}
    for r in sorted(records, key=lambda r: r.id):
        by_split[r.split].append(r)
    return by_split


def scene_scores(
    policy: TracePolicy, records: list[ManifestRecord], pooled: dict[str, np.ndarray]
) -> dict[str, float]:
    """Accuracy and per-scene recalls, as percentages."""
    correct = 0
    per_scene: dict[str, list[int]] = {s: [] for s in SCENE_LABELS}
    for r in records:
        hit = int(policy.predict(pooled[r.id]).scene == r.scene)
        correct += hit
        per_scene[r.scene].append(hit)
    recalls = {
        s: (100.0 * sum(v) / len(v) if v else 0.0) for s, v in per_scene.items()
    }
    scores = {"Ave.Acc": 100.0 * correct / max(1, len(records))}
    scores["Ave.Recall"] = sum(recalls.values()) / len(recalls)
    for column, scene in _RECALL_COLUMNS.items():
        scores[column] = recalls[scene]
    return scores


def format_validity_rate(
    policy: TracePolicy,
    records: list[ManifestRecord],
    pooled: dict[str, np.ndarray],
    traces: dict[str, dict],
    rng: np.random.Generator,
) -> float:
    """Share of sampled traces that satisfy the grammar."""
    if not records:
        return 0.0
    valid = 0
    for r in records:
        text = policy.sample_trace(pooled[r.id], traces[r.id]["text"], rng)
        flag, _ = validate_format(text)
        valid += flag
    return valid / len(records)


def _write_scene_report(
    path: Path,
    policy: TracePolicy,
    by_split: dict[str, list[ManifestRecord]],
    pooled: dict[str, np.ndarray],
) -> dict[str, dict[str, float]]:
    header = ["Split", "Ave.Acc", "Ave.Recall", "A.Recall", "B.Recall", "C.Recall"]
    rows = []
    all_scores: dict[str, dict[str, float]] = {}
    for split in ("val", "test"):
        if not by_split[split]:
            continue
        scores = scene_scores(policy, by_split[split], pooled)
        all_scores[split] = scores
        rows.append([split] + [f"{scores[c]:.2f}" for c in header[1:]])
    write_tsv(path, header, rows)
    return all_scores


def _load_policy_inputs(out: Path):
    records = read_manifest(out / "manifest.jsonl")
    traces = read_traces(out / "traces.jsonl")
    by_split = _records_by_split(records)
    pooled = {r.id: _pooled_visual(out, r) for r in sorted(records, key=lambda r: r.id)}
    return records, traces, by_split, pooled


def save_policy(path: Path, policy: TracePolicy, hidden: int) -> None:
    torch.save(
        {
            "state_dict": policy.state_dict(),
            "feature_dim": policy.feature_dim,
            "hidden": hidden,
        },
        path,
    )


def load_policy(path: Path) -> TracePolicy:
    blob = torch.load(path, weights_only=True)
    policy = TracePolicy(blob["feature_dim"], hidden=blob["hidden"])
    policy.load_state_dict(blob["state_dict"])
    return policy


def run_stage_sft(cfg: RunConfig, out_dir: Path | str) -> dict:
    """Stage 1.1: supervised training of the trace policy on gold traces."""
    out = Path(out_dir)
    records, traces, by_split, pooled = _load_policy_inputs(out)
    train = by_split["train"]
    if not train:
        raise ValueError("no training records in manifest")

    policy = TracePolicy(cfg.data_visual_dim, hidden=cfg.sft_hidden, seed=cfg.seed)
    rng = np.random.default_rng([cfg.seed, 201])
    curve_rows = []
    for step in range(cfg.sft_steps):
        take = min(cfg.sft_batch, len(train))
        picks = rng.choice(len(train), size=take, replace=False)
        items = [(pooled[train[i].id], traces[train[i].id]["text"]) for i in picks]
        loss = sft_step(policy, items, cfg.sft_lr)
        curve_rows.append([str(step), f"{loss:.6f}"])
    write_tsv(out / "sft_curve.tsv", ["step", "loss"], curve_rows)

    save_policy(out / "policy_sft.pt", policy, cfg.sft_hidden)
    scores = _write_scene_report(out / "sft_report.tsv", policy, by_split, pooled)
    fv_rng = np.random.default_rng([cfg.seed, 202])
    validity = {
        split: format_validity_rate(policy, by_split[split], pooled, traces, fv_rng)
        for split in ("val", "test")
        if by_split[split]
    }
    write_stage_meta(
        out,
        "sft",
        cfg,
        [out / "manifest.jsonl", out / "traces.jsonl"],
        {"scores": scores, "format_validity": validity},
    )
    return {"scores": scores, "format_validity": validity}


def run_stage_mpo(cfg: RunConfig, out_dir: Path | str) -> dict:
    """Stage 1.2: mixed preference optimization from the supervised policy."""
    out = Path(out_dir)
    records, traces, by_split, pooled = _load_policy_inputs(out)
    train = by_split["train"]
    policy = load_policy(out / "policy_sft.pt")
    ref = clone_reference(policy)

    dpo_cfg = DPOConfig(
        beta=cfg.mpo_beta,
        delta=cfg.mpo_delta,
        length_normalized=cfg.mpo_length_normalized,
    )
    weights = MPOWeights(cfg.mpo_w_p, cfg.mpo_w_q, cfg.mpo_w_g, cfg.mpo_w_f, cfg.mpo_w_c)
    rng = np.random.default_rng([cfg.seed, 301])
    curve_rows = []
    for step in range(cfg.mpo_steps):
        take = min(cfg.mpo_batch, len(train))
        picks = rng.choice(len(train), size=take, replace=False)
        items = [
            (pooled[train[i].id], train[i].conclusion(), traces[train[i].id]["text"])
            for i in picks
        ]
        batch = build_preference_batch(policy, items, rng)
        total, parts, _ = mpo_step(policy, ref, batch, dpo_cfg, weights, cfg.mpo_lr)
        curve_rows.append(
            [str(step)]
            + [f"{parts[k]:.6f}" for k in ("L_p", "L_q", "L_g", "L_f", "L_c")]
            + [f"{total:.6f}"]
        )
    write_tsv(
        out / "mpo_curve.tsv",
        ["step", "L_p", "L_q", "L_g", "L_f", "L_c", "total"],
        curve_rows,
    )

    save_policy(out / "policy_mpo.pt", policy, cfg.sft_hidden)
    scores = _write_scene_report(out / "mpo_report.tsv", policy, by_split, pooled)
    fv_rng = np.random.default_rng([cfg.seed, 202])
    validity = {
        split: format_validity_rate(policy, by_split[split], pooled, traces, fv_rng)
        for split in ("val", "test")
        if by_split[split]
    }
    write_stage_meta(
        out,
        "mpo",
        cfg,
        [out / "manifest.jsonl", out / "traces.jsonl", out / "policy_sft.pt"],
        {"scores": scores, "format_validity": validity},
    )
    return {"scores": scores, "format_validity": validity}


def _prompt_split_item(
    record: ManifestRecord,
    target: np.ndarray,
    ids: np.ndarray,
    prompt_share: float,
    rng: np.random.Generator,
) -> tuple[np.ndarray, TokenSeq, SpeechPrompt | None]:
    """Optionally split a clip at a token boundary into context and target."""
    n = len(ids)
    fpt = frames_per_token(record.age, record.emotion)
    if n >= 2 and rng.random() < prompt_share:
        k = int(rng.integers(1, n))
        cut = k * fpt
        return target[cut:], TokenSeq(ids=ids[k:]), SpeechPrompt(frames=target[:cut])
    return target, TokenSeq(ids=ids), None


def run_stage_cfm(cfg: RunConfig, out_dir: Path | str) -> dict:
    """Stage 2.1: pretrain the velocity trunk on transcript and prompt only."""
    out = Path(out_dir)
    records = [r for r in read_manifest(out / "manifest.jsonl") if r.split == "train"]
    records.sort(key=lambda r: r.id)
    targets = {r.id: load_features(out / r.features_path).frames for r in records}
    ids_map = {r.id: token_ids(r.transcript.split()).ids for r in records}

    net = ConditionalVelocityNet(
        cfg.data_feature_dim,
        cfg.data_visual_dim,
        vocab_size=len(WORD_VOCAB),
        hidden=cfg.cfm_hidden,
        seed=cfg.seed,
    )
    opt = torch.optim.Adam(net.trunk_parameters(), lr=cfg.cfm_lr)
    rng = np.random.default_rng([cfg.seed, 401])
    curve_rows = []
    for step in range(cfg.cfm_steps):
        picks = rng.choice(len(records), size=min(cfg.cfm_batch, len(records)), replace=False)
        batch = []
        for i in picks:
            r = records[i]
            x1, tokens, prompt = _prompt_split_item(
                r, targets[r.id], ids_map[r.id], cfg.cfm_prompt_share, rng
            )
            conds = assemble_conditions(None, None, tokens, prompt)
            conds = dropout_conditions(conds, cfg.cfm_dropout, rng)
            batch.append((x1, conds))
        loss = cfm_loss(net, batch, rng, cfg.flow_sigma_min)
        opt.zero_grad()
        loss.backward()
        opt.step()
        curve_rows.append([str(step), f"{float(loss.detach()):.6f}"])
    write_tsv(out / "cfm_curve.tsv", ["step", "loss"], curve_rows)

    torch.save(
        {
            "state_dict": net.state_dict(),
            "feature_dim": cfg.data_feature_dim,
            "visual_dim": cfg.data_visual_dim,
            "vocab_size": len(WORD_VOCAB),
            "hidden": cfg.cfm_hidden,
        },
        out / "generator_pretrain.pt",
    )
    write_stage_meta(
        out, "cfm", cfg, [out / "manifest.jsonl"], {"final_loss": float(curve_rows[-1][1])}
    )
    return {"final_loss": float(curve_rows[-1][1])}


def load_generator(path: Path) -> ConditionalVelocityNet:
    blob = torch.load(path, weights_only=True)
    net = ConditionalVelocityNet(
        blob["feature_dim"],
        blob["visual_dim"],
        vocab_size=blob["vocab_size"],
        hidden=blob["hidden"],
    )
    net.load_state_dict(blob["state_dict"])
    return net


def run_stage_tune(cfg: RunConfig, out_dir: Path | str) -> dict:
    """Stage 2.2: tune zero-initialized condition branches plus duration."""
    out = Path(out_dir)
    records = [r for r in read_manifest(out / "manifest.jsonl") if r.split == "train"]
    records.sort(key=lambda r: r.id)
    targets = {r.id: load_features(out / r.features_path).frames for r in records}
    visuals = {r.id: load_visual(out / r.video_features_path) for r in records}
    ids_map = {r.id: token_ids(r.transcript.split()).ids for r in records}

    net = load_generator(out / "generator_pretrain.pt")
    for p in net.trunk_parameters():
        p.requires_grad_(False)
    dur = DurationPredictor(cfg.data_visual_dim, cfg.data_frame_hop, seed=cfg.seed + 1)
    opt = torch.optim.Adam([*net.branch_parameters(), *dur.parameters()], lr=cfg.tune_lr)
    rng = np.random.default_rng([cfg.seed, 501])
    curve_rows = []
    for step in range(cfg.tune_steps):
        picks = rng.choice(len(records), size=min(cfg.tune_batch, len(records)), replace=False)
        items = []
        for i in picks:
            r = records[i]
            x1, tokens, prompt = _prompt_split_item(
                r, targets[r.id], ids_map[r.id], cfg.cfm_prompt_share, rng
            )
            conds = assemble_conditions(visuals[r.id], r.conclusion(), tokens, prompt)
            conds = dropout_conditions(conds, cfg.tune_dropout, rng)
            items.append(
                Stage2Item(
                    target=x1,
                    conds=conds,
                    visual=visuals[r.id],
                    conclusion=r.conclusion(),
                    duration_s=r.duration_s,
                )
            )
        total, parts = stage2_loss(net, dur, items, rng, cfg.flow_sigma_min)
        opt.zero_grad()
        total.backward()
        opt.step()
        curve_rows.append(
            [
                str(step),
                f"{float(total.detach()):.6f}",
                f"{parts['cfm']:.6f}",
                f"{parts['duration']:.6f}",
            ]
        )
    write_tsv(out / "tune_curve.tsv", ["step", "total", "cfm", "duration"], curve_rows)

    torch.save(
        {
            "state_dict": net.state_dict(),
            "feature_dim": cfg.data_feature_dim,
            "visual_dim": cfg.data_visual_dim,
            "vocab_size": len(WORD_VOCAB),
            "hidden": cfg.cfm_hidden,
        },
        out / "generator_tuned.pt",
    )
    torch.save(
        {
            "state_dict": dur.state_dict(),
            "visual_dim": cfg.data_visual_dim,
            "frame_hop": cfg.data_frame_hop,
        },
        out / "duration.pt",
    )
    write_stage_meta(
        out,
        "tune",
        cfg,
        [out / "manifest.jsonl", out / "generator_pretrain.pt"],
        {"final_total": float(curve_rows[-1][1])},
    )
    return {"final_total": float(curve_rows[-1][1])}


def load_duration(path: Path) -> DurationPredictor:
    blob = torch.load(path, weights_only=True)
    dur = DurationPredictor(blob["visual_dim"], blob["frame_hop"])
    dur.load_state_dict(blob["state_dict"])
    return dur
