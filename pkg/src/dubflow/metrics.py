"""Objective metrics: cepstral distortion with DTW, WER, cosine similarity.

Cepstra come from a per-frame DCT-II of log-compressed features with the
energy coefficient dropped. Distortion is the classic 10 sqrt(2) / ln 10
constant times the mean frame distance along the optimal DTW alignment; the
speech-length variant scales it by the frame-count ratio. WER is plain
edit distance over whitespace tokens, normalized by the reference length,
and may exceed 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.fft import dct

from .flow import FeatureSeq

MCD_CONST = 10.0 * math.sqrt(2.0) / math.log(10.0)

_LOG_FLOOR = 1e-8


@dataclass(frozen=True)
class CepstralSeq:
    """Per-frame cepstral coefficients, energy term excluded."""

    coeffs: np.ndarray

    def __post_init__(self) -> None:
        coeffs = np.asarray(self.coeffs, dtype=np.float64)
        if coeffs.ndim != 2 or coeffs.shape[0] < 1 or coeffs.shape[1] < 1:
            raise ValueError("coeffs must be a non-empty (F, K) array")
        if not np.isfinite(coeffs).all():
            raise ValueError("coeffs must be finite")
        object.__setattr__(self, "coeffs", coeffs)


@dataclass(frozen=True)
class AlignmentPath:
    """A monotone DTW alignment and its accumulated distance."""

    pairs: tuple[tuple[int, int], ...]
    cost: float


def cepstra_from_features(seq: FeatureSeq, order: int) -> CepstralSeq:
    """DCT-II cepstra of log-compressed features, keeping coefficients 1..order.

    Features are floored at a small positive value before the log, so the
    transform is defined for arbitrary non-negative input; a uniform scaling
    of the features shifts only the dropped energy coefficient.
    """
    dim = seq.frames.shape[1]
    if not 1 <= order <= dim - 1:
        raise ValueError(f"order must lie in [1, {dim - 1}]")
    log_frames = np.log(np.maximum(seq.frames, _LOG_FLOOR))
    coeffs = dct(log_frames, type=2, axis=1)
    return CepstralSeq(coeffs=coeffs[:, 1 : order + 1])


def dtw_align(a: np.ndarray, b: np.ndarray) -> AlignmentPath:
    """Optimal monotone alignment of two coefficient sequences.

    Steps move one frame forward in either sequence or both; the path runs
    from the first frame pair to the last, minimizing the summed Euclidean
    frame distance.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError("inputs must be (F, K) arrays with equal K")
    n, m = a.shape[0], b.shape[0]
    dist = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2))
    acc = np.full((n, m), np.inf)
    acc[0, 0] = dist[0, 0]
    for i in range(n):
        for j in range(m):
            if i == 0 and j == 0:
                continue
            best = np.inf
            if i > 0:
                best = min(best, acc[i - 1, j])
            if j > 0:
                best = min(best, acc[i, j - 1])
            if i > 0 and j > 0:
                best = min(best, acc[i - 1, j - 1])
            acc[i, j] = dist[i, j] + best
    pairs: list[tuple[int, int]] = [(n - 1, m - 1)]
    i, j = n - 1, m - 1
    while (i, j) != (0, 0):
        candidates = []
        if i > 0:
            candidates.append((acc[i - 1, j], (i - 1, j)))
        if j > 0:
            candidates.append((acc[i, j - 1], (i, j - 1)))
        if i > 0 and j > 0:
            candidates.append((acc[i - 1, j - 1], (i - 1, j - 1)))
        _, (i, j) = min(candidates, key=lambda c: c[0])
        pairs.append((i, j))
    pairs.reverse()
    return AlignmentPath(pairs=tuple(pairs), cost=float(acc[n - 1, m - 1]))


def mcd(a: CepstralSeq, b: CepstralSeq) -> float:
    """Mel-cepstral distortion in dB: constant times mean aligned distance."""
    if a.coeffs.shape[1] != b.coeffs.shape[1]:
        raise ValueError("cepstral orders must agree")
    path = dtw_align(a.coeffs, b.coeffs)
    return MCD_CONST * path.cost / len(path.pairs)


def mcd_sl(a: CepstralSeq, b: CepstralSeq) -> float:
    """Speech-length-weighted distortion: scaled by the frame-count ratio."""
    fa, fb = a.coeffs.shape[0], b.coeffs.shape[0]
    return mcd(a, b) * (max(fa, fb) / min(fa, fb))


def wer(ref_tokens: list[str], hyp_tokens: list[str]) -> float:
    """Word error rate: edit distance over the reference length.

    Substitutions, insertions, and deletions all cost one; the rate exceeds
    1 when the hypothesis carries more errors than the reference has tokens.
    """
    if len(ref_tokens) == 0:
        raise ValueError("reference must be non-empty")
    n, m = len(ref_tokens), len(hyp_tokens)
    prev = list(range(m + 1))
    for i in range(1, n + 1):
        cur = [i] + [0] * m
        for j in range(1, m + 1):
            sub = prev[j - 1] + (ref_tokens[i - 1] != hyp_tokens[j - 1])
            cur[j] = min(sub, prev[j] + 1, cur[j - 1] + 1)
        prev = cur
    return prev[m] / n


def cosine_sim(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine of the angle between two vectors."""
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if u.shape != v.shape:
        raise ValueError("vectors must have equal length")
    nu, nv = float(np.linalg.norm(u)), float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine similarity undefined for zero vectors")
    return float(np.dot(u, v) / (nu * nv))
