"""Blending several models' class probabilities with correlation-aware weights."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from esci_rank.dataset.records import QueryProductRecord
from esci_rank.labels import DEFAULT_GAINS, SUM_TOL
from esci_rank.ranker_eval import PredictionSet, check_keys

NDCG_EPS = 1e-6
STEP_SIZES = (0.05, 0.01)


@dataclass
class CorrelationReport:
    matrix: np.ndarray  # (M, M); NaN where a score vector has zero variance
    undefined: list  # model indices whose score vector is constant

    def mean_off_diagonal(self) -> np.ndarray:
        """Per-model mean correlation with the other models, ignoring undefined entries."""
        M = self.matrix.shape[0]
        out = np.zeros(M)
        for m in range(M):
            vals = [self.matrix[m, j] for j in range(M) if j != m and not math.isnan(self.matrix[m, j])]
            out[m] = float(np.mean(vals)) if vals else 0.0
        return out


def _aligned(prediction_sets: Sequence[PredictionSet]) -> list:
    keys = prediction_sets[0].keys()
    for i, ps in enumerate(prediction_sets[1:], start=1):
        check_keys(keys, ps.keys(), what=f"prediction set {i}")
    return keys


def correlations(prediction_sets: Sequence[PredictionSet]) -> CorrelationReport:
    """Pearson correlations between models' score vectors, aligned by (query_id, product_id)."""
    if len(prediction_sets) < 2:
        raise ValueError("correlations need at least two models")
    keys = _aligned(prediction_sets)
    if len(keys) < 2:
        raise ValueError("correlations need at least two pairs")
    S = np.stack([ps.scores(keys) for ps in prediction_sets])
    M = S.shape[0]
    centered = S - S.mean(axis=1, keepdims=True)
    norms = np.sqrt((centered * centered).sum(axis=1))
    undefined = [m for m in range(M) if norms[m] == 0.0]
    C = np.full((M, M), np.nan)
    for a in range(M):
        for b in range(M):
            if norms[a] > 0 and norms[b] > 0:
                C[a, b] = 1.0 if a == b else float(np.clip(centered[a] @ centered[b] / (norms[a] * norms[b]), -1, 1))
    return CorrelationReport(C, undefined)


def check_weights(weights: Sequence[float]) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or len(w) == 0:
        raise ValueError("weights must be a non-empty vector")
    if np.any(w < 0) or abs(w.sum() - 1.0) > SUM_TOL:
        raise ValueError(f"weights must be non-negative and sum to 1, got {w.tolist()}")
    return w


def blend(
    prediction_sets: Sequence[PredictionSet], weights: Sequence[float], gains: Sequence[float] = DEFAULT_GAINS
) -> PredictionSet:
    """Convex combination of class probabilities; scores are recomputed from the blend."""
    if len(weights) != len(prediction_sets):
        raise ValueError(f"{len(weights)} weights for {len(prediction_sets)} models")
    w = check_weights(weights)
    keys = _aligned(prediction_sets)
    P = sum(wm * ps.prob_matrix(keys) for wm, ps in zip(w, prediction_sets))
    return PredictionSet.from_arrays(keys, P, gains)


class _BlendScorer:
    """Vectorized mean NDCG of blended predictions over fixed keys and truth.

    Ranking and tie-breaking match :func:`esci_rank.ranker_eval.evaluate`.
    """

    def __init__(self, probs: np.ndarray, keys: list, truth: Sequence[QueryProductRecord], gains):
        labels = {r.key: r.label for r in truth}
        check_keys(labels, keys, what="prediction sets")
        self.gains = np.asarray(gains, dtype=np.float64)
        self.probs = probs  # (M, N, 4)
        qids = sorted({q for q, _ in keys})
        qindex = {q: i for i, q in enumerate(qids)}
        self.q = np.array([qindex[q] for q, _ in keys])
        # rank of product_id within the whole key list reproduces "ascending product_id" tie-breaks
        pid_order = sorted(range(len(keys)), key=lambda i: keys[i][1])
        self.pid_rank = np.empty(len(keys), dtype=np.int64)
        self.pid_rank[pid_order] = np.arange(len(keys))
        self.true_gain = np.array([self.gains[labels[k].index] for k in keys])
        self.n_queries = len(qids)
        self.ideal = self._dcg(np.lexsort((-self.true_gain, self.q)))

    def _positions(self, order: np.ndarray) -> np.ndarray:
        q_sorted = self.q[order]
        first = np.searchsorted(q_sorted, q_sorted, side="left")
        return np.arange(len(order)) - first

    def _dcg(self, order: np.ndarray) -> np.ndarray:
        pos = self._positions(order)
        contrib = self.true_gain[order] / np.log2(pos + 2.0)
        return np.bincount(self.q[order], weights=contrib, minlength=self.n_queries)

    def __call__(self, weights: np.ndarray) -> float:
        # same summation as blend() so the reported NDCG is reproducible from the blended file
        P = sum(wm * Pm for wm, Pm in zip(weights, self.probs))
        scores = P @ self.gains
        order = np.lexsort((self.pid_rank, -scores, self.q))
        d = self._dcg(order)
        ndcg = np.where(self.ideal == 0.0, 1.0, d / np.where(self.ideal == 0.0, 1.0, self.ideal))
        return math.fsum(ndcg.tolist()) / self.n_queries


def _normalized(w: np.ndarray) -> Optional[np.ndarray]:
    total = w.sum()
    return None if total <= 0 else w / total


def _ascend(score, w: np.ndarray, best: float) -> tuple[np.ndarray, float]:
    for step in STEP_SIZES:
        improved = True
        while improved:
            improved = False
            for m in range(len(w)):
                for sign in (1.0, -1.0):
                    cand = w.copy()
                    cand[m] = max(cand[m] + sign * step, 0.0)
                    cand = _normalized(cand)
                    if cand is None:
                        continue
                    value = score(cand)
                    if value > best:
                        w, best, improved = cand, value, True
    return w, best


@dataclass
class EnsembleResult:
    weights: np.ndarray
    ndcg: float
    solo_ndcg: np.ndarray
    initial_weights: np.ndarray
    correlation: Optional[CorrelationReport]


def initial_weights(solo_ndcg: Sequence[float], mean_corr: Sequence[float], corr_penalty: float) -> np.ndarray:
    """``w_m ∝ max(ndcg_m - worst, eps) / (1 + penalty * max(mean_corr_m, 0))``."""
    solo = np.asarray(solo_ndcg, dtype=np.float64)
    corr = np.maximum(np.asarray(mean_corr, dtype=np.float64), 0.0)
    raw = np.maximum(solo - solo.min(), NDCG_EPS) / (1.0 + corr_penalty * corr)
    return raw / raw.sum()


def optimize_weights(
    prediction_sets: Sequence[PredictionSet],
    truth: Sequence[QueryProductRecord],
    gains: Sequence[float] = DEFAULT_GAINS,
    corr_penalty: float = 1.0,
) -> EnsembleResult:
    """Blend weights maximizing validation NDCG.

    Coordinate ascent (steps 0.05 then 0.01, renormalizing after each move,
    strict improvements only) runs from the correlation-penalized initialization
    and from every one-hot weighting; the best end point wins, earlier starts on ties.
    """
    if not prediction_sets:
        raise ValueError("optimize_weights needs at least one model")
    if corr_penalty < 0:
        raise ValueError("corr_penalty must be non-negative")
    keys = _aligned(prediction_sets)
    M = len(prediction_sets)
    score = _BlendScorer(np.stack([ps.prob_matrix(keys) for ps in prediction_sets]), keys, truth, gains)
    eye = np.eye(M)
    solo = np.array([score(eye[m]) for m in range(M)])
    if M == 1:
        return EnsembleResult(np.ones(1), float(solo[0]), solo, np.ones(1), None)
    corr = correlations(prediction_sets)
    w0 = initial_weights(solo, corr.mean_off_diagonal(), corr_penalty)
    best_w, best = w0, score(w0)
    for start in [w0, *eye]:
        w, value = _ascend(score, start.copy(), score(start))
        if value > best:
            best_w, best = w, value
    return EnsembleResult(best_w, best, solo, w0, corr)


def save_weights(names: Sequence[str], weights: Sequence[float], path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for name, w in zip(names, weights):
            f.write(f"{name}\t{float(w)!r}\n")


def load_weights(path: Union[str, Path]) -> dict[str, float]:
    out = {}
    with open(path, encoding="utf-8") as f:
        for i, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}: line {i}: expected 'name<TAB>weight'")
            out[parts[0]] = float(parts[1])
    check_weights(list(out.values()))
    return out
