"""Probability-to-score conversion, per-query ranking and NDCG."""

from __future__ import annotations

import csv
import math
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from esci_rank.dataset.records import QueryProductRecord
from esci_rank.labels import DEFAULT_GAINS, NUM_CLASSES, EsciLabel, check_gains, check_label_vector

PREDICTION_COLUMNS = ("query_id", "product_id", "p_e", "p_s", "p_c", "p_i", "score")


class KeyMismatchError(ValueError):
    """Predictions and truth (or two prediction sets) do not cover the same pairs."""

    def __init__(self, missing: Sequence, extra: Sequence, what: str = "predictions"):
        self.missing = list(missing)
        self.extra = list(extra)
        parts = []
        if self.missing:
            parts.append(f"{len(self.missing)} pairs missing from {what} (first: {self.missing[:3]})")
        if self.extra:
            parts.append(f"{len(self.extra)} unexpected pairs in {what} (first: {self.extra[:3]})")
        super().__init__("; ".join(parts))


def score(p: Sequence[float], gains: Sequence[float] = DEFAULT_GAINS) -> float:
    """Expected gain of a class distribution."""
    return float(np.dot(np.asarray(p, dtype=np.float64), np.asarray(gains, dtype=np.float64)))


@dataclass(frozen=True)
class Prediction:
    query_id: str
    product_id: str
    probs: tuple
    score: float

    @property
    def key(self) -> tuple[str, str]:
        return (self.query_id, self.product_id)


class PredictionSet:
    """Per-pair class probabilities and scores, in insertion order, unique by (query_id, product_id)."""

    def __init__(self, entries: Iterable[Prediction] = ()):
        self.entries: list[Prediction] = []
        self._index: dict[tuple[str, str], int] = {}
        for e in entries:
            self.add(e)

    def add(self, entry: Prediction) -> None:
        if entry.key in self._index:
            raise ValueError(f"duplicate prediction for {entry.key}")
        self._index[entry.key] = len(self.entries)
        self.entries.append(entry)

    @classmethod
    def from_arrays(
        cls,
        keys: Sequence[tuple[str, str]],
        probs: np.ndarray,
        gains: Sequence[float] = DEFAULT_GAINS,
    ) -> "PredictionSet":
        probs = np.asarray(probs, dtype=np.float64)
        if probs.shape != (len(keys), NUM_CLASSES):
            raise ValueError(f"probs shape {probs.shape} does not match {len(keys)} keys")
        g = np.asarray(gains, dtype=np.float64)
        scores = probs @ g
        return cls(
            Prediction(q, p, tuple(float(x) for x in row), float(s))
            for (q, p), row, s in zip(keys, probs, scores)
        )

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, key: tuple[str, str]) -> Prediction:
        return self.entries[self._index[key]]

    def __contains__(self, key) -> bool:
        return key in self._index

    def keys(self) -> list[tuple[str, str]]:
        return [e.key for e in self.entries]

    def prob_matrix(self, keys: Optional[Sequence[tuple[str, str]]] = None) -> np.ndarray:
        keys = self.keys() if keys is None else keys
        return np.array([self[k].probs for k in keys], dtype=np.float64).reshape(len(keys), NUM_CLASSES)

    def scores(self, keys: Optional[Sequence[tuple[str, str]]] = None) -> np.ndarray:
        keys = self.keys() if keys is None else keys
        return np.array([self[k].score for k in keys], dtype=np.float64)

    def rescored(self, gains: Sequence[float] = DEFAULT_GAINS) -> "PredictionSet":
        return PredictionSet(Prediction(e.query_id, e.product_id, e.probs, score(e.probs, gains)) for e in self)

    def by_query(self) -> dict[str, list[Prediction]]:
        groups: dict[str, list[Prediction]] = {}
        for e in self.entries:
            groups.setdefault(e.query_id, []).append(e)
        return groups


def rank_query(entries: Sequence[Prediction]) -> list[str]:
    """Product ids by descending score; ties go to the smaller product_id."""
    if not entries:
        raise ValueError("cannot rank an empty query")
    return [e.product_id for e in sorted(entries, key=lambda e: (-e.score, e.product_id))]


def dcg(gains_in_rank_order: Sequence[float]) -> float:
    return sum(g / math.log2(i + 2) for i, g in enumerate(gains_in_rank_order))


def ndcg_query(ranked_labels: Sequence[EsciLabel], gains: Sequence[float] = DEFAULT_GAINS) -> float:
    """NDCG of one ranked list of true labels; 1.0 when no ordering can gain anything."""
    if not ranked_labels:
        raise ValueError("ndcg_query needs at least one label")
    g = [gains[label.index] for label in ranked_labels]
    ideal = dcg(sorted(g, reverse=True))
    if ideal == 0.0:
        return 1.0
    return dcg(g) / ideal


@dataclass
class EvalResult:
    mean_ndcg: float
    per_query: dict  # query_id -> ndcg, sorted by query_id
    sizes: dict  # query_id -> number of products


def _truth_labels(truth: Iterable[QueryProductRecord]) -> dict[tuple[str, str], EsciLabel]:
    labels = {}
    for r in truth:
        if r.label is None:
            raise ValueError(f"truth record {r.key} has no hard label")
        if r.key in labels:
            raise ValueError(f"duplicate truth pair {r.key}")
        labels[r.key] = r.label
    return labels


def check_keys(expected: Iterable, actual: Iterable, what: str = "predictions") -> None:
    expected, actual = set(expected), set(actual)
    if expected != actual:
        raise KeyMismatchError(sorted(expected - actual), sorted(actual - expected), what)


def evaluate(
    predictions: PredictionSet,
    truth: Iterable[QueryProductRecord],
    gains: Sequence[float] = DEFAULT_GAINS,
) -> EvalResult:
    labels = _truth_labels(truth)
    check_keys(labels, predictions.keys())
    groups = predictions.by_query()
    per_query = {}
    sizes = {}
    for qid in sorted(groups):
        entries = groups[qid]
        order = rank_query(entries)
        per_query[qid] = ndcg_query([labels[(qid, pid)] for pid in order], gains)
        sizes[qid] = len(entries)
    # fixed summation order keeps the mean independent of input row order
    mean = math.fsum(per_query.values()) / len(per_query) if per_query else float("nan")
    return EvalResult(mean, per_query, sizes)


def oracle_predictions(truth: Iterable[QueryProductRecord], gains: Sequence[float] = DEFAULT_GAINS) -> PredictionSet:
    """Predictions that put all probability on the true class."""
    truth = list(truth)
    probs = np.zeros((len(truth), NUM_CLASSES))
    for i, r in enumerate(truth):
        probs[i, r.label.index] = 1.0
    return PredictionSet.from_arrays([r.key for r in truth], probs, gains)


# --- files ---------------------------------------------------------------


def _open_out(path: Union[str, Path]):
    if str(path) == "-":
        return _Stdout()
    return open(path, "w", encoding="utf-8", newline="")


class _Stdout:
    def __enter__(self):
        return sys.stdout

    def __exit__(self, *exc):
        sys.stdout.flush()
        return False


def _writer(f):
    return csv.writer(f, delimiter="\t", quoting=csv.QUOTE_NONE, quotechar=None, lineterminator="\n")


def save_predictions(predictions: PredictionSet, path: Union[str, Path]) -> None:
    with _open_out(path) as f:
        w = _writer(f)
        w.writerow(PREDICTION_COLUMNS)
        for e in predictions:
            w.writerow([e.query_id, e.product_id, *(repr(x) for x in e.probs), repr(e.score)])


def load_predictions(path: Union[str, Path]) -> PredictionSet:
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.reader(f, delimiter="\t", quoting=csv.QUOTE_NONE, quotechar=None)
        header = next(reader, None)
        if header is None or tuple(header) != PREDICTION_COLUMNS:
            raise ValueError(f"{path}: expected header {PREDICTION_COLUMNS}, got {header}")
        out = PredictionSet()
        for values in reader:
            if not values:
                continue
            line = reader.line_num
            if len(values) != len(PREDICTION_COLUMNS):
                raise ValueError(f"{path}: line {line}: expected {len(PREDICTION_COLUMNS)} fields")
            try:
                probs = tuple(float(x) for x in values[2:6])
                check_label_vector(np.array(probs))
                s = float(values[6])
                out.add(Prediction(values[0], values[1], probs, s))
            except ValueError as exc:
                raise ValueError(f"{path}: line {line}: {exc}") from None
    return out


def save_submission(predictions: PredictionSet, path: Union[str, Path]) -> None:
    """Ranked (query_id, product_id) rows, queries in sorted order."""
    groups = predictions.by_query()
    with _open_out(path) as f:
        w = _writer(f)
        w.writerow(("query_id", "product_id"))
        for qid in sorted(groups):
            for pid in rank_query(groups[qid]):
                w.writerow((qid, pid))


def save_eval_report(result: EvalResult, path: Union[str, Path]) -> None:
    with _open_out(path) as f:
        w = _writer(f)
        w.writerow(("query_id", "ndcg", "n_products"))
        for qid, v in result.per_query.items():
            w.writerow((qid, repr(v), result.sizes[qid]))
        w.writerow(("mean_ndcg", repr(result.mean_ndcg), len(result.per_query)))


def parse_gains(text: Union[str, Sequence[float]]) -> np.ndarray:
    if isinstance(text, str):
        text = [float(x) for x in text.replace(",", " ").split()]
    return check_gains(text)
