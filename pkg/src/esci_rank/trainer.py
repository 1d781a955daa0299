"""Training loops: label smoothing, gradient accumulation, FGM, loss-gated AWP,
query-grouped k-fold bagging, self-distillation and pseudo-labeling."""

from __future__ import annotations

import logging
import math
import time
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from esci_rank.dataset.records import QueryProductRecord
from esci_rank.dataset.text import build_input
from esci_rank.labels import DEFAULT_GAINS, NUM_CLASSES, EsciLabel, LabelLike, as_label_vector, one_hot
from esci_rank.model import (
    ModelConfig,
    ModelParams,
    RowSparse,
    backward,
    cross_entropy,
    forward,
    init_params,
    predict_proba,
)
from esci_rank.ranker_eval import PredictionSet, evaluate
from esci_rank.tokenizer import TokenizerConfig, tokenize_batch

log = logging.getLogger(__name__)

ADVERSARIES = ("none", "fgm", "awp")
AWP_WINDOW = 100  # updates averaged for the AWP loss gate
ZERO_GUARD = 1e-12
ADAM_BETA1, ADAM_BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 3
    batch_size: int = 64
    learning_rate: float = 3e-3
    grad_accum_steps: int = 8
    label_smoothing_eps: float = 0.1
    fgm_epsilon: float = 0.1
    awp_gamma: float = 0.01
    awp_loss_gate: float = 0.6
    adversary: str = "none"
    distill_hard_weight: float = 0.7
    pseudo_threshold: float = 0.7
    folds: int = 3
    folds_trained: int = 3
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.grad_accum_steps < 1:
            raise ValueError("epochs, batch_size and grad_accum_steps must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.label_smoothing_eps < 1.0:
            raise ValueError("label_smoothing_eps must lie in [0, 1)")
        if not self.fgm_epsilon > 0 or not self.awp_gamma > 0:
            raise ValueError("fgm_epsilon and awp_gamma must be positive")
        if self.adversary not in ADVERSARIES:
            raise ValueError(f"adversary must be one of {ADVERSARIES}, got {self.adversary!r}")
        if not 0.0 <= self.distill_hard_weight <= 1.0:
            raise ValueError("distill_hard_weight must lie in [0, 1]")
        if not 0.5 <= self.pseudo_threshold < 1.0:
            raise ValueError("pseudo_threshold must lie in [0.5, 1)")
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        if not 1 <= self.folds_trained <= self.folds:
            raise ValueError("folds_trained must lie in [1, folds]")


@dataclass
class EpochStats:
    epoch: int
    loss: float
    val_ndcg: float
    adv_steps: int
    adv_skipped: int
    wall_time: float


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)  # EpochStats per epoch

    @property
    def losses(self) -> list[float]:
        return [e.loss for e in self.epochs]

    def write_metrics(self, path) -> None:
        """Delimited metrics file; wall time is left out so reruns are byte-identical."""
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write("epoch\tloss\tval_ndcg\tadv_steps\n")
            for e in self.epochs:
                ndcg = "" if math.isnan(e.val_ndcg) else repr(e.val_ndcg)
                f.write(f"{e.epoch}\t{e.loss!r}\t{ndcg}\t{e.adv_steps}\n")


# --- targets and loss ------------------------------------------------------


def smooth_labels(target: LabelLike, eps: float) -> np.ndarray:
    """Mix a target distribution with the uniform one: ``(1 - eps) * t + eps / 4``."""
    if not 0.0 <= eps < 1.0:
        raise ValueError("eps must lie in [0, 1)")
    t = as_label_vector(target)
    return (1.0 - eps) * t + eps * np.full(NUM_CLASSES, 1.0 / NUM_CLASSES)


def loss(probs: Sequence[float], target: Sequence[float]) -> float:
    """Cross-entropy of a predicted distribution against a target distribution."""
    return float(cross_entropy(np.asarray(probs, dtype=np.float64), np.asarray(target, dtype=np.float64)))


def merge_labels(hard: EsciLabel, predicted: Sequence[float], hard_weight: float) -> np.ndarray:
    """Blend a hard label with an out-of-fold prediction."""
    return hard_weight * one_hot(hard) + (1.0 - hard_weight) * as_label_vector(predicted)


def record_target(record: QueryProductRecord, eps: float) -> np.ndarray:
    # soft labels already carry the flattening of the merge; do not smooth twice
    if record.soft_label is not None:
        return np.array(record.soft_label, dtype=np.float64)
    if record.label is None:
        raise TrainingError(f"record {record.key} has neither a label nor a soft label")
    return smooth_labels(record.label, eps)


@dataclass
class Encoded:
    keys: list
    ids: np.ndarray
    lens: np.ndarray
    targets: Optional[np.ndarray]

    def __len__(self) -> int:
        return len(self.keys)

    def subset(self, idx: np.ndarray) -> "Encoded":
        idx = np.asarray(idx, dtype=np.int64)
        return Encoded(
            [self.keys[i] for i in idx],
            self.ids[idx],
            self.lens[idx],
            None if self.targets is None else self.targets[idx],
        )


def encode(
    records: Sequence[QueryProductRecord], tok_cfg: TokenizerConfig, eps: Optional[float] = None
) -> Encoded:
    """Tokenize records; with ``eps`` given, also build training targets."""
    ids, lens = tokenize_batch((build_input(r) for r in records), tok_cfg)
    targets = None
    if eps is not None:
        targets = np.array([record_target(r, eps) for r in records]).reshape(len(records), NUM_CLASSES)
    return Encoded([r.key for r in records], ids, lens, targets)


# --- optimizer ---------------------------------------------------------------


class Adam:
    """Adaptive moment estimation; row-sparse gradients get lazy updates of only the touched rows."""

    def __init__(self, params: ModelParams, lr: float):
        self.lr = lr
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.tensors.items()}

    def step(self, params: ModelParams, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - ADAM_BETA1**self.t
        c2 = 1.0 - ADAM_BETA2**self.t
        for k, w in params.tensors.items():
            g = grads[k]
            if isinstance(g, RowSparse):
                r = g.rows
                m = ADAM_BETA1 * self.m[k][r] + (1.0 - ADAM_BETA1) * g.values
                v = ADAM_BETA2 * self.v[k][r] + (1.0 - ADAM_BETA2) * (g.values * g.values)
                self.m[k][r] = m
                self.v[k][r] = v
                w[r] -= self.lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
                continue
            m, v = self.m[k], self.v[k]
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * (g * g)
            w -= self.lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)


# --- adversarial steps -------------------------------------------------------


@dataclass
class AdversarialResult:
    applied: bool
    grads: Optional[dict] = None
    loss: Optional[float] = None
    embed_delta: Optional[np.ndarray] = None
    weight_deltas: dict = field(default_factory=dict)


def normalized_perturbation(grad: np.ndarray, radius: float) -> Optional[np.ndarray]:
    """``radius * grad / ||grad||_2`` over the whole array, or None when the gradient vanishes."""
    norm = float(np.sqrt(np.sum(grad * grad)))
    if norm < ZERO_GUARD:
        return None
    return radius * grad / norm


def fgm_step(
    params: ModelParams,
    ids: np.ndarray,
    lens: np.ndarray,
    targets: np.ndarray,
    embed_grad: np.ndarray,
    epsilon: float,
    scale: float = 1.0,
    mode: str = "train",
    dropout_uniforms: Optional[np.ndarray] = None,
    sparse_embedding: bool = False,
) -> AdversarialResult:
    """Gradients at embedding outputs pushed ``epsilon`` along the batch-normalized embedding gradient.

    The embedding table itself is never written, so nothing needs restoring.
    """
    delta = normalized_perturbation(embed_grad, epsilon)
    if delta is None:
        return AdversarialResult(False)
    probs, cache = forward(params, ids, lens, mode, embed_delta=delta, dropout_uniforms=dropout_uniforms)
    grads = backward(params, cache, targets, scale, sparse_embedding)
    return AdversarialResult(True, grads, float(cross_entropy(probs, targets).sum() * scale), delta)


def awp_step(
    params: ModelParams,
    ids: np.ndarray,
    lens: np.ndarray,
    targets: np.ndarray,
    clean_grads: dict,
    embed_out: np.ndarray,
    gamma: float,
    running_loss: Optional[float],
    loss_gate: float,
    scale: float = 1.0,
    mode: str = "train",
    dropout_uniforms: Optional[np.ndarray] = None,
    sparse_embedding: bool = False,
) -> AdversarialResult:
    """Gradients at adversarially perturbed weights and embedding outputs.

    Every layer weight ``w`` moves by ``gamma * ||w|| * g_w / ||g_w||``; embedding
    outputs move by ``gamma * ||E_batch||`` along their gradient. Perturbed tensors
    live in a separate container; ``params`` is left bit-for-bit unchanged.
    No-op unless ``running_loss`` is known and below ``loss_gate``.
    """
    if running_loss is None or not running_loss < loss_gate:
        return AdversarialResult(False)
    perturbed = params.shallow()
    deltas = {}
    for name in params.layer_weights():
        w = params[name]
        w_norm = float(np.sqrt(np.sum(w * w)))
        delta = normalized_perturbation(clean_grads[name], gamma * w_norm)
        if delta is None:
            delta = np.zeros_like(w)
        deltas[name] = delta
        perturbed[name] = w + delta
    e_norm = float(np.sqrt(np.sum(embed_out * embed_out)))
    embed_delta = normalized_perturbation(clean_grads["embedding_outputs"], gamma * e_norm)
    probs, cache = forward(perturbed, ids, lens, mode, embed_delta=embed_delta, dropout_uniforms=dropout_uniforms)
    grads = backward(perturbed, cache, targets, scale, sparse_embedding)
    return AdversarialResult(True, grads, float(cross_entropy(probs, targets).sum() * scale), embed_delta, deltas)


# --- training loop -------------------------------------------------------------


class _Accumulator:
    """Sums micro-batch gradients; the embedding table stays row-sparse."""

    def __init__(self, params: ModelParams):
        self.dense = {k: np.zeros_like(v) for k, v in params.tensors.items() if k != "embedding"}
        self.embedding: list = []

    def add(self, grads: dict) -> None:
        for k, acc in self.dense.items():
            acc += grads[k]
        self.embedding.append(grads["embedding"])

    def total(self) -> dict:
        out = dict(self.dense)
        out["embedding"] = RowSparse.sum(self.embedding)
        return out


def validation_ndcg(
    params: ModelParams, enc: Encoded, truth: Sequence[QueryProductRecord], gains=DEFAULT_GAINS
) -> float:
    probs = predict_proba(params, enc.ids, enc.lens)
    return evaluate(PredictionSet.from_arrays(enc.keys, probs, gains), truth, gains).mean_ndcg


def train_encoded(
    data: Encoded,
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    val: Optional[tuple[Encoded, Sequence[QueryProductRecord]]] = None,
    params: Optional[ModelParams] = None,
    max_updates: Optional[int] = None,
) -> tuple[ModelParams, TrainReport]:
    """Core loop over pre-tokenized data.

    Each update consumes one logical batch of ``batch_size * grad_accum_steps``
    examples, split into micro-batches; the loss is the mean over the logical
    batch, so any split of the same logical batch yields the same update. Dropout
    draws are made per logical batch for the same reason.
    """
    if len(data) == 0:
        raise TrainingError("training set is empty")
    if data.targets is None:
        raise TrainingError("training data has no targets")
    params = init_params(model_cfg) if params is None else params
    order_rng = np.random.default_rng([cfg.seed, 0])
    drop_rng = np.random.default_rng([cfg.seed, 1])
    adam = Adam(params, cfg.learning_rate)
    window: deque = deque(maxlen=AWP_WINDOW)
    K = len(model_cfg.dropout_ratios)
    H = model_cfg.pool_dim
    logical = cfg.batch_size * cfg.grad_accum_steps
    report = TrainReport()
    updates = 0

    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = order_rng.permutation(len(data))
        loss_sum = 0.0
        seen = 0
        adv_steps = adv_skipped = 0
        for start in range(0, len(data), logical):
            batch_idx = order[start : start + logical]
            n = len(batch_idx)
            scale = 1.0 / n
            uniforms = drop_rng.random((K, n, H))
            acc = _Accumulator(params)
            batch_loss = 0.0
            for mb in range(0, n, cfg.batch_size):
                idx = batch_idx[mb : mb + cfg.batch_size]
                u = uniforms[:, mb : mb + cfg.batch_size]
                ids, lens, tgt = data.ids[idx], data.lens[idx], data.targets[idx]
                probs, cache = forward(params, ids, lens, "train", dropout_uniforms=u)
                per_example = cross_entropy(probs, tgt)
                if not np.all(np.isfinite(per_example)):
                    raise TrainingError(f"non-finite loss at epoch {epoch}, update {updates + 1}")
                batch_loss += float(per_example.sum())
                grads = backward(params, cache, tgt, scale, sparse_embedding=True)
                if cfg.adversary == "fgm":
                    res = fgm_step(params, ids, lens, tgt, grads["embedding_outputs"], cfg.fgm_epsilon, scale,
                                   dropout_uniforms=u, sparse_embedding=True)
                    acc.add(grads)
                    if res.applied:
                        acc.add(res.grads)
                        adv_steps += 1
                    else:
                        adv_skipped += 1
                elif cfg.adversary == "awp":
                    running = float(np.mean(window)) if window else None
                    res = awp_step(params, ids, lens, tgt, grads, cache.embed_out, cfg.awp_gamma, running,
                                   cfg.awp_loss_gate, scale, dropout_uniforms=u, sparse_embedding=True)
                    if res.applied:
                        grads = res.grads
                        adv_steps += 1
                    acc.add(grads)
                else:
                    acc.add(grads)
            adam.step(params, acc.total())
            updates += 1
            loss_sum += batch_loss
            seen += n
            window.append(batch_loss / n)
            if max_updates is not None and updates >= max_updates:
                break
        mean_loss = loss_sum / seen
        if not math.isfinite(mean_loss):
            raise TrainingError(f"non-finite mean loss at epoch {epoch}")
        val_ndcg = validation_ndcg(params, val[0], val[1]) if val is not None else float("nan")
        stats = EpochStats(epoch, mean_loss, val_ndcg, adv_steps, adv_skipped, time.perf_counter() - t0)
        report.epochs.append(stats)
        log.info("epoch %d loss %.5f val_ndcg %.5f adv_steps %d (%.1fs)", epoch, mean_loss, val_ndcg,
                 adv_steps, stats.wall_time)
        if max_updates is not None and updates >= max_updates:
            break
    return params, report


def _check_vocab(model_cfg: ModelConfig, tok_cfg: TokenizerConfig) -> None:
    if model_cfg.vocab_size != tok_cfg.vocab_size:
        raise ValueError(f"model vocab_size {model_cfg.vocab_size} != tokenizer vocab_size {tok_cfg.vocab_size}")


def train(
    dataset: Sequence[QueryProductRecord],
    val_dataset: Optional[Sequence[QueryProductRecord]],
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    tok_cfg: Optional[TokenizerConfig] = None,
) -> tuple[ModelParams, TrainReport]:
    tok_cfg = tok_cfg or TokenizerConfig(vocab_size=model_cfg.vocab_size)
    _check_vocab(model_cfg, tok_cfg)
    if not dataset:
        raise TrainingError("training set is empty")
    data = encode(dataset, tok_cfg, cfg.label_smoothing_eps)
    val = None
    if val_dataset:
        val = (encode(val_dataset, tok_cfg), list(val_dataset))
    return train_encoded(data, cfg, model_cfg, val)


# --- folds, bagging, distillation, pseudo labels -------------------------------


def fold_assignment(records: Sequence[QueryProductRecord], k: int, seed: int) -> dict[str, int]:
    """Map each query_id to a fold in ``0..k-1``; every product of a query shares its fold."""
    qids = sorted({r.query_id for r in records})
    if len(qids) < k:
        raise TrainingError(f"need at least {k} distinct query_ids for {k} folds, found {len(qids)}")
    perm = np.random.default_rng(seed).permutation(len(qids))
    return {qids[j]: rank % k for rank, j in enumerate(perm)}


@dataclass
class FoldModel:
    fold: int
    params: ModelParams
    report: TrainReport
    heldout: np.ndarray  # record indices of the held-out fold


def _fold_models(
    records: Sequence[QueryProductRecord],
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    tok_cfg: TokenizerConfig,
    n_models: int,
    data: Optional[Encoded] = None,
) -> list[FoldModel]:
    _check_vocab(model_cfg, tok_cfg)
    folds = fold_assignment(records, cfg.folds, cfg.seed)
    fold_of = np.array([folds[r.query_id] for r in records])
    data = data if data is not None else encode(records, tok_cfg, cfg.label_smoothing_eps)
    out = []
    for f in range(n_models):
        train_idx = np.flatnonzero(fold_of != f)
        held_idx = np.flatnonzero(fold_of == f)
        held_records = [records[i] for i in held_idx]
        val = None
        if all(r.label is not None for r in held_records):
            val = (data.subset(held_idx), held_records)
        log.info("fold %d/%d: %d train, %d held out", f + 1, cfg.folds, len(train_idx), len(held_idx))
        params, report = train_encoded(
            data.subset(train_idx),
            replace(cfg, seed=cfg.seed + f),
            replace(model_cfg, seed=model_cfg.seed + f),
            val,
        )
        out.append(FoldModel(f, params, report, held_idx))
    return out


def kfold_bag(
    dataset: Sequence[QueryProductRecord],
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    tok_cfg: Optional[TokenizerConfig] = None,
) -> list[FoldModel]:
    """Train ``folds_trained`` models, the i-th on everything outside fold i."""
    tok_cfg = tok_cfg or TokenizerConfig(vocab_size=model_cfg.vocab_size)
    return _fold_models(list(dataset), cfg, model_cfg, tok_cfg, cfg.folds_trained)


def self_distill(
    dataset: Sequence[QueryProductRecord],
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    tok_cfg: Optional[TokenizerConfig] = None,
) -> list[QueryProductRecord]:
    """Fill soft labels from out-of-fold predictions of ``folds`` models trained on the other folds."""
    records = list(dataset)
    missing = [r.key for r in records if r.label is None]
    if missing:
        raise TrainingError(f"self-distillation needs hard labels; {len(missing)} records lack one (first {missing[0]})")
    tok_cfg = tok_cfg or TokenizerConfig(vocab_size=model_cfg.vocab_size)
    data = encode(records, tok_cfg, cfg.label_smoothing_eps)
    out = list(records)
    for fm in _fold_models(records, cfg, model_cfg, tok_cfg, cfg.folds, data):
        held = data.subset(fm.heldout)
        probs = predict_proba(fm.params, held.ids, held.lens)
        for i, p in zip(fm.heldout, probs):
            r = records[i]
            out[i] = r.with_soft_label(merge_labels(r.label, p, cfg.distill_hard_weight))
    return out


def pseudo_label(
    params_list: Sequence[ModelParams],
    unlabeled: Sequence[QueryProductRecord],
    threshold: float,
    tok_cfg: Optional[TokenizerConfig] = None,
) -> list[QueryProductRecord]:
    """Keep records whose averaged prediction has max probability above ``threshold``, soft-labeled with it."""
    if not params_list:
        raise ValueError("pseudo_label needs at least one model")
    records = list(unlabeled)
    if not records:
        return []
    tok_cfg = tok_cfg or TokenizerConfig(vocab_size=params_list[0].config.vocab_size)
    enc = encode(records, tok_cfg)
    probs = sum(predict_proba(p, enc.ids, enc.lens) for p in params_list) / len(params_list)
    return [r.with_soft_label(p) for r, p in zip(records, probs) if p.max() > threshold]
