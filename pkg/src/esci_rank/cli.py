"""``esci-rank`` command line: one subcommand per pipeline stage, files in between."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from esci_rank import __version__, config
from esci_rank.config import ConfigError, RunConfig
from esci_rank.dataset import (
    DictionaryTranslator,
    augment_translate,
    clean_record,
    generate_synthetic,
    load_dataset,
    mark_record,
    save_dataset,
    synthetic_lexicon,
)
from esci_rank.ensemble import blend, load_weights, optimize_weights, save_weights
from esci_rank.model import ModelParams, load_params, predict_proba, save_params
from esci_rank.plotting import plot_correlation, plot_ndcg_histogram, plot_training
from esci_rank.ranker_eval import (
    PredictionSet,
    check_keys,
    evaluate,
    load_predictions,
    save_eval_report,
    save_predictions,
    save_submission,
)
from esci_rank.tokenizer import TokenizerConfig
from esci_rank.trainer import encode, kfold_bag, pseudo_label, self_distill, train

log = logging.getLogger("esci_rank")

TOKENIZER_KEYS = ("vocab_size", "ngram_orders", "max_len")
MODEL_KEYS = ("embed_dim", "hidden_dims", "dropout_ratios", "model_seed")
TRAIN_KEYS = (
    "epochs",
    "batch_size",
    "learning_rate",
    "grad_accum_steps",
    "label_smoothing_eps",
    "fgm_epsilon",
    "awp_gamma",
    "awp_loss_gate",
    "adversary",
    "distill_hard_weight",
    "pseudo_threshold",
    "folds",
    "folds_trained",
    "seed",
)
LEARNER_KEYS = TOKENIZER_KEYS + MODEL_KEYS + TRAIN_KEYS


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would print usage and exit 2
        raise UsageError(f"{self.prog}: {message}")


# --- helpers ---------------------------------------------------------------


def _require(cfg: RunConfig, *names: str) -> None:
    for name in names:
        value = getattr(cfg, name)
        if value is None or value == ():
            raise ConfigError(f"{name} is required (--{name.replace('_', '-')} or '{name}' in the config file)")


def _require_seed(cfg: RunConfig) -> None:
    if cfg.seed is None:
        raise ConfigError("seed is required for randomized commands (--seed)")


def _figure_path(cfg: RunConfig, suffix: str) -> Optional[Path]:
    """Where a report's figure goes: next to the output file, or in output_dir when writing to stdout."""
    if not cfg.plots:
        return None
    if cfg.output is not None and cfg.output != "-":
        out = Path(cfg.output)
        return out.with_name(out.stem + suffix)
    if cfg.output_dir is not None:
        Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
        return Path(cfg.output_dir) / ("report" + suffix)
    return None


def _load_models(cfg: RunConfig) -> tuple[list[ModelParams], TokenizerConfig]:
    models, toks = [], []
    for path in cfg.checkpoints:
        params, tok = load_params(path)
        models.append(params)
        toks.append(tok)
    stored = {t for t in toks if t is not None}
    if len(stored) > 1:
        raise ConfigError("checkpoints were trained with different tokenizer settings")
    tok = stored.pop() if stored else cfg.tokenizer_config()
    for path, params in zip(cfg.checkpoints, models):
        if params.config.vocab_size != tok.vocab_size:
            raise ConfigError(f"{path}: vocab_size {params.config.vocab_size} does not match tokenizer {tok.vocab_size}")
    return models, tok


def _predict(cfg: RunConfig, records) -> PredictionSet:
    models, tok = _load_models(cfg)
    enc = encode(records, tok)
    probs = sum(predict_proba(p, enc.ids, enc.lens) for p in models) / len(models)
    return PredictionSet.from_arrays(enc.keys, probs, cfg.gains)


def _train_records(cfg: RunConfig) -> list:
    records = []
    for path in cfg.train_data:
        records.extend(load_dataset(path))
    return records


# --- commands ----------------------------------------------------------------


def cmd_ingest(cfg: RunConfig) -> None:
    _require(cfg, "input", "output")
    records = [clean_record(r) for r in load_dataset(cfg.input)]
    if cfg.mark_entities:
        records = [mark_record(r) for r in records]
    if cfg.translate_to:
        records, report = augment_translate(records, DictionaryTranslator(synthetic_lexicon()), cfg.translate_to)
        if report.count:
            log.warning("translation skipped %d copies", report.count)
    save_dataset(records, cfg.output)
    log.info("wrote %d records to %s", len(records), cfg.output)


def cmd_synth(cfg: RunConfig) -> None:
    _require_seed(cfg)
    _require(cfg, "output")
    records = generate_synthetic(cfg.n, cfg.seed, cfg.label_priors, cfg.label_noise)
    save_dataset(records, cfg.output)
    log.info("wrote %d synthetic records to %s", len(records), cfg.output)


def cmd_train(cfg: RunConfig) -> None:
    _require_seed(cfg)
    _require(cfg, "train_data", "output_dir")
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    tok = cfg.tokenizer_config()
    records = _train_records(cfg)
    if cfg.bag:
        if cfg.val_data is not None:
            log.warning("val_data is ignored with --bag; each fold model is validated on its held-out fold")
        for fm in kfold_bag(records, cfg.train_config(), cfg.model_config(), tok):
            save_params(fm.params, out / f"fold_{fm.fold}.ckpt", tok)
            fm.report.write_metrics(out / f"fold_{fm.fold}_metrics.tsv")
            if cfg.plots:
                plot_training(fm.report, out / f"fold_{fm.fold}_training.png")
        return
    val = load_dataset(cfg.val_data) if cfg.val_data is not None else None
    params, report = train(records, val, cfg.train_config(), cfg.model_config(), tok)
    save_params(params, out / "model.ckpt", tok)
    report.write_metrics(out / "metrics.tsv")
    if cfg.plots:
        plot_training(report, out / "training.png")


def cmd_distill(cfg: RunConfig) -> None:
    _require_seed(cfg)
    _require(cfg, "train_data", "output")
    records = self_distill(_train_records(cfg), cfg.train_config(), cfg.model_config(), cfg.tokenizer_config())
    save_dataset(records, cfg.output)


def cmd_pseudo_label(cfg: RunConfig) -> None:
    _require(cfg, "checkpoints", "unlabeled", "output")
    models, tok = _load_models(cfg)
    unlabeled = load_dataset(cfg.unlabeled)
    kept = pseudo_label(models, unlabeled, cfg.pseudo_threshold, tok)
    save_dataset(kept, cfg.output)
    log.info("kept %d of %d unlabeled records", len(kept), len(unlabeled))


def cmd_predict(cfg: RunConfig) -> None:
    _require(cfg, "checkpoints", "data", "output")
    save_predictions(_predict(cfg, load_dataset(cfg.data)), cfg.output)


def cmd_evaluate(cfg: RunConfig) -> None:
    _require(cfg, "predictions", "truth", "output")
    if len(cfg.predictions) != 1:
        raise ConfigError("evaluate takes exactly one predictions file")
    result = evaluate(load_predictions(cfg.predictions[0]), load_dataset(cfg.truth), cfg.gains)
    save_eval_report(result, cfg.output)
    fig = _figure_path(cfg, "_ndcg.png")
    if fig is not None:
        plot_ndcg_histogram(result, fig)
    log.info("mean NDCG %.6f over %d queries", result.mean_ndcg, len(result.per_query))


def cmd_ensemble(cfg: RunConfig) -> None:
    _require(cfg, "predictions")
    names = list(cfg.predictions)
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        raise ConfigError(f"predictions listed more than once: {', '.join(dupes)}")
    sets = [load_predictions(p) for p in names]
    if cfg.truth is not None:
        _require(cfg, "output")
        result = optimize_weights(sets, load_dataset(cfg.truth), cfg.gains, cfg.corr_penalty)
        weights = result.weights
        save_weights(names, weights, cfg.output)
        log.info("blend NDCG %.6f (best single %.6f)", result.ndcg, float(result.solo_ndcg.max()))
        fig = _figure_path(cfg, "_correlation.png")
        if fig is not None and result.correlation is not None:
            plot_correlation(result.correlation, names, fig)
    elif cfg.weights is not None:
        table = load_weights(cfg.weights)
        check_keys(table, names, what="weight file entries")
        weights = np.array([table[n] for n in names])
    else:
        raise ConfigError("ensemble needs truth (to fit weights) or weights (to apply them)")
    if cfg.blend_output is not None:
        save_predictions(blend(sets, weights, cfg.gains), cfg.blend_output)


def cmd_rank(cfg: RunConfig) -> None:
    _require(cfg, "output")
    if cfg.checkpoints:
        _require(cfg, "data")
        predictions = _predict(cfg, load_dataset(cfg.data))
    elif len(cfg.predictions) == 1:
        predictions = load_predictions(cfg.predictions[0]).rescored(cfg.gains)
    else:
        raise ConfigError("rank needs checkpoints with data, or exactly one predictions file")
    save_submission(predictions, cfg.output)


COMMANDS: dict[str, tuple[Callable[[RunConfig], None], tuple, str]] = {
    "ingest": (cmd_ingest, ("input", "output", "mark_entities", "translate_to"), "clean raw records"),
    "synth": (cmd_synth, ("n", "seed", "label_priors", "label_noise", "output"), "generate a synthetic dataset"),
    "train": (
        cmd_train,
        LEARNER_KEYS + ("train_data", "val_data", "output_dir", "bag", "plots"),
        "train one model, or fold models with --bag",
    ),
    "distill": (cmd_distill, LEARNER_KEYS + ("train_data", "output"), "fill soft labels from out-of-fold predictions"),
    "pseudo-label": (
        cmd_pseudo_label,
        TOKENIZER_KEYS + ("checkpoints", "unlabeled", "pseudo_threshold", "output"),
        "soft-label confidently predicted unlabeled records",
    ),
    "predict": (cmd_predict, TOKENIZER_KEYS + ("checkpoints", "data", "gains", "output"), "write class probabilities"),
    "evaluate": (
        cmd_evaluate,
        ("predictions", "truth", "gains", "output", "output_dir", "plots"),
        "per-query and mean NDCG",
    ),
    "ensemble": (
        cmd_ensemble,
        ("predictions", "truth", "weights", "gains", "corr_penalty", "output", "output_dir", "blend_output", "plots"),
        "fit or apply blend weights",
    ),
    "rank": (
        cmd_rank,
        TOKENIZER_KEYS + ("checkpoints", "predictions", "data", "gains", "output"),
        "write a ranked submission file",
    ),
}


def _add_flag(parser: argparse.ArgumentParser, name: str) -> None:
    kind = config.kind(name)
    default = config.default(name)
    if default is None:
        shown = "unset"
    elif isinstance(default, tuple):
        shown = " ".join(str(v) for v in default) or "none"
    else:
        shown = default
    flag = "--" + name.replace("_", "-")
    help_text = f"{config.FIELDS[name].metadata['help']} (default: {shown})"
    if kind == "bool":
        parser.add_argument(flag, dest=name, action=argparse.BooleanOptionalAction, default=None, help=help_text)
    elif kind in ("ints", "floats", "strs", "paths"):
        parser.add_argument(flag, dest=name, nargs="+", default=None, metavar="X", help=help_text)
    else:
        parser.add_argument(flag, dest=name, default=None, metavar=kind.upper(), help=help_text)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="esci-rank", description="Query-product relevance ranking pipeline.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, keys, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", default=None, metavar="PATH", help="TOML file of key = value lines (default: none)")
        p.add_argument(
            "--log-level", default="info", choices=("debug", "info", "warning", "error"), help="stderr verbosity (default: info)"
        )
        for key in keys:
            _add_flag(p, key)
    return parser


def _error_line(exc: BaseException) -> str:
    payload = {"error": type(exc).__name__, "message": str(exc)}
    filename = getattr(exc, "filename", None)
    if filename is not None:
        payload["path"] = str(filename)
        payload["message"] = exc.strerror or str(exc)
    return json.dumps(payload, sort_keys=True)


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
        func, keys, _ = COMMANDS[args.command]
        flags = {k: getattr(args, k) for k in keys}
        env_file = os.environ.get(config.ENV_PREFIX + "CONFIG")
        cfg = config.resolve(args.config or env_file, flags)
        func(cfg)
    except SystemExit:
        raise
    except BrokenPipeError:
        # the reader closed stdout early (e.g. piped into head); stop quietly
        os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
        return 1
    except ConfigError as exc:
        print(_error_line(exc), file=sys.stderr)
        return 2
    except Exception as exc:  # every failure ends as one parsable line
        print(_error_line(exc), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
