"""Flat run configuration shared by every CLI command.

Values are resolved in increasing priority: field defaults, a TOML file of
``key = value`` lines, ``ESCI_RANK_<KEY>`` environment variables, then
command-line flags.
"""

from __future__ import annotations

import os
from dataclasses import MISSING, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping, Optional, Union

import tomli

from esci_rank.labels import DEFAULT_GAINS, ESCI_PRIORS
from esci_rank.model import ModelConfig
from esci_rank.tokenizer import TokenizerConfig
from esci_rank.trainer import TrainConfig

ENV_PREFIX = "ESCI_RANK_"

_TOK = TokenizerConfig()
_MODEL = ModelConfig()
_TRAIN = TrainConfig()


class ConfigError(ValueError):
    """A configuration key or value that cannot be used."""


def _opt(default: Any, kind: str, help: str) -> Any:
    """Field with its value kind ('int', 'float', 'str', 'bool', 'path', 'ints', 'floats', 'strs', 'paths')."""
    meta = {"kind": kind, "help": help}
    if isinstance(default, (list, tuple)):
        return field(default=tuple(default), metadata=meta)
    return field(default=default, metadata=meta)


@dataclass(frozen=True)
class RunConfig:
    # tokenizer
    vocab_size: int = _opt(_TOK.vocab_size, "int", "hash buckets including reserved ids")
    ngram_orders: tuple = _opt(_TOK.ngram_orders, "ints", "character n-gram orders added after each word")
    max_len: int = _opt(_TOK.max_len, "int", "tokens per input, [CLS] and final [SEP] included")
    # model
    embed_dim: int = _opt(_MODEL.embed_dim, "int", "embedding width")
    hidden_dims: tuple = _opt(_MODEL.hidden_dims, "ints", "hidden layer widths (all equal)")
    dropout_ratios: tuple = _opt(_MODEL.dropout_ratios, "floats", "one dropout sample per ratio")
    model_seed: Optional[int] = _opt(None, "int", "initialization seed; defaults to --seed")
    # training
    epochs: int = _opt(_TRAIN.epochs, "int", "passes over the training data")
    batch_size: int = _opt(_TRAIN.batch_size, "int", "examples per micro-batch")
    learning_rate: float = _opt(_TRAIN.learning_rate, "float", "Adam step size")
    grad_accum_steps: int = _opt(_TRAIN.grad_accum_steps, "int", "micro-batches per update")
    label_smoothing_eps: float = _opt(_TRAIN.label_smoothing_eps, "float", "mass moved toward uniform on hard labels")
    fgm_epsilon: float = _opt(_TRAIN.fgm_epsilon, "float", "FGM perturbation radius")
    awp_gamma: float = _opt(_TRAIN.awp_gamma, "float", "AWP relative perturbation size")
    awp_loss_gate: float = _opt(_TRAIN.awp_loss_gate, "float", "AWP runs once the windowed loss drops below this")
    adversary: str = _opt(_TRAIN.adversary, "str", "none, fgm or awp")
    distill_hard_weight: float = _opt(_TRAIN.distill_hard_weight, "float", "weight of the hard label in distilled targets")
    pseudo_threshold: float = _opt(_TRAIN.pseudo_threshold, "float", "keep unlabeled pairs whose max probability exceeds this")
    folds: int = _opt(_TRAIN.folds, "int", "query-grouped folds")
    folds_trained: int = _opt(_TRAIN.folds_trained, "int", "fold models trained by --bag")
    seed: Optional[int] = _opt(None, "int", "seed for every random draw (required by synth, train, distill)")
    # data and outputs
    train_data: tuple = _opt((), "paths", "training dataset files, concatenated")
    val_data: Optional[str] = _opt(None, "path", "validation dataset file")
    data: Optional[str] = _opt(None, "path", "dataset file to score")
    input: Optional[str] = _opt(None, "path", "raw dataset file to clean")
    unlabeled: Optional[str] = _opt(None, "path", "dataset file without labels")
    truth: Optional[str] = _opt(None, "path", "labeled dataset file")
    predictions: tuple = _opt((), "paths", "prediction files")
    checkpoints: tuple = _opt((), "paths", "model checkpoints; predictions are averaged")
    weights: Optional[str] = _opt(None, "path", "blend weight file")
    output: Optional[str] = _opt(None, "path", "output file, '-' for stdout")
    output_dir: Optional[str] = _opt(None, "path", "directory for checkpoints, metrics and figures")
    blend_output: Optional[str] = _opt(None, "path", "write blended predictions here")
    gains: tuple = _opt(DEFAULT_GAINS, "floats", "per-class gains for E, S, C, I")
    # command options
    n: int = _opt(1000, "int", "number of synthetic records")
    label_priors: tuple = _opt(ESCI_PRIORS, "floats", "synthetic label distribution over E, S, C, I")
    label_noise: float = _opt(0.0, "float", "probability a synthetic product text follows a random label")
    mark_entities: bool = _opt(False, "bool", "wrap the record's brand and color in query text with markers")
    translate_to: tuple = _opt((), "strs", "add dictionary-translated copies in these locales")
    bag: bool = _opt(False, "bool", "train fold models instead of one model")
    corr_penalty: float = _opt(1.0, "float", "down-weighting of correlated models in the initial blend")
    plots: bool = _opt(True, "bool", "render figures next to delimited outputs")

    def tokenizer_config(self) -> TokenizerConfig:
        return TokenizerConfig(vocab_size=self.vocab_size, ngram_orders=self.ngram_orders, max_len=self.max_len)

    def model_config(self) -> ModelConfig:
        seed = self.model_seed if self.model_seed is not None else (self.seed or 0)
        return ModelConfig(
            vocab_size=self.vocab_size,
            embed_dim=self.embed_dim,
            hidden_dims=self.hidden_dims,
            dropout_ratios=self.dropout_ratios,
            seed=seed,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            grad_accum_steps=self.grad_accum_steps,
            label_smoothing_eps=self.label_smoothing_eps,
            fgm_epsilon=self.fgm_epsilon,
            awp_gamma=self.awp_gamma,
            awp_loss_gate=self.awp_loss_gate,
            adversary=self.adversary,
            distill_hard_weight=self.distill_hard_weight,
            pseudo_threshold=self.pseudo_threshold,
            folds=self.folds,
            folds_trained=self.folds_trained,
            seed=self.seed or 0,
        )

    def validate(self) -> "RunConfig":
        """Build every sub-config once so bad values fail before any work starts."""
        try:
            self.tokenizer_config()
            self.model_config()
            self.train_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self


FIELDS = {f.name: f for f in fields(RunConfig)}


def kind(name: str) -> str:
    return FIELDS[name].metadata["kind"]


def default(name: str) -> Any:
    f = FIELDS[name]
    return f.default if f.default is not MISSING else None


def _scalar(name: str, k: str, value: Any) -> Any:
    if k == "bool":
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "1", "yes", "false", "0", "no"):
            return value.lower() in ("true", "1", "yes")
    elif k == "int":
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        if isinstance(value, str):
            try:
                return int(value)
            except ValueError:
                pass
    elif k == "float":
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                pass
    elif k in ("str", "path"):
        if isinstance(value, (str, Path)):
            return str(value)
    raise ConfigError(f"{name}: expected {k}, got {value!r}")


def coerce(name: str, value: Any) -> Any:
    """Convert a file, environment or flag value to the field's type."""
    if name not in FIELDS:
        raise ConfigError(f"unknown config key {name!r}")
    k = kind(name)
    if value is None:
        return None
    if k in ("ints", "floats", "strs", "paths"):
        if isinstance(value, str):
            value = [v for v in value.replace(",", " ").split() if v]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{name}: expected a list, got {value!r}")
        item = {"ints": "int", "floats": "float", "strs": "str", "paths": "path"}[k]
        return tuple(_scalar(name, item, v) for v in value)
    return _scalar(name, k, value)


def read_file(path: Union[str, Path]) -> dict[str, Any]:
    try:
        with open(path, "rb") as f:
            raw = tomli.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    nested = [k for k, v in raw.items() if isinstance(v, dict)]
    if nested:
        raise ConfigError(f"{path}: tables are not supported, keys must be flat (found [{nested[0]}])")
    return {k: coerce(k, v) for k, v in raw.items()}


def read_env(environ: Optional[Mapping[str, str]] = None) -> dict[str, Any]:
    environ = os.environ if environ is None else environ
    out = {}
    for key, value in environ.items():
        if not key.startswith(ENV_PREFIX) or key == ENV_PREFIX + "CONFIG":
            continue
        name = key[len(ENV_PREFIX) :].lower()
        if name not in FIELDS:
            raise ConfigError(f"unknown config key {name!r} from environment variable {key}")
        out[name] = coerce(name, value)
    return out


def resolve(
    file: Optional[Union[str, Path]] = None,
    flags: Optional[Mapping[str, Any]] = None,
    environ: Optional[Mapping[str, str]] = None,
) -> RunConfig:
    values: dict[str, Any] = {}
    if file is not None:
        values.update(read_file(file))
    values.update(read_env(environ))
    for name, value in (flags or {}).items():
        if value is not None:
            values[name] = coerce(name, value)
    return replace(RunConfig(), **values).validate()


def dumps(cfg: RunConfig) -> str:
    """TOML text for ``cfg``; unset optional keys are omitted."""
    lines = []
    for name in FIELDS:
        value = getattr(cfg, name)
        if value is None:
            continue
        lines.append(f"{name} = {_toml_value(value)}")
    return "\n".join(lines) + "\n"


def _toml_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    return "[" + ", ".join(_toml_value(v) for v in value) + "]"
