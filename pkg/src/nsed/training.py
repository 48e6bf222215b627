"""Optimisation: configuration, Adam, learning-rate schedule and the training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import checkpoint
from .data import Vocabulary
from .encoders import EncoderConfig
from .errors import ConfigError, NumericalError
from .losses import LossWeights
from .matching import log_scores, matching_loss, tune_threshold
from .metrics import binary_f1, corpus_cer
from .model import EOS, EditModel
from .transduction import decode_greedy_batch, transduction_loss

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    task: str = "transduce"
    encoder: str = "rnn"
    embed_dim: int = 256
    hidden_dim: int = 256
    layers: int = 0
    heads: int = 4
    lr: float = 1e-4
    batch_size: int = 512
    validate_every: int = 50
    lr_decay: float = 0.7
    patience: int = 2
    max_decays: int = 10
    w_em: float = 1.0
    w_nll: float = 1.0
    w_bce: float = 1.0
    w_nonmatch: float = 1.0
    w_interp: float = 0.1
    beam: int = 5
    len_norm: float = 1.0
    seed: int = 13
    train_subsample: int = 0

    def __post_init__(self):
        if self.task not in ("match", "transduce"):
            raise ConfigError(f"task: expected match or transduce, got {self.task!r}")
        checks = {
            "embed_dim": self.embed_dim > 0, "hidden_dim": self.hidden_dim > 0, "layers": self.layers >= 0,
            "heads": self.heads > 0, "lr": self.lr >= 0, "batch_size": self.batch_size >= 1,
            "validate_every": self.validate_every >= 1, "lr_decay": 0 < self.lr_decay < 1,
            "patience": self.patience >= 1, "max_decays": self.max_decays >= 0, "beam": self.beam >= 1,
            "len_norm": self.len_norm >= 0, "train_subsample": self.train_subsample >= 0,
        }
        for key, ok in checks.items():
            if not ok:
                raise ConfigError(f"{key}: invalid value {getattr(self, key)!r}")
        self.weights()
        self.encoder_config()

    def weights(self) -> LossWeights:
        return LossWeights(self.w_em, self.w_nll, self.w_bce, self.w_nonmatch, self.w_interp)

    def encoder_config(self, max_positions: int = 512) -> EncoderConfig:
        return EncoderConfig(kind=self.encoder, embed_dim=self.embed_dim, hidden_dim=self.hidden_dim,
                             layers=self.layers or None, heads=self.heads, max_positions=max_positions)

    def manifest(self) -> dict:
        return {k: str(v) for k, v in asdict(self).items()}

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise ConfigError(f"unknown config key: {unknown[0]}")
        missing = [k for k in known if k not in values]
        if missing:
            raise ConfigError(f"missing config key: {missing[0]}")
        parsed = {}
        for key, f in known.items():
            raw = str(values[key]).strip()
            kind = type(getattr(cls, key))
            try:
                parsed[key] = int(raw) if kind is int else float(raw) if kind is float else raw
            except ValueError:
                raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None
        return cls(**parsed)


def parse_config(path) -> TrainConfig:
    """``key = value`` lines; ``#`` starts a comment. Every key is required."""
    values = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from None
    for number, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{number}: expected 'key = value'")
        key = key.strip()
        if key in values:
            raise ConfigError(f"{path}:{number}: duplicate key {key}")
        values[key] = value.strip()
    return TrainConfig.from_mapping(values)


class Adam:
    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float):
        """Bias-corrected update of ``params`` in place."""
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for name, g in grads.items():
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            if lr:
                update = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
                params[name] -= update.astype(params[name].dtype)


@dataclass
class LRSchedule:
    """Decay the rate after ``patience`` validations without a strict improvement."""

    lr: float
    decay: float = 0.7
    patience: int = 2
    max_decays: int = 10
    higher_is_better: bool = True
    best: float | None = None
    bad: int = 0
    decays: int = 0
    decay_points: list = field(default_factory=list)
    validations: int = 0

    def update(self, metric: float) -> bool:
        """Record a validation result; returns True when it is a new best."""
        self.validations += 1
        better = self.best is None or (metric > self.best if self.higher_is_better else metric < self.best)
        if better:
            self.best, self.bad = metric, 0
            return True
        self.bad += 1
        if self.bad >= self.patience:
            self.lr *= self.decay
            self.decays += 1
            self.bad = 0
            self.decay_points.append(self.validations)
        return False

    @property
    def finished(self) -> bool:
        return self.decays >= self.max_decays


# ----------------------------------------------------------------- evaluation


def validate_matching(model, examples, batch_size=256):
    """F1 at the validation-tuned threshold and that (log-space) threshold."""
    scores = log_scores(model, [e[0] for e in examples], [e[1] for e in examples], batch_size)
    labels = np.array([e[2] for e in examples])
    threshold = tune_threshold(scores, labels)
    return binary_f1(scores >= threshold, labels), threshold


def validate_transduction(model, items, max_len=50, batch_size=128):
    """CER of greedy decoding against each item's reference group."""
    hyps = []
    for start in range(0, len(items), batch_size):
        chunk = items[start:start + batch_size]
        hyps += [h.symbols for h in decode_greedy_batch(model, [it[0] for it in chunk], max_len)]
    return corpus_cer(hyps, [it[1] for it in items])


# ------------------------------------------------------------------- training


@dataclass
class TrainResult:
    best_metric: float | None
    best_step: int
    threshold: float | None
    log: list
    steps: int


def batch_loss(model, task, chunk, weights, normalize_interp=False, want_grads=True):
    """Summed loss over ``chunk``: (source, target, label) or (source, target) tuples."""
    if task == "match":
        batch = model.make_batch([c[0] for c in chunk], [c[1] for c in chunk], [c[2] for c in chunk])
        return matching_loss(model, batch, weights, normalize_interp, want_grads)
    batch = model.make_batch([c[0] for c in chunk], [list(c[1]) + [EOS] for c in chunk])
    return transduction_loss(model, batch, weights, normalize_interp, want_grads)


LOG_FIELDS = ("step", "loss", "em", "bce", "nonmatch", "nll", "neg_log_alpha", "interp", "metric", "lr")


def train(model: EditModel, config: TrainConfig, train_data, valid_data, *, max_steps: int = 10000,
          micro_batch: int | None = None, out: str | None = None, log_path: str | None = None,
          manifest_extra: dict | None = None, max_len: int = 50, normalize_interp: bool = False) -> TrainResult:
    """Minibatch Adam on the task loss with validation-driven schedule.

    ``train_data`` holds ``(source, target, label)`` for matching and
    ``(source, target)`` for transduction; ``valid_data`` holds matching
    triples or ``(source, reference_group)`` pairs. The best model by the
    validation metric is written to ``out``; one CSV row per validation goes to
    ``log_path``.
    """
    task = config.task
    rng = np.random.default_rng(config.seed)
    weights = config.weights()
    micro = micro_batch or config.batch_size
    adam = Adam()
    schedule = LRSchedule(config.lr, config.lr_decay, config.patience, config.max_decays,
                          higher_is_better=(task == "match"))
    order = np.zeros(0, dtype=np.int64)
    log_rows, best_step, threshold = [], 0, None
    sums: dict = {}
    handle = writer = None
    if log_path:
        handle = open(log_path, "w", newline="", encoding="utf-8")
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(LOG_FIELDS)
    step = 0
    try:
        while step < max_steps and not schedule.finished:
            if len(order) < config.batch_size:
                order = np.concatenate([order, rng.permutation(len(train_data))])
            index, order = order[:config.batch_size], order[config.batch_size:]
            grads, total, count = None, 0.0, len(index)
            for start in range(0, count, micro):
                chunk = [train_data[k] for k in index[start:start + micro]]
                result = batch_loss(model, task, chunk, weights, normalize_interp)
                if not math.isfinite(result.total):
                    raise NumericalError(f"non-finite loss in batch {step + 1} (examples {index[start:start + micro].tolist()})")
                total += result.total
                for key, value in result.components.items():
                    sums[key] = sums.get(key, 0.0) + value
                if grads is None:
                    grads = result.grads
                else:
                    for key, g in result.grads.items():
                        grads[key] += g
            sums["loss"] = sums.get("loss", 0.0) + total
            sums["_count"] = sums.get("_count", 0) + count
            for key in grads:
                grads[key] /= count
                if not np.all(np.isfinite(grads[key])):
                    raise NumericalError(f"non-finite gradient for {key} in batch {step + 1}")
            adam.step(model.params, grads, schedule.lr)
            step += 1

            if step % config.validate_every == 0 or step == max_steps:
                lr_used = schedule.lr
                if task == "match":
                    metric, thr = validate_matching(model, valid_data)
                else:
                    metric, thr = validate_transduction(model, valid_data, max_len), None
                if not math.isfinite(metric):
                    raise NumericalError(f"validation metric is {metric} at step {step}")
                improved = schedule.update(metric)
                row = {"step": step, "metric": metric, "lr": lr_used}
                n = max(sums.pop("_count", 1), 1)
                row.update({k: sums.get(k, 0.0) / n for k in LOG_FIELDS if k not in row})
                sums = {}
                log_rows.append(row)
                if writer:
                    writer.writerow([_fmt(row[k]) for k in LOG_FIELDS])
                    handle.flush()
                logger.info("step %d metric %.6f lr %.3g", step, metric, lr_used)
                if improved:
                    best_step, threshold = step, thr
                    if out:
                        save_model(out, model, config, manifest_extra, threshold, metric, step)
    finally:
        if handle:
            handle.close()
    return TrainResult(schedule.best, best_step, threshold, log_rows, step)


def _fmt(value):
    return repr(float(value)) if isinstance(value, (float, np.floating)) else str(value)


# ------------------------------------------------------------- model archive


def save_model(path, model: EditModel, config: TrainConfig, extra=None, threshold=None, metric=None, step=None):
    manifest = config.manifest()
    manifest["max_positions"] = str(model.config.max_positions)
    if extra:
        manifest.update({k: str(v) for k, v in extra.items()})
    if threshold is not None:
        manifest["log_threshold"] = repr(float(threshold))
    if metric is not None:
        manifest["valid_metric"] = repr(float(metric))
    if step is not None:
        manifest["step"] = str(step)
    checkpoint.save(path, model.params, manifest)


def load_model(path):
    """Rebuild the model from a checkpoint: ``(model, config, manifest, src_vocab, tgt_vocab)``."""
    params, manifest = checkpoint.load(path)
    keys = {f.name for f in fields(TrainConfig)}
    config = TrainConfig.from_mapping({k: manifest[k] for k in keys if k in manifest} |
                                      {k: getattr(TrainConfig, k) for k in keys if k not in manifest})
    src_vocab = Vocabulary.from_json(manifest["src_vocab"])
    tgt_vocab = Vocabulary.from_json(manifest["tgt_vocab"]) if "tgt_vocab" in manifest else src_vocab
    enc = config.encoder_config(int(manifest.get("max_positions", 512)))
    model = EditModel(config.task, enc, len(src_vocab), len(tgt_vocab), seed=config.seed)
    if set(params) != set(model.params):
        raise ConfigError("checkpoint parameters do not match the model it describes")
    for name, value in params.items():
        if value.shape != model.params[name].shape:
            raise ConfigError(f"parameter {name} has shape {value.shape}, expected {model.params[name].shape}")
    model.params = params
    return model, config, manifest, src_vocab, tgt_vocab

