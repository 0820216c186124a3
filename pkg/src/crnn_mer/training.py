"""Loss, ElasticNet penalty, Adam and the BPTT training loop with early stopping."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .dataset import batches, slice_sequences, split_by_hash
from .layers import ConfigError
from .model import CRNN
from .numerics import Rng, Tensor

log = logging.getLogger(__name__)

SHUFFLE_STREAM = 1
DROPOUT_STREAM = 2


class NumericalError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 32
    seq_len: int = 60
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    l1: float = 0.1
    l2: float = 0.001
    dropout: float = 0.25
    max_epochs: int = 1000
    patience: int = 50
    seed: int = 0
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.batch_size < 1 or self.seq_len < 1:
            raise ConfigError("batch_size and seq_len must be >= 1")
        if self.learning_rate < 0 or self.l1 < 0 or self.l2 < 0:
            raise ConfigError("learning_rate, l1 and l2 must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.adam_eps <= 0:
            raise ConfigError("adam betas must be in [0, 1) and adam_eps positive")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("max_epochs and patience must be >= 1")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must be in [0, 1)")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def field_types(cls):
        return {f.name: f.type for f in fields(cls)}


def rmse_loss(pred: Tensor, target: Tensor, mask: Tensor | None = None):
    """Half the sum of the per-channel RMSEs over unmasked positions.

    Returns ``(loss, d loss / d pred)``. A channel whose error is exactly zero
    contributes a zero gradient.
    """
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {target.shape}")
    if mask is None:
        mask = np.ones(pred.shape[:-1])
    n = mask.sum()
    if n <= 0:
        raise ValueError("rmse_loss: every position is masked")
    err = (pred - target) * mask[..., None]
    per_channel = np.sqrt((err ** 2).reshape(-1, pred.shape[-1]).sum(axis=0) / n)
    C = pred.shape[-1]
    safe = np.where(per_channel > 0, per_channel, 1.0)
    grad = np.where(per_channel > 0, err / (C * n * safe), 0.0)
    return float(per_channel.mean()), grad


def elasticnet_penalty(kernel: Tensor, activations: Tensor | None, l1: float, l2: float,
                       batch_size: int | None = None):
    """L1 + L2 penalty on the conv kernel and on the conv output activations.

    The activation term is divided by the batch size (leading axis of
    ``activations`` unless given). The subgradient of |w| at 0 is taken as 0.
    Returns ``(penalty, d/d kernel, d/d activations)``.
    """
    penalty = l1 * np.abs(kernel).sum() + l2 * (kernel ** 2).sum()
    dk = l1 * np.sign(kernel) + 2 * l2 * kernel
    da = None
    if activations is not None:
        B = batch_size or activations.shape[0]
        penalty += (l1 * np.abs(activations).sum() + l2 * (activations ** 2).sum()) / B
        da = (l1 * np.sign(activations) + 2 * l2 * activations) / B
    return float(penalty), dk, da


class Adam:
    """Adam with bias correction; moments are kept per parameter name."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, Tensor] = {}
        self.v: dict[str, Tensor] = {}
        self.t = 0

    def step(self, params: dict, grads: dict) -> dict:
        """Update ``params`` in place and return it."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for name, p in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return params


def adam_step(params, grads, opt: Adam, cfg: TrainConfig | None = None):
    if cfg is not None:
        opt.lr, opt.beta1, opt.beta2, opt.eps = cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps
    return opt.step(params, grads)


def objective(model: CRNN, batch, cfg: TrainConfig, rng: Rng | None = None, backward=True):
    """Forward in train mode, loss + penalty, and (optionally) the full backward pass.

    Returns ``(total, rmse_part)``; gradients are left in ``model.grads``.
    """
    pred = model.forward(batch.inputs, train=True, rng=rng)
    loss, dpred = rmse_loss(pred, batch.targets, batch.mask)
    pen, dk, da = elasticnet_penalty(model.params["conv/kernel"], model.conv_activations,
                                     cfg.l1, cfg.l2, batch_size=batch.inputs.shape[0])
    if backward:
        model.zero_grad()
        model.backward(dpred, conv_act_grad=da)
        model.grads["conv/kernel"] += dk
    return loss + pen, loss


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_rmse_valence: float
    val_rmse_arousal: float

    @property
    def val_average(self):
        return 0.5 * (self.val_rmse_valence + self.val_rmse_arousal)


@dataclass
class RunReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0
    seed: int = 0

    @property
    def best(self) -> EpochRecord:
        return self.epochs[self.best_epoch - 1]

    def write_csv(self, path, header_comment: str | None = None):
        with open(path, "w", newline="") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_rmse_valence", "val_rmse_arousal"])
            for r in self.epochs:
                w.writerow([r.epoch, repr(r.train_loss), repr(r.val_rmse_valence), repr(r.val_rmse_arousal)])


def train(model: CRNN, pairs, cfg: TrainConfig, val_pairs=None) -> tuple[CRNN, RunReport]:
    """Train ``model`` in place and return it restored to its best epoch.

    Without explicit ``val_pairs`` a deterministic ``cfg.val_fraction`` of the
    songs is held out. If no validation songs remain the training songs are
    used for model selection.
    """
    from .evaluation import evaluate_songs

    pairs = list(pairs)
    if not pairs:
        raise ValueError("training set is empty")
    if val_pairs is None:
        pairs, val_pairs = split_by_hash(pairs, cfg.val_fraction)
    if not val_pairs:
        val_pairs = pairs
    _set_dropout(model, cfg.dropout)
    windows = slice_sequences(pairs, cfg.seq_len)
    if not windows:
        raise ValueError(f"no song is at least seq_len={cfg.seq_len} segments long")
    root = Rng(cfg.seed)
    shuffle_rng, dropout_rng = root.spawn(SHUFFLE_STREAM), root.spawn(DROPOUT_STREAM)
    opt = Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    report = RunReport(seed=cfg.seed)
    best_score, best_state, since_best = math.inf, None, 0
    for epoch in range(1, cfg.max_epochs + 1):
        total, n_batches = 0.0, 0
        for batch in batches(windows, cfg.batch_size, shuffle_rng, shuffle=True):
            loss, _ = objective(model, batch, cfg, dropout_rng)
            if not math.isfinite(loss):
                raise NumericalError(f"non-finite loss {loss} at epoch {epoch}, batch {n_batches + 1}")
            adam_step(model.params, model.grads, opt)
            total += loss
            n_batches += 1
        res = evaluate_songs(model, val_pairs, cfg.seq_len)
        rec = EpochRecord(epoch, total / n_batches, res.rmse_valence, res.rmse_arousal)
        report.epochs.append(rec)
        log.debug("epoch %d train %.5f val %.5f", epoch, rec.train_loss, rec.val_average)
        if rec.val_average < best_score:
            best_score, best_state, since_best = rec.val_average, _snapshot(model), 0
            report.best_epoch = epoch
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break
    report.stopped_epoch = epoch
    model.load_state(best_state)
    return model, report


def _snapshot(model):
    return {k: v.copy() for k, v in model.state().items()}


def _set_dropout(model: CRNN, rate: float):
    model.spec = replace(model.spec, dropout_rate=rate)
    model.cnn_dropout.rate = rate
    for branch in model.branches.values():
        branch["dropout"].rate = rate


def train_rmse(model: CRNN, pairs, seq_len: int) -> float:
    from .evaluation import evaluate_songs
    return evaluate_songs(model, pairs, seq_len).rmse_average

