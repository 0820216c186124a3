"""CRNN assembly: one 3x3 conv layer with batch norm and ReLU feeding either two
independent FC -> BiGRU -> maxout branches (valence, arousal) or a single
shared branch with a two-output maxout head.

Outputs are always ordered (valence, arousal).
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .layers import (BatchNorm, BiGRU, ConfigError, Conv2D, Dropout, GRU,
                     Maxout, ReLU, TimeDistributedDense)
from .numerics import DTYPE, DimensionError, Rng, Tensor, uniform_init

BRANCHES = ("valence", "arousal")
SHARED = "shared"
KERNEL_SIZE = 3


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    feature_dim: int
    cnn_filters: int = 8
    fc_units: int = 8
    gru_units: int = 8
    branched: bool = True
    dropout_rate: float = 0.25
    maxout_pieces: int = 2
    bn_eps: float = 1e-3
    bn_momentum: float = 0.99

    def __post_init__(self):
        for name in ("feature_dim", "cnn_filters", "fc_units", "gru_units"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.maxout_pieces < 2:
            raise ConfigError(f"maxout_pieces must be >= 2, got {self.maxout_pieces}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    @property
    def branch_names(self):
        return BRANCHES if self.branched else (SHARED,)

    @property
    def head_outputs(self):
        return 1 if self.branched else 2

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model spec keys: {sorted(unknown)}")
        return cls(**d)


def count_params(spec: ModelSpec) -> int:
    """Trainable scalars, counted layer by layer (batch-norm running stats excluded)."""
    C, U, H, K = spec.cnn_filters, spec.fc_units, spec.gru_units, spec.maxout_pieces
    conv = KERNEL_SIZE * KERNEL_SIZE * 1 * C + C
    bn = 2 * C
    fc = spec.feature_dim * C * U + U
    gru = 2 * 3 * (U * H + H * H + H)
    maxout = K * (2 * H) * spec.head_outputs + K * spec.head_outputs
    return conv + bn + len(spec.branch_names) * (fc + gru + maxout)


def glorot_limit(shape) -> float:
    # Rank > 2 tensors treat the leading axes as a receptive field.
    receptive = int(np.prod(shape[:-2])) if len(shape) > 2 else 1
    fan_in, fan_out = shape[-2] * receptive, shape[-1] * receptive
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


class CRNN:
    """Parameters plus the forward/backward pipeline for one ModelSpec.

    ``params`` maps qualified names (``"valence/gru/fwd_W"``) to the arrays the
    layers compute with; updating those arrays in place updates the model.
    """

    def __init__(self, spec: ModelSpec, rng: Rng | None = None):
        self.spec = spec
        F, C, U, H = spec.feature_dim, spec.cnn_filters, spec.fc_units, spec.gru_units
        K, O = spec.maxout_pieces, spec.head_outputs
        zeros = np.zeros
        self.conv = Conv2D(zeros((KERNEL_SIZE, KERNEL_SIZE, 1, C)), zeros(C))
        self.bn = BatchNorm(C, eps=spec.bn_eps, momentum=spec.bn_momentum)
        self.relu = ReLU()
        self.cnn_dropout = Dropout(spec.dropout_rate)
        self.branches = {}
        for name in spec.branch_names:
            self.branches[name] = {
                "fc": TimeDistributedDense(zeros((F * C, U)), zeros(U)),
                "dropout": Dropout(spec.dropout_rate),
                "gru": BiGRU(GRU(zeros((U, 3 * H)), zeros((H, 3 * H)), zeros(3 * H)),
                             GRU(zeros((U, 3 * H)), zeros((H, 3 * H)), zeros(3 * H))),
                "maxout": Maxout(zeros((K, 2 * H, O)), zeros((K, O))),
            }
        self._layers = {"conv": self.conv, "bn": self.bn}
        for name, branch in self.branches.items():
            for lname in ("fc", "gru", "maxout"):
                self._layers[f"{name}/{lname}"] = branch[lname]
        self.params = {f"{p}/{k}": v for p, layer in self._layers.items() for k, v in layer.params.items()}
        self.grads = {f"{p}/{k}": v for p, layer in self._layers.items() for k, v in layer.grads.items()}
        self.buffers = {f"bn/{k}": v for k, v in self.bn.buffers.items()}
        self.conv_activations = None
        if rng is not None:
            self.initialize(rng)

    def initialize(self, rng: Rng):
        """Glorot-uniform weights, zero biases, gamma=1 / beta=0, fresh running stats."""
        for name, p in self.params.items():
            leaf = name.rsplit("/", 1)[1]
            if leaf == "gamma":
                p.fill(1.0)
            elif leaf in ("bias", "b", "beta", "fwd_b", "bwd_b"):
                p.fill(0.0)
            else:
                p[...] = uniform_init(rng, p.shape, glorot_limit(p.shape))
        self.buffers["bn/moving_mean"].fill(0.0)
        self.buffers["bn/moving_variance"].fill(1.0)

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    def forward(self, x: Tensor, train: bool = False, rng: Rng | None = None) -> Tensor:
        """(B, L, F) features -> (B, L, 2) predictions ordered (valence, arousal).

        In inference mode the outputs are clamped to [-1, 1]. In train mode the
        pre-BN conv output is kept in ``conv_activations`` for the activity
        penalty and ``rng`` drives dropout.
        """
        x = np.asarray(x, dtype=DTYPE)
        if x.ndim != 3 or x.shape[2] != self.spec.feature_dim:
            raise DimensionError(
                f"expected input of shape (B, L, {self.spec.feature_dim}), got {x.shape}")
        B, L, F = x.shape
        if train and self.spec.dropout_rate > 0 and rng is None:
            raise ConfigError("train-mode forward with dropout needs an rng")
        self.cnn_dropout.rng = rng
        a = self.conv.forward(x[..., None], train)
        self.conv_activations = a if train else None
        a = self.bn.forward(a, train)
        a = self.relu.forward(a, train)
        a = self.cnn_dropout.forward(a, train)
        a = a.reshape(B, L, F * self.spec.cnn_filters)
        outs = []
        for branch in self.branches.values():
            branch["dropout"].rng = rng
            h = branch["fc"].forward(a, train)
            h = branch["dropout"].forward(h, train)
            h = branch["gru"].forward(h, train)
            outs.append(branch["maxout"].forward(h, train))
        y = np.concatenate(outs, axis=-1)
        if not train:
            y = np.clip(y, -1.0, 1.0)
        return y

    def backward(self, grad_out: Tensor, conv_act_grad: Tensor | None = None) -> Tensor:
        """Accumulate parameter gradients from d(loss)/d(output).

        ``conv_act_grad`` is an extra gradient w.r.t. the pre-BN conv output
        (activity regularisation). Returns d(loss)/d(input).
        """
        B, L, _ = grad_out.shape
        da = None
        col = 0
        for branch in self.branches.values():
            O = self.spec.head_outputs
            g = branch["maxout"].backward(grad_out[..., col:col + O])
            col += O
            g = branch["gru"].backward(g)
            g = branch["dropout"].backward(g)
            g = branch["fc"].backward(g)
            da = g if da is None else da + g
        da = da.reshape(B, L, self.spec.feature_dim, self.spec.cnn_filters)
        da = self.cnn_dropout.backward(da)
        da = self.relu.backward(da)
        da = self.bn.backward(da)
        if conv_act_grad is not None:
            da = da + conv_act_grad
        return self.conv.backward(da)[..., 0]

    def state(self) -> dict[str, Tensor]:
        """Trainable parameters followed by running statistics."""
        return {**self.params, **self.buffers}

    def copy(self) -> "CRNN":
        other = CRNN(self.spec)
        other.load_state(self.state())
        return other

    def load_state(self, state: dict[str, Tensor]):
        mine = self.state()
        if set(state) != set(mine):
            missing = sorted(set(mine) - set(state))
            extra = sorted(set(state) - set(mine))
            raise CheckpointError(f"parameter names differ: missing {missing}, unexpected {extra}")
        for name, value in state.items():
            if mine[name].shape != np.shape(value):
                raise CheckpointError(
                    f"shape mismatch for {name}: expected {mine[name].shape}, got {np.shape(value)}")
            np.copyto(mine[name], value)


def build(spec: ModelSpec, rng: Rng) -> CRNN:
    return CRNN(spec, rng)


# --------------------------------------------------------------------------
# Checkpoints
#
# Layout (all integers little-endian):
#   8 bytes   magic b"CRNNMER\0"
#   u32       format version
#   u32       length of the UTF-8 JSON model spec, then the JSON bytes
#   u32       number of tensor records
#   per record:
#     u32 name length, UTF-8 name, u32 rank, rank x u64 dims,
#     prod(dims) x float64 little-endian, row-major

MAGIC = b"CRNNMER\0"
FORMAT_VERSION = 1


def save(model: CRNN, path) -> None:
    spec_bytes = json.dumps(model.spec.to_dict(), sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(spec_bytes)), spec_bytes]
    state = model.state()
    parts.append(struct.pack("<I", len(state)))
    for name, t in state.items():
        nb = name.encode()
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack(f"<I{t.ndim}Q", t.ndim, *t.shape))
        parts.append(np.ascontiguousarray(t, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf):
        self.buf, self.pos = buf, 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"checkpoint truncated at byte {self.pos} (wanted {n} more)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load(path) -> CRNN:
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    r = _Reader(buf)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path} is not a CRNN checkpoint")
    version, spec_len = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        spec = ModelSpec.from_dict(json.loads(r.take(spec_len).decode()))
    except (ValueError, TypeError) as e:
        raise CheckpointError(f"bad model spec in checkpoint: {e}") from e
    (count,) = r.unpack("<I")
    state = {}
    for _ in range(count):
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode()
        (rank,) = r.unpack("<I")
        dims = r.unpack(f"<{rank}Q")
        n = int(np.prod(dims)) if rank else 1
        state[name] = np.frombuffer(r.take(8 * n), dtype="<f8").astype(DTYPE).reshape(dims)
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes in checkpoint")
    model = CRNN(spec)
    model.load_state(state)
    return model
