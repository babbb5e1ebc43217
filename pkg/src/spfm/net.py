"""Velocity-field MLP with hand-written reverse mode and an Adam optimizer.

Input layout (width 22)::

    [ x_t (2) | t, sin(f_k t) k=0..7, cos(f_k t) k=0..7 (17) | condition (3) ]

with frequencies ``f_k = 2**k``.  The condition slot holds either the
embedded polar condition ``(cos angle, sin angle, radius)`` or the learned
null embedding.  Hidden layers use SiLU, the output layer is linear.

Weights are initialised uniformly on ``[-a, a]`` with ``a = sqrt(3 / fan_in)``
(variance ``1 / fan_in``); biases start at zero and the null embedding uses
the same rule with ``fan_in = 3``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .errors import CheckpointError, ConfigError, InputError, NumericError, ShapeError
from .rng import Stream

DATA_DIM = 2
COND_WIDTH = 3
TIME_PAIRS = 8
TIME_WIDTH = 1 + 2 * TIME_PAIRS
INPUT_WIDTH = DATA_DIM + TIME_WIDTH + COND_WIDTH
DEFAULT_HIDDEN = (128, 128, 128)
TIME_FREQS = 2.0 ** np.arange(TIME_PAIRS)
INIT_TAG = 0x1A17

_COND_SLOT = slice(DATA_DIM + TIME_WIDTH, INPUT_WIDTH)


def default_widths(hidden=DEFAULT_HIDDEN) -> list[int]:
    return [INPUT_WIDTH, *hidden, DATA_DIM]


@dataclass
class ModelParameters:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    null_embedding: np.ndarray

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def arrays(self) -> list[np.ndarray]:
        """Canonical order: W0, b0, W1, b1, ..., null_embedding."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        out.append(self.null_embedding)
        return out

    @classmethod
    def from_arrays(cls, arrays: list[np.ndarray]) -> "ModelParameters":
        *layers, null = arrays
        return cls(list(layers[0::2]), list(layers[1::2]), null)

    def copy(self) -> "ModelParameters":
        return ModelParameters.from_arrays([a.copy() for a in self.arrays()])

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def validate(self) -> None:
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeError("weights and biases must be non-empty and equally long")
        prev = self.weights[0].shape[0]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or w.shape[0] != prev or b.shape != (w.shape[1],):
                raise ShapeError(f"layer {i}: weight {w.shape} / bias {b.shape} do not chain from width {prev}")
            prev = w.shape[1]
        if prev != DATA_DIM:
            raise ShapeError(f"output width {prev} != {DATA_DIM}")
        if self.weights[0].shape[0] != INPUT_WIDTH:
            raise ShapeError(f"input width {self.weights[0].shape[0]} != {INPUT_WIDTH}")
        if self.null_embedding.shape != (COND_WIDTH,):
            raise ShapeError(f"null embedding shape {self.null_embedding.shape} != ({COND_WIDTH},)")


def _check_widths(widths) -> list[int]:
    widths = [int(w) for w in widths]
    if len(widths) < 2:
        raise ConfigError("need at least input and output widths", "widths")
    if any(w <= 0 for w in widths):
        raise ConfigError(f"all widths must be positive, got {widths}", "widths")
    if widths[0] != INPUT_WIDTH or widths[-1] != DATA_DIM:
        raise ConfigError(f"widths must run from {INPUT_WIDTH} to {DATA_DIM}, got {widths}", "widths")
    return widths


def init_params(seed: int, widths=None) -> ModelParameters:
    widths = _check_widths(default_widths() if widths is None else widths)
    stream = Stream(seed, INIT_TAG)
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        a = np.sqrt(3.0 / fan_in)
        u = stream.uniform(fan_in * fan_out).reshape(fan_in, fan_out)
        weights.append(a * (2.0 * u - 1.0))
        biases.append(np.zeros(fan_out))
    null = 2.0 * stream.uniform(COND_WIDTH) - 1.0
    return ModelParameters(weights, biases, null)


def zero_params(widths=None) -> ModelParameters:
    widths = _check_widths(default_widths() if widths is None else widths)
    return ModelParameters(
        [np.zeros((i, o)) for i, o in zip(widths[:-1], widths[1:])],
        [np.zeros(o) for o in widths[1:]],
        np.zeros(COND_WIDTH),
    )


def embed_condition(angle, radius) -> np.ndarray:
    """``(cos angle, sin angle, radius)``; vectorises over arrays."""
    angle = np.asarray(angle, dtype=np.float64)
    radius = np.asarray(radius, dtype=np.float64)
    if angle.shape != radius.shape:
        raise InputError(f"angle shape {angle.shape} != radius shape {radius.shape}")
    if not (np.all(np.isfinite(angle)) and np.all(np.isfinite(radius))):
        raise InputError("condition contains non-finite values")
    if np.any(radius < 0):
        raise InputError("condition radius must be >= 0")
    return np.stack([np.cos(angle), np.sin(angle), radius], axis=-1)


def embed_time(t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if not np.all(np.isfinite(t)) or np.any((t < 0) | (t > 1)):
        raise InputError("t must lie in [0, 1]")
    phase = t[..., None] * TIME_FREQS
    return np.concatenate([t[..., None], np.sin(phase), np.cos(phase)], axis=-1)


@dataclass
class NetInput:
    """A batch of network inputs.

    ``cond`` rows are ignored where ``use_null`` is set; those rows read the
    null embedding from the parameters instead.
    """

    x_t: np.ndarray
    t: np.ndarray
    cond: np.ndarray
    use_null: np.ndarray = field(default=None)

    def __post_init__(self):
        self.x_t = np.atleast_2d(np.asarray(self.x_t, dtype=np.float64))
        n = self.x_t.shape[0]
        self.t = np.asarray(self.t, dtype=np.float64).reshape(-1)
        if self.cond is None:
            self.cond = np.zeros((n, COND_WIDTH))
            if self.use_null is None:
                self.use_null = np.ones(n, dtype=bool)
        self.cond = np.atleast_2d(np.asarray(self.cond, dtype=np.float64))
        if self.use_null is None:
            self.use_null = np.zeros(n, dtype=bool)
        self.use_null = np.asarray(self.use_null, dtype=bool).reshape(-1)
        if self.x_t.shape != (n, DATA_DIM):
            raise ShapeError(f"x_t must be (n, {DATA_DIM}), got {self.x_t.shape}")
        if self.t.shape != (n,) or self.cond.shape != (n, COND_WIDTH) or self.use_null.shape != (n,):
            raise ShapeError(
                f"batch fields disagree: x_t {self.x_t.shape}, t {self.t.shape}, "
                f"cond {self.cond.shape}, use_null {self.use_null.shape}"
            )
        if not np.all(np.isfinite(self.t)) or np.any((self.t < 0) | (self.t > 1)):
            raise InputError("t must lie in [0, 1]")

    def __len__(self):
        return self.x_t.shape[0]


def _assemble(params: ModelParameters, inp: NetInput) -> np.ndarray:
    if params.null_embedding.shape != (inp.cond.shape[1],):
        raise ShapeError("condition width does not match null embedding width")
    cond = np.where(inp.use_null[:, None], params.null_embedding[None, :], inp.cond)
    return np.concatenate([inp.x_t, embed_time(inp.t), cond], axis=1)


def _forward_cached(params: ModelParameters, inp: NetInput):
    h = _assemble(params, inp)
    if h.shape[1] != params.weights[0].shape[0]:
        raise ShapeError(f"input width {h.shape[1]} != first layer fan-in {params.weights[0].shape[0]}")
    cache = [h]
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        if w.shape[0] != h.shape[1]:
            raise ShapeError(f"layer {i} fan-in {w.shape[0]} != incoming width {h.shape[1]}")
        z = h @ w + b
        if i == last:
            h = z
        else:
            h, s = _kernels.silu(z)
            cache.append((z, s, h))
    return h, cache


def forward(params: ModelParameters, inp: NetInput) -> np.ndarray:
    """Predicted velocities, shape ``(n, 2)``."""
    return _forward_cached(params, inp)[0]


def per_sample_loss(params: ModelParameters, inp: NetInput, target) -> np.ndarray:
    """Squared Euclidean error per row; no gradient bookkeeping."""
    diff = forward(params, inp) - np.asarray(target, dtype=np.float64).reshape(-1, DATA_DIM)
    return np.einsum("ij,ij->i", diff, diff)


def loss_and_grad(params: ModelParameters, inp: NetInput, target) -> tuple[float, ModelParameters]:
    """Mean squared-norm loss over the batch and its exact gradient."""
    n = len(inp)
    if n == 0:
        raise InputError("empty batch")
    target = np.asarray(target, dtype=np.float64)
    if target.shape != (n, DATA_DIM):
        raise ShapeError(f"target must be ({n}, {DATA_DIM}), got {target.shape}")
    out, cache = _forward_cached(params, inp)
    diff = out - target
    loss = float(np.einsum("ij,ij->", diff, diff) / n)

    n_layers = len(params.weights)
    g_w = [None] * n_layers
    g_b = [None] * n_layers
    delta = (2.0 / n) * diff
    for i in range(n_layers - 1, -1, -1):
        h_in = cache[0] if i == 0 else cache[i][2]
        g_w[i] = h_in.T @ delta
        g_b[i] = delta.sum(axis=0)
        delta = delta @ params.weights[i].T
        if i > 0:
            z, s, _ = cache[i]
            delta = _kernels.silu_grad(delta, z, s)
    g_null = delta[:, _COND_SLOT][inp.use_null].sum(axis=0)
    return loss, ModelParameters(g_w, g_b, g_null)


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParameters) -> "OptimizerState":
        return cls([np.zeros_like(a) for a in params.arrays()], [np.zeros_like(a) for a in params.arrays()], 0)

    def copy(self) -> "OptimizerState":
        return OptimizerState([a.copy() for a in self.m], [a.copy() for a in self.v], self.step)


def optimizer_step(params: ModelParameters, grads: ModelParameters, state: OptimizerState,
                   hyper: AdamConfig | None = None) -> tuple[ModelParameters, OptimizerState]:
    """One bias-corrected Adam update.  Inputs are left untouched."""
    hyper = hyper or AdamConfig()
    p_arrays, g_arrays = params.arrays(), grads.arrays()
    if len(p_arrays) != len(g_arrays) or len(p_arrays) != len(state.m):
        raise ShapeError("parameter, gradient and optimizer state structures differ")
    for i, (p, g, m) in enumerate(zip(p_arrays, g_arrays, state.m)):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"array {i}: param {p.shape}, grad {g.shape}, moment {m.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter array {i}")

    step = state.step + 1
    bc1 = 1.0 - hyper.beta1 ** step
    bc2 = 1.0 - hyper.beta2 ** step
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(p_arrays, g_arrays, state.m, state.v):
        m = hyper.beta1 * m + (1.0 - hyper.beta1) * g
        v = hyper.beta2 * v + (1.0 - hyper.beta2) * (g * g)
        p = p - hyper.lr * (m / bc1) / (np.sqrt(v / bc2) + hyper.eps)
        new_p.append(p)
        new_m.append(m)
        new_v.append(v)
    for i, p in enumerate(new_p):
        if not np.all(np.isfinite(p)):
            raise NumericError(f"parameter array {i} became non-finite after step {step}")
    return ModelParameters.from_arrays(new_p), OptimizerState(new_m, new_v, step)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------
#
# Little-endian layout:
#   8 bytes  magic b"SPFMCKPT"
#   1 byte   format version (CHECKPOINT_VERSION)
#   u32      number of widths L, then L x u32 widths
#   u64      optimizer step counter
#   32 bytes config hash (sha256 digest; zeros when absent)
#   f64[]    parameter arrays in canonical order, then first moments, then
#            second moments, each array row-major

CHECKPOINT_MAGIC = b"SPFMCKPT"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    params: ModelParameters
    opt_state: OptimizerState
    config_hash: str = ""


def _array_shapes(widths):
    shapes = []
    for i, o in zip(widths[:-1], widths[1:]):
        shapes += [(i, o), (o,)]
    shapes.append((COND_WIDTH,))
    return shapes


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    params = ckpt.params
    params.validate()
    widths = params.widths
    digest = bytes.fromhex(ckpt.config_hash) if ckpt.config_hash else bytes(32)
    if len(digest) != 32:
        raise CheckpointError("config hash must be a sha256 hex digest")
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<B", CHECKPOINT_VERSION),
        struct.pack(f"<I{len(widths)}I", len(widths), *widths),
        struct.pack("<Q", ckpt.opt_state.step),
        digest,
    ]
    for a in params.arrays() + ckpt.opt_state.m + ckpt.opt_state.v:
        parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if len(data) < 13:
        raise CheckpointError(f"{path}: truncated header")
    version = data[8]
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint format version {version}, expected {CHECKPOINT_VERSION}")
    off = 9
    (n_w,) = struct.unpack_from("<I", data, off)
    off += 4
    widths = list(struct.unpack_from(f"<{n_w}I", data, off))
    off += 4 * n_w
    (step,) = struct.unpack_from("<Q", data, off)
    off += 8
    digest = data[off:off + 32]
    off += 32
    shapes = _array_shapes(widths)
    expected = off + 8 * 3 * sum(int(np.prod(s)) for s in shapes)
    if len(data) != expected:
        raise CheckpointError(f"{path}: size {len(data)} does not match widths {widths} (expected {expected})")
    groups = []
    for _ in range(3):
        arrays = []
        for s in shapes:
            k = int(np.prod(s))
            arrays.append(np.frombuffer(data, dtype="<f8", count=k, offset=off).astype(np.float64).reshape(s))
            off += 8 * k
        groups.append(arrays)
    params = ModelParameters.from_arrays(groups[0])
    params.validate()
    config_hash = "" if digest == bytes(32) else digest.hex()
    return Checkpoint(params, OptimizerState(groups[1], groups[2], step), config_hash)
