"""Flow-matching objective, condition dropout, the self-purifying gate and training loop.

Randomness is counter-based: every per-sample draw is keyed by
``(train seed, epoch, purpose, sample index)``, so a sample's noise, time,
dropout coin and gate outcome do not depend on batch composition or order.
"""
from __future__ import annotations

import csv
import enum
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Dataset
from .errors import ConfigError, InputError, NumericError, TrainingAborted
from .net import (
    AdamConfig,
    ModelParameters,
    NetInput,
    OptimizerState,
    default_widths,
    embed_condition,
    init_params,
    loss_and_grad,
    optimizer_step,
    per_sample_loss,
)
from .rng import Stream, derive_key, normal, uniform

TRAIN_TAG = 0x7A1
SHUFFLE_TAG = 0x5F1
SLOT_GATE_X0, SLOT_TRAIN_X0, SLOT_TRAIN_T, SLOT_DROPOUT = range(4)
GATE_REUSE_MODES = ("separate", "reuse")


class Decision(str, enum.Enum):
    CONDITIONAL = "conditional"
    UNCONDITIONAL = "unconditional"


@dataclass
class TrainingConfig:
    epochs: int = 100
    warmup_epochs: int = 4
    batch_size: int = 128
    cfg_dropout_rate: float = 0.1
    gate_time: float = 0.5
    spfm_enabled: bool = True
    # "separate": gate at gate_time without gradients, train at t ~ U(0, 1).
    # "reuse": gated samples are trained at gate_time with the gate's x0.
    gate_reuse_mode: str = "separate"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    hidden: tuple[int, ...] = (128, 128, 128)

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.validate()

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigError("must be >= 0", "epochs")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ConfigError("must satisfy 0 <= warmup_epochs <= epochs", "warmup_epochs")
        if self.batch_size < 1:
            raise ConfigError("must be >= 1", "batch_size")
        if not 0.0 <= self.cfg_dropout_rate <= 1.0:
            raise ConfigError("must lie in [0, 1]", "cfg_dropout_rate")
        if not 0.0 < self.gate_time < 1.0:
            raise ConfigError("must lie strictly inside (0, 1)", "gate_time")
        if self.gate_reuse_mode not in GATE_REUSE_MODES:
            raise ConfigError(f"must be one of {GATE_REUSE_MODES}", "gate_reuse_mode")
        if self.seed < 0:
            raise ConfigError("must be >= 0", "seed")
        if not self.hidden or any(h <= 0 for h in self.hidden):
            raise ConfigError("hidden widths must be positive", "hidden")

    @property
    def adam(self) -> AdamConfig:
        return AdamConfig(self.lr, self.beta1, self.beta2, self.eps)

    @property
    def widths(self) -> list[int]:
        return default_widths(self.hidden)

    def gate_active(self, epoch: int) -> bool:
        """``epoch`` is 1-based; the gate opens once warm-up epochs are done."""
        return self.spfm_enabled and epoch > self.warmup_epochs


@dataclass(frozen=True)
class GateRecord:
    sample_index: int
    l_cond: float
    l_uncond: float
    decision: Decision
    t_prime: float
    epoch: int


@dataclass
class GateRecords:
    """Column-oriented collection of gate decisions."""

    sample_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    epoch: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    l_cond: np.ndarray = field(default_factory=lambda: np.zeros(0))
    l_uncond: np.ndarray = field(default_factory=lambda: np.zeros(0))
    unconditional: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    t_prime: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self):
        return len(self.sample_index)

    def __iter__(self):
        for i in range(len(self)):
            yield GateRecord(
                int(self.sample_index[i]), float(self.l_cond[i]), float(self.l_uncond[i]),
                Decision.UNCONDITIONAL if self.unconditional[i] else Decision.CONDITIONAL,
                float(self.t_prime[i]), int(self.epoch[i]),
            )

    @classmethod
    def concat(cls, parts) -> "GateRecords":
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls()
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in cls.__dataclass_fields__))

    def select(self, mask) -> "GateRecords":
        return GateRecords(*(getattr(self, f)[mask] for f in self.__dataclass_fields__))

    def final_epoch(self) -> "GateRecords":
        if not len(self):
            return self
        return self.select(self.epoch == self.epoch.max())

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample_index", "epoch", "l_cond", "l_uncond", "decision"])
            for i in range(len(self)):
                w.writerow([
                    int(self.sample_index[i]), int(self.epoch[i]), repr(float(self.l_cond[i])),
                    repr(float(self.l_uncond[i])),
                    Decision.UNCONDITIONAL.value if self.unconditional[i] else Decision.CONDITIONAL.value,
                ])


def read_gate_csv(path, t_prime: float = float("nan")) -> GateRecords:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return GateRecords(
        np.array([int(r["sample_index"]) for r in rows], dtype=np.int64),
        np.array([int(r["epoch"]) for r in rows], dtype=np.int64),
        np.array([float(r["l_cond"]) for r in rows]),
        np.array([float(r["l_uncond"]) for r in rows]),
        np.array([r["decision"] == Decision.UNCONDITIONAL.value for r in rows], dtype=bool),
        np.full(len(rows), t_prime),
    )


def interpolate(x0, x1, t):
    """``(1 - t) x0 + t x1``; ``t`` may be a scalar or one value per row."""
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if not np.all(np.isfinite(t)) or np.any((t < 0) | (t > 1)):
        raise InputError("t must lie in [0, 1]")
    if t.ndim == 1 and x0.ndim == 2:
        t = t[:, None]
    return (1.0 - t) * x0 + t * x1


def fm_target(x0, x1):
    return np.asarray(x1, dtype=np.float64) - np.asarray(x0, dtype=np.float64)


def gate_losses(params: ModelParameters, x1, cond_emb, x0, t_prime) -> tuple[np.ndarray, np.ndarray]:
    """Conditional and unconditional losses at the same ``x_{t'}``, batched, no gradients."""
    x1 = np.atleast_2d(np.asarray(x1, dtype=np.float64))
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    cond_emb = np.atleast_2d(cond_emb)
    n = x1.shape[0]
    t = np.broadcast_to(np.asarray(t_prime, dtype=np.float64), (n,)).copy()
    x_t = interpolate(x0, x1, t)
    target = fm_target(x0, x1)
    # one stacked pass: rows [0, n) conditional, rows [n, 2n) null-conditioned
    both = NetInput(np.concatenate([x_t, x_t]), np.concatenate([t, t]),
                    np.concatenate([cond_emb, cond_emb]),
                    np.concatenate([np.zeros(n, dtype=bool), np.ones(n, dtype=bool)]))
    losses = per_sample_loss(params, both, np.concatenate([target, target]))
    l_cond, l_uncond = losses[:n], losses[n:]
    bad = ~(np.isfinite(l_cond) & np.isfinite(l_uncond))
    if np.any(bad):
        raise NumericError(f"non-finite gate loss at batch row {int(np.argmax(bad))}")
    return l_cond, l_uncond


def spfm_gate(params: ModelParameters, x1, c, x0, t_prime: float,
              sample_index: int = 0, epoch: int = 0) -> GateRecord:
    """Single-sample gate.  Ties resolve to conditional training."""
    emb = embed_condition(c[0], c[1])
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            l_c, l_u = gate_losses(params, x1, emb, x0, t_prime)
    except NumericError as exc:
        raise NumericError(f"sample {sample_index}: {exc}") from exc
    l_c, l_u = float(l_c[0]), float(l_u[0])
    decision = Decision.UNCONDITIONAL if l_c > l_u else Decision.CONDITIONAL
    return GateRecord(sample_index, l_c, l_u, decision, float(t_prime), epoch)


def cfg_dropout(rng: Stream, rate: float, size: int | None = None):
    """Drop the condition with probability ``rate``; one coin per sample."""
    if not 0.0 <= rate <= 1.0:
        raise InputError("dropout rate must lie in [0, 1]")
    u = rng.uniform(1 if size is None else size)
    drop = u < rate
    return bool(drop[0]) if size is None else drop


@dataclass
class TrainBatch:
    indices: np.ndarray
    x1: np.ndarray
    conditions: np.ndarray

    @classmethod
    def from_dataset(cls, ds: Dataset, idx) -> "TrainBatch":
        idx = np.asarray(idx, dtype=np.int64)
        return cls(idx, ds.x1[idx], np.stack([ds.angle[idx], ds.radius[idx]], axis=1))

    def __len__(self):
        return len(self.indices)


@dataclass
class StepMetrics:
    loss: float
    n: int
    n_conditional: int
    n_gated: int
    n_dropped: int


@dataclass
class SampleDraws:
    gate_x0: np.ndarray
    train_x0: np.ndarray
    train_t: np.ndarray
    dropout_u: np.ndarray


def sample_draws(seed: int, epoch: int, indices) -> SampleDraws:
    def key(slot):
        return derive_key(seed, TRAIN_TAG, epoch, slot)

    return SampleDraws(
        normal(key(SLOT_GATE_X0), indices, 2),
        normal(key(SLOT_TRAIN_X0), indices, 2),
        uniform(key(SLOT_TRAIN_T), indices, 1)[:, 0],
        uniform(key(SLOT_DROPOUT), indices, 1)[:, 0],
    )


def run_gate(params, batch: TrainBatch, config: TrainingConfig, epoch: int,
             draws: SampleDraws | None = None) -> GateRecords:
    draws = draws or sample_draws(config.seed, epoch, batch.indices)
    emb = embed_condition(batch.conditions[:, 0], batch.conditions[:, 1])
    try:
        l_c, l_u = gate_losses(params, batch.x1, emb, draws.gate_x0, config.gate_time)
    except NumericError as exc:
        raise NumericError(f"gate failed in epoch {epoch}: {exc}") from exc
    n = len(batch)
    return GateRecords(batch.indices.copy(), np.full(n, epoch, dtype=np.int64), l_c, l_u,
                       l_c > l_u, np.full(n, config.gate_time))


def apply_update(params, opt_state, batch: TrainBatch, config: TrainingConfig, epoch: int,
                 unconditional=None, draws: SampleDraws | None = None):
    """Gradient step given per-sample gate outcomes (``None`` means no gate ran)."""
    if len(batch) == 0:
        raise InputError("empty batch")
    draws = draws or sample_draws(config.seed, epoch, batch.indices)
    gated = unconditional is not None
    flagged = np.zeros(len(batch), dtype=bool) if not gated else np.asarray(unconditional, dtype=bool)
    dropped = ~flagged & (draws.dropout_u < config.cfg_dropout_rate)
    use_null = flagged | dropped

    if gated and config.gate_reuse_mode == "reuse":
        x0 = draws.gate_x0
        t = np.full(len(batch), config.gate_time)
    else:
        x0 = draws.train_x0
        t = draws.train_t
    emb = embed_condition(batch.conditions[:, 0], batch.conditions[:, 1])
    inp = NetInput(interpolate(x0, batch.x1, t), t, emb, use_null)
    loss, grads = loss_and_grad(params, inp, fm_target(x0, batch.x1))
    if not np.isfinite(loss):
        raise NumericError(f"non-finite training loss in epoch {epoch}")
    params, opt_state = optimizer_step(params, grads, opt_state, config.adam)
    metrics = StepMetrics(loss, len(batch), int((~use_null).sum()), int(flagged.sum()), int(dropped.sum()))
    return params, opt_state, metrics


def train_step(params, opt_state, batch: TrainBatch, config: TrainingConfig, epoch: int):
    """One optimisation step: gate (when active), then the flow-matching update.

    Returns ``(params, opt_state, StepMetrics, GateRecords)``.
    """
    draws = sample_draws(config.seed, epoch, batch.indices)
    records = GateRecords()
    unconditional = None
    # overflow is caught by the explicit finiteness checks, which name the sample
    with np.errstate(over="ignore", invalid="ignore"):
        if config.gate_active(epoch):
            records = run_gate(params, batch, config, epoch, draws)
            unconditional = records.unconditional
        params, opt_state, metrics = apply_update(params, opt_state, batch, config, epoch, unconditional, draws)
    return params, opt_state, metrics, records


@dataclass
class EpochMetrics:
    epoch: int
    mean_loss: float
    gated_fraction: float
    dropped_fraction: float
    wall_ms: float


METRIC_COLUMNS = ("epoch", "mean_loss", "gated_fraction", "dropped_fraction", "wall_ms")


def write_metrics_csv(path, metrics: list[EpochMetrics], timing: bool = False) -> None:
    """Per-epoch CSV.  ``wall_ms`` is written as 0 unless ``timing`` is set, keeping
    the file byte-reproducible by default."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for m in metrics:
            w.writerow([m.epoch, repr(m.mean_loss), repr(m.gated_fraction), repr(m.dropped_fraction),
                        f"{m.wall_ms:.3f}" if timing else "0"])


@dataclass
class RunResult:
    params: ModelParameters
    opt_state: OptimizerState
    metrics: list[EpochMetrics]
    gates: GateRecords


def train_run(dataset: Dataset, config: TrainingConfig, *, keep_gates: str = "final",
              params: ModelParameters | None = None, progress=None) -> RunResult:
    """Full training run.

    ``keep_gates`` is ``"all"``, ``"final"`` (last gated epoch only) or ``"none"``.
    ``progress`` is an optional callable receiving each ``EpochMetrics``.
    """
    if len(dataset) == 0:
        raise InputError("dataset is empty")
    if keep_gates not in ("all", "final", "none"):
        raise InputError(f"keep_gates must be all/final/none, got {keep_gates!r}")
    config.validate()
    params = init_params(config.seed, config.widths) if params is None else params
    opt_state = OptimizerState.zeros_like(params)
    n = len(dataset)
    metrics: list[EpochMetrics] = []
    kept: list[GateRecords] = []

    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        order = Stream(config.seed, SHUFFLE_TAG, epoch).permutation(n)
        loss_sum = 0.0
        n_gated = n_dropped = 0
        epoch_gates = []
        for b, lo in enumerate(range(0, n, config.batch_size)):
            batch = TrainBatch.from_dataset(dataset, order[lo:lo + config.batch_size])
            try:
                params, opt_state, sm, rec = train_step(params, opt_state, batch, config, epoch)
            except NumericError as exc:
                raise TrainingAborted(str(exc), epoch=epoch, batch=b, params=params,
                                      opt_state=opt_state, metrics=metrics) from exc
            loss_sum += sm.loss * sm.n
            n_gated += sm.n_gated
            n_dropped += sm.n_dropped
            if keep_gates != "none" and len(rec):
                epoch_gates.append(rec)
        em = EpochMetrics(epoch, loss_sum / n, n_gated / n, n_dropped / n,
                          1000.0 * (time.perf_counter() - start))
        metrics.append(em)
        if epoch_gates:
            merged = GateRecords.concat(epoch_gates)
            merged = merged.select(np.argsort(merged.sample_index, kind="stable"))
            if keep_gates == "all":
                kept.append(merged)
            else:
                kept = [merged]
        if progress is not None:
            progress(em)
    return RunResult(params, opt_state, metrics, GateRecords.concat(kept))


def config_dict(config: TrainingConfig) -> dict:
    d = asdict(config)
    d["hidden"] = list(config.hidden)
    return d
