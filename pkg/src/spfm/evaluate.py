"""Conditional MSE, loss-difference sweeps, mislabel detection and purification audits."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .data import Dataset, polar_to_euclidean
from .errors import InputError, NumericError
from .flow import GateRecords, gate_losses
from .net import ModelParameters, embed_condition
from .rng import Stream, derive_key, normal

SWEEP_TAG = 0x5E3
MISMATCH_TAG = 0x3A7
DEFAULT_TPRIMES = (0.1, 0.3, 0.5, 0.7, 0.9)


def conditional_mse(generated, conditions) -> float:
    generated = np.atleast_2d(np.asarray(generated, dtype=np.float64))
    conditions = np.atleast_2d(np.asarray(conditions, dtype=np.float64))
    if len(generated) != len(conditions):
        raise InputError(f"{len(generated)} generated points but {len(conditions)} conditions")
    if len(generated) == 0:
        raise InputError("nothing to score")
    d = generated - polar_to_euclidean(conditions)
    return float(np.mean(np.sum(d * d, axis=1)))


@dataclass
class LossDiffRecords:
    """One row per (sample, t') pair; ``incorrect`` is the ground-truth label state."""

    sample_index: np.ndarray
    t_prime: np.ndarray
    loss_diff: np.ndarray
    incorrect: np.ndarray

    def __len__(self):
        return len(self.loss_diff)

    def at(self, t_prime: float) -> "LossDiffRecords":
        m = self.t_prime == t_prime
        return LossDiffRecords(self.sample_index[m], self.t_prime[m], self.loss_diff[m], self.incorrect[m])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample_index", "t_prime", "loss_diff", "label_state"])
            for i in range(len(self)):
                w.writerow([int(self.sample_index[i]), repr(float(self.t_prime[i])),
                            repr(float(self.loss_diff[i])), "incorrect" if self.incorrect[i] else "correct"])


def loss_diff_sweep(params: ModelParameters, x1, conditions, incorrect, t_list, noise_seed: int,
                    ids=None, draws: int = 1) -> LossDiffRecords:
    """``L_cond - L_uncond`` for every sample at every ``t'``.

    Sample ``i`` gets its ``x0`` from stream id ``ids[i]`` (default ``i``) and
    reuses it across all ``t'``.  With ``draws > 1`` the difference is averaged
    over that many independent ``x0`` draws.
    """
    x1 = np.atleast_2d(np.asarray(x1, dtype=np.float64))
    conditions = np.atleast_2d(np.asarray(conditions, dtype=np.float64))
    incorrect = np.asarray(incorrect, dtype=bool)
    n = len(x1)
    ids = np.arange(n) if ids is None else np.asarray(ids)
    t_list = [float(t) for t in t_list]
    if not t_list or any(not 0.0 < t < 1.0 for t in t_list):
        raise InputError("t' values must lie strictly inside (0, 1)")
    if draws < 1:
        raise InputError("draws must be >= 1")
    emb = embed_condition(conditions[:, 0], conditions[:, 1])
    noise = [normal(derive_key(noise_seed, SWEEP_TAG, k), ids, 2) for k in range(draws)]
    idx, tp, diff, lab = [], [], [], []
    for t in t_list:
        acc = np.zeros(n)
        for x0 in noise:
            try:
                l_c, l_u = gate_losses(params, x1, emb, x0, t)
            except NumericError as exc:
                raise NumericError(f"t'={t}: {exc}") from exc
            acc += l_c - l_u
        idx.append(np.arange(n))
        tp.append(np.full(n, t))
        diff.append(acc / draws)
        lab.append(incorrect)
    return LossDiffRecords(np.concatenate(idx), np.concatenate(tp), np.concatenate(diff), np.concatenate(lab))


def clean_subset(ds: Dataset, n: int | None, seed: int) -> np.ndarray:
    """Indices of up to ``n`` clean samples, chosen by a seeded shuffle and sorted."""
    clean = np.flatnonzero(~ds.corrupted)
    if n is not None and n < len(clean):
        clean = np.sort(clean[Stream(seed, MISMATCH_TAG, 1).permutation(len(clean))[:n]])
    return clean


def mismatched_pairs(x1, conditions, ids, seed: int):
    """Correct copies of the given samples followed by deliberately mismatched ones.

    Each mismatched copy takes the condition of a uniformly chosen other
    sample.  Both copies keep the sample's stream id, hence share ``x0`` in a
    sweep.  Returns ``(x1, conditions, incorrect, ids)``.
    """
    x1 = np.asarray(x1, dtype=np.float64)
    conditions = np.asarray(conditions, dtype=np.float64)
    ids = np.asarray(ids)
    m = len(x1)
    if m < 2:
        raise InputError("need at least two samples to mismatch labels")
    other = Stream(seed, MISMATCH_TAG).integers(m - 1, m)
    other = other + (other >= np.arange(m))
    return (
        np.concatenate([x1, x1]),
        np.concatenate([conditions, conditions[other]]),
        np.concatenate([np.zeros(m, dtype=bool), np.ones(m, dtype=bool)]),
        np.concatenate([ids, ids]),
    )


def analysis_set(ds: Dataset, n: int | None, seed: int):
    """Clean samples of ``ds`` with their true labels plus mismatched copies."""
    idx = clean_subset(ds, n, seed)
    conds = np.stack([ds.orig_angle[idx], ds.orig_radius[idx]], axis=1)
    return mismatched_pairs(ds.x1[idx], conds, idx, seed)


@dataclass
class DetectionScore:
    t_prime: float
    precision: float
    recall: float
    f1: float
    threshold: float
    # set when there are no predicted or no actual positives; f1 is then 0
    degenerate: bool = False


def _score(pred: np.ndarray, actual: np.ndarray):
    tp = int(np.sum(pred & actual))
    fp = int(np.sum(pred & ~actual))
    fn = int(np.sum(~pred & actual))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1, (tp + fp == 0) or (tp + fn == 0)


def detection_scores(records: LossDiffRecords, threshold: float = 0.0) -> list[DetectionScore]:
    """Predict "incorrect" where ``loss_diff > threshold``; score per ``t'``."""
    if len(records) == 0:
        raise InputError("no records")
    out = []
    for t in sorted(set(records.t_prime.tolist())):
        r = records.at(t)
        p, rc, f1, degenerate = _score(r.loss_diff > threshold, r.incorrect)
        out.append(DetectionScore(t, p, rc, f1, float(threshold), degenerate))
    return out


def write_scores_csv(path, scores: list[DetectionScore]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t_prime", "precision", "recall", "f1", "threshold", "degenerate"])
        for s in scores:
            w.writerow([repr(s.t_prime), repr(s.precision), repr(s.recall), repr(s.f1), repr(s.threshold),
                        int(s.degenerate)])


@dataclass
class PurificationReport:
    retained: int
    filtered: int
    retained_corruption_rate: float
    filtered_corruption_rate: float

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["subset", "count", "corruption_rate"])
            w.writerow(["original", self.retained + self.filtered, repr(
                (self.retained * _nz(self.retained_corruption_rate) + self.filtered * _nz(self.filtered_corruption_rate))
                / max(self.retained + self.filtered, 1))])
            w.writerow(["retained", self.retained, repr(self.retained_corruption_rate)])
            w.writerow(["filtered", self.filtered, repr(self.filtered_corruption_rate)])


def _nz(x):
    return 0.0 if np.isnan(x) else x


def purification_report(dataset: Dataset, gates: GateRecords) -> PurificationReport:
    """Split the dataset by the last gated epoch's decisions.

    Corruption rates of an empty subset are NaN.
    """
    final = gates.final_epoch()
    n = len(dataset)
    if len(final) == 0:
        raise InputError("no gate records")
    seen = np.zeros(n, dtype=bool)
    if np.any((final.sample_index < 0) | (final.sample_index >= n)):
        raise InputError("gate record index outside the dataset")
    seen[final.sample_index] = True
    if not seen.all():
        raise InputError(f"{int((~seen).sum())} samples have no gate record in epoch {int(final.epoch[0])}")
    filtered = np.zeros(n, dtype=bool)
    filtered[final.sample_index] = final.unconditional
    corr = dataset.corrupted
    rate = lambda m: float(corr[m].mean()) if m.any() else float("nan")  # noqa: E731
    return PurificationReport(int((~filtered).sum()), int(filtered.sum()), rate(~filtered), rate(filtered))


@dataclass
class Histogram:
    t_prime: float
    edges: np.ndarray
    counts_correct: np.ndarray
    counts_incorrect: np.ndarray

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t_prime", "bin_lo", "bin_hi", "count_correct", "count_incorrect"])
            for i in range(len(self.counts_correct)):
                w.writerow([repr(self.t_prime), repr(float(self.edges[i])), repr(float(self.edges[i + 1])),
                            int(self.counts_correct[i]), int(self.counts_incorrect[i])])


def export_histogram(records: LossDiffRecords, t_prime: float, bins: int) -> Histogram:
    """Equal-width bins over the observed range at one ``t'``."""
    if bins < 1:
        raise InputError("bins must be >= 1")
    r = records.at(t_prime)
    if len(r) == 0:
        raise InputError(f"no records at t'={t_prime}")
    lo, hi = float(r.loss_diff.min()), float(r.loss_diff.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    cc, _ = np.histogram(r.loss_diff[~r.incorrect], bins=edges)
    ci, _ = np.histogram(r.loss_diff[r.incorrect], bins=edges)
    return Histogram(float(t_prime), edges, cc, ci)
