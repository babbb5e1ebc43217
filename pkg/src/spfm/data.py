"""Synthetic 2-D datasets conditioned on polar coordinates, plus label corruption.

Conditions are stored as ``(angle, radius)`` pairs with the angle in
``[0, 2*pi)``.  Generation is a pure function of ``(n, seed, constants)``.
"""
from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import InputError
from .rng import Stream, derive_key, normal, uniform

TWO_PI = 2.0 * np.pi
DATASET_NAMES = ("two_circles", "spiral")
CORRUPTION_MODES = ("swap", "uniform")

_GEN_TAG = 0xDA7A
_CORRUPT_TAG = 0xC0AA
_KIND = {"two_circles": 1, "spiral": 2, "uniform": 3}

TEXT_MAGIC = "# spfm-dataset v1"
BINARY_MAGIC = b"SPFMDATA"
BINARY_VERSION = 1
COLUMNS = ("x1_x", "x1_y", "angle", "radius", "corrupted", "orig_angle", "orig_radius")


@dataclass(frozen=True)
class GeneratorParams:
    r_inner: float = 1.0
    r_outer: float = 2.0
    r_min: float = 0.5
    r_max: float = 2.5
    turns: float = 2.0
    jitter: float = 0.03


class Sample(NamedTuple):
    x1: np.ndarray
    condition: tuple[float, float]
    corrupted: bool
    original_condition: tuple[float, float]


@dataclass(eq=False)
class Dataset:
    name: str
    x1: np.ndarray
    angle: np.ndarray
    radius: np.ndarray
    corrupted: np.ndarray
    orig_angle: np.ndarray
    orig_radius: np.ndarray
    seed: int = 0
    corruption_rate: float = 0.0
    corruption_seed: int = -1
    corruption_mode: str = "swap"
    params: GeneratorParams = field(default_factory=GeneratorParams)

    def __len__(self) -> int:
        return self.x1.shape[0]

    def __getitem__(self, i: int) -> Sample:
        return Sample(
            self.x1[i].copy(),
            (float(self.angle[i]), float(self.radius[i])),
            bool(self.corrupted[i]),
            (float(self.orig_angle[i]), float(self.orig_radius[i])),
        )

    @property
    def conditions(self) -> np.ndarray:
        return np.stack([self.angle, self.radius], axis=1)

    @property
    def n_corrupted(self) -> int:
        return int(self.corrupted.sum())

    def metadata(self) -> dict:
        return {
            "name": self.name,
            "n": len(self),
            "seed": self.seed,
            "corruption_rate": self.corruption_rate,
            "corruption_seed": self.corruption_seed,
            "corruption_mode": self.corruption_mode,
            **asdict(self.params),
        }

    def equals(self, other: "Dataset") -> bool:
        """Bitwise equality of every array plus metadata."""
        if self.metadata() != other.metadata():
            return False
        pairs = [
            (self.x1, other.x1), (self.angle, other.angle), (self.radius, other.radius),
            (self.orig_angle, other.orig_angle), (self.orig_radius, other.orig_radius),
        ]
        same = all(a.shape == b.shape and a.tobytes() == b.tobytes() for a, b in pairs)
        return same and np.array_equal(self.corrupted, other.corrupted)


def polar_to_euclidean(condition) -> np.ndarray:
    """``(angle, radius) -> (r cos angle, r sin angle)``; works on ``(..., 2)`` arrays."""
    c = np.asarray(condition, dtype=np.float64)
    if c.shape[-1] != 2:
        raise InputError(f"condition must have trailing dimension 2, got {c.shape}")
    if np.any(c[..., 1] < 0):
        raise InputError("radius must be >= 0")
    return np.stack([c[..., 1] * np.cos(c[..., 0]), c[..., 1] * np.sin(c[..., 0])], axis=-1)


def _wrap_angle(a: np.ndarray) -> np.ndarray:
    a = np.mod(a, TWO_PI)
    return np.where(a >= TWO_PI, 0.0, a)


def _clean(name, x1, angle, radius, seed, params) -> Dataset:
    return Dataset(name, x1, angle, radius, np.zeros(len(angle), dtype=bool),
                   angle.copy(), radius.copy(), seed=seed, params=params)


def generator_draws(kind: str, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Uniforms ``(n, 2)`` and jitter normals ``(n, 2)`` used by a generator."""
    ids = np.arange(n)
    u = uniform(derive_key(seed, _GEN_TAG, _KIND[kind], 0), ids, 2)
    z = normal(derive_key(seed, _GEN_TAG, _KIND[kind], 1), ids, 2)
    return u, z


def _check_n(n):
    if int(n) != n or n < 1:
        raise InputError(f"dataset size must be a positive integer, got {n}")
    return int(n)


def gen_two_circles(n: int, seed: int, params: GeneratorParams | None = None) -> Dataset:
    params = params or GeneratorParams()
    n = _check_n(n)
    u, z = generator_draws("two_circles", n, seed)
    radius = np.where(u[:, 0] < 0.5, params.r_inner, params.r_outer)
    angle = TWO_PI * u[:, 1]
    x1 = polar_to_euclidean(np.stack([angle, radius], axis=1)) + params.jitter * z
    return _clean("two_circles", x1, angle, radius, seed, params)


def gen_spiral(n: int, seed: int, params: GeneratorParams | None = None) -> Dataset:
    params = params or GeneratorParams()
    n = _check_n(n)
    u, z = generator_draws("spiral", n, seed)
    arc = u[:, 0]
    radius = params.r_min + (params.r_max - params.r_min) * arc
    angle = _wrap_angle(params.turns * TWO_PI * arc)
    x1 = polar_to_euclidean(np.stack([angle, radius], axis=1)) + params.jitter * z
    return _clean("spiral", x1, angle, radius, seed, params)


GENERATORS = {"two_circles": gen_two_circles, "spiral": gen_spiral}


def generate(name: str, n: int, seed: int, params: GeneratorParams | None = None) -> Dataset:
    if name not in GENERATORS:
        raise InputError(f"unknown dataset {name!r}; expected one of {DATASET_NAMES}")
    return GENERATORS[name](n, seed, params)


def corrupt_labels(dataset: Dataset, rate: float, seed: int, mode: str = "swap") -> Dataset:
    """Reassign the condition of exactly ``floor(rate * n + 0.5)`` samples.

    ``swap`` copies the condition of a uniformly chosen *other* sample;
    ``uniform`` draws a fresh angle on ``[0, 2*pi)`` and radius uniform over
    the dataset's observed radius range.
    """
    if not (0.0 <= rate <= 1.0):
        raise InputError(f"corruption rate must lie in [0, 1], got {rate}")
    if mode not in CORRUPTION_MODES:
        raise InputError(f"unknown corruption mode {mode!r}")
    n = len(dataset)
    k = int(math.floor(rate * n + 0.5))
    angle = dataset.angle.copy()
    radius = dataset.radius.copy()
    corrupted = dataset.corrupted.copy()
    if k:
        stream = Stream(seed, _CORRUPT_TAG)
        chosen = stream.permutation(n)[:k]
        if mode == "swap":
            if n < 2:
                raise InputError("swap corruption needs at least two samples")
            src = stream.integers(n - 1, k)
            src = src + (src >= chosen)
            angle[chosen] = dataset.angle[src]
            radius[chosen] = dataset.radius[src]
        else:
            lo, hi = float(dataset.radius.min()), float(dataset.radius.max())
            angle[chosen] = TWO_PI * stream.uniform(k)
            radius[chosen] = lo + (hi - lo) * stream.uniform(k)
        corrupted[chosen] = True
    return replace(
        dataset,
        x1=dataset.x1.copy(),
        angle=angle,
        radius=radius,
        corrupted=corrupted,
        orig_angle=dataset.orig_angle.copy(),
        orig_radius=dataset.orig_radius.copy(),
        corruption_rate=float(corrupted.sum()) / n,
        corruption_seed=int(seed),
        corruption_mode=mode,
    )


# ---------------------------------------------------------------------------
# Serialisation
# ---------------------------------------------------------------------------

def _header_from_meta(meta: dict) -> dict:
    known = {f for f in GeneratorParams.__dataclass_fields__}
    return {
        "name": str(meta["name"]),
        "seed": int(meta["seed"]),
        "corruption_rate": float(meta["corruption_rate"]),
        "corruption_seed": int(meta["corruption_seed"]),
        "corruption_mode": str(meta["corruption_mode"]),
        "params": GeneratorParams(**{k: float(meta[k]) for k in known}),
    }


def _from_columns(meta: dict, cols: dict) -> Dataset:
    h = _header_from_meta(meta)
    x1 = np.stack([cols["x1_x"], cols["x1_y"]], axis=1)
    ds = Dataset(h["name"], x1, cols["angle"], cols["radius"], cols["corrupted"].astype(bool),
                 cols["orig_angle"], cols["orig_radius"], seed=h["seed"],
                 corruption_rate=h["corruption_rate"], corruption_seed=h["corruption_seed"],
                 corruption_mode=h["corruption_mode"], params=h["params"])
    if "n" in meta and int(meta["n"]) != len(ds):
        raise InputError(f"header declares n={meta['n']} but file holds {len(ds)} records")
    return ds


def save_text(path, ds: Dataset) -> None:
    meta = ds.metadata()
    header = TEXT_MAGIC + " " + " ".join(f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}" for k, v in meta.items())
    lines = [header]
    for i in range(len(ds)):
        lines.append(",".join([
            repr(float(ds.x1[i, 0])), repr(float(ds.x1[i, 1])),
            repr(float(ds.angle[i])), repr(float(ds.radius[i])),
            "1" if ds.corrupted[i] else "0",
            repr(float(ds.orig_angle[i])), repr(float(ds.orig_radius[i])),
        ]))
    Path(path).write_text("\n".join(lines) + "\n")


def load_text(path) -> Dataset:
    with open(path) as fh:
        header = fh.readline().rstrip("\n")
        if not header.startswith(TEXT_MAGIC):
            raise InputError(f"{path}: missing dataset header")
        meta = dict(tok.split("=", 1) for tok in header[len(TEXT_MAGIC):].split())
        rows = [line.split(",") for line in fh if line.strip()]
    if any(len(r) != len(COLUMNS) for r in rows):
        raise InputError(f"{path}: every record needs {len(COLUMNS)} fields")
    arr = np.array([[float(v) for v in r] for r in rows], dtype=np.float64).reshape(-1, len(COLUMNS))
    return _from_columns(meta, {c: arr[:, i] for i, c in enumerate(COLUMNS)})


def save_binary(path, ds: Dataset) -> None:
    """``SPFMDATA`` | u8 version | u32 header length | JSON header | u64 n | arrays (LE)."""
    header = json.dumps(ds.metadata(), sort_keys=True).encode()
    parts = [BINARY_MAGIC, struct.pack("<BI", BINARY_VERSION, len(header)), header, struct.pack("<Q", len(ds))]
    for a in (ds.x1, ds.angle, ds.radius, ds.orig_angle, ds.orig_radius):
        parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    parts.append(ds.corrupted.astype(np.uint8).tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_binary(path) -> Dataset:
    data = Path(path).read_bytes()
    if data[:8] != BINARY_MAGIC:
        raise InputError(f"{path}: not a binary dataset")
    version, hlen = struct.unpack_from("<BI", data, 8)
    if version != BINARY_VERSION:
        raise InputError(f"{path}: dataset format version {version} unsupported")
    off = 13
    meta = json.loads(data[off:off + hlen])
    off += hlen
    (n,) = struct.unpack_from("<Q", data, off)
    off += 8
    if len(data) != off + n * (6 * 8 + 1):
        raise InputError(f"{path}: truncated or oversized payload")

    def take(count):
        nonlocal off
        a = np.frombuffer(data, dtype="<f8", count=count, offset=off).astype(np.float64)
        off += 8 * count
        return a

    x1 = take(2 * n).reshape(n, 2)
    cols = {"x1_x": x1[:, 0].copy(), "x1_y": x1[:, 1].copy()}
    for c in ("angle", "radius", "orig_angle", "orig_radius"):
        cols[c] = take(n)
    cols["corrupted"] = np.frombuffer(data, dtype=np.uint8, count=n, offset=off).astype(bool)
    return _from_columns(meta, cols)


def save_dataset(path, ds: Dataset) -> None:
    (save_binary if str(path).endswith(".bin") else save_text)(path, ds)


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        head = fh.read(8)
    return load_binary(path) if head == BINARY_MAGIC else load_text(path)


def import_csv(path, name: str = "external", seed: int = 0) -> Dataset:
    """Read a headed CSV with the dataset columns.

    ``corrupted``, ``orig_angle`` and ``orig_radius`` are optional; missing
    originals default to the given condition.
    """
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"x1_x", "x1_y", "angle", "radius"} - set(reader.fieldnames or ())
        if missing:
            raise InputError(f"{path}: missing columns {sorted(missing)}")
        rows = list(reader)
    if not rows:
        raise InputError(f"{path}: no records")
    col = lambda k: np.array([float(r[k]) for r in rows])  # noqa: E731
    angle, radius = col("angle"), col("radius")
    if np.any(radius < 0) or not np.all(np.isfinite(angle)):
        raise InputError(f"{path}: invalid condition values")
    corrupted = np.array([r.get("corrupted", "0").strip() in ("1", "true", "True") for r in rows])
    orig_angle = col("orig_angle") if "orig_angle" in rows[0] else angle.copy()
    orig_radius = col("orig_radius") if "orig_radius" in rows[0] else radius.copy()
    return Dataset(name, np.stack([col("x1_x"), col("x1_y")], axis=1), _wrap_angle(angle), radius,
                   corrupted, orig_angle, orig_radius, seed=seed,
                   corruption_rate=float(corrupted.mean()))
