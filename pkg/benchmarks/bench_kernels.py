"""Compare the numba and pure-numpy kernel paths.

Run:  python benchmarks/bench_kernels.py [--epochs N]

Micro-benchmarks call both implementations in-process; the end-to-end
training benchmark runs each path in a subprocess with SPFM_DISABLE_JIT set
accordingly, since the backend is chosen at import time.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from spfm import _kernels

TRAIN_SNIPPET = """
import time
from spfm import _kernels, data, flow
ds = data.corrupt_labels(data.generate("two_circles", 10000, 1), 0.4, 1)
cfg = flow.TrainingConfig(epochs={epochs}, warmup_epochs=1, seed=1)
flow.train_run(ds, flow.TrainingConfig(epochs=1, warmup_epochs=0, seed=1))  # warm JIT / caches
t0 = time.perf_counter()
res = flow.train_run(ds, cfg)
print(_kernels.BACKEND, time.perf_counter() - t0, res.metrics[-1].mean_loss)
"""


def bench(label, fn, number):
    best = min(timeit.repeat(fn, number=number, repeat=5)) / number
    print(f"  {label:<8s} {1e6 * best:10.1f} us/call")
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--epochs", type=int, default=5)
    args = ap.parse_args()
    if not _kernels.HAVE_NUMBA:
        sys.exit("numba not importable; nothing to compare")

    ids = np.arange(100_000, dtype=np.uint64)
    key = np.uint64(0x1234)
    assert np.array_equal(_kernels.hash_block_numpy(key, ids, 4), _kernels.hash_block_numba(key, ids, 4))
    print("hash_block (100k ids x 4 words)")
    t_np = bench("numpy", lambda: _kernels.hash_block_numpy(key, ids, 4), 10)
    t_nb = bench("numba", lambda: _kernels.hash_block_numba(key, ids, 4), 10)
    print(f"  speedup  {t_np / t_nb:10.2f}x")

    z = np.random.default_rng(0).standard_normal((256, 128))
    up = np.ones_like(z)
    print("silu forward+backward (256 x 128)")
    def np_path():
        a, s = _kernels.silu_numpy(z)
        _kernels.silu_grad_numpy(up, z, s)
    def nb_path():
        a, s = _kernels.silu_numba(z)
        _kernels.silu_grad_numba(up, z, s)
    t_np = bench("numpy", np_path, 200)
    t_nb = bench("numba", nb_path, 200)
    print(f"  speedup  {t_np / t_nb:10.2f}x")

    print(f"end-to-end training, {args.epochs} epochs on 10k samples (seconds, final loss)")
    for flag in ("0", "1"):
        env = dict(os.environ, SPFM_DISABLE_JIT=flag)
        out = subprocess.run([sys.executable, "-c", TRAIN_SNIPPET.format(epochs=args.epochs)],
                             env=env, capture_output=True, text=True, check=True)
        print("  " + out.stdout.strip())


if __name__ == "__main__":
    main()
