"""Time the numba and numpy versions of each kernel on training-sized inputs.

    python3 benchmarks/bench_kernels.py [--repeat N]

Also runs a short end-to-end training comparison in two subprocesses, one
with ACAN_DISABLE_NUMBA=1. Outputs of the two kernel paths are checked for
bit equality before timing.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from acan import _kernels
from acan.objectives import pairwise_distances


def mining_inputs(rng, n=128, cams=1):
    emb = rng.normal(size=(n, 128))
    ids = np.repeat(np.arange(n // 4), 4).astype(np.int64)
    return pairwise_distances(emb), ids, (np.arange(n) % cams).astype(np.int64)


def scatter_inputs(rng, n=128, dim=128):
    a = np.arange(n, dtype=np.int64)
    return (np.zeros((n, dim)), a, rng.integers(0, n, n), rng.integers(0, n, n),
            rng.normal(size=(n, dim)), rng.normal(size=(n, dim)), 1.0 / n)


def ranking_inputs(rng, nq=64, ng=448):
    rel = rng.random((nq, ng)) < 0.03
    rel[:, 0] |= ~rel.any(axis=1)
    return rel, np.full(nq, ng, dtype=np.int64)


KERNELS = {
    "hardest_pairs": (_kernels.hardest_pairs_numba, _kernels.hardest_pairs_numpy, mining_inputs),
    "scatter_triplet": (_kernels.scatter_triplet_numba, _kernels.scatter_triplet_numpy, scatter_inputs),
    "hit_statistics": (_kernels.hit_statistics_numba, _kernels.hit_statistics_numpy, ranking_inputs),
}


def _same(a, b):
    if isinstance(a, tuple):
        return all(np.array_equal(x, y) for x, y in zip(a, b))
    return np.array_equal(a, b)


def bench_kernels(repeat):
    print(f"{'kernel':<18}{'numba (us)':>12}{'numpy (us)':>12}{'speedup':>10}  equal")
    for name, (fast, ref, make) in KERNELS.items():
        args = make(np.random.default_rng(0))
        copy = lambda: tuple(a.copy() if isinstance(a, np.ndarray) else a for a in args)  # noqa: E731
        equal = _same(fast(*copy()), ref(*copy()))
        t_fast = min(timeit.repeat(lambda: fast(*copy()), number=20, repeat=repeat)) / 20 * 1e6
        t_ref = min(timeit.repeat(lambda: ref(*copy()), number=20, repeat=repeat)) / 20 * 1e6
        print(f"{name:<18}{t_fast:>12.1f}{t_ref:>12.1f}{t_ref / t_fast:>9.2f}x  {equal}")


TRAIN_SNIPPET = """
import time
from acan.data import SynthConfig, generate_synthetic
from acan.trainer import TrainConfig, train
from acan.core import dumps_model
import hashlib
ds = generate_synthetic(SynthConfig())
train(ds, TrainConfig(epochs=2, lr_decay_epochs=()))  # warm-up / compile
t = time.perf_counter()
net, _ = train(ds, TrainConfig(epochs=60, lr_decay_epochs=(20, 40)))
print(time.perf_counter() - t, hashlib.sha256(dumps_model(net).encode()).hexdigest()[:16])
"""


def bench_training():
    rows = {}
    for label, flag in (("numba", "0"), ("numpy", "1")):
        env = dict(os.environ, ACAN_DISABLE_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", TRAIN_SNIPPET], env=env, capture_output=True,
                             text=True, check=True).stdout.split()
        rows[label] = (float(out[0]), out[1])
    print("\n60-epoch OCE training on the default dataset")
    for label, (secs, digest) in rows.items():
        print(f"  {label:<6} {secs:7.2f}s  model sha256 {digest}")
    print(f"  identical models: {rows['numba'][1] == rows['numpy'][1]}")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--skip-training", action="store_true")
    args = parser.parse_args()
    if not _kernels.HAVE_NUMBA:
        sys.exit("numba is not installed; nothing to compare")
    bench_kernels(args.repeat)
    if not args.skip_training:
        bench_training()


if __name__ == "__main__":
    main()
