#!/usr/bin/env python3
"""Time the hot kernels and an end-to-end denoiser pass on each backend.

Runs every case under both kernel backends (numba when available, numpy
always) and prints best/median wall times plus the speed ratio.  The
first call of each case is a discarded warmup, which also absorbs numba
compilation.
"""

import argparse
import statistics
import time

import numpy as np

from sketchanim import denoiser as dn
from sketchanim import kernels as ke
from sketchanim import numerics as nm


def bench(fn, repeats: int) -> tuple[float, float]:
    fn()
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times), statistics.median(times)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=20,
                        help="timed runs per case after warmup")
    parser.add_argument("--frames", type=int, default=10,
                        help="clip length for the end-to-end cases")
    args = parser.parse_args()

    rng = np.random.Generator(np.random.Philox(key=7))
    m, s, d = args.frames, 256, 32
    mat_a = rng.normal(size=(m * s, d)).astype(np.float32)
    mat_b = rng.normal(size=(d, 4 * d)).astype(np.float32)
    bat_a = rng.normal(size=(m, s, d)).astype(np.float32)
    bat_b = rng.normal(size=(m, d, s)).astype(np.float32)
    rows = rng.normal(size=(m * s, s)).astype(np.float32)

    weights = dn.init_weights(dn.ModelConfig(), seed=0)
    latents = rng.normal(size=(m, 16, 16, 1)).astype(np.float32)
    prompt = dn.embed_prompt(weights, ("circle", "right"))

    def forward():
        dn.predict_noise(weights, latents, 50, prompt)

    def forward_backward():
        tape = nm.Tape()
        node = tape.input("x", latents)
        eps = dn.predict_noise(weights, node, 50, prompt)
        rec = tape.finalize(nm.reduce_sum(nm.mul(eps, eps)))
        rec.vjp(np.ones(1, np.float32), ("x",))

    cases = [
        (f"mm [{m * s}x{d} @ {d}x{4 * d}]", lambda: ke.mm(mat_a, mat_b)),
        (f"bmm [{m}x{s}x{d} @ {m}x{d}x{s}]", lambda: ke.bmm(bat_a, bat_b)),
        (f"softmax2 [{m * s}x{s}]", lambda: ke.softmax2(rows)),
        (f"predict_noise forward (M={m})", forward),
        (f"forward + input gradient (M={m})", forward_backward),
    ]

    results = {}
    for backend in ke.available_backends():
        ke.set_backend(backend)
        for name, fn in cases:
            results[name, backend] = bench(fn, args.repeats)

    width = max(len(name) for name, _ in cases)
    print(f"{'case':<{width}}  backend  {'best':>10}  {'median':>10}")
    for name, _ in cases:
        for backend in ke.available_backends():
            best, med = results[name, backend]
            print(f"{name:<{width}}  {backend:<7}  {best * 1e3:8.3f}ms  {med * 1e3:8.3f}ms")

    if {"numba", "numpy"} <= set(ke.available_backends()):
        print()
        for name, _ in cases:
            ratio = results[name, "numpy"][1] / results[name, "numba"][1]
            print(f"{name:<{width}}  numpy/numba median ratio {ratio:5.2f}x")


if __name__ == "__main__":
    main()
