"""Time the numba kernels against their numpy fallbacks and one hierarchy step.

Usage: python benchmarks/bench_kernels.py [--repeat N]
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from kdvcorr import _kernels
from kdvcorr.modulation import ModulationState, advance, soliton
from kdvcorr.spectral import make_grid


def kernel_cases(rng: np.random.Generator) -> dict:
    n = 1024
    c = lambda *shape: rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    e = np.exp(1j * rng.standard_normal(8 * (n // 2 + 1)))
    v = [c(8 * (n // 2 + 1)) for _ in range(5)]
    real = [rng.standard_normal(2 * n) for _ in range(4)]
    denom = 1.0 + 0.1 * np.abs(real[3])
    coeffs = c(n // 2 + 1)
    k = np.arange(n // 2 + 1, dtype=float)
    return {
        "cauchy_product": ((rng.standard_normal((4, 2 * n)), rng.standard_normal((4, 2 * n))), {}),
        "lawson_half": ((e, v[0], v[1], 0.01), {}),
        "lawson_final": ((e * e, e, *v, 0.01), {}),
        "fourier_eval": ((coeffs, k, 0.0, rng.uniform(0, 6, 64)), {}),
        "weighted_square_sum": ((coeffs, np.abs(k) + 1.0), {}),
        "fixed_point_update": ((real[0], real[1], real[2], denom, real[0]), {}),
    }


def bench(fn, args, repeat: int) -> float:
    fn(*args)  # warm-up (and JIT compilation)
    return min(timeit.repeat(lambda: fn(*args), number=20, repeat=repeat)) / 20


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    rng = np.random.default_rng(0)
    impls = {"numpy": _kernels.numpy_impl}
    if _kernels.numba_impl is not None:
        impls["numba"] = _kernels.numba_impl
    print(f"{'kernel':22s}" + "".join(f"{name:>14s}" for name in impls) + f"{'speedup':>10s}")
    for name, (call_args, _) in kernel_cases(rng).items():
        times = {label: bench(getattr(impl, name), call_args, args.repeat) for label, impl in impls.items()}
        speed = times["numpy"] / times["numba"] if "numba" in times else float("nan")
        print(f"{name:22s}" + "".join(f"{t * 1e6:12.1f}us" for t in times.values()) + f"{speed:9.2f}x")

    grid = make_grid(512, 64.0)
    state = ModulationState.initial(0.1, soliton(grid, 1.0, -2.0), soliton(grid, 1.0, 2.0))
    step = bench(lambda: advance(state, 0.01), (), args.repeat)
    print(f"hierarchy step (n=512, active={'numba' if _kernels.USING_NUMBA else 'numpy'}): {step * 1e3:.2f} ms")


if __name__ == "__main__":
    main()
