"""Time the compiled kernels against the pure-Python fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Prints one row per (kernel, size) with the best wall time of each backend
and the speedup. Results of the two backends are checked to agree first.
"""
import argparse
import timeit

import numpy as np

from normbench import _core
from normbench._core import _fallback
from normbench.conditioning import JACOBI_TOL, MAX_SWEEPS


def _backends():
    out = {"python": _fallback}
    if _core.BACKEND == "cython":
        from normbench._core import _ext
        out["cython"] = _ext
    return out


def _gram(rng, d):
    x = rng.standard_normal((4 * d, d))
    return x.T @ x


def cases(rng):
    for d in (16, 32, 64):
        g = _gram(rng, d)
        yield f"jacobi_eigvalsh d={d}", lambda mod, g=g: mod.jacobi_eigvalsh(g.copy(), JACOBI_TOL, MAX_SWEEPS)
    for n, d in ((256, 32), (2048, 64)):
        x = rng.standard_normal((n, d)).astype(np.float32)
        mask = (rng.random(n) < 0.8).astype(np.uint8)
        yield f"masked_moments {n}x{d}", lambda mod, x=x, mask=mask: mod.masked_moments(x, mask)


def _flat(result):
    parts = result if isinstance(result, tuple) else (result,)
    return np.concatenate([np.sort(np.ravel(np.asarray(p, dtype=np.float64))) for p in parts])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    mods = _backends()
    if "cython" not in mods:
        print("compiled extension not built; timing the fallback only")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<26}" + "".join(f"{name:>12}" for name in mods) + ("     speedup" if len(mods) > 1 else ""))
    for label, fn in cases(rng):
        results = [fn(mod) for mod in mods.values()]
        for r in results[1:]:
            np.testing.assert_allclose(_flat(r), _flat(results[0]), rtol=1e-9, atol=1e-9)
        times = []
        for mod in mods.values():
            number = 1
            while timeit.timeit(lambda: fn(mod), number=number) < 0.05:
                number *= 2
            times.append(min(timeit.repeat(lambda: fn(mod), number=number, repeat=args.repeat)) / number)
        row = f"{label:<26}" + "".join(f"{t * 1e3:>10.3f}ms" for t in times)
        if len(times) > 1:
            row += f"{times[0] / times[1]:>11.1f}x"
        print(row)


if __name__ == "__main__":
    main()
