"""Time the compiled and numpy LSTM kernels on identical inputs.

Usage::

    python3 benchmarks/bench_kernels.py [--repeat 5]

Prints per-call forward and forward+backward times for a few sequence
lengths and hidden sizes, the speedup, and the largest output difference.
"""
import argparse
import timeit

import numpy as np

from ccsq import kernels

CASES = [(10, 8), (60, 16), (60, 100), (300, 40)]


def bench(fn, number, repeat):
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def run_case(T, H, repeat):
    rng = np.random.default_rng(T * 7 + H)
    zin = rng.normal(0, 1, (T, 4 * H))
    wh = rng.normal(0, 0.3, (4 * H, H))
    dh = rng.normal(size=(T, H))
    row = {"T": T, "H": H}
    outs = {}
    for name in ("python", "cython"):
        fwd, bwd = kernels.get_backend(name)
        acts, c, h = fwd(zin, wh)
        outs[name] = (h, bwd(acts, c, h, wh, dh))
        number = max(1, int(2000 / T))
        row[f"{name}_fwd"] = bench(lambda: fwd(zin, wh), number, repeat)
        row[f"{name}_fwdbwd"] = bench(lambda: bwd(*fwd(zin, wh), wh, dh), number, repeat)
    hp, (dzp, dwp) = outs["python"]
    hc, (dzc, dwc) = outs["cython"]
    row["maxdiff"] = max(np.max(np.abs(hp - hc)), np.max(np.abs(dzp - dzc)), np.max(np.abs(dwp - dwc)))
    return row


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    try:
        kernels.get_backend("cython")
    except ImportError:
        raise SystemExit("compiled extension not built; run `pip install -e . --no-build-isolation`")
    print(f"active backend: {kernels.BACKEND}")
    hdr = f"{'T':>5} {'H':>5} {'py fwd us':>11} {'cy fwd us':>11} {'x':>6} {'py f+b us':>11} {'cy f+b us':>11} {'x':>6} {'max diff':>9}"
    print(hdr)
    for T, H in CASES:
        r = run_case(T, H, args.repeat)
        print(f"{T:5d} {H:5d} {r['python_fwd'] * 1e6:11.1f} {r['cython_fwd'] * 1e6:11.1f} "
              f"{r['python_fwd'] / r['cython_fwd']:6.1f} {r['python_fwdbwd'] * 1e6:11.1f} "
              f"{r['cython_fwdbwd'] * 1e6:11.1f} {r['python_fwdbwd'] / r['cython_fwdbwd']:6.1f} "
              f"{r['maxdiff']:9.1e}")


if __name__ == "__main__":
    main()
