"""Compare the compiled kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--sweeps 4000] [--n-test 50000] [--repeat 3]

Prints the best-of-repeat wall time per kernel and backend, the speed-up,
and whether both backends produced identical chains.
"""

import argparse
import time

import numpy as np
from scipy.special import gammaln

from nmfrlct import kernels
from nmfrlct.harness import default_truth
from nmfrlct.model import ModelDims, generate_dataset


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--sweeps", type=int, default=4000, help="Gibbs sweeps per run")
    p.add_argument("--n-test", type=int, default=50_000, help="observations for the predictive kernel")
    p.add_argument("--draws", type=int, default=1000, help="posterior draws for the predictive kernel")
    p.add_argument("--vb-iters", type=int, default=500, help="VB passes (no early stop)")
    p.add_argument("--phi", type=float, default=0.25, help="prior shape for U and V")
    p.add_argument("--repeat", type=int, default=3)
    args = p.parse_args(argv)

    if kernels.compiled is None:
        raise SystemExit("compiled extension not available; build with `pip install -e . --no-build-isolation`")
    backends = {"cython": kernels.compiled, "python": kernels.fallback}
    dims = ModelDims(4, 4, 2, 1)
    truth = default_truth(dims, 0)
    data = generate_dataset(truth, 500, 1)
    xsum = data.total()
    hyper = (args.phi, 1.0, args.phi, 1.0)
    results = {}

    def gibbs(impl):
        rng = np.random.Generator(np.random.PCG64(7))
        U, V = np.full((4, 2), 0.5), np.full((2, 4), 0.5)
        return impl.gibbs_sweeps(rng, xsum, data.n, U, V, *hyper, args.sweeps // 2, 1, args.sweeps // 2)

    rng = np.random.default_rng(3)
    test = generate_dataset(truth, args.n_test, 2)
    X = np.ascontiguousarray(test.observations.reshape(args.n_test, -1))
    lfact = gammaln(X + 1.0).sum(axis=1)
    rates = rng.gamma(4.0, 0.25, size=(args.draws, 16))

    def predictive(impl):
        return impl.predictive_stats(X, lfact, np.log(rates), rates.sum(axis=1))

    def vb(impl):
        st = [np.full((4, 2), 1.3), np.full((4, 2), 500.0), np.full((2, 4), 0.7), np.full((2, 4), 500.0)]
        return impl.vb_iterate(xsum.astype(float), float(data.n), float(data.log_factorials().sum()),
                               *st, *hyper, args.vb_iters, 1e-300, True)

    print(f"{'kernel':<12}{'cython s':>12}{'python s':>12}{'speed-up':>10}  agreement")
    for name, fn, check in (
        ("gibbs", gibbs, lambda a, b: all(np.array_equal(x, y) for x, y in zip(a, b))),
        ("predictive", predictive, lambda a, b: max(float(np.max(np.abs(x - y))) for x, y in zip(a, b))),
        ("vb", vb, lambda a, b: float(np.max(np.abs(np.asarray(a[0]) - np.asarray(b[0]))))),
    ):
        (tc, oc), (tp, op) = (best_of(lambda impl=impl: fn(impl), args.repeat) for impl in backends.values())
        results[name] = (tc, tp)
        agree = check(oc, op)
        agree = "bitwise" if agree is True else ("DIFFER" if agree is False else f"max abs diff {agree:.1e}")
        print(f"{name:<12}{tc:>12.4f}{tp:>12.4f}{tp / tc:>9.1f}x  {agree}")
    return results


if __name__ == "__main__":
    main()
