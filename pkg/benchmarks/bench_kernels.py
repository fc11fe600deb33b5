"""Time each kernel under the numpy and compiled backends.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Shapes follow the training workloads: a 128-row VIB minibatch with K=6
(and K=16) components, the 90-state Column World partition, and value
iteration on a 64-state abstract MDP.
"""
import argparse
import json
import timeit

import numpy as np

from bisimvib import kernels
from bisimvib.nn import log_softmax


def workloads(rng):
    N, d, A = 128, 4, 4
    out = {}
    for K in (6, 16):
        z = rng.normal(size=(N, d))
        means = rng.normal(size=(K, d))
        var = rng.uniform(0.5, 2.0, size=(K, d))
        g = rng.normal(size=(N, K))
        e_t, e_n = rng.normal(size=(N, K)), rng.normal(size=(N, K))
        log_trans = log_softmax(rng.normal(size=(A, K, K)), axis=2)
        log_rho = np.full(K, -np.log(K))
        acts = rng.integers(0, A, size=N)
        _, resp = kernels.hmm_pair_lse(e_t, e_n, log_trans, log_rho, acts)
        gn = rng.normal(size=N)
        out[f"gauss_pairwise K={K}"] = lambda b, z=z, m=means, v=var: kernels.gauss_pairwise(z, m, v, backend=b)
        out[f"gauss_pairwise_grad K={K}"] = (
            lambda b, g=g, z=z, m=means, v=var: kernels.gauss_pairwise_grad(g, z, m, v, backend=b))
        out[f"hmm_pair_lse K={K}"] = (
            lambda b, a=e_t, c=e_n, t=log_trans, r=log_rho, x=acts: kernels.hmm_pair_lse(a, c, t, r, x, backend=b))
        out[f"hmm_pair_lse_grad K={K}"] = (
            lambda b, g=gn, r=resp, x=acts: kernels.hmm_pair_lse_grad(g, r, x, A, backend=b))
    vecs = np.round(rng.uniform(size=(90, 12)), 1)
    out["first_fit_groups 90x12"] = lambda b: kernels.first_fit_groups(vecs, 0.5, backend=b)
    S = 64
    trans = rng.dirichlet(np.ones(S), size=(A, S))
    reward = rng.uniform(size=(S, A))
    out["bellman_iterate S=64"] = lambda b: kernels.bellman_iterate(trans, reward, 0.9, 1e-8, 10000, backend=b)
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json")
    args = ap.parse_args(argv)
    available = list(kernels.backends())
    results = {}
    print(f"{'kernel':<28}" + "".join(f"{b + ' (us)':>16}" for b in available) + f"{'speedup':>10}")
    for name, fn in workloads(np.random.default_rng(0)).items():
        row = {}
        for b in available:
            fn(b)  # warm-up
            number = 50
            t = min(timeit.repeat(lambda: fn(b), number=number, repeat=args.repeat)) / number
            row[b] = t * 1e6
        results[name] = row
        speed = f"{row['python'] / row['cython']:.1f}x" if "cython" in row else "-"
        print(f"{name:<28}" + "".join(f"{row[b]:>16.1f}" for b in available) + f"{speed:>10}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=1)
    return results


if __name__ == "__main__":
    main()
