"""Time each llsa phase on the compiled kernels and on the numpy fallback.

    python benchmarks/compare_backends.py --n 4096 --repeats 5 > backends.csv

Prints one CSV row per (phase, backend) with the median wall time and the
compiled-over-python speedup.
"""

import argparse
import csv
import sys

import llsa
from llsa.bench import make_config, median_ns
from llsa.tensorio import gen_random


def phases(n, d, b, k):
    cfg = make_config(n, d, b, k)
    q, kk, v, g = (gen_random(n, d, j) for j in range(4))
    B, L = cfg.block_size, cfg.levels
    pq, pk, pv = (llsa.build_pyramid(x, B, L) for x in (q, kk, v))
    sel = llsa.hierarchical_topk(pq, pk, cfg)
    plan = llsa.build_plan(sel, cfg)
    state = llsa.llsa_forward(q, kk, v, pk, pv, plan, cfg)
    tr = llsa.transpose_all(sel, cfg)
    return {
        "pyramid": lambda: llsa.build_pyramid(kk, B, L),
        "select": lambda: llsa.hierarchical_topk(pq, pk, cfg),
        "transpose": lambda: llsa.transpose_all(sel, cfg),
        "forward": lambda: llsa.llsa_forward(q, kk, v, pk, pv, plan, cfg),
        "backward": lambda: llsa.llsa_backward(g, state, q, kk, v, pk, pv, plan, tr, cfg),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=4096)
    ap.add_argument("--d", type=int, default=16)
    ap.add_argument("--b", type=int, default=16)
    ap.add_argument("--k", type=int, default=8)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--threads", type=int, default=None)
    args = ap.parse_args(argv)

    backends = llsa.available_backends()
    if "compiled" not in backends:
        sys.exit("compiled extension not built; run `pip install -e .` first")
    llsa.set_num_threads(args.threads)
    times = {}
    for name in ("compiled", "python"):
        llsa.use_backend(name)
        for phase, fn in phases(args.n, args.d, args.b, args.k).items():
            times[phase, name] = median_ns(fn, args.repeats)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["phase", "backend", "n", "wall_ns", "speedup"])
    for (phase, name), ns in times.items():
        w.writerow([phase, name, args.n, ns, f"{times[phase, 'python'] / ns:.2f}"])


if __name__ == "__main__":
    main()
