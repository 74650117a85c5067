"""``llsa`` command line: oracle checks, gradient checks and scaling benchmarks.

Exit status is 0 when every check passes, 1 when a check fails and 2 on bad
arguments or configuration.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys

import numpy as np

from . import _backend, bench
from .attention import build_plan, llsa_forward
from .core import (
    LLSAConfig,
    ReweightMode,
    auto_levels,
    default_tolerance,
    real_dtype,
    set_precision,
    validate_config,
)
from .errors import LLSAError
from .grad import llsa_backward
from .indexmap import TransposedIndices, table_pairs, transpose_all
from .oracle import effective_attention, finite_diff_check, mask_backward, mask_transpose
from .pyramid import build_pyramid
from .reorder import build_reorder
from .selection import hierarchical_topk
from .tensorio import gen_random, read_tensor

CHECKS = ("forward-oracle", "transpose-mask", "transpose-roundtrip", "backward-mask")


class _ConfigFileError(Exception):
    pass


def read_config_file(path) -> dict[str, str]:
    """``key = value`` lines; blank lines and ``#`` comments are ignored."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise _ConfigFileError(f"{path}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def _modes(name: str | None) -> list[ReweightMode]:
    return list(ReweightMode) if name in (None, "both") else [ReweightMode(name)]


def _int_list(text: str) -> list[int]:
    return [int(t) for t in str(text).replace(",", " ").split()]


def _inputs(args, n: int, d: int, seed: int):
    given = [args.q, args.k, args.v]
    if any(given):
        if not all(given):
            raise SystemExit("--q, --k and --v must be given together")
        return tuple(read_tensor(p) for p in given)
    return tuple(gen_random(n, d, seed + j) for j in range(3))


def _config(args, n: int, d: int, mode: ReweightMode):
    levels = auto_levels(n, args.b, args.top_k) if args.levels == "auto" else args.levels
    return validate_config(LLSAConfig(n, d, args.b, args.top_k, levels, enrich_levels=args.enrich,
                                      reweight_mode=mode))


def _emit(rows: list[dict], fmt: str, fh=None) -> None:
    fh = fh or sys.stdout
    if fmt == "json":
        json.dump(rows, fh, indent=2)
        fh.write("\n")
        return
    if rows:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def _corrupt(tr: TransposedIndices) -> TransposedIndices:
    # test hook: move the first stored pair to a different query block
    flat = tr.flat_queries.copy()
    flat[0] += 1
    return TransposedIndices(flat_queries=flat, offsets=tr.offsets)


def cmd_verify(args) -> int:
    tol = default_tolerance()
    rows, failed = [], []
    for mode in _modes(args.mode):
        for seed in range(args.seed, args.seed + args.seeds):
            q, k, v = _inputs(args, args.n, args.d, seed)
            cfg = _config(args, q.shape[0], q.shape[1], mode)
            B, L = cfg.block_size, cfg.levels
            pq, pk, pv = (build_pyramid(x, B, L) for x in (q, k, v))
            sel = hierarchical_topk(pq, pk, cfg)
            plan = build_plan(sel, cfg)
            state = llsa_forward(q, k, v, pk, pv, plan, cfg)
            transposed = transpose_all(sel, cfg)
            ref = effective_attention(q, k, v, pk, pv, plan, cfg)
            errs = {"forward-oracle": float(np.max(np.abs(state.output - ref)))}
            errs["transpose-mask"] = float(sum(
                tr != mask_transpose(li, cfg.level_blocks(li.level))
                for tr, li in zip(transposed, sel.per_level)))
            trip = [_corrupt(tr) if args.corrupt_index else tr for tr in transposed]
            errs["transpose-roundtrip"] = float(sum(
                tr.pairs() != table_pairs(li) for tr, li in zip(trip, sel.per_level)))
            g = gen_random(q.shape[0], q.shape[1], seed + 3).astype(real_dtype())
            fast = llsa_backward(g, state, q, k, v, pk, pv, plan, transposed, cfg)
            errs["backward-mask"] = fast.max_abs_diff(mask_backward(g, q, k, v, sel, cfg))
            for name in CHECKS:
                limit = tol if name in ("forward-oracle", "backward-mask") else 0.0
                ok = errs[name] <= limit
                rows.append({"check": name, "mode": mode.value, "seed": seed,
                             "max_error": errs[name], "tolerance": limit,
                             "status": "pass" if ok else "fail"})
                if not ok and name not in failed:
                    failed.append(name)
    _emit(rows, args.out)
    for name in failed:
        print(f"FAILED: {name}", file=sys.stderr)
    return 1 if failed else 0


def cmd_gradcheck(args) -> int:
    rows, ok_all = [], True
    for mode in _modes(args.mode):
        for seed in range(args.seed, args.seed + args.seeds):
            q, k, v = _inputs(args, args.n, args.d, seed)
            cfg = _config(args, q.shape[0], q.shape[1], mode)
            g = gen_random(cfg.n, cfg.d, seed + 3)
            rep = finite_diff_check((q, k, v), g, cfg, step=args.step)
            ok = rep.max_rel_error <= args.tolerance
            ok_all &= ok
            rows.append({"mode": mode.value, "seed": seed, "max_rel_error": rep.max_rel_error,
                         "worst": "%s[%d,%d]" % rep.worst_coordinate, "step": rep.step,
                         "coords": rep.n_coords, "status": "pass" if ok else "fail"})
    _emit(rows, args.out)
    return 0 if ok_all else 1


def _bench_out(report: bench.Report, args) -> None:
    fh = open(args.output, "w", encoding="utf-8") if args.output else sys.stdout
    try:
        if args.out == "json":
            bench.write_json(report, fh)
        else:
            bench.write_csv(report.records, fh)
    finally:
        if fh is not sys.stdout:
            fh.close()
    if args.out == "csv":
        for phase, s in report.slopes.items():
            print(f"slope {phase} {s:.3f}", file=sys.stderr)


def _levels_arg(text):
    return text if text == "auto" else int(text)


def cmd_scaling(args) -> int:
    rep = bench.run_scaling(_int_list(args.n_grid), b=args.b, k=args.top_k, d=args.d,
                            levels=args.levels, enrich=args.enrich, mode=args.mode,
                            seed=args.seed, repeats=args.repeats,
                            dense_grid=_int_list(args.dense_grid))
    _bench_out(rep, args)
    return 0


def cmd_kv_backward(args) -> int:
    rep = bench.run_kv_backward(_int_list(args.n_grid), b=args.b, k=args.top_k, d=args.d,
                                levels=args.levels, enrich=args.enrich, mode=args.mode,
                                seed=args.seed, repeats=args.repeats, baseline=args.baseline)
    _bench_out(rep, args)
    return 0


def cmd_reorder_demo(args) -> int:
    p = build_reorder(args.height, args.width, args.b, args.levels)
    if args.out == "json":
        _emit({"height": p.height, "width": p.width, "levels": p.levels,
               "forward": p.forward.tolist(), "inverse": p.inverse.tolist()}, "json")
        return 0
    r, c = np.divmod(p.forward, p.width)
    _emit([{"position": i, "raster": int(f), "row": int(y), "col": int(x)}
           for i, (f, y, x) in enumerate(zip(p.forward, r, c))], "csv")
    return 0


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--threads", type=int, default=None, help="worker threads (default: all cores)")
    p.add_argument("--config", help="key=value file supplying defaults for any flag")
    p.add_argument("--precision", choices=("double", "single"), default="double")
    p.add_argument("--backend", choices=("compiled", "python"), default=None)
    p.add_argument("--out", choices=("csv", "json"), default="csv")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")


def _attention_flags(p, n, d, b, k, levels, enrich, mode="both", topk_flag="--k"):
    if n:
        p.add_argument("--n", type=int, default=n)
    p.add_argument("--d", type=int, default=d)
    p.add_argument("--b", type=int, default=b, help="block size")
    p.add_argument(topk_flag, dest="top_k", type=int, default=k, help="top-k")
    p.add_argument("--levels", type=_levels_arg, default=levels)
    p.add_argument("--enrich", type=int, default=enrich, help="enrichment levels (default: all)")
    modes = tuple(m.value for m in ReweightMode)
    p.add_argument("--mode", choices=(("both",) if mode == "both" else ()) + modes, default=mode)


def _tensor_flags(p) -> None:
    p.add_argument("--q", help="FMAT file for queries (with --k and --v)")
    p.add_argument("--k", help="FMAT file for keys")
    p.add_argument("--v", help="FMAT file for values")


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = argparse.ArgumentParser(prog="llsa", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}

    p = sub.add_parser("verify", help="fast paths against the slow references")
    _common(p)
    _attention_flags(p, 256, 16, 4, 2, 2, None, topk_flag="--top-k")
    _tensor_flags(p)
    p.add_argument("--seeds", type=int, default=3, help="number of consecutive seeds")
    p.add_argument("--corrupt-index", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)
    subs["verify"] = p

    p = sub.add_parser("gradcheck", help="backward pass against central finite differences")
    _common(p)
    _attention_flags(p, 128, 8, 4, 2, 2, None, topk_flag="--top-k")
    _tensor_flags(p)
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--step", type=float, default=1e-6)
    p.add_argument("--tolerance", type=float, default=1e-6)
    p.set_defaults(func=cmd_gradcheck)
    subs["gradcheck"] = p

    for name, func, help_ in (("scaling", cmd_scaling, "wall time and work counters over an N grid"),
                              ("kv-backward", cmd_kv_backward, "per-token key/value backward time")):
        p = sub.add_parser(name, help=help_)
        _common(p)
        _attention_flags(p, 0, 16, 16, 8, "auto", None, mode="scale_kv")
        p.add_argument("--n-grid", default="8192,16384,32768,65536")
        p.add_argument("--repeats", type=int, default=5 if name == "scaling" else 9)
        p.add_argument("--output", help="write records here instead of stdout")
        if name == "scaling":
            p.add_argument("--dense-grid", default="512,1024,2048")
        else:
            p.add_argument("--baseline", choices=("mask", "none"), default="mask")
        p.set_defaults(func=func)
        subs[name] = p

    p = sub.add_parser("reorder-demo", help="print the patch-contiguous 2D token order")
    _common(p)
    p.add_argument("--height", type=int, default=4)
    p.add_argument("--width", type=int, default=4)
    p.add_argument("--b", type=int, default=4)
    p.add_argument("--levels", type=int, default=None)
    p.set_defaults(func=cmd_reorder_demo)
    subs["reorder-demo"] = p

    return parser, subs


def main(argv=None) -> int:
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            values = read_config_file(args.config)
        except (OSError, _ConfigFileError) as exc:
            print(f"llsa: {exc}", file=sys.stderr)
            return 2
        sp = subs[args.command]
        known = {a.dest for a in sp._actions}
        unknown = sorted(set(values) - known)
        if unknown:
            print(f"llsa: unknown config keys: {', '.join(unknown)}", file=sys.stderr)
            return 2
        sp.set_defaults(**values)
        args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        set_precision(args.precision)
        if args.backend:
            _backend.use_backend(args.backend)
        _backend.set_num_threads(args.threads)
        return args.func(args)
    except LLSAError as exc:
        print(f"llsa: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
