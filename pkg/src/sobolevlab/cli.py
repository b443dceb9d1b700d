"""Command line entry point: ``sobolevlab <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .averaging import cos_drive, free_conjugated, resonant_avg, static
from .config import load_config, parse_config, read_raw
from .matfile import read_operator, write_operator
from .basis import make_basis
from .mourre import SpectralWindow, mourre_check, weyl_residual
from .scenarios import EXIT_OK, EXIT_STAGE, converge, run


_NUMBER_LIST = re.compile(r"^-\d*\.?\d+(e[-+]?\d+)?(,-?\d*\.?\d+(e[-+]?\d+)?)*$", re.IGNORECASE)


def _parse_floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _parse_drive(text: str):
    """``free`` | ``static`` | ``cos[:k=K][,omega=W]``."""
    name, _, rest = text.partition(":")
    opts = {}
    for part in filter(None, rest.split(",")):
        key, _, val = part.partition("=")
        opts[key.strip()] = val.strip()
    if name == "free":
        return lambda op: free_conjugated(op)
    if name == "static":
        return lambda op: static(op)
    if name == "cos":
        k = int(opts.get("k", 1))
        omega = float(opts.get("omega", 1.0))
        return lambda op: cos_drive(op, k, omega)
    raise argparse.ArgumentTypeError(f"unknown drive {text!r}")


def _run_one(path: str, outdir: str | None) -> tuple[str, int, str]:
    try:
        cfg = load_config(path)
    except Exception as exc:
        return path, EXIT_STAGE, f"config: {exc}"
    res = run(cfg, outdir)
    fails = res.summary["manifest"].get("acceptance_failures", [])
    failure = res.summary["manifest"].get("failure")
    msg = f"-> {res.outdir}"
    if failure:
        msg += f" [stage {failure['stage']}: {failure['error']}]"
    if fails:
        msg += " [" + "; ".join(fails) + "]"
    return path, res.exit_code, msg


def cmd_run(args) -> int:
    jobs = max(1, args.jobs)
    if jobs == 1 or len(args.configs) == 1:
        results = [_run_one(p, args.outdir) for p in args.configs]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_one, args.configs, [args.outdir] * len(args.configs)))
    worst = EXIT_OK
    for path, code, msg in results:
        print(f"{path}: exit {code} {msg}")
        worst = max(worst, code)
    return worst


def cmd_validate(args) -> int:
    worst = EXIT_OK
    for path in args.configs:
        try:
            _, errs = parse_config(read_raw(path))
        except Exception as exc:
            errs = [f"<file>: {exc}"]
        print(json.dumps({"config": path, "errors": errs}, indent=2))
        if errs:
            worst = EXIT_STAGE
    return worst


def cmd_average(args) -> int:
    op = read_operator(args.op_file)
    v = _parse_drive(args.drive)(op)
    avg = resonant_avg(v)
    if args.out:
        write_operator(args.out, avg)
    print(json.dumps({"dim": avg.dim, "hermitian": avg.is_hermitian(), "max_entry": avg.max_abs(), "nnz": int(avg.tocsr().nnz), "out": args.out}, indent=2))
    return EXIT_OK


def cmd_mourre(args) -> int:
    h = read_operator(args.h_file)
    a = read_operator(args.a_file)
    w = _parse_floats(args.window)
    window = SpectralWindow(w[0], w[1], w[2] if len(w) > 2 else None)
    rep = mourre_check(h, a, window, allowance_rank=args.allowance_rank, edge_width=args.edge_width, tol=args.tol)
    text = rep.to_json()
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return EXIT_OK if rep.passed else 3


def cmd_weyl(args) -> int:
    basis = make_basis("Harmonic", args.dim)
    ns = [int(n) for n in _parse_floats(args.ns)]
    vk = complex(args.vk.replace(" ", ""))
    res = [weyl_residual(basis, args.k, vk, args.rho, n) for n in ns]
    slope = float(np.polyfit(np.log(ns), np.log(res), 1)[0]) if len(ns) > 1 else None
    print(json.dumps({"n": ns, "residual": res, "slope": slope}, indent=2))
    return EXIT_OK


def cmd_converge(args) -> int:
    cfg = load_config(args.config)
    dims = [int(d) for d in args.dims.split(",")]
    rep = converge(cfg, dims, args.threshold)
    print(json.dumps(rep.to_dict(), indent=2))
    return EXIT_OK if rep.converged else 3


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sobolevlab", description="Sobolev norm growth laboratory")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one or more scenario configs")
    r.add_argument("configs", nargs="+")
    r.add_argument("--outdir", default=None, help="override output_dir of every config")
    r.add_argument("--jobs", type=int, default=1, help="independent configs to run in parallel")
    r.set_defaults(func=cmd_run)

    v = sub.add_parser("validate", help="check configs without computing")
    v.add_argument("configs", nargs="+")
    v.set_defaults(func=cmd_validate)

    a = sub.add_parser("average", help="resonant average of a driven operator file")
    a.add_argument("op_file")
    a.add_argument("drive", help="free | static | cos[:k=K,omega=W]")
    a.add_argument("--out", default=None)
    a.set_defaults(func=cmd_average)

    m = sub.add_parser("mourre", help="certify a Mourre estimate for operator files")
    m.add_argument("h_file")
    m.add_argument("a_file")
    m.add_argument("window", help="lo,hi[,delta]")
    m.add_argument("--allowance-rank", type=int, default=0)
    m.add_argument("--edge-width", type=int, default=0)
    m.add_argument("--tol", type=float, default=1e-10)
    m.add_argument("--out", default=None)
    m.set_defaults(func=cmd_mourre)
    # let windows such as -0.5,0.5 parse as positionals rather than flags
    m._negative_number_matcher = _NUMBER_LIST

    w = sub.add_parser("weyl", help="Weyl-sequence residuals for the harmonic transporter")
    w.add_argument("--dim", type=int, required=True)
    w.add_argument("--k", type=int, required=True)
    w.add_argument("--vk", required=True, help="complex coefficient, e.g. 2 or 1+1j")
    w.add_argument("--rho", type=float, default=0.0)
    w.add_argument("--ns", required=True, help="comma separated n values")
    w.set_defaults(func=cmd_weyl)

    c = sub.add_parser("converge", help="rerun a scenario across truncations")
    c.add_argument("config")
    c.add_argument("--dims", required=True, help="comma separated, increasing")
    c.add_argument("--threshold", type=float, default=0.01)
    c.set_defaults(func=cmd_converge)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
