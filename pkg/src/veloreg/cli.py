"""Command line interface: ``veloreg register`` and ``veloreg tools``.

Configuration precedence is flags > ``--config`` JSON file > defaults. The
resolved configuration is echoed as ``#``-prefixed JSON lines at the top of
``report.csv``.

``report.csv`` columns, one row per outer iteration of every level:

=============  ==============================================================
level          continuation level (0 for a plain solve or beta-search trial)
beta_v         regularization weight of the level
k              outer iteration index (0 is the initial guess)
objective      objective value
mismatch       ||m(1) - m_R||^2 / ||m_T - m_R||^2
grad_norm      l2 norm of the reduced gradient
grad_rel       grad_norm relative to the gradient at v = 0
alpha          accepted step length (0 on row k = 0)
inner_iters    PCG iterations of the step that led to this row
matvec_fine    cumulative fine-grid Hessian matvecs
matvec_coarse  cumulative coarse-grid Hessian matvecs
pde_solves     cumulative transport solves on all grids
wall_time      seconds since the start of the level
=============  ==============================================================

Failures exit non-zero and print ``{"error": <category>, "message": ...}``
on stderr. Categories and exit codes: ``usage`` 2, ``config`` 2, ``io`` 3,
``format`` 4, ``numerical`` 5, ``solver`` 6, ``resource`` 7.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
import warnings
from dataclasses import asdict, replace

import numpy as np

from .config import DEFAULTS, RegConfig
from .continuation import (
    BetaSearchError,
    BetaSearchParams,
    ContinuationError,
    ContinuationPlan,
    run_plan,
    search_beta,
)
from .fieldio import FieldFormatError, read_field, write_field
from .fields import (
    DegenerateInputWarning,
    Grid3,
    RegNorm,
    gaussian_smooth,
    norm_l2,
    rescale_intensity,
    set_fft_workers,
)
from .objective import RegistrationProblem, evaluate_objective, reduced_gradient
from .postprocess import (
    TooManyLabelsError,
    deformation_map,
    det_deformation_gradient,
    foreground_mask,
    overlap_scores,
    transport_labels,
)
from .solver import REPORT_COLUMNS
from .synthetic import generate_synthetic

__all__ = ["main", "run_register", "run_tools", "CliError", "EXIT_CODES", "CSV_COLUMNS"]

log = logging.getLogger("veloreg")

EXIT_CODES = {"usage": 2, "config": 2, "io": 3, "format": 4, "numerical": 5, "solver": 6, "resource": 7}
CSV_COLUMNS = ("level", "beta_v") + REPORT_COLUMNS


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


def _setup_logging():
    level = os.environ.get("VELOREG_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(message)s")


def _set_threads(n: int):
    set_fft_workers(n)
    try:
        import numba

        numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))
    except (ImportError, ValueError):
        pass


def _register_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="veloreg register", description="Register a template image to a reference image.")
    p.add_argument("--mr", help="reference image (field file)")
    p.add_argument("--mt", help="template image (field file)")
    p.add_argument("--synthetic", type=int, metavar="N", help="use the synthetic problem on an N^3 grid")
    p.add_argument("--out", required=False, default=None, help="output directory")
    p.add_argument("--config", help="JSON file with configuration values")
    p.add_argument("--betav", type=float, help="regularization weight beta_v")
    p.add_argument("--betaw", type=float, help=f"divergence penalty weight (default {DEFAULTS['beta_w']})")
    p.add_argument("--norm", help="h1div, h1, h2, h3 or helmholtz:<gamma> (default h1div)")
    p.add_argument("--incompressible", action="store_true", default=None, help="constrain v to be divergence free")
    p.add_argument("--tol", type=float, help=f"relative gradient tolerance (default {DEFAULTS['eps_g']})")
    p.add_argument("--tol-mode", choices=["squared", "norm"],
                   help="compare squared gradient norms (default) or plain norms against --tol")
    p.add_argument("--nt", type=int, help=f"time steps (default {DEFAULTS['n_t']})")
    p.add_argument("--maxit", type=int, help="maximum outer iterations (default 50)")
    p.add_argument("--krylov-maxit", type=int, help="maximum PCG iterations (default 100)")
    p.add_argument("--precond", choices=["spectral", "twolevel"])
    p.add_argument("--inner", help="coarse solver of the two-level preconditioner: pcg:<kappa> or cheb:<k>")
    p.add_argument("--continuation", choices=["none", "parameter", "grid", "scale"])
    p.add_argument("--beta-search", action="store_true", default=None, help="search the smallest admissible beta_v")
    p.add_argument("--jbound", type=float, help="lower bound eps_J on det grad y (default 0.25 h1div, 0.1 otherwise)")
    newton = p.add_mutually_exclusive_group()
    newton.add_argument("--gn", dest="gauss_newton", action="store_true", default=None, help="Gauss-Newton (default)")
    newton.add_argument("--full-newton", dest="gauss_newton", action="store_false", help="full Newton Hessian")
    p.add_argument("--sigma", type=float, help="Gaussian smoothing of the inputs in voxels (default 1)")
    p.add_argument("--threads", type=int, help="worker threads (default 1)")
    p.add_argument("--precision", choices=["f32", "f64"])
    p.add_argument("--seed", type=int, help="random seed (Lanczos start vectors)")
    return p


def _tools_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="veloreg tools", description="Post-process a velocity field.")
    p.add_argument("--velocity", help="velocity field file")
    p.add_argument("--nt", type=int, default=DEFAULTS["n_t"], help="time steps")
    p.add_argument("--mr", help="reference image; defines the foreground mask for --detgrad")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--detgrad", action="store_true", help="determinant of the deformation gradient")
    p.add_argument("--defmap", action="store_true", help="deformation map (displacement)")
    p.add_argument("--absolute", action="store_true", help="write absolute map coordinates with --defmap")
    p.add_argument("--tlabels", metavar="LABELS", help="transport a label map")
    p.add_argument("--dice", nargs=2, metavar=("A", "B"), help="overlap scores of two label maps")
    p.add_argument("--threads", type=int, default=1)
    return p


def _usage() -> str:
    return (
        "usage: veloreg {register,tools} [options]\n\n"
        "  register   solve a registration problem (veloreg register -h for options)\n"
        "  tools      post-process a velocity field (veloreg tools -h for options)\n\n"
        "set VELOREG_LOG=INFO for per-iteration logging\n"
    )


_FLAG_KEYS = {
    "betav": "beta_v", "tol": "eps_g", "tol_mode": "tol_mode", "nt": "n_t", "maxit": "max_newton",
    "krylov_maxit": "max_krylov", "precond": "precond", "inner": "inner", "continuation": "continuation",
    "beta_search": "beta_search", "jbound": "eps_J", "gauss_newton": "gauss_newton", "sigma": "sigma",
    "threads": "threads", "precision": "precision", "seed": "seed", "incompressible": "incompressible",
    "norm": "norm", "betaw": "beta_w",
}


def resolve_config(args) -> RegConfig:
    """Merge defaults, the ``--config`` file and explicit flags."""
    values: dict = {}
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                values.update(json.load(fh))
        except OSError as exc:
            raise CliError("io", f"cannot read config file: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise CliError("config", f"config file is not valid JSON: {exc}") from exc
    for flag, key in _FLAG_KEYS.items():
        val = getattr(args, flag, None)
        if val is not None:
            values[key] = val
    norm = values.pop("norm", "h1div")
    beta_w = values.pop("beta_w", DEFAULTS["beta_w"])
    try:
        values["norm"] = RegNorm.parse(norm, beta_w=beta_w) if isinstance(norm, str) else norm
        if values.get("incompressible"):
            values["norm"] = replace(values["norm"], div_penalty=False)
        return RegConfig(**values)
    except (TypeError, ValueError) as exc:
        raise CliError("config", str(exc)) from exc


def _read(path, what):
    if not path:
        raise CliError("usage", f"missing {what}")
    try:
        return read_field(path)
    except FileNotFoundError as exc:
        raise CliError("io", f"{what} not found: {path}") from exc
    except OSError as exc:
        raise CliError("io", f"cannot read {what}: {exc}") from exc
    except FieldFormatError as exc:
        raise CliError("format", str(exc)) from exc


def _outdir(path) -> str:
    path = path or "."
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise CliError("io", f"cannot create output directory {path}: {exc}") from exc
    return path


def _write_report(path, cfg: RegConfig, rows, extra: dict):
    with open(path, "w", newline="") as fh:
        fh.write(f"# config: {cfg.to_json()}\n")
        for key, val in extra.items():
            fh.write(f"# {key}: {json.dumps(val)}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for level, beta, rec in rows:
            d = asdict(rec)
            w.writerow([level, repr(beta)] + [repr(d[c]) if isinstance(d[c], float) else d[c] for c in REPORT_COLUMNS])


def run_register(argv) -> int:
    args = _register_parser().parse_args(argv)
    cfg = resolve_config(args)
    _set_threads(cfg.threads)
    if cfg.beta_v is None and not cfg.beta_search:
        raise CliError("config", "beta_v is required (--betav) unless --beta-search is given")
    t0 = time.perf_counter()
    if args.synthetic is not None:
        if args.synthetic < 4:
            raise CliError("config", "--synthetic needs N >= 4")
        m_R, m_T, _ = generate_synthetic(Grid3.cube(args.synthetic), cfg.n_t)
    else:
        m_R = _read(args.mr, "reference image (--mr)")
        m_T = _read(args.mt, "template image (--mt)")
        if m_R.ndim != 3 or m_T.ndim != 3:
            raise CliError("format", "images must be scalar fields")
        if m_R.shape != m_T.shape:
            raise CliError("format", f"image grids differ: {m_R.shape} vs {m_T.shape}")
        if min(m_R.shape) < 4:
            raise CliError("format", f"grid {m_R.shape} is too small (need >= 4 points per axis)")
    outdir = _outdir(args.out)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateInputWarning)
        m_R, m_T = rescale_intensity(m_R.astype(np.float64)), rescale_intensity(m_T.astype(np.float64))
    if cfg.sigma > 0 and cfg.continuation != "scale":
        m_R, m_T = gaussian_smooth(m_R, cfg.sigma), gaussian_smooth(m_T, cfg.sigma)
    search_cfg = cfg if cfg.beta_v is not None else cfg.replace(beta_v=1.0)
    problem = RegistrationProblem(m_R, m_T, search_cfg)
    rows = []
    extra = {}
    if cfg.beta_search:
        res = search_beta(problem, BetaSearchParams(eps_J=cfg.jbound))
        v = res.v
        extra["beta_search"] = [asdict(t) for t in res.trace]
        extra["beta_v"] = res.beta_v
        final_cfg = cfg.replace(beta_v=res.beta_v)
        final_problem = problem.with_config(final_cfg)
        iterations = next(t.iterations for t in res.trace if t.beta_v == res.beta_v)
    else:
        sigmas = tuple(s * cfg.sigma for s in (4.0, 2.0, 1.0)) if cfg.sigma > 0 else (4.0, 2.0, 1.0)
        plan = ContinuationPlan(cfg.continuation, cfg.beta_v, sigmas=sigmas)
        v, levels = run_plan(problem, plan)
        for i, lev in enumerate(levels):
            rows.extend((i, lev.beta_v, rec) for rec in lev.report.records)
        extra["termination"] = levels[-1].report.reason
        final_cfg = cfg
        final_problem = problem
        iterations = sum(lev.report.iterations for lev in levels)
    state = evaluate_objective(final_problem, v)
    g = reduced_gradient(state)
    write_field(os.path.join(outdir, "velocity.vrf"), v)
    summary = {
        "beta_v": final_cfg.beta_v,
        "mismatch": state.mismatch,
        "objective": state.value,
        "grad_norm": norm_l2(g),
        "outer_iterations": iterations,
        "runtime_s": time.perf_counter() - t0,
        **problem.counters.snapshot(),
    }
    _write_report(os.path.join(outdir, "report.csv"), final_cfg, rows, extra)
    with open(os.path.join(outdir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    print(json.dumps(summary, sort_keys=True))
    return 0


def run_tools(argv) -> int:
    args = _tools_parser().parse_args(argv)
    _set_threads(args.threads)
    if not (args.detgrad or args.defmap or args.tlabels or args.dice):
        raise CliError("usage", "nothing to do: give --detgrad, --defmap, --tlabels or --dice")
    outdir = _outdir(args.out)
    v = None
    if args.detgrad or args.defmap or args.tlabels:
        v = _read(args.velocity, "velocity (--velocity)")
        if v.ndim != 4:
            raise CliError("format", "velocity must be a vector field")
    if args.detgrad:
        J = det_deformation_gradient(v, args.nt)
        mask = None
        if args.mr:
            m_R = _read(args.mr, "reference image (--mr)")
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", DegenerateInputWarning)
                mask = foreground_mask(rescale_intensity(m_R))
        vals = J if mask is None or not mask.any() else J[mask]
        write_field(os.path.join(outdir, "detgrad.vrf"), J)
        print(f"{vals.min():.6g} {vals.mean():.6g} {vals.max():.6g}")
    if args.defmap:
        write_field(os.path.join(outdir, "defmap.vrf"), deformation_map(v, args.nt, absolute=args.absolute))
    if args.tlabels:
        labels = _read(args.tlabels, "label map (--tlabels)")
        try:
            out = transport_labels(np.rint(labels).astype(np.int64), v, args.nt)
        except TooManyLabelsError as exc:
            raise CliError("resource", str(exc)) from exc
        write_field(os.path.join(outdir, "labels_transported.vrf"), out.astype(np.float64))
    if args.dice:
        a = np.rint(_read(args.dice[0], "label map")).astype(np.int64)
        b = np.rint(_read(args.dice[1], "label map")).astype(np.int64)
        if a.shape != b.shape:
            raise CliError("format", f"label grids differ: {a.shape} vs {b.shape}")
        scores = overlap_scores(a, b)
        with open(os.path.join(outdir, "dice.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["label", "dice", "false_positive_rate", "false_negative_rate"])
            for key, s in scores.items():
                w.writerow([key, repr(s["dice"]), repr(s["false_positive_rate"]), repr(s["false_negative_rate"])])
        print(f"union dice {scores['union']['dice']:.6g}")
    return 0


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _setup_logging()
    if not argv or argv[0] in ("-help", "-h", "--help"):
        sys.stdout.write(_usage())
        return 0
    cmd, rest = argv[0], argv[1:]
    if "-help" in rest:
        rest = ["--help"]
    try:
        if cmd == "register":
            return run_register(rest)
        if cmd == "tools":
            return run_tools(rest)
        raise CliError("usage", f"unknown command {cmd!r}")
    except CliError as exc:
        category, message = exc.category, str(exc)
    except (BetaSearchError, ContinuationError) as exc:
        category, message = "solver", str(exc)
    except FloatingPointError as exc:
        category, message = "numerical", str(exc)
    except MemoryError as exc:
        category, message = "resource", str(exc) or "out of memory"
    except OSError as exc:
        category, message = "io", str(exc)
    sys.stderr.write(json.dumps({"error": category, "message": message}) + "\n")
    return EXIT_CODES[category]


if __name__ == "__main__":
    sys.exit(main())
