"""Command-line driver: synthetic pairs, recovery runs, rank sweeps, evaluation and basis export.

Every command writes ``manifest.json`` into its output directory. The
manifest records the command, every option and a hash of each input file, so
``fmrecover replay manifest.json --out DIR`` reproduces the run exactly.
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, probabilistic, shapes
from .evaluation import SWEEP_METHODS, GeodesicCache, evaluate_map, rank_sweep, write_scalar_field, write_sweep
from .fmap import (
    LEFT_STOCHASTIC,
    PERMUTATION,
    FunctionalMap,
    PointMap,
    fmap_from_constraints,
    fmap_from_pointmap,
    load_fmap_matrix,
    load_pointmap,
    perturb_fmap,
    save_fmap,
    save_pointmap,
    voronoi_constraints,
)
from .mesh import MeshFormatError, MeshValidationError, TriangleMesh, load_mesh, save_mesh
from .probabilistic import AlignmentError
from .recovery import BALANCED_LAMBDA, BALANCED_ROUNDS, embed
from .refine import RECOVERY_METHODS, UPDATE_RULES, RefinementConfig, recover, refine_loop
from .spectral import MODES, DegenerateTriangleError, EigensolverError, mesh_basis, save_basis

log = logging.getLogger("fmrecover")

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4

MANIFEST = "manifest.json"
# options that never influence the outputs
_UNRECORDED = {"out", "func", "command", "verbose"}
# options naming input files, resolved to absolute paths and hashed
_INPUT_OPTIONS = ("base", "source", "target", "truth", "fmap", "map", "mesh")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, (EigensolverError, AlignmentError, np.linalg.LinAlgError, FloatingPointError)):
        return EXIT_NUMERICAL
    if isinstance(exc, (MeshFormatError, MeshValidationError, DegenerateTriangleError, ValueError)):
        return EXIT_INVALID
    if isinstance(exc, OSError):
        return EXIT_IO
    return EXIT_NUMERICAL if isinstance(exc, ArithmeticError) else EXIT_INVALID


@contextlib.contextmanager
def stage(name: str):
    """Tag any failure inside the block with the pipeline stage and an exit code."""
    try:
        yield
    except CliError:
        raise
    except Exception as exc:
        raise CliError(_exit_code(exc), f"{name}: {exc}") from exc


def _sha1(path: Path) -> str:
    return hashlib.sha1(path.read_bytes()).hexdigest()


def _prepare_inputs(args) -> dict:
    """Resolve input paths in place, check they exist and hash them."""
    hashes = {}
    for name in _INPUT_OPTIONS:
        value = getattr(args, name, None)
        if value is None:
            continue
        p = Path(value).resolve()
        if not p.is_file():
            raise CliError(EXIT_IO, f"input: {name} file not found: {value}")
        setattr(args, name, str(p))
        hashes[name] = _sha1(p)
    return hashes


def _write_manifest(args, out: Path, inputs: dict) -> None:
    options = {k: v for k, v in sorted(vars(args).items()) if k not in _UNRECORDED}
    manifest = {"tool": "fmrecover", "version": __version__, "command": args.command, "options": options, "inputs": inputs}
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _out_dir(args) -> Path:
    out = Path(args.out)
    with stage("output"):
        out.mkdir(parents=True, exist_ok=True)
    return out


def _read_mesh(path) -> TriangleMesh:
    with stage(f"load {Path(path).name}"):
        return load_mesh(path)


def _read_truth(path, source: TriangleMesh, target: TriangleMesh) -> PointMap:
    with stage("load ground truth"):
        pm = load_pointmap(path, target.n, LEFT_STOCHASTIC)
        if pm.n_source != source.n:
            raise ValueError(f"ground truth lists {pm.n_source} vertices, source has {source.n}")
        return PointMap(pm.assignment, target.n, PERMUTATION) if pm.is_bijective() else pm


# ---------------------------------------------------------------------------
# subcommands


def _base_mesh(args) -> TriangleMesh:
    if args.base is not None:
        return _read_mesh(args.base)
    kind, _, param = args.base_shape.partition(":")
    with stage("base shape"):
        if not param:
            raise ValueError(f"base shape needs a size, e.g. {kind}:500")
        size = int(param)
        if kind == "icosphere":
            return shapes.icosphere(size)
        if kind == "fibonacci":
            return shapes.fibonacci_sphere(size)
        if kind == "random":
            return shapes.random_sphere(size, args.seed)
        raise ValueError(f"unknown base shape {kind!r}; expected icosphere, fibonacci or random")


def cmd_synth_pair(args) -> int:
    inputs = _prepare_inputs(args)
    base = _base_mesh(args)
    if args.kind == "permuted-isometry":
        target, perm = shapes.permuted_copy(base, args.seed)
    else:
        with stage("deformation"):
            target = shapes.radial_deformation(base, args.magnitude, args.seed)
        perm = np.arange(base.n)
    out = _out_dir(args)
    with stage("write"):
        save_mesh(base, out / "source.off")
        save_mesh(target, out / "target.off")
        save_pointmap(PointMap(perm, base.n, PERMUTATION), out / "truth.txt")
        _write_manifest(args, out, inputs)
    print(f"wrote {args.kind} pair with {base.n} vertices to {out}")
    return EXIT_OK


def _initial_fmap(args, source, target, truth) -> FunctionalMap:
    with stage("basis"):
        sb = mesh_basis(source, args.k, args.mode)
        tb = sb if target is source else mesh_basis(target, args.k, args.mode)
    with stage("functional map"):
        if args.fmap is not None:
            C = load_fmap_matrix(args.fmap)
            if C.shape[0] > args.k or C.shape[1] > args.k:
                raise ValueError(f"functional map is {C.shape[0]}x{C.shape[1]} but k is {args.k}")
            fm = FunctionalMap(C, sb.truncate(C.shape[1]), tb.truncate(C.shape[0]))
        else:
            if truth is None:
                raise ValueError("building C needs --truth (or pass --fmap)")
            if args.init == "truth":
                fm = fmap_from_pointmap(truth, sb, tb)
            else:
                A, B = voronoi_constraints(source, sb, tb, truth, args.regions)
                fm = fmap_from_constraints(A, B, sb, tb, args.ridge)
        if args.noise > 0:
            fm = perturb_fmap(fm, args.noise, args.seed)
    return fm


def _config(args, method: str) -> RefinementConfig:
    rule = args.update_rule if args.update_rule != "none" else UPDATE_RULES[0]
    return RefinementConfig(
        recovery_method=method,
        update_rule=rule,
        outer_iterations=args.iterations,
        ridge=args.ridge,
        convergence_tol=args.tol,
        balanced_lambda=args.balanced_lambda,
        balanced_rounds=args.balanced_rounds,
        em_lambda=args.em_lambda,
        em_iterations=args.em_iterations,
        kernel_width=args.kernel_width,
    )


def cmd_recover(args) -> int:
    inputs = _prepare_inputs(args)
    if args.k < 1:
        raise CliError(EXIT_INVALID, "input: k must be at least 1")
    source = _read_mesh(args.source)
    target = source if args.target == args.source else _read_mesh(args.target)
    truth = _read_truth(args.truth, source, target) if args.truth is not None else None
    fm = _initial_fmap(args, source, target, truth)
    with stage("configuration"):
        config = _config(args, args.method)
    out = _out_dir(args)
    em_trace = None
    ref_trace = None
    if args.update_rule == "none":
        with stage("recovery"):
            if args.method == "probabilistic":
                result, em_trace = probabilistic.recover_probabilistic(
                    embed(fm), args.em_lambda, args.em_iterations, args.kernel_width
                )
            else:
                result = recover(fm, config)
        pm = result.map
    else:
        with stage("refinement"):
            fm, pm, ref_trace = refine_loop(fm, config, truth)
    curve = None
    if truth is not None:
        with stage("evaluation"):
            curve = evaluate_map(pm, truth, target)
    with stage("write"):
        save_pointmap(pm, out / "pointmap.txt")
        save_fmap(fm, out / "fmap.txt")
        if em_trace is not None:
            em_trace.to_csv(out / "em_trace.csv")
        if ref_trace is not None:
            ref_trace.to_csv(out / "refine_trace.csv")
        if curve is not None:
            curve.to_csv(out / "error_curve.csv")
            write_scalar_field(curve.errors, out / "vertex_error.txt")
        _write_manifest(args, out, inputs)
    if curve is not None:
        print(f"exact matches {curve.exact_match_pct:.2f}%  mean error {curve.mean_error:.6g}")
    else:
        print(f"recovered map written to {out / 'pointmap.txt'}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    inputs = _prepare_inputs(args)
    source = _read_mesh(args.source)
    target = source if args.target == args.source else _read_mesh(args.target)
    truth = _read_truth(args.truth, source, target)
    with stage("sweep"):
        rows = rank_sweep(
            source,
            target,
            truth,
            args.ks,
            args.methods,
            args.mode,
            args.noise,
            args.seed,
            args.trials,
            balanced_lambda=args.balanced_lambda,
            em_lambda=args.em_lambda,
            em_iterations=args.em_iterations,
            kernel_width=args.kernel_width,
        )
    out = _out_dir(args)
    with stage("write"):
        write_sweep(rows, out / "sweep.csv", out / "sweep_wide.csv")
        _write_manifest(args, out, inputs)
    for r in rows:
        print(f"k={r['k']:<4d} {r['method']:<14s} exact {r['exact_pct']:7.2f}%  below 0.02 {r['pct_below_002']:7.2f}%")
    return EXIT_OK


def cmd_eval(args) -> int:
    inputs = _prepare_inputs(args)
    target = _read_mesh(args.target)
    with stage("load maps"):
        pm = load_pointmap(args.map, target.n)
        truth = load_pointmap(args.truth, target.n)
    with stage("evaluation"):
        thresholds = None
        if args.max_threshold is not None:
            thresholds = np.linspace(0.0, args.max_threshold, args.steps)
        curve = evaluate_map(pm, truth, target, thresholds, GeodesicCache(target))
    out = _out_dir(args)
    with stage("write"):
        curve.to_csv(out / "error_curve.csv")
        write_scalar_field(curve.errors, out / "vertex_error.txt")
        _write_manifest(args, out, inputs)
    print(f"exact matches {curve.exact_match_pct:.2f}%  mean error {curve.mean_error:.6g}")
    return EXIT_OK


def cmd_basis(args) -> int:
    inputs = _prepare_inputs(args)
    if args.k < 1:
        raise CliError(EXIT_INVALID, "input: k must be at least 1")
    mesh = _read_mesh(args.mesh)
    with stage("basis"):
        basis = mesh_basis(mesh, args.k, args.mode)
    out = _out_dir(args)
    with stage("write"):
        save_basis(basis, out / "basis.txt")
        _write_manifest(args, out, inputs)
    print(f"wrote {basis.k} {basis.mode} basis functions for {basis.n} vertices")
    return EXIT_OK


COMMANDS = {
    "synth-pair": cmd_synth_pair,
    "recover": cmd_recover,
    "sweep": cmd_sweep,
    "eval": cmd_eval,
    "basis": cmd_basis,
}


def cmd_replay(args) -> int:
    """Re-run the command recorded in a manifest into a new output directory."""
    with stage("manifest"):
        data = json.loads(Path(args.manifest).read_text())
        command = data["command"]
        if command not in COMMANDS:
            raise ValueError(f"manifest names unknown command {command!r}")
        if data.get("version") != __version__:
            log.warning("manifest was written by version %s, running %s", data.get("version"), __version__)
    ns = argparse.Namespace(**data["options"], command=command, out=args.out, verbose=args.verbose)
    for name, digest in data.get("inputs", {}).items():
        path = Path(getattr(ns, name))
        if not path.is_file():
            raise CliError(EXIT_IO, f"input: {name} file not found: {path}")
        if _sha1(path) != digest:
            raise CliError(EXIT_INVALID, f"input: {name} file {path} changed since the manifest was written")
    return COMMANDS[command](ns)


# ---------------------------------------------------------------------------
# argument parsing


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _method_list(text: str) -> list[str]:
    methods = [m.strip() for m in text.split(",") if m.strip()]
    for m in methods:
        if m not in SWEEP_METHODS:
            raise argparse.ArgumentTypeError(f"unknown method {m!r}; choose from {', '.join(SWEEP_METHODS)}")
    return methods


def _add_method_params(p):
    p.add_argument("--balanced-lambda", type=float, default=BALANCED_LAMBDA)
    p.add_argument("--balanced-rounds", type=int, default=BALANCED_ROUNDS)
    p.add_argument("--em-lambda", type=float, default=probabilistic.DEFAULT_LAMBDA)
    p.add_argument("--em-iterations", type=int, default=probabilistic.DEFAULT_ITERATIONS)
    p.add_argument("--kernel-width", type=float, default=probabilistic.DEFAULT_BETA,
                   help="kernel width in multiples of the source cloud's RMS radius")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fmrecover", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-pair", help="write a synthetic shape pair with ground truth")
    p.add_argument("--kind", choices=("permuted-isometry", "radial-deformation"), required=True)
    base = p.add_mutually_exclusive_group(required=True)
    base.add_argument("--base", help="base mesh file (OFF, PLY or OBJ)")
    base.add_argument("--base-shape", help="generated base: icosphere:S, fibonacci:N or random:N")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--magnitude", type=float, default=0.3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_pair)

    p = sub.add_parser("recover", help="recover (and optionally refine) a point map")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--truth", help="ground-truth point map, one target index per line")
    p.add_argument("--fmap", help="functional map file; built from --truth when omitted")
    p.add_argument("--init", choices=("truth", "regions"), default="truth",
                   help="how C is built when --fmap is omitted")
    p.add_argument("--regions", type=int, default=40, help="Voronoi regions for --init regions")
    p.add_argument("-k", "--k", type=int, default=30)
    p.add_argument("--mode", choices=MODES, default=MODES[0])
    p.add_argument("--method", choices=RECOVERY_METHODS, default="nn")
    p.add_argument("--update-rule", choices=("none",) + UPDATE_RULES, default="none")
    p.add_argument("--iterations", type=int, default=5, help="outer refinement iterations")
    p.add_argument("--ridge", type=float, default=1e-9)
    p.add_argument("--tol", type=float, default=1e-6, help="relative convergence tolerance")
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    _add_method_params(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_recover)

    p = sub.add_parser("sweep", help="exact-match rates over basis ranks and methods")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--ks", type=_int_list, default=[25, 50, 75])
    p.add_argument("--methods", type=_method_list, default=["max", "nn", "balanced_nn"])
    p.add_argument("--mode", choices=MODES, default=MODES[0])
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=1)
    _add_method_params(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", help="geodesic error curve of a point map")
    p.add_argument("--map", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--max-threshold", type=float)
    p.add_argument("--steps", type=int, default=101)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("basis", help="export a Laplace-Beltrami eigenbasis")
    p.add_argument("--mesh", required=True)
    p.add_argument("-k", "--k", type=int, default=30)
    p.add_argument("--mode", choices=MODES, default=MODES[0])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_basis)

    p = sub.add_parser("replay", help="re-run a recorded manifest")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"fmrecover: error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
