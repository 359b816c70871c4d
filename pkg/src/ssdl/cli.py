"""Command-line front end for the whole pipeline.

Subcommands cover structure building (``groups``), direct operator
application (``prox``), single decompositions (``solve``), dictionary
training with the hierarchical/topographic presets (``train``),
mosaic rendering (``render``), penalty-weight calibration
(``calibrate``), and patch dataset preparation (``patches``).

Every option can also be supplied through a JSON config file
(``--config``); explicit flags win over config values, and unknown
config keys are rejected.  All randomness flows from one ``--seed``.
Exit codes: 0 success, 2 usage problems, 3 data/file problems,
4 numeric failures or calibration warnings.
"""

import argparse
import json
import math
import sys

import numpy as np

from . import dictlearn, groups, prox, solvers
from .data import (
    center_and_normalize,
    extract_patches,
    fit_whitening,
    apply_whitening,
    load_matrix,
    read_pgm,
    render_mosaic,
    save_matrix,
    save_whitening,
    write_pgm,
)
from .exceptions import (
    DimensionError,
    FormatError,
    NumericError,
    StructureError,
)

__all__ = ["main", "build_parser"]


class _UsageError(Exception):
    """Bad flags or config; maps to exit code 2."""


# Base defaults per command, applied after flags, config, and preset.
# ``None`` means "required": commands check and raise a usage error.
_DESTS = {
    "groups": {
        "kind": None, "p": None, "branching": None, "h": None, "w": None,
        "e": 3, "cyclic": True, "q": "l2", "weight": 1.0, "out": None,
    },
    "prox": {
        "structure": "", "input": None, "threshold": None, "out": None,
    },
    "solve": {
        "dict": None, "signal": None, "structure": "", "lam": None,
        "solver": "auto", "max_iter": 1000, "tol": 1e-8, "gamma": 1.0,
        "adapt_gamma": False, "out": None, "report": "",
    },
    "train": {
        "data": None, "preset": "", "mode": "", "structure": "",
        "atoms": None, "branching": "", "grid_h": None, "grid_w": None,
        "e": 3, "cyclic": True, "q": "", "lam": 0.1, "target_ratio": None,
        "epochs": 10, "steps": 1000, "batch_size": 500, "lr0": 1.0,
        "lr_t0": None, "checkpoint_every": 0, "out": None, "report": "",
    },
    "render": {
        "checkpoint": None, "atom_h": None, "atom_w": None,
        "grid_rows": None, "grid_cols": None, "pad": 1, "out": None,
    },
    "calibrate": {
        "dict": None, "sample": None, "structure": "", "target": 0.4,
        "out": "",
    },
    "patches": {
        "image": None, "size": 8, "count": 1000, "center_normalize": True,
        "whiten": False, "eps": 1e-5, "whitening_out": "", "out": None,
    },
}

# The two published experiment setups, as trainer defaults.
_TRAIN_PRESETS = {
    "hierarchical": {"mode": "alternating", "q": "linf",
                     "branching": "10,2,2"},
    "topographic": {"mode": "online", "q": "l2", "atoms": 400,
                    "target_ratio": 0.4},
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with option defaults")
    common.add_argument("--seed", type=int, help="run seed (default 0)")
    common.add_argument("--workers", type=int,
                        help="parallel coding workers (default 1)")

    parser = argparse.ArgumentParser(
        prog="ssdl",
        description="Structured sparse coding and dictionary learning.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("groups", parents=[common],
                       help="build a group structure file")
    p.add_argument("--kind", choices=("sequence", "tree", "grid"))
    p.add_argument("--p", type=int, help="coordinate count (sequence)")
    p.add_argument("--branching", help="tree branching, e.g. 10,2,2")
    p.add_argument("--h", type=int, help="grid height")
    p.add_argument("--w", type=int, help="grid width")
    p.add_argument("--e", type=int, help="grid neighborhood extent")
    p.add_argument("--cyclic", action=argparse.BooleanOptionalAction,
                   help="wrap grid neighborhoods around the edges")
    p.add_argument("--q", choices=("l2", "linf"), help="within-group norm")
    p.add_argument("--weight", type=float, help="uniform group weight")
    p.add_argument("--out", help="output structure JSON path")

    p = sub.add_parser("prox", parents=[common],
                       help="apply a proximal operator to a vector file")
    p.add_argument("--structure", help="structure JSON (omit for plain l1)")
    p.add_argument("--input", help="input vector (matrix file, one column)")
    p.add_argument("--threshold", type=float, help="prox threshold, >= 0")
    p.add_argument("--out", help="output vector path")

    p = sub.add_parser("solve", parents=[common],
                       help="solve one sparse decomposition")
    p.add_argument("--dict", help="dictionary matrix file")
    p.add_argument("--signal", help="signal vector file (one column)")
    p.add_argument("--structure", help="penalty structure JSON (omit for l1)")
    p.add_argument("--lam", type=float, help="penalty weight")
    p.add_argument("--solver", choices=("auto", "fista", "ista", "admm"))
    p.add_argument("--max-iter", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--gamma", type=float, help="splitting penalty parameter")
    p.add_argument("--adapt-gamma", action=argparse.BooleanOptionalAction)
    p.add_argument("--out", help="coefficient vector output path")
    p.add_argument("--report", help="JSON diagnostics output path")

    p = sub.add_parser("train", parents=[common],
                       help="train a dictionary")
    p.add_argument("--data", help="training matrix file (one signal/column)")
    p.add_argument("--preset", choices=("hierarchical", "topographic"))
    p.add_argument("--mode", choices=("alternating", "online"))
    p.add_argument("--structure", help="penalty structure JSON")
    p.add_argument("--atoms", type=int,
                   help="atom count (plain l1, or preset grid size)")
    p.add_argument("--branching", help="tree branching for the "
                                       "hierarchical preset")
    p.add_argument("--grid-h", type=int, help="topographic grid height")
    p.add_argument("--grid-w", type=int, help="topographic grid width")
    p.add_argument("--e", type=int, help="topographic neighborhood extent")
    p.add_argument("--cyclic", action=argparse.BooleanOptionalAction)
    p.add_argument("--q", choices=("l2", "linf"))
    p.add_argument("--lam", type=float)
    p.add_argument("--target-ratio", type=float,
                   help="calibrate the penalty weight to this mean ratio")
    p.add_argument("--epochs", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr0", type=float)
    p.add_argument("--lr-t0", type=float)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--out", help="checkpoint output path")
    p.add_argument("--report", help="JSON report output path")

    p = sub.add_parser("render", parents=[common],
                       help="render a checkpoint as a PGM mosaic")
    p.add_argument("--checkpoint", help="dictionary matrix file")
    p.add_argument("--atom-h", type=int)
    p.add_argument("--atom-w", type=int)
    p.add_argument("--grid-rows", type=int)
    p.add_argument("--grid-cols", type=int)
    p.add_argument("--pad", type=int)
    p.add_argument("--out", help="output PGM path")

    p = sub.add_parser("calibrate", parents=[common],
                       help="bisect the penalty weight to a residual ratio")
    p.add_argument("--dict", help="dictionary matrix file")
    p.add_argument("--sample", help="sample signal matrix file")
    p.add_argument("--structure", help="penalty structure JSON")
    p.add_argument("--target", type=float, help="target mean ratio")
    p.add_argument("--out", help="JSON trace output path")

    p = sub.add_parser("patches", parents=[common],
                       help="extract and preprocess image patches")
    p.add_argument("--image", help="input PGM image")
    p.add_argument("--size", type=int, help="square patch side")
    p.add_argument("--count", type=int, help="number of patches")
    p.add_argument("--center-normalize",
                   action=argparse.BooleanOptionalAction,
                   help="remove DC and scale to unit norm")
    p.add_argument("--whiten", action=argparse.BooleanOptionalAction,
                   help="fit and apply PCA whitening")
    p.add_argument("--eps", type=float, help="whitening eigenvalue floor")
    p.add_argument("--whitening-out",
                   help="persist the fitted whitening transform here")
    p.add_argument("--out", help="output matrix path")
    return parser


def _load_config(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise _UsageError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise _UsageError(f"config file {path} is not valid JSON: {e}")
    if not isinstance(doc, dict):
        raise _UsageError(f"config file {path} must hold a JSON object")
    return doc


def _resolve_options(args):
    """Merge flags > config > preset defaults > base defaults."""
    command = args.command
    dests = _DESTS[command]
    cfg = _load_config(args.config) if args.config else {}
    allowed = set(dests) | {"seed", "workers"}
    unknown = sorted(set(cfg) - allowed)
    if unknown:
        raise _UsageError(
            f"unknown config keys for {command!r}: {', '.join(unknown)}"
        )

    preset = getattr(args, "preset", None)
    if preset is None:
        preset = cfg.get("preset") or None
    preset_defaults = _TRAIN_PRESETS.get(preset, {}) if preset else {}

    o = {}
    for dest, base in dests.items():
        v = getattr(args, dest, None)
        if v is None:
            v = cfg.get(dest)
        if v is None:
            v = preset_defaults.get(dest)
        if v is None:
            v = base
        o[dest] = v
    if preset is not None:
        o["preset"] = preset
    # An explicit penalty weight and a calibration target set the same
    # knob; a --lam given by the user silences the preset's calibration
    # default instead of being overwritten by it.
    if preset_defaults.get("target_ratio") is not None:
        lam_given = getattr(args, "lam", None) is not None or "lam" in cfg
        ratio_given = (getattr(args, "target_ratio", None) is not None
                       or "target_ratio" in cfg)
        if lam_given and not ratio_given:
            o["target_ratio"] = None
    o["seed"] = args.seed if args.seed is not None else cfg.get("seed", 0)
    o["workers"] = args.workers if args.workers is not None \
        else cfg.get("workers", 1)
    if o["workers"] < 1:
        raise _UsageError("workers must be >= 1")
    return o


def _need(o, *names):
    for name in names:
        if o.get(name) in (None, ""):
            raise _UsageError(f"--{name.replace('_', '-')} is required")
    return [o[name] for name in names]


def _require_files(*paths):
    for path in paths:
        if path:
            with open(path, "rb"):
                pass


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _load_vector(path):
    M = load_matrix(path)
    if M.ndim != 2 or M.shape[1] != 1:
        raise DimensionError(
            f"{path}: expected a single-column matrix, got {M.shape}"
        )
    return M[:, 0]


def _parse_branching(text):
    try:
        branching = [int(tok) for tok in str(text).split(",") if tok.strip()]
    except ValueError:
        raise _UsageError(f"bad branching list {text!r}")
    if not branching:
        raise _UsageError(f"bad branching list {text!r}")
    return branching


def _maybe_structure(path):
    if not path:
        return None
    _require_files(path)
    return groups.load_structure(path)


def _square_side(value, what):
    side = math.isqrt(int(value))
    if side * side != value:
        raise _UsageError(
            f"{what} = {value} is not square; pass explicit dimensions"
        )
    return side


# -- command implementations -------------------------------------------------


def _cmd_groups(o):
    kind, out = _need(o, "kind", "out")
    if kind == "sequence":
        (p,) = _need(o, "p")
        structure = groups.build_sequence_groups(int(p), q=o["q"])
    elif kind == "tree":
        (branching,) = _need(o, "branching")
        tree = groups.TreeSpec.from_branching(_parse_branching(branching))
        structure = groups.build_tree_groups(tree, q=o["q"])
    else:
        h, w = _need(o, "h", "w")
        structure = groups.build_grid_groups(
            int(h), int(w), int(o["e"]), cyclic=bool(o["cyclic"]), q=o["q"]
        )
    if float(o["weight"]) != 1.0:
        structure = groups.GroupStructure(
            structure.p, structure.groups,
            weights=np.full(len(structure), float(o["weight"])),
            q=structure.q,
        )
    groups.save_structure(out, structure)
    print(f"{len(structure)} groups over {structure.p} coordinates -> {out}")
    return 0


def _cmd_prox(o):
    path, threshold, out = _need(o, "input", "threshold", "out")
    _require_files(path)
    structure = _maybe_structure(o["structure"])
    u = _load_vector(path)
    if structure is None:
        result = prox.prox_l1(u, float(threshold))
        desc = "l1"
    else:
        cls = groups.classify(structure)
        if cls == groups.StructureClass.TREE_STRUCTURED:
            result = prox.prox_tree(u, structure, float(threshold))
        elif cls in (groups.StructureClass.SINGLETONS,
                     groups.StructureClass.PARTITION):
            result = prox.prox_separable(u, structure, float(threshold))
        else:
            raise _UsageError(
                "overlapping structures have no direct prox; use `solve`"
            )
        desc = cls.name.lower()
    save_matrix(out, result)
    print(f"prox[{desc}] of {u.size} coefficients -> {out}")
    return 0


def _cmd_solve(o):
    dict_path, signal_path, lam, out = _need(o, "dict", "signal", "lam",
                                             "out")
    _require_files(dict_path, signal_path)
    D = load_matrix(dict_path)
    y = _load_vector(signal_path)
    structure = _maybe_structure(o["structure"])
    try:
        problem = solvers.LassoProblem(y, D, float(lam), structure)
    except DimensionError as e:
        raise DimensionError(f"{e} (dict: {dict_path}, signal: "
                             f"{signal_path})")
    opts = solvers.SolverOptions(
        max_iter=int(o["max_iter"]), tol=float(o["tol"]),
        gamma=float(o["gamma"]), adapt_gamma=bool(o["adapt_gamma"]),
        seed=int(o["seed"]),
    )
    run = {"auto": solvers.solve, "fista": solvers.fista_solve,
           "ista": solvers.ista_solve, "admm": solvers.admm_solve}
    result = run[o["solver"]](problem, opts)
    save_matrix(out, result.alpha)
    report = {
        "objective": float(result.objective_trace[-1]),
        "iterations": int(result.iterations),
        "support_size": int(result.support.size),
        "solver": result.solver,
        "converged": bool(result.converged),
    }
    if result.primal_residual is not None:
        report["primal_residual"] = float(result.primal_residual)
        report["dual_residual"] = float(result.dual_residual)
    if o["report"]:
        _write_json(o["report"], report)
    print(f"solver={report['solver']} objective={report['objective']:.9g} "
          f"iterations={report['iterations']} "
          f"support={report['support_size']} -> {out}")
    return 0


def _train_penalty(o):
    """Assemble the penalty (or plain-l1 atom count) for `train`."""
    if o["structure"]:
        return _maybe_structure(o["structure"]), None
    preset = o.get("preset")
    if preset == "hierarchical":
        tree = groups.TreeSpec.from_branching(
            _parse_branching(o["branching"] or "10,2,2"))
        return groups.build_tree_groups(tree, q=o["q"] or "linf"), None
    if preset == "topographic":
        if o["grid_h"] is not None and o["grid_w"] is not None:
            gh, gw = int(o["grid_h"]), int(o["grid_w"])
        else:
            (atoms,) = _need(o, "atoms")
            gh = gw = _square_side(int(atoms), "atom count")
        return groups.build_grid_groups(gh, gw, int(o["e"]),
                                        cyclic=bool(o["cyclic"]),
                                        q=o["q"] or "l2"), None
    if o["atoms"] is not None:
        return None, int(o["atoms"])
    raise _UsageError("train needs --structure, --preset, or --atoms")


def _cmd_train(o):
    data_path, out = _need(o, "data", "out")
    _require_files(data_path)
    Y = load_matrix(data_path)
    penalty, atoms = _train_penalty(o)
    mode = o["mode"] or "alternating"
    config = dictlearn.TrainConfig(
        mode=mode,
        lam=float(o["lam"]),
        penalty=penalty,
        p=atoms,
        batch_size=int(o["batch_size"]),
        epochs=int(o["epochs"]),
        steps=int(o["steps"]),
        lr0=float(o["lr0"]),
        lr_t0=None if o["lr_t0"] is None else float(o["lr_t0"]),
        seed=int(o["seed"]),
        target_ratio=None if o["target_ratio"] is None
        else float(o["target_ratio"]),
    )
    every = int(o["checkpoint_every"])

    def checkpoint(step, dictionary, lam):
        dictlearn.save_checkpoint(f"{out}.step{step:06d}", dictionary,
                                  lam, step, config.seed)

    if mode == "alternating":
        hooks = {}
        if every:
            hooks["on_epoch"] = lambda ep, dct, codes: (
                checkpoint(ep + 1, dct, config.lam)
                if (ep + 1) % every == 0 else None
            )
        D, report = dictlearn.train_alternating(
            Y, config, workers=o["workers"], **hooks)
    else:
        D, report = dictlearn.train_online(
            Y, config, workers=o["workers"], checkpoint_every=every,
            on_checkpoint=lambda step, dct: checkpoint(
                step, dct, config.lam),
        )
    dictlearn.save_checkpoint(out, D, report.final_lambda, report.rounds,
                              config.seed)
    if o["report"]:
        _write_json(o["report"], {
            "mode": report.mode,
            "final_lambda": float(report.final_lambda),
            "rounds": int(report.rounds),
            "seed": int(report.seed),
            "objective_trace": [float(v) for v in report.objective_trace],
        })
    print(f"trained {D.m}x{D.p} dictionary ({report.mode}, "
          f"{report.rounds} rounds) -> {out}", file=sys.stderr)
    print(f"wall time: {report.wall_time:.2f}s", file=sys.stderr)
    return 0


def _cmd_render(o):
    checkpoint, out = _need(o, "checkpoint", "out")
    _require_files(checkpoint)
    D = load_matrix(checkpoint)
    m, p = D.shape
    atom_h = o["atom_h"]
    atom_w = o["atom_w"]
    if atom_h is None and atom_w is None:
        atom_h = atom_w = _square_side(m, "signal length")
    elif atom_h is None or atom_w is None:
        raise _UsageError("pass both --atom-h and --atom-w or neither")
    rows = o["grid_rows"]
    cols = o["grid_cols"]
    if rows is None and cols is None:
        rows = cols = _square_side(p, "atom count")
    elif rows is None or cols is None:
        raise _UsageError("pass both --grid-rows and --grid-cols or neither")
    image = render_mosaic(D, int(atom_h), int(atom_w), int(rows), int(cols),
                          pad=int(o["pad"]))
    write_pgm(out, image)
    print(f"{image.width}x{image.height} mosaic of {p} atoms -> {out}")
    return 0


def _cmd_calibrate(o):
    dict_path, sample_path = _need(o, "dict", "sample")
    _require_files(dict_path, sample_path)
    D = load_matrix(dict_path)
    sample = load_matrix(sample_path)
    structure = _maybe_structure(o["structure"])
    result = dictlearn.calibrate_lambda(D, sample, structure,
                                        target_ratio=float(o["target"]),
                                        workers=o["workers"])
    print(f"{result.lam:.12g}")
    if o["out"]:
        _write_json(o["out"], {
            "lam": float(result.lam),
            "ratio": float(result.ratio),
            "warning": bool(result.warning),
            "trace": [[float(a), float(b)] for a, b in result.trace],
        })
    if result.warning:
        print(f"warning: mean ratio {result.ratio:.4f} missed the target "
              f"{float(o['target']):.4f}", file=sys.stderr)
        return 4
    return 0


def _cmd_patches(o):
    image_path, out = _need(o, "image", "out")
    _require_files(image_path)
    image = read_pgm(image_path)
    ds = extract_patches(image, int(o["size"]), int(o["count"]), o["seed"])
    if o["center_normalize"]:
        before = ds.n
        ds = center_and_normalize(ds)
        if ds.n != before:
            print(f"dropped {before - ds.n} constant patches",
                  file=sys.stderr)
    if o["whiten"]:
        transform = fit_whitening(ds, eps=float(o["eps"]))
        ds = apply_whitening(ds, transform)
        if o["whitening_out"]:
            save_whitening(o["whitening_out"], transform)
    save_matrix(out, ds.Y)
    print(f"{ds.n} signals of dimension {ds.m} -> {out}")
    return 0


_COMMANDS = {
    "groups": _cmd_groups,
    "prox": _cmd_prox,
    "solve": _cmd_solve,
    "train": _cmd_train,
    "render": _cmd_render,
    "calibrate": _cmd_calibrate,
    "patches": _cmd_patches,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code else 0
    try:
        o = _resolve_options(args)
        return _COMMANDS[args.command](o)
    except _UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: file not found: {e.filename or e}", file=sys.stderr)
        return 3
    except (FormatError, DimensionError, StructureError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except json.JSONDecodeError as e:
        print(f"error: bad JSON input: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
