"""Command-line entry point.

Subcommands: gen | attack | eval | transfer | fourier | boyd | sweep. Every
run is reproducible: all randomness flows from --seed through named
sub-streams, outputs embed the exact configuration, and the only volatile
report field is "timestamp". An optional key=value config file supplies flag
defaults; explicit flags win.

Exit codes: 0 success, 2 validation error, 3 classifier/transport error,
4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import attack as atk
from . import boyd as boyd_mod
from . import fourier as fa
from .ca import (
    FreeKernel,
    Independent,
    InitMap,
    PatternState,
    RectKernel,
    RingKernel,
    Summation,
    expand_init,
    run_ca,
)
from .classifiers import ClassifierError, parse_classifier_spec
from .core import (
    BoundaryMode,
    PngDecodeError,
    TensorFormatError,
    load_tensor,
    pattern_to_png,
    save_tensor,
    seeded_rng,
)

ENV_URL = "TPAT_CLASSIFIER_URL"

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_CLASSIFIER = 3
EXIT_IO = 4


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _json_ready(value):
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, dict):
        return {k: _json_ready(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_ready(v) for v in value]
    return value


def _run_config(args: argparse.Namespace) -> dict:
    skip = {"func", "config"}
    return {k: _json_ready(v) for k, v in sorted(vars(args).items())
            if k not in skip}


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(_json_ready(payload), indent=2, sort_keys=True)
                    + "\n")


def _write_report(args: argparse.Namespace, name: str, body: dict) -> Path:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = {"config": _run_config(args), "timestamp": _now()}
    report.update(body)
    path = out_dir / name
    _write_json(path, report)
    return path


def _save_pattern(out_dir: Path, stem: str, cells: np.ndarray) -> None:
    save_tensor(cells, out_dir / f"{stem}.tpat")
    (out_dir / f"{stem}.png").write_bytes(pattern_to_png(cells))


def _int_list(text: str) -> list:
    try:
        return [int(part) for part in text.split(",") if part.strip() != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers: {text!r}")


def _float_list(text: str) -> list:
    try:
        return [float(part) for part in text.split(",") if part.strip() != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers: {text!r}")


def _classifier_from_args(args: argparse.Namespace, side: int):
    return parse_classifier_spec(
        args.classifier, input_shape=(3, side, side), n_classes=args.n_classes,
        timeout=args.timeout, batch_limit=args.batch_limit,
        url_override=os.environ.get(ENV_URL),
    )


def _tiling(args: argparse.Namespace, side: int) -> tuple:
    tiles, tile_size = args.tiles, args.tile_size
    if tiles is None and tile_size is None:
        tiles = 7 if side % 7 == 0 else 4
    if tiles is None:
        tiles = side // tile_size
    if tile_size is None:
        if side % tiles != 0:
            raise ValueError(f"pattern side {side} is not divisible by {tiles} tiles")
        tile_size = side // tiles
    if tiles * tile_size != side:
        raise ValueError(
            f"tiles*tile_size = {tiles * tile_size} does not match side {side}"
        )
    return tiles, tile_size


# --- gen ---------------------------------------------------------------


def _gen_kernel_spec(args: argparse.Namespace):
    if args.kernel == "ring":
        if args.r_in is None or args.r_out is None:
            raise ValueError("ring kernel needs --r-in and --r-out")
        return RingKernel(args.r_in, args.r_out)
    if args.kernel == "rect":
        if args.l1 is None or args.l2 is None:
            raise ValueError("rect kernel needs --l1 and --l2")
        return RectKernel(args.filter_size, args.l1, args.l2)
    if args.elements is not None:
        elements = np.asarray(args.elements, dtype=float)
    elif args.elements_file is not None:
        elements = np.loadtxt(args.elements_file, dtype=float).reshape(-1)
    else:
        raise ValueError("free kernel needs --elements or --elements-file")
    return FreeKernel(args.filter_size, elements)


def cmd_gen(args: argparse.Namespace) -> int:
    spec = _gen_kernel_spec(args)
    mode = BoundaryMode(args.boundary)
    mix = Summation() if args.mix == "summation" else Independent()
    if args.mix == "summation" and args.channels != 3:
        raise ValueError("summation mixing needs --channels 3")
    rng = seeded_rng(args.seed, "init")
    if args.tiles:
        if args.size % args.tiles != 0:
            raise ValueError(f"--size {args.size} not divisible by --tiles {args.tiles}")
        values = rng.integers(0, 2, size=(args.channels, args.tiles, args.tiles))
        init = expand_init(InitMap(values * 2.0 - 1.0,
                                   tile_size=args.size // args.tiles))
    else:
        cells = rng.integers(0, 2, size=(args.channels, args.size, args.size))
        init = PatternState(cells * 2.0 - 1.0)
    final = run_ca(init, spec, mix, steps=args.steps, mode=mode)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _save_pattern(out_dir, "pattern", final.cells)
    try:
        wavelength = fa.dominant_wavelength(final.cells)
    except fa.NoDominantFrequencyError:
        wavelength = None
    _write_report(args, "report.json", {
        "steps_taken": final.step_count,
        "converged": final.converged,
        "dominant_wavelength": wavelength,
    })
    print(f"pattern written to {out_dir / 'pattern.tpat'} "
          f"(steps={final.step_count}, converged={final.converged})")
    return EXIT_OK


# --- attack ------------------------------------------------------------


def _attack_space(args: argparse.Namespace, side: int) -> atk.AttackSpace:
    tiles, tile_size = _tiling(args, side)
    return atk.AttackSpace(
        variant=args.variant, filter_size=args.filter_size, tiles=tiles,
        tile_size=tile_size, budget=args.budget, mix=args.mix,
        steps=args.steps, init_seed=args.seed,
    )


def _pattern_side(args: argparse.Namespace) -> int:
    if args.input_size is not None:
        return args.input_size
    return 32 if args.classifier.startswith("builtin:") else 224


def _report_dict(report: atk.FoolingReport) -> dict:
    # wall time is honest in the library but would break bytewise
    # reproducibility of written reports
    body = report.to_dict()
    body.pop("wall_time_s", None)
    return body


def cmd_attack(args: argparse.Namespace) -> int:
    side = _pattern_side(args)
    space = _attack_space(args, side)
    classifier = _classifier_from_args(args, side)
    images = atk.make_synthetic_images(args.images, (3, side, side), args.seed)
    theta, report, trace = atk.optimize_attack(
        classifier, images, space, args.queries, seed=args.seed,
        sigma0=args.sigma0, lambda_override=args.population,
        threads=args.threads,
    )

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    eps = atk.render_perturbation(theta, space)
    save_tensor(eps, out_dir / "perturbation.tpat")
    (out_dir / "perturbation.png").write_bytes(pattern_to_png(eps / space.budget))
    _write_json(out_dir / "theta.json", {
        "variant": space.variant,
        "encoded": atk.encode_params(theta, space),
        "space": {
            "filter_size": space.filter_size, "tiles": space.tiles,
            "tile_size": space.tile_size, "budget": space.budget,
            "mix": space.mix, "steps": space.steps,
            "init_seed": space.init_seed,
        },
    })
    with open(out_dir / "trace.jsonl", "w") as fh:
        for row in trace:
            fh.write(json.dumps(_json_ready(row), sort_keys=True) + "\n")
    _write_report(args, "report.json", {"result": _report_dict(report)})
    print(f"fooling rate {report.fooling_rate:.4f} "
          f"after {report.queries_used} queries")
    return EXIT_OK


# --- eval / transfer ---------------------------------------------------


def cmd_eval(args: argparse.Namespace) -> int:
    eps = load_tensor(args.perturbation)
    side = eps.shape[-1]
    classifier = _classifier_from_args(args, side)
    images = atk.make_synthetic_images(args.images, eps.shape, args.seed)
    report = atk.fooling_rate(classifier, images, eps, budget=args.budget,
                              provenance={"perturbation": str(args.perturbation)})
    _write_report(args, "report.json", {"result": _report_dict(report)})
    print(f"fooling rate {report.fooling_rate:.4f} on {report.n_images} images")
    return EXIT_OK


def cmd_transfer(args: argparse.Namespace) -> int:
    eps_list = [load_tensor(path) for path in args.perturbations]
    shapes = {e.shape for e in eps_list}
    if len(shapes) != 1:
        raise ValueError(f"perturbations disagree on shape: {sorted(shapes)}")
    shape = eps_list[0].shape
    specs = [s.strip() for s in args.classifiers.split(",") if s.strip()]
    if not specs:
        raise ValueError("need at least one classifier spec")
    handles = [parse_classifier_spec(
        s, input_shape=shape, n_classes=args.n_classes, timeout=args.timeout,
        batch_limit=args.batch_limit, url_override=os.environ.get(ENV_URL),
    ) for s in specs]
    images = atk.make_synthetic_images(args.images, shape, args.seed)
    matrix = atk.transfer_eval(np.stack(eps_list), handles, images)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "transfer.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["perturbation"] + specs)
        for path, row in zip(args.perturbations, matrix):
            writer.writerow([str(path)] + [f"{v:.6f}" for v in row])
    _write_report(args, "report.json", {
        "classifiers": specs,
        "perturbations": [str(p) for p in args.perturbations],
        "fooling_rates": matrix,
    })
    print(f"transfer matrix written to {out_dir / 'transfer.csv'}")
    return EXIT_OK


# --- fourier -----------------------------------------------------------


def cmd_fourier(args: argparse.Namespace) -> int:
    pattern = load_tensor(args.pattern)
    side = pattern.shape[-1]
    if pattern.shape[0] == 1:
        pattern = np.broadcast_to(pattern, (3,) + pattern.shape[1:]).copy()
    classifier = _classifier_from_args(args, side)
    images = atk.make_synthetic_images(args.images, pattern.shape, args.seed)
    rules = [fa.KeepMaxOnly(), fa.MaxMinusOne(), fa.FractionOfMax(0.9)]
    if args.log_scale:
        rules.append(fa.MaxMinusOne(log_scale=True))
    report, filtered = fa.sfa_report(pattern, classifier, images, rules,
                                     budget=args.budget)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for label, filt in filtered.items():
        save_tensor(filt, out_dir / f"filtered-{label}.tpat")
    _write_report(args, "report.json", report)
    print(f"spectral report over {len(rules)} rules written to "
          f"{out_dir / 'report.json'}")
    return EXIT_OK


# --- boyd --------------------------------------------------------------


def cmd_boyd(args: argparse.Namespace) -> int:
    net = boyd_mod.bundled_toy_net()
    layers = args.layers
    if any(not 1 <= layer <= net.depth for layer in layers):
        raise ValueError(f"layers must lie in 1..{net.depth}, got {layers}")
    batch = seeded_rng(args.seed, "boyd-batch").standard_normal(
        (args.batch,) + net.input_shape)
    diagnostics = boyd_mod.layer_diagnostics(net, batch, layers, seed=args.seed)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for diag in diagnostics:
        _save_pattern(out_dir, f"boyd-layer{diag['layer']}", diag["pattern"])
        rows.append({k: v for k, v in diag.items() if k != "pattern"})

    stencil = np.asarray(args.stencil, dtype=float)
    theorem = [
        boyd_mod.theorem1_mc_check(
            boyd_mod.circulant_from_stencil(stencil, args.theorem_n),
            boyd_mod.DiagMatrixModel(c), args.samples, seed=args.seed,
        )
        for c in (0.25, 0.5, 0.9)
    ]
    _write_report(args, "report.json", {
        "net": {
            "seed": boyd_mod.BUNDLED_NET_SEED,
            "input_shape": list(net.input_shape),
            "depth": net.depth,
        },
        "layers": rows,
        "theorem1": theorem,
    })
    wl = ", ".join(f"L{r['layer']}={r['wavelength']:.2f}" for r in rows)
    print(f"boyd diagnostics written ({wl})")
    return EXIT_OK


# --- sweep -------------------------------------------------------------


def cmd_sweep(args: argparse.Namespace) -> int:
    side = _pattern_side(args)
    tiles, tile_size = _tiling(args, side)
    classifier = _classifier_from_args(args, side)
    images = atk.make_synthetic_images(args.images, (3, side, side), args.seed)
    rows = atk.sweep_filter_size(
        classifier, images, args.sizes, args.queries, seed=args.seed,
        tiles=tiles, tile_size=tile_size, sigma0=args.sigma0,
        threads=args.threads,
    )
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fields = ["filter_size", "fr_kernel_init", "fr_kernel_only_min",
              "fr_kernel_only_mean", "fr_kernel_only_max"]
    with open(out_dir / "sweep.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v)
                             for k, v in row.items()})
    _write_report(args, "report.json", {"rows": rows})
    print(f"sweep over sizes {args.sizes} written to {out_dir / 'sweep.csv'}")
    return EXIT_OK


# --- parser ------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="tpat",
        description="Turing-pattern generation and black-box attack toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    subparsers = {}

    def add(name, func, **kwargs):
        p = sub.add_parser(name, **kwargs)
        p.add_argument("--seed", type=int, default=0,
                       help="master seed; all randomness derives from it")
        p.add_argument("--threads", type=int, default=1,
                       help="worker cap for parallel candidate evaluation")
        p.add_argument("--out-dir", default=".", help="output directory")
        p.add_argument("--config", default=None,
                       help="key=value file supplying flag defaults")
        p.set_defaults(func=func)
        subparsers[name] = p
        return p

    def add_classifier_flags(p):
        p.add_argument("--classifier", default="builtin:42",
                       help="builtin:SEED or remote:URL "
                            f"(URL overridable via ${ENV_URL})")
        p.add_argument("--images", type=int, default=200,
                       help="number of synthetic evaluation images")
        p.add_argument("--n-classes", type=int, default=10)
        p.add_argument("--timeout", type=float, default=30.0)
        p.add_argument("--batch-limit", type=int, default=64)
        p.add_argument("--input-size", type=int, default=None,
                       help="classifier input side (default 32 builtin, 224 remote)")

    p = add("gen", cmd_gen, help="generate a Turing pattern from CA parameters")
    p.add_argument("--kernel", choices=["ring", "rect", "free"], required=True)
    p.add_argument("--r-in", type=float, default=None)
    p.add_argument("--r-out", type=float, default=None)
    p.add_argument("--filter-size", type=int, default=13)
    p.add_argument("--l1", type=int, default=None)
    p.add_argument("--l2", type=int, default=None)
    p.add_argument("--elements", type=_float_list, default=None,
                   help="comma-separated free kernel elements")
    p.add_argument("--elements-file", default=None,
                   help="text file of free kernel elements")
    p.add_argument("--size", type=int, default=224)
    p.add_argument("--channels", type=int, choices=[1, 3], default=1)
    p.add_argument("--tiles", type=int, default=None,
                   help="use a tiled +-1 init map instead of iid cells")
    p.add_argument("--steps", type=int, default=64)
    p.add_argument("--boundary", choices=["periodic", "zero"], default="periodic")
    p.add_argument("--mix", choices=["independent", "summation"],
                   default="independent")

    p = add("attack", cmd_attack, help="optimize an attack against a classifier")
    add_classifier_flags(p)
    p.add_argument("--variant", choices=list(atk.VARIANTS), default="simple")
    p.add_argument("--mix", choices=list(atk.MIXES), default="independent")
    p.add_argument("--filter-size", type=int, default=13)
    p.add_argument("--tiles", type=int, default=None)
    p.add_argument("--tile-size", type=int, default=None)
    p.add_argument("--queries", type=int, default=250,
                   help="objective-evaluation budget")
    p.add_argument("--budget", type=float, default=10.0,
                   help="max-norm perturbation budget")
    p.add_argument("--sigma0", type=float, default=1.0)
    p.add_argument("--steps", type=int, default=64)
    p.add_argument("--population", type=int, default=None,
                   help="CMA-ES population size override")

    p = add("eval", cmd_eval, help="fooling rate of a stored perturbation")
    add_classifier_flags(p)
    p.add_argument("--perturbation", required=True)
    p.add_argument("--budget", type=float, default=10.0)

    p = add("transfer", cmd_transfer,
            help="fooling-rate matrix of perturbations across classifiers")
    p.add_argument("--perturbations", nargs="+", required=True)
    p.add_argument("--classifiers", required=True,
                   help="comma-separated classifier specs")
    p.add_argument("--images", type=int, default=200)
    p.add_argument("--n-classes", type=int, default=10)
    p.add_argument("--timeout", type=float, default=30.0)
    p.add_argument("--batch-limit", type=int, default=64)

    p = add("fourier", cmd_fourier,
            help="spectral threshold analysis of a stored pattern")
    add_classifier_flags(p)
    p.add_argument("--pattern", required=True)
    p.add_argument("--budget", type=float, default=10.0)
    p.add_argument("--log-scale", action="store_true",
                   help="also report the log-scale max-minus-one variant")

    p = add("boyd", cmd_boyd,
            help="power-iteration diagnostics on the bundled toy net")
    p.add_argument("--layers", type=_int_list, default=[1, 2, 3])
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--samples", type=int, default=100000,
                   help="Monte-Carlo samples for the expectation check")
    p.add_argument("--theorem-n", type=int, default=32)
    p.add_argument("--stencil", type=_float_list, default=[2.0, 1.0])

    p = add("sweep", cmd_sweep, help="fooling rate versus kernel size")
    add_classifier_flags(p)
    p.add_argument("--sizes", type=_int_list, default=[3, 7, 13])
    p.add_argument("--queries", type=int, default=60,
                   help="objective-evaluation budget per size")
    p.add_argument("--tiles", type=int, default=None)
    p.add_argument("--tile-size", type=int, default=None)
    p.add_argument("--sigma0", type=float, default=1.0)

    return parser, subparsers


def _apply_config_file(parser, subparsers, argv):
    """First-pass parse to merge key=value config defaults; flags still win."""
    try:
        known, _ = parser.parse_known_args(argv)
    except SystemExit:
        return
    config_path = getattr(known, "config", None)
    command = getattr(known, "command", None)
    if not config_path or command not in subparsers:
        return
    text = Path(config_path).read_text()
    sub = subparsers[command]
    actions = {action.dest: action for action in sub._actions}
    overrides = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{config_path}:{lineno}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        dest = key.replace("-", "_")
        action = actions.get(dest)
        if action is None or dest in ("config", "func"):
            raise ValueError(f"{config_path}:{lineno}: unknown option {key!r}")
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            overrides[dest] = value.lower() in ("1", "true", "yes", "on")
        elif action.type is not None:
            overrides[dest] = action.type(value)
        else:
            overrides[dest] = value
        if action.choices and overrides[dest] not in action.choices:
            raise ValueError(
                f"{config_path}:{lineno}: {key} must be one of {action.choices}"
            )
    sub.set_defaults(**overrides)


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser, subparsers = build_parser()
    try:
        _apply_config_file(parser, subparsers, argv)
        args = parser.parse_args(argv)
        return args.func(args)
    except (TensorFormatError, PngDecodeError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ClassifierError as exc:
        print(f"classifier error: {exc}", file=sys.stderr)
        return EXIT_CLASSIFIER
    except ValueError as exc:
        print(f"invalid arguments: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
