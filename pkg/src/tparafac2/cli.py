"""Command-line interface: ``generate``, ``fit``, ``benchmark``, ``fms`` and ``inspect``.

Exit codes: 0 success, 2 no feasible run, 3 invalid input (including
unreadable files), 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .aoadmm import NonFiniteLossError, SolverConfig
from .evaluation import NoValidRunError, fms, write_csv
from .experiments import (
    CELL_COLUMNS,
    RUN_COLUMNS,
    SUMMARY_COLUMNS,
    GridSpec,
    MethodSpec,
    fit_starts,
    parse_size,
    run_grid,
    select_best,
    summarize,
)
from .model import check_constraint, load_factors, save_factors
from .synth import MASK_KINDS, ConceptSpec, add_noise, derive_seed, generate, make_mask, random_parafac2
from .tensor import (
    frobenius_norm,
    load_mask,
    load_stack,
    read_manifest,
    save_mask,
    save_stack,
)

logger = logging.getLogger("tparafac2")

EXIT_OK, EXIT_NO_FEASIBLE, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3, 4

# Seed stream keys shared with the benchmark grid so that `generate` and
# `benchmark` with the same seed draw the same data.
_DATA, _NOISE, _MASK = 1, 2, 3


def _parse_mask(text: str) -> dict:
    kind, _, frac = text.partition(":")
    if kind not in MASK_KINDS or not frac:
        raise argparse.ArgumentTypeError(f"mask must look like KIND:FRACTION with KIND in {MASK_KINDS}, got {text!r}")
    try:
        return {"kind": kind, "fraction": float(frac)}
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad mask fraction in {text!r}") from None


def _write_json(path: Path, data) -> None:
    with open(path, "w") as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")


def cmd_generate(args) -> int:
    dims = parse_size(args.size)
    overrides = {}
    if args.spec:
        with open(args.spec) as f:
            overrides = json.load(f)
    spec = ConceptSpec(**{"n_concepts": args.concepts, "dims": dims, **overrides})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config = {
        "seed": args.seed, "datasets": args.datasets, "size": args.size, "concepts": args.concepts,
        "noise": args.noise, "truth": args.truth, "masks": args.mask, "masks_per_kind": args.masks_per_kind,
        "concept_spec": spec.to_dict(),
    }
    for d in range(args.datasets):
        data_seed = derive_seed(args.seed, _DATA, d)
        if args.truth == "concepts":
            clean, truth = generate(spec, seed=data_seed)
        else:
            clean, truth = random_parafac2(dims, args.concepts, seed=data_seed)
        noise_seed = derive_seed(args.seed, _NOISE, d, 0)
        x = add_noise(clean, args.noise, seed=noise_seed) if args.noise > 0 else clean
        root = out / f"dataset_{d:03d}"
        info = {"generator": config, "dataset": d, "data_seed": data_seed, "noise_seed": noise_seed}
        save_stack(x, root / "data", extra=info)
        save_factors(truth, root / "truth", extra=info)
        for e, m in enumerate(args.mask):
            for n in range(args.masks_per_kind):
                mask_seed = derive_seed(args.seed, _MASK, d, e, n)
                w = make_mask(x.dims, m["kind"], m["fraction"], seed=mask_seed)
                name = f"{m['kind']}-{m['fraction']:g}_{n:03d}"
                save_mask(w, root / "masks" / name, extra={**info, "mask": m, "mask_seed": mask_seed,
                                                            "n_missing": w.n_missing})
        logger.info("wrote %s", root)
    _write_json(out / "generate.json", config)
    return EXIT_OK


def _data_dir(path: Path) -> Path:
    """Accept either a dataset directory (with ``data/``) or a data bundle."""
    return path / "data" if (path / "data" / "manifest.json").exists() else path


def _solver_config(args) -> SolverConfig:
    cfg = SolverConfig.from_json(args.config) if args.config else SolverConfig()
    changes = {"R": args.R, "seed": args.seed}
    if args.max_outer is not None:
        changes["max_outer"] = args.max_outer
    return cfg.replace(**changes)


def cmd_fit(args) -> int:
    data_dir = _data_dir(Path(args.data))
    x = load_stack(data_dir)
    mask = load_mask(args.mask) if args.mask else None
    cfg = _solver_config(args)
    spec = MethodSpec(method=args.method, missing=args.missing, lambda_A=args.lambda_a,
                      lambda_B=args.lambda_b, lambda_D=args.lambda_d, ridge_B=args.ridge_b)
    seeds = [derive_seed(args.seed, s) for s in range(args.starts)]
    results = fit_starts(spec, x, mask, cfg, seeds)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    provenance = {"data": str(data_dir), "mask": args.mask, "seed": args.seed, "starts": args.starts,
                  "init_seeds": seeds, "method": {k: v for k, v in vars(spec).items()},
                  "config": cfg.to_dict()}
    runs, timings = [], []
    for r in results:
        if r.report is None:
            runs.append({"start": r.index, "init_seed": r.init_seed, "error": r.error})
            timings.append({"start": r.index, "wall_time": None})
            continue
        rep = r.report.to_dict()
        timings.append({"start": r.index, "wall_time": rep.pop("wall_time"), "n_outer": r.report.n_outer})
        runs.append({"start": r.index, "init_seed": r.init_seed, "degenerate": r.degenerate, **rep})

    try:
        best = select_best(results)
    except NoValidRunError as err:
        _write_json(out / "report.json", {**provenance, "best": None, "runs": runs})
        _write_json(out / "timing.json", {"method": spec.label, "runs": timings})
        print(f"error: {err}", file=sys.stderr)
        return EXIT_NO_FEASIBLE

    chosen = results[best]
    summary = {**provenance, "best": best, "runs": runs}
    if args.truth:
        summary["fms"] = fms(chosen.factors, load_factors(args.truth)).to_dict()
    save_factors(chosen.factors, out / "factors", extra={"seed": args.seed, "start": best,
                                                        "init_seed": chosen.init_seed,
                                                        "method": spec.label, "config": cfg.to_dict()})
    _write_json(out / "report.json", summary)
    _write_json(out / "timing.json", {"method": spec.label, "runs": timings})
    print(json.dumps({"best": best, "loss": chosen.report.final_loss, "n_outer": chosen.report.n_outer,
                      "exit_reason": chosen.report.exit_reason, **({"fms": summary["fms"]["total"]}
                                                                   if "fms" in summary else {})}))
    return EXIT_OK


def _print_table(rows, columns) -> None:
    print("\t".join(columns))
    for row in rows:
        cells = []
        for c in columns:
            v = row.get(c, "")
            cells.append(f"{v:.4f}" if isinstance(v, float) else str(v))
        print("\t".join(cells))


def cmd_benchmark(args) -> int:
    grid = GridSpec.from_json(args.grid)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run_rows, cell_rows = run_grid(grid, parallel=args.parallel)
    summary = summarize(cell_rows)
    write_csv(run_rows, out / "runs.csv", RUN_COLUMNS)
    write_csv(cell_rows, out / "cells.csv", CELL_COLUMNS)
    write_csv(summary, out / "summary.csv", SUMMARY_COLUMNS)
    _write_json(out / "grid.json", {**grid.to_dict(), "resolved_solver": grid.solver_config().to_dict()})
    _print_table(summary, SUMMARY_COLUMNS)
    return EXIT_OK


def cmd_fms(args) -> int:
    report = fms(load_factors(args.estimate), load_factors(args.truth))
    print(json.dumps(report.to_dict(), indent=2))
    return EXIT_OK


def cmd_inspect(args) -> int:
    path = Path(args.path)
    manifest = read_manifest(_data_dir(path))
    kind = manifest.get("kind")
    info = {"kind": kind, "I": manifest["I"], "K": manifest["K"], "J": manifest["J"]}
    if kind == "factors":
        f = load_factors(path)
        info.update(R=f.R, crossproduct_deviation=check_constraint(f).max_crossprod_deviation,
                    C_min=float(f.C.min()))
    elif kind == "mask":
        w = load_mask(path)
        info.update(missing_fraction=w.missing_fraction)
    else:
        x = load_stack(_data_dir(path))
        info.update(frobenius_norm=frobenius_norm(x), min=float(min(s.min() for s in x)),
                    max=float(max(s.max() for s in x)))
    for key in ("seed", "data_seed", "noise_seed", "mask_seed", "method"):
        if key in manifest:
            info[key] = manifest[key]
    print(json.dumps(info, indent=2, default=float))
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    """Argument errors exit with the invalid-input code instead of argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tparafac2", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write synthetic datasets, ground truth and masks")
    g.add_argument("--out", required=True)
    g.add_argument("--datasets", type=int, default=1)
    g.add_argument("--size", default="100x80x25", help="IxJxK")
    g.add_argument("--concepts", type=int, default=3)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--noise", type=float, default=0.0)
    g.add_argument("--mask", type=_parse_mask, action="append", default=[], help="KIND:FRACTION, repeatable")
    g.add_argument("--masks-per-kind", type=int, default=1)
    g.add_argument("--truth", choices=("concepts", "parafac2"), default="concepts")
    g.add_argument("--spec", help="JSON file overriding concept generator fields")
    g.set_defaults(func=cmd_generate)

    f = sub.add_parser("fit", help="fit a model from several random starts")
    f.add_argument("data", help="dataset directory or data bundle")
    f.add_argument("--out", required=True)
    f.add_argument("--mask")
    f.add_argument("--truth", help="ground-truth factor bundle for an FMS report")
    f.add_argument("--method", choices=("als", "aoadmm", "tparafac2"), default="aoadmm")
    f.add_argument("--missing", choices=("none", "em", "rw"), default="none")
    f.add_argument("--R", type=int, default=3)
    f.add_argument("--starts", type=int, default=1)
    f.add_argument("--lambda-a", type=float, default=0.0)
    f.add_argument("--lambda-b", type=float, default=0.0)
    f.add_argument("--lambda-d", type=float, default=0.0)
    f.add_argument("--ridge-b", type=float, default=0.0)
    f.add_argument("--max-outer", type=int)
    f.add_argument("--config", help="solver config JSON")
    f.add_argument("--seed", type=int, default=0)
    f.set_defaults(func=cmd_fit)

    b = sub.add_parser("benchmark", help="run a (dataset x mask x method x start) grid")
    b.add_argument("--grid", required=True, help="grid spec JSON")
    b.add_argument("--out", required=True)
    b.add_argument("--parallel", type=int, default=1)
    b.set_defaults(func=cmd_benchmark)

    m = sub.add_parser("fms", help="factor match score between two factor bundles")
    m.add_argument("estimate")
    m.add_argument("truth")
    m.set_defaults(func=cmd_fms)

    i = sub.add_parser("inspect", help="summarize a data, mask or factor bundle")
    i.add_argument("path")
    i.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NoValidRunError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_NO_FEASIBLE
    except (NonFiniteLossError, np.linalg.LinAlgError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, KeyError, OSError, json.JSONDecodeError, TypeError) as err:
        print(f"invalid input: {err}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
