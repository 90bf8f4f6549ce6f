"""Command-line surface: simulate grids, select MEMs, fit calibrated Cox models.

Commands
--------
simulate  run a replicate grid and write summary.csv / replicates.csv
select    rank candidate measurement error models on a validation CSV
fit       calibrate a main-study CSV with a validation CSV and report
          estimates, sandwich SEs, CIs, and hazard ratios per increment
report    render previously written summary CSVs as text tables

All commands accept --config pointing at an INI file whose [simulate],
[select], [fit] sections provide defaults; explicit flags override the file.
The effective configuration is echoed to a provenance file next to the
outputs.  Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical
failure.
"""

import argparse
import configparser
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import (__version__, data_model, inference, linalg, mem, model_select,
               simulate, transforms)

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class UsageError(ValueError):
    pass


def parse_spec_token(token, radii):
    """Parse tokens like 'standard', 'only150', 'pca3+int', 'rcs5'."""
    token = token.strip()
    interactions = token.endswith("+int")
    if interactions:
        token = token[:-4]
    if token == "standard":
        return transforms.DesignSpec(variant="standard",
                                     include_interactions=interactions)
    if token.startswith("only"):
        try:
            radius = float(token[4:])
        except ValueError:
            raise UsageError(f"bad radius in spec token '{token}'") from None
        matches = np.flatnonzero(np.asarray(radii) == radius)
        if matches.size != 1:
            raise UsageError(f"radius {radius:g} not in data radii")
        return transforms.DesignSpec(variant="standard",
                                     radius_subset=(int(matches[0]),),
                                     include_interactions=interactions)
    if token.startswith("pca"):
        return transforms.DesignSpec(variant="pca", n_components=int(token[3:]),
                                     include_interactions=interactions)
    if token.startswith("rcs"):
        return transforms.DesignSpec(variant="rcs", n_knots=int(token[3:]),
                                     include_interactions=interactions)
    raise UsageError(f"unknown spec token '{token}'")


def _load_config(path, section):
    if path is None:
        return {}
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise FileNotFoundError(f"config file not found: {path}")
    return dict(parser[section]) if parser.has_section(section) else {}


def _write_provenance(outdir, command, effective):
    payload = {"version": __version__, "command": command, "config": effective}
    (outdir / "provenance.json").write_text(json.dumps(payload, indent=2, default=str))


def _parse_cell(text):
    parts = text.split(",")
    if len(parts) != 4:
        raise UsageError(f"--cell expects p,n1,n2,sigma2v, got '{text}'")
    return float(parts[0]), int(parts[1]), int(parts[2]), float(parts[3])


def cmd_simulate(args):
    file_cfg = _load_config(args.config, "simulate")
    setting = int(args.setting if args.setting is not None
                  else file_cfg.get("setting", 1))
    replicates = int(args.replicates if args.replicates is not None
                     else file_cfg.get("replicates", 1000))
    seed = args.seed if args.seed is not None else file_cfg.get("seed")
    if seed is None:
        raise UsageError("simulate requires --seed (or seed in the config file)")
    seed = int(seed)
    if replicates < 1:
        raise UsageError("--replicates must be >= 1")
    interactions = not args.no_interactions
    make = simulate.setting1 if setting == 1 else simulate.setting2
    if args.cell:
        cells = []
        for text in args.cell:
            p, n1, n2, s2 = _parse_cell(text)
            cells.append(make(n1=n1, n2=n2, event_rate=p, sigma2_v=s2,
                              replicates=replicates, seed=seed,
                              mem_interactions=interactions))
    else:
        cells = simulate.full_grid(setting=setting, replicates=replicates,
                                   seed=seed, mem_interactions=interactions)

    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    summaries, replicate_rows = [], []
    for ci, cfg in enumerate(cells):
        cell_summaries, results = simulate.run_cell(cfg, cell_index=ci,
                                                    threads=args.threads)
        summaries.extend(cell_summaries)
        for r in results:
            replicate_rows.append((cfg, ci, r))

    with open(outdir / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["p", "n1", "n2", "sigma2v", "model",
                         "bias_pct", "sd", "se", "coverage"])
        for s in summaries:
            writer.writerow([f"{s.event_rate:g}", s.n1, s.n2, f"{s.sigma2_v:g}",
                             s.model, f"{s.bias_pct:.4f}", f"{s.sd:.4f}",
                             f"{s.se_mean:.4f}", f"{s.coverage_pct:.2f}"])
    with open(outdir / "summary_detailed.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["p", "n1", "n2", "sigma2v", "model", "bias_pct",
                         "bias_pct_signed", "sd", "se", "coverage",
                         "n_converged", "n_replicates", "flagged"])
        for s in summaries:
            writer.writerow([f"{s.event_rate:g}", s.n1, s.n2, f"{s.sigma2_v:g}",
                             s.model, f"{s.bias_pct:.4f}",
                             f"{s.bias_pct_signed:+.4f}", f"{s.sd:.4f}",
                             f"{s.se_mean:.4f}", f"{s.coverage_pct:.2f}",
                             s.n_converged, s.n_replicates, int(s.flagged)])
    with open(outdir / "replicates.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cell", "p", "n1", "n2", "sigma2v", "replicate",
                         "model", "converged", "beta1_hat", "se1", "ci1_covers",
                         "beta3_hat", "se3", "ci3_covers"])
        for cfg, ci, r in replicate_rows:
            writer.writerow([ci, f"{cfg.event_rate:g}", cfg.n1, cfg.n2,
                             f"{cfg.sigma2_v:g}", r.replicate, r.model,
                             int(r.converged), f"{r.beta1_hat:.8g}",
                             f"{r.se1:.8g}", int(r.ci1_covers),
                             f"{r.beta3_hat:.8g}", f"{r.se3:.8g}",
                             int(r.ci3_covers)])
    _write_provenance(outdir, "simulate", {
        "setting": setting, "replicates": replicates, "seed": seed,
        "threads": args.threads, "interactions": interactions,
        "cells": [f"{c.event_rate:g},{c.n1},{c.n2},{c.sigma2_v:g}" for c in cells],
    })
    print(f"wrote {len(summaries)} summary rows to {outdir / 'summary.csv'}")
    return 0


def cmd_select(args):
    file_cfg = _load_config(args.config, "select")
    seed = int(args.seed if args.seed is not None else file_cfg.get("seed", 0))
    folds = int(args.folds if args.folds is not None else file_cfg.get("folds", 5))
    validation = data_model.read_validation_csv(args.validation_csv)
    if args.specs:
        specs = [parse_spec_token(t, validation.radii) for t in args.specs]
    else:
        specs = model_select.candidate_grid(
            p_z=validation.z.shape[1], p_w=validation.w.shape[1])
    rng = np.random.default_rng(seed)
    metrics = model_select.cv_evaluate(validation, specs, k=folds, rng=rng,
                                       working=args.working)
    rows = []
    for m in metrics:
        rows.append([
            "yes" if m.spec.include_interactions else "no",
            m.spec.variant, m.spec.label(),
            f"{m.mae_mean:.4f}", f"{m.mae_q25:.4f}", f"{m.mae_q50:.4f}",
            f"{m.mae_q75:.4f}", f"{m.mse_mean:.4f}", f"{m.qic:.2f}",
        ] + ([m.failure_reason] if m.failed else [""]))
    header = ["interactions", "model", "type", "mae", "mae25", "mae50",
              "mae75", "mse", "qic", "note"]
    if args.out:
        outdir = Path(args.out)
        outdir.mkdir(parents=True, exist_ok=True)
        with open(outdir / "selection.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            writer.writerows(rows)
        best = next((m for m in metrics if not m.failed), None)
        if best is not None:
            full = mem.fit_gee(validation, best.spec, working=args.working)
            (outdir / "best_transform.json").write_text(
                transforms.transform_to_json(best.spec, full.transform))
        _write_provenance(outdir, "select", {
            "seed": seed, "folds": folds, "working": args.working,
            "validation_csv": str(args.validation_csv),
            "specs": [m.spec.label() for m in metrics],
        })
        print(f"wrote {len(rows)} ranked rows to {outdir / 'selection.csv'}")
    else:
        print(",".join(header))
        for row in rows:
            print(",".join(str(v) for v in row))
    return 0


def cmd_fit(args):
    file_cfg = _load_config(args.config, "fit")
    spec_token = args.spec or file_cfg.get("spec", "pca3+int")
    main = data_model.read_main_csv(args.main_csv)
    validation = data_model.read_validation_csv(args.validation_csv)
    if not np.array_equal(main.radii, validation.radii):
        raise data_model.ParseError(
            "main and validation files disagree on buffer radii: "
            f"{main.radii.tolist()} vs {validation.radii.tolist()}")
    spec = parse_spec_token(spec_token, main.radii)
    memfit = mem.fit_gee(validation, spec, working=args.working)
    cox = inference.fit_calibrated_cox(main, memfit,
                                       check_derivatives=args.check_derivatives)
    w0 = ([float(v) for v in args.at.split(",")] if args.at
          else [0.0] * main.w.shape[1])
    hr, hr_lo, hr_hi = inference.hazard_ratio(cox, args.hr_increment, w0)

    lines = [f"calibrated Cox fit ({spec.label()} measurement error model, "
             f"{memfit.n_subjects} validation subjects)"]
    lines.append(f"{'term':<24}{'estimate':>12}{'se':>12}{'ci_lo':>12}{'ci_hi':>12}")
    for k, name in enumerate(cox.term_names):
        lines.append(f"{name:<24}{cox.beta[k]:>12.5f}{cox.se[k]:>12.5f}"
                     f"{cox.ci_lower[k]:>12.5f}{cox.ci_upper[k]:>12.5f}")
    lines.append(f"HR per {args.hr_increment:g} exposure increment at "
                 f"w0={w0}: {hr:.4f} [{hr_lo:.4f}, {hr_hi:.4f}]")
    text = "\n".join(lines)
    print(text)
    if args.out:
        outdir = Path(args.out)
        outdir.mkdir(parents=True, exist_ok=True)
        with open(outdir / "fit.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["term", "estimate", "se", "ci_lo", "ci_hi"])
            for k, name in enumerate(cox.term_names):
                writer.writerow([name, f"{cox.beta[k]:.8g}", f"{cox.se[k]:.8g}",
                                 f"{cox.ci_lower[k]:.8g}", f"{cox.ci_upper[k]:.8g}"])
        (outdir / "fit.txt").write_text(text + "\n")
        (outdir / "memfit_transform.json").write_text(
            transforms.transform_to_json(spec, memfit.transform))
        _write_provenance(outdir, "fit", {
            "spec": spec.label(), "working": args.working,
            "main_csv": str(args.main_csv),
            "validation_csv": str(args.validation_csv),
            "hr_increment": args.hr_increment, "at": w0,
        })
    return 0


def cmd_report(args):
    indir = Path(args.results_dir)
    summary = indir / "summary.csv"
    if not summary.exists():
        raise FileNotFoundError(
            f"no summary.csv in {indir}; expected files: summary.csv "
            f"(from `calibcox simulate`)")
    with open(summary, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise data_model.ParseError(f"{summary}: empty file")
    header, body = rows[0], rows[1:]
    widths = [max(len(str(r[k])) for r in rows) for k in range(len(header))]
    def fmt(row):
        return "  ".join(str(v).rjust(w) for v, w in zip(row, widths))
    print(fmt(header))
    print("  ".join("-" * w for w in widths))
    for row in body:
        print(fmt(row))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="calibcox",
        description="Measurement-error-corrected Cox modeling with external validation data.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run a Monte Carlo replicate grid")
    sim.add_argument("--config")
    sim.add_argument("--setting", type=int, choices=(1, 2))
    sim.add_argument("--cells", choices=("all",), default="all",
                     help="run the full 24-cell grid (default)")
    sim.add_argument("--cell", action="append",
                     help="run one cell: p,n1,n2,sigma2v (repeatable)")
    sim.add_argument("--replicates", type=int)
    sim.add_argument("--seed", type=int)
    sim.add_argument("--threads", type=int, default=1)
    sim.add_argument("--no-interactions", action="store_true",
                     help="fit the measurement error models without interaction terms")
    sim.add_argument("--out", default="results")
    sim.set_defaults(func=cmd_simulate)

    sel = sub.add_parser("select", help="rank measurement error models by CV")
    sel.add_argument("validation_csv")
    sel.add_argument("--config")
    sel.add_argument("--specs", nargs="*",
                     help="restrict to tokens like standard only150 pca3+int rcs5")
    sel.add_argument("--seed", type=int)
    sel.add_argument("--folds", type=int)
    sel.add_argument("--working", choices=("independence", "exchangeable"),
                     default="exchangeable")
    sel.add_argument("--out")
    sel.set_defaults(func=cmd_select)

    fit = sub.add_parser("fit", help="fit a calibrated Cox model on user data")
    fit.add_argument("main_csv")
    fit.add_argument("--validation", dest="validation_csv", required=True)
    fit.add_argument("--config")
    fit.add_argument("--spec", help="measurement error model token, e.g. pca3+int")
    fit.add_argument("--working", choices=("independence", "exchangeable"),
                     default="exchangeable")
    fit.add_argument("--hr-increment", type=float, default=0.1)
    fit.add_argument("--at", help="comma-separated confounder values for the HR")
    fit.add_argument("--check-derivatives", action="store_true")
    fit.add_argument("--out")
    fit.set_defaults(func=cmd_fit)

    rep = sub.add_parser("report", help="render summary CSVs as text tables")
    rep.add_argument("results_dir")
    rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (data_model.ParseError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (linalg.DecompositionError, mem.ConvergenceError,
            ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
