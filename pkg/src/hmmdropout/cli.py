"""Command-line interface: simulate, fit, select, se, decode, sensitivity.

Exit codes: 0 success, 1 input error, 2 non-convergence, 3 internal
numerical failure.  Every run copies its resolved configuration into the
output directory so results can be reproduced from the artifacts alone.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import inference, selection
from .data import read_panel_csv, write_panel_csv
from .em import FitResult, e_step, fit
from .errors import (
    BoundaryError,
    DegenerateFitError,
    InputError,
    ModelError,
    NumericalError,
    SpecMismatchError,
    ValidationError,
)
from .params import EMControls, ModelSpec
from .params import ParameterSet
from .simulate import CovariateDesign, default_truth, simulate_panel, write_truth_csv

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_NO_CONVERGENCE = 2
EXIT_NUMERICAL = 3


@dataclass
class RunConfig:
    """Resolved settings of one CLI run (config file plus flag overrides)."""

    x_cols: list = field(default_factory=list)
    w_cols: list = field(default_factory=list)
    transform: str | None = None
    ceiling: float = 30.0
    n_waves: int | None = None
    G: int = 1
    K: int = 1
    H: int = 1
    starts: int = 50
    tol: float = 1e-6
    max_iter: int = 1000
    norm: str = "loglik"
    seed: int = 0
    workers: int = 1

    def spec(self, p_x: int, p_w: int) -> ModelSpec:
        return ModelSpec(
            G=self.G, K=self.K, H=self.H, p_x=p_x, p_w=p_w,
            em=EMControls(max_iter=self.max_iter, tol=self.tol, norm=self.norm,
                          n_starts=self.starts, seed=self.seed),
        )

    def write(self, path) -> None:
        cfg = configparser.ConfigParser()
        cfg["data"] = {
            "x": ",".join(self.x_cols), "w": ",".join(self.w_cols),
            "transform": self.transform or "", "ceiling": repr(self.ceiling),
            "n_waves": "" if self.n_waves is None else str(self.n_waves),
        }
        cfg["model"] = {"G": str(self.G), "K": str(self.K), "H": str(self.H)}
        cfg["em"] = {
            "starts": str(self.starts), "tol": repr(self.tol),
            "max_iter": str(self.max_iter), "norm": self.norm,
            "seed": str(self.seed), "workers": str(self.workers),
        }
        with open(path, "w") as fh:
            cfg.write(fh)


def load_config(path) -> RunConfig:
    cfg = configparser.ConfigParser()
    read = cfg.read(path)
    if not read:
        raise InputError(f"config file '{path}' not found or unreadable")
    run = RunConfig()

    def split_cols(text):
        return [c.strip() for c in text.split(",") if c.strip()]

    try:
        if cfg.has_section("data"):
            d = cfg["data"]
            run.x_cols = split_cols(d.get("x", ""))
            run.w_cols = split_cols(d.get("w", ""))
            run.transform = d.get("transform", "") or None
            run.ceiling = d.getfloat("ceiling", 30.0)
            waves = d.get("n_waves", "")
            run.n_waves = int(waves) if waves else None
        if cfg.has_section("model"):
            m = cfg["model"]
            run.G = m.getint("G", run.G)
            run.K = m.getint("K", run.K)
            run.H = m.getint("H", run.H)
        if cfg.has_section("em"):
            e = cfg["em"]
            run.starts = e.getint("starts", run.starts)
            run.tol = e.getfloat("tol", run.tol)
            run.max_iter = e.getint("max_iter", run.max_iter)
            run.norm = e.get("norm", run.norm)
            run.seed = e.getint("seed", run.seed)
            run.workers = e.getint("workers", run.workers)
    except ValueError as err:
        raise InputError(f"config file '{path}': {err}")
    return run


def _apply_overrides(run: RunConfig, args) -> RunConfig:
    for attr, key in (("G", "G"), ("K", "K"), ("H", "H"), ("starts", "starts"),
                      ("tol", "tol"), ("max_iter", "max_iter"), ("seed", "seed"),
                      ("workers", "workers")):
        val = getattr(args, key, None)
        if val is not None:
            setattr(run, attr, val)
    if getattr(args, "mar", False):
        run.H = 1
    return run


def _parse_range(text: str) -> list[int]:
    """'2:5' or '2-5' -> [2, 3, 4, 5]; '3' -> [3]."""
    text = text.strip()
    for sep in (":", "-"):
        if sep in text:
            lo, hi = text.split(sep, 1)
            values = list(range(int(lo), int(hi) + 1))
            if not values:
                raise InputError(f"empty range '{text}'")
            return values
    return [int(text)]


def _load_panel(args, run: RunConfig):
    if not run.x_cols and not run.w_cols:
        raise InputError("config selects no covariate columns ([data] x/w)")
    return read_panel_csv(
        args.input, run.x_cols, run.w_cols,
        transform=run.transform, ceiling=run.ceiling, n_waves=run.n_waves,
    )


def _out_dir(args) -> Path:
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_params_csv(result: FitResult, path, report=None) -> None:
    names, _ = inference._names(result.theta_hat, result.x_names, result.w_names)
    estimates = inference.natural_vector(result.theta_hat)
    se = report.se if report is not None else None
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["name", "estimate"] + (["se"] if se is not None else []))
        for j, name in enumerate(names):
            row = [name, repr(float(estimates[j]))]
            if se is not None:
                row.append(repr(float(se[j])))
            writer.writerow(row)


def _write_trace_csv(result: FitResult, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "loglik"])
        for it, ll in enumerate(result.loglik_trace):
            writer.writerow([it, repr(float(ll))])


def _write_assignments_csv(data, post, path) -> None:
    map_v = np.argmax(post.e, axis=1) + 1
    map_u = np.argmax(post.d_marg, axis=1) + 1
    map_z = np.argmax(post.a_marg, axis=2) + 1
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "wave", "map_state", "map_v", "map_u"])
        for i, sub in enumerate(data.subjects):
            for t in range(sub.y.size):
                writer.writerow([sub.id, t + 1, int(map_z[i, t]),
                                 int(map_v[i]), int(map_u[i])])


def _fit_with_progress(data, spec, run: RunConfig, out: Path, tag: str = "fit"):
    progress_path = out / f"{tag}_progress.jsonl"
    with open(progress_path, "w") as fh:
        def progress(record):
            fh.write(json.dumps(record) + "\n")
        result = fit(data, spec, workers=run.workers,
                     progress=progress if run.workers <= 1 else None)
    return result


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    out = _out_dir(args)
    binary = tuple(args.binary or ())
    design = CovariateDesign(binary_probs=binary)
    if args.params:
        with open(args.params) as fh:
            params = ParameterSet.from_dict(json.load(fh))
    else:
        spec = ModelSpec(G=args.G or 2, K=args.K or 2, H=args.H or 2,
                         p_x=len(design.x_names), p_w=len(design.w_names))
        params = default_truth(spec, seed=args.seed or 0)
    spec = ModelSpec(G=params.G, K=params.K, H=params.H,
                     p_x=params.p_x, p_w=params.p_w)
    data, truth = simulate_panel(params, spec, n=args.n, n_waves=args.T,
                                 covariates=design, seed=args.seed or 0)
    write_panel_csv(data, out / "panel.csv")
    write_truth_csv(truth, out / "truth.csv")
    with open(out / "params_true.json", "w") as fh:
        json.dump(params.to_dict(), fh, indent=1)
    run = RunConfig(x_cols=list(data.x_names), w_cols=list(data.w_names),
                    G=params.G, K=params.K, H=params.H, seed=args.seed or 0)
    run.write(out / "config_used.ini")
    print(f"wrote {data.n_subjects} subjects x {data.n_waves} waves to {out / 'panel.csv'}")
    return EXIT_OK


def cmd_fit(args) -> int:
    run = _apply_overrides(load_config(args.config), args)
    out = _out_dir(args)
    data = _load_panel(args, run)
    spec = run.spec(data.p_x, data.p_w)
    result = _fit_with_progress(data, spec, run, out)

    report = None
    if args.se:
        try:
            report = inference.sandwich_covariance(data, result.theta_hat, spec)
            inference.write_covariance_csv(report, out / "covariance.csv")
            inference.write_se_csv(report, out / "params_se.csv")
        except BoundaryError as err:
            print(f"standard errors skipped: {err}", file=sys.stderr)

    _write_params_csv(result, out / "params.csv", report)
    _write_trace_csv(result, out / "trace.csv")
    post = e_step(data, result.theta_hat)
    _write_assignments_csv(data, post, out / "assignments.csv")
    with open(out / "fit.json", "w") as fh:
        json.dump(result.to_dict(), fh, indent=1)
    run.write(out / "config_used.ini")

    status = "converged" if result.converged else "NOT converged"
    print(f"loglik {result.loglik:.6f}, BIC {result.bic:.2f}, "
          f"{result.n_iter} iterations ({status}), start {result.start_index}")
    return EXIT_OK if result.converged else EXIT_NO_CONVERGENCE


def cmd_select(args) -> int:
    out = _out_dir(args)
    if args.replay:
        cells = selection.read_bic_replay_csv(args.replay)
        report = selection.select(cells)
    else:
        run = _apply_overrides(load_config(args.config), args)
        data = _load_panel(args, run)
        base = run.spec(data.p_x, data.p_w)
        report, fits = selection.fit_grid(
            data, base,
            _parse_range(args.G_range), _parse_range(args.K_range),
            _parse_range(args.H_range), workers=run.workers,
        )
        for key, res in fits.items():
            with open(out / f"fit_G{key[0]}_K{key[1]}_H{key[2]}.json", "w") as fh:
                json.dump(res.to_dict(), fh, indent=1)
        run.write(out / "config_used.ini")
    selection.write_grid_csv(report, out / "grid.csv")
    selection.write_grid_matrix_csv(report, out / "grid_bic_matrix.csv")
    s = report.selected
    with open(out / "selected.json", "w") as fh:
        json.dump({"G": s.G, "K": s.K, "H": s.H, "bic": s.bic}, fh, indent=1)
    print(f"selected G={s.G}, K={s.K}, H={s.H} with BIC {s.bic:.2f}")
    return EXIT_OK


def _load_fit(path) -> FitResult:
    try:
        with open(path) as fh:
            return FitResult.from_dict(json.load(fh))
    except (OSError, KeyError, ValueError) as err:
        raise InputError(f"cannot read fit file '{path}': {err}")


def cmd_se(args) -> int:
    run = _apply_overrides(load_config(args.config), args)
    out = _out_dir(args)
    data = _load_panel(args, run)
    result = _load_fit(args.fit)
    if (data.p_x, data.p_w) != (result.spec.p_x, result.spec.p_w):
        raise SpecMismatchError("panel covariates do not match the fitted model")
    report = inference.sandwich_covariance(data, result.theta_hat, result.spec)
    inference.write_covariance_csv(report, out / "covariance.csv")
    inference.write_se_csv(report, out / "params_se.csv")
    run.write(out / "config_used.ini")
    flag = " (pseudo-inverse)" if report.used_pinv else ""
    print(f"wrote standard errors; condition number {report.condition_number:.3g}{flag}")
    return EXIT_OK


def cmd_decode(args) -> int:
    run = _apply_overrides(load_config(args.config), args)
    out = _out_dir(args)
    data = _load_panel(args, run)
    result = _load_fit(args.fit)
    if (data.p_x, data.p_w) != (result.spec.p_x, result.spec.p_w):
        raise SpecMismatchError("panel covariates do not match the fitted model")
    post = e_step(data, result.theta_hat)
    H, K, G = post.e.shape[1], post.d_marg.shape[1], post.a_marg.shape[2]
    with open(out / "subject_posteriors.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id"] + [f"e_{h + 1}" for h in range(H)]
                        + [f"d_{k + 1}" for k in range(K)])
        for i, sub in enumerate(data.subjects):
            writer.writerow([sub.id] + [repr(float(v)) for v in post.e[i]]
                            + [repr(float(v)) for v in post.d_marg[i]])
    with open(out / "state_posteriors.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "wave"] + [f"a_{g + 1}" for g in range(G)])
        for i, sub in enumerate(data.subjects):
            for t in range(sub.y.size):
                writer.writerow([sub.id, t + 1]
                                + [repr(float(v)) for v in post.a_marg[i, t]])
    _write_assignments_csv(data, post, out / "assignments.csv")
    run.write(out / "config_used.ini")
    print(f"wrote posteriors for {data.n_subjects} subjects")
    return EXIT_OK


def cmd_sensitivity(args) -> int:
    run = _apply_overrides(load_config(args.config), args)
    if run.H <= 1:
        raise InputError("sensitivity needs a configured H > 1 to compare against H = 1")
    out = _out_dir(args)
    data = _load_panel(args, run)

    spec_full = run.spec(data.p_x, data.p_w)
    result_full = _fit_with_progress(data, spec_full, run, out, tag="full")
    spec_ign = run.spec(data.p_x, data.p_w)
    spec_ign = ModelSpec(G=spec_ign.G, K=spec_ign.K, H=1, p_x=spec_ign.p_x,
                         p_w=spec_ign.p_w, em=spec_ign.em)
    result_ign = _fit_with_progress(data, spec_ign, run, out, tag="ignorable")

    rep_full = rep_ign = None
    if args.se:
        rep_full = inference.sandwich_covariance(data, result_full.theta_hat, spec_full)
        rep_ign = inference.sandwich_covariance(data, result_ign.theta_hat, spec_ign)
    comparison = selection.sensitivity_compare(result_full, result_ign,
                                               rep_full, rep_ign)
    with open(out / "sensitivity.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["name", "estimate_full", "estimate_ignorable",
                         "diff", "scaled_diff"])
        for row in comparison.rows:
            writer.writerow([row.name, repr(row.est_full), repr(row.est_ignorable),
                             repr(row.diff), repr(row.scaled)])
    for tag, res in (("full", result_full), ("ignorable", result_ign)):
        with open(out / f"fit_{tag}.json", "w") as fh:
            json.dump(res.to_dict(), fh, indent=1)
    run.write(out / "config_used.ini")
    print(f"BIC full {comparison.bic_full:.2f} vs ignorable "
          f"{comparison.bic_ignorable:.2f} (diff {comparison.bic_diff:+.2f})")
    ok = result_full.converged and result_ign.converged
    return EXIT_OK if ok else EXIT_NO_CONVERGENCE


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_common_model_flags(p):
    p.add_argument("--G", type=int, default=None, help="hidden states")
    p.add_argument("--K", type=int, default=None, help="dropout classes")
    p.add_argument("--H", type=int, default=None, help="upper-level classes")
    p.add_argument("--starts", type=int, default=None)
    p.add_argument("--tol", type=float, default=None)
    p.add_argument("--max-iter", dest="max_iter", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hmmdropout",
        description="Hidden Markov panel models with informative monotone dropout",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic panel")
    p.add_argument("--output-dir", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--T", type=int, required=True)
    p.add_argument("--params", help="ParameterSet JSON; default builds one from G/K/H")
    p.add_argument("--G", type=int)
    p.add_argument("--K", type=int)
    p.add_argument("--H", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--binary", type=float, action="append",
                   help="add a subject-level binary covariate with this probability")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit one model")
    p.add_argument("--input", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--output-dir", required=True)
    _add_common_model_flags(p)
    p.add_argument("--se", action="store_true", help="compute sandwich standard errors")
    p.add_argument("--mar", action="store_true", help="force H = 1 (ignorable fit)")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("select", help="fit a (G, K, H) grid and pick by BIC")
    p.add_argument("--input")
    p.add_argument("--config")
    p.add_argument("--output-dir", required=True)
    p.add_argument("--G", dest="G_range", default="2:5", help="range, e.g. 2:5")
    p.add_argument("--K", dest="K_range", default="2:5")
    p.add_argument("--H", dest="H_range", default="1:3")
    p.add_argument("--starts", type=int, default=None)
    p.add_argument("--tol", type=float, default=None)
    p.add_argument("--max-iter", dest="max_iter", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--replay", help="CSV of precomputed per-cell criteria; skips fitting")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("se", help="sandwich standard errors for a saved fit")
    p.add_argument("--input", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--fit", required=True, help="fit.json from a previous run")
    p.add_argument("--output-dir", required=True)
    p.set_defaults(func=cmd_se)

    p = sub.add_parser("decode", help="posterior class and state memberships")
    p.add_argument("--input", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--fit", required=True)
    p.add_argument("--output-dir", required=True)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("sensitivity", help="compare a joint fit against H = 1")
    p.add_argument("--input", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--output-dir", required=True)
    _add_common_model_flags(p)
    p.add_argument("--se", action="store_true")
    p.set_defaults(func=cmd_sensitivity)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as err:
        print(f"input error: {err}", file=sys.stderr)
        return EXIT_INPUT
    except (InputError, ValidationError, SpecMismatchError) as err:
        print(f"input error: {err}", file=sys.stderr)
        return EXIT_INPUT
    except (NumericalError, DegenerateFitError, BoundaryError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ModelError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
