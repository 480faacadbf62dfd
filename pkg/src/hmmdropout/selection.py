"""Grid search over latent dimensions, information criteria, sensitivity.

The selection grid fits the model for every requested (G, K, H) and keeps
the cell with the smallest BIC among converged cells, breaking ties toward
the simpler model (smaller H, then G, then K).  The BIC penalty uses the
number of subjects.  A replay path accepts precomputed per-cell criteria so
selection can be exercised without refitting.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .data import PanelData
from .em import FitResult, fit
from .errors import (
    DegenerateFitError,
    InputError,
    ModelError,
    NumericalError,
    SpecMismatchError,
    ValidationError,
)
from .params import ModelSpec


def bic(loglik: float, n_params: int, n: int) -> float:
    """Bayesian information criterion with a subject-count penalty."""
    return -2.0 * loglik + n_params * math.log(n)


def aic(loglik: float, n_params: int) -> float:
    return -2.0 * loglik + 2.0 * n_params


@dataclass(frozen=True)
class GridCell:
    """One fitted (or replayed) cell of the selection grid."""

    G: int
    K: int
    H: int
    bic: float
    aic: float = float("nan")
    loglik: float = float("nan")
    n_params: int = 0
    converged: bool = True
    degenerate_starts: int = 0


@dataclass(frozen=True)
class GridReport:
    cells: tuple[GridCell, ...]
    selected: GridCell


def select(cells) -> GridReport:
    """Pick the converged cell minimizing BIC, ties toward smaller (H, G, K)."""
    cells = tuple(cells)
    eligible = [c for c in cells if c.converged and np.isfinite(c.bic)]
    if not eligible:
        raise ModelError("no converged grid cell to select from")
    selected = min(eligible, key=lambda c: (c.bic, c.H, c.G, c.K))
    return GridReport(cells=cells, selected=selected)


def _fit_cell_task(args):
    data, spec = args
    return _fit_cell(data, spec)


def _fit_cell(data: PanelData, spec: ModelSpec):
    try:
        result = fit(data, spec)
    except (DegenerateFitError, NumericalError, ValidationError) as err:
        cell = GridCell(G=spec.G, K=spec.K, H=spec.H, bic=float("nan"),
                        converged=False)
        return cell, None, str(err)
    cell = GridCell(
        G=spec.G, K=spec.K, H=spec.H, bic=result.bic, aic=result.aic,
        loglik=result.loglik, n_params=result.n_params,
        converged=result.converged,
        degenerate_starts=result.degenerate_starts,
    )
    return cell, result, ""


def fit_grid(data: PanelData, base_spec: ModelSpec, G_values, K_values, H_values,
             *, workers: int = 1):
    """Fit every (G, K, H) cell and select by BIC.

    Returns ``(GridReport, fits)`` where ``fits`` maps (G, K, H) to the
    corresponding :class:`FitResult`; failed cells are recorded in the
    report with ``converged=False`` and skipped by the selection.
    """
    specs = [replace(base_spec, G=G, K=K, H=H)
             for H in H_values for G in G_values for K in K_values]
    if workers > 1 and len(specs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_fit_cell_task, [(data, s) for s in specs]))
    else:
        results = [_fit_cell(data, s) for s in specs]

    cells = [cell for cell, _, _ in results]
    fits = {(c.G, c.K, c.H): res for (c, res, _) in results if res is not None}
    return select(cells), fits


# ---------------------------------------------------------------------------
# Sensitivity comparison (informative vs ignorable missingness)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SensitivityRow:
    name: str
    est_full: float
    est_ignorable: float
    diff: float
    scaled: float


@dataclass(frozen=True)
class SensitivityReport:
    rows: tuple[SensitivityRow, ...]
    bic_full: float
    bic_ignorable: float

    @property
    def bic_diff(self) -> float:
        return self.bic_full - self.bic_ignorable


def _shared_block_names(result: FitResult):
    x_names = list(result.x_names) or [f"x{j + 1}" for j in range(result.spec.p_x)]
    w_names = list(result.w_names) or [f"w{j + 1}" for j in range(result.spec.p_w)]
    th = result.theta_hat
    names = [f"beta_{c}" for c in x_names]
    names += [f"zeta_{g + 1}" for g in range(th.G)]
    names += [f"gamma_{c}" for c in w_names]
    names += [f"xi_{k + 1}" for k in range(th.K)]
    values = np.concatenate([th.beta, th.zeta, th.gamma, th.xi])
    return names, values


def sensitivity_compare(fit_full: FitResult, fit_ignorable: FitResult,
                        se_full=None, se_ignorable=None) -> SensitivityReport:
    """Compare shared blocks of a joint fit against its H = 1 counterpart.

    Both fits must share the data dimensions and (G, K).  Differences are
    reported per parameter; when covariance reports are supplied the
    differences are also scaled by the combined standard error.
    """
    sf, si = fit_full.spec, fit_ignorable.spec
    if si.H != 1:
        raise SpecMismatchError("second fit must have H = 1")
    if (sf.G, sf.K, sf.p_x, sf.p_w) != (si.G, si.K, si.p_x, si.p_w):
        raise SpecMismatchError("fits disagree on (G, K) or covariate dimensions")
    if fit_full.n_subjects != fit_ignorable.n_subjects:
        raise SpecMismatchError("fits were produced from different panels")

    names, v_full = _shared_block_names(fit_full)
    _, v_ign = _shared_block_names(fit_ignorable)

    def se_lookup(report, name):
        if report is None:
            return np.nan
        try:
            return float(report.se[report.names.index(name)])
        except ValueError:
            return np.nan

    rows = []
    for j, name in enumerate(names):
        diff = float(v_full[j] - v_ign[j])
        s1 = se_lookup(se_full, name)
        s2 = se_lookup(se_ignorable, name)
        denom = math.sqrt(
            (0.0 if math.isnan(s1) else s1 ** 2) + (0.0 if math.isnan(s2) else s2 ** 2)
        )
        scaled = diff / denom if denom > 0.0 else float("nan")
        rows.append(SensitivityRow(name=name, est_full=float(v_full[j]),
                                   est_ignorable=float(v_ign[j]),
                                   diff=diff, scaled=scaled))
    return SensitivityReport(rows=tuple(rows), bic_full=fit_full.bic,
                             bic_ignorable=fit_ignorable.bic)


# ---------------------------------------------------------------------------
# CSV interfaces
# ---------------------------------------------------------------------------

def write_grid_csv(report: GridReport, path) -> None:
    """Long-format grid report, one row per cell."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["G", "K", "H", "loglik", "n_params", "bic", "aic",
                         "converged", "degenerate_starts", "selected"])
        for c in report.cells:
            writer.writerow([
                c.G, c.K, c.H, repr(c.loglik), c.n_params, repr(c.bic),
                repr(c.aic), int(c.converged), c.degenerate_starts,
                int(c is report.selected or (c.G, c.K, c.H) == (
                    report.selected.G, report.selected.K, report.selected.H)),
            ])


def write_grid_matrix_csv(report: GridReport, path) -> None:
    """BIC matrix with one row per G and column blocks by (H, K)."""
    Gs = sorted({c.G for c in report.cells})
    Hs = sorted({c.H for c in report.cells})
    Ks = sorted({c.K for c in report.cells})
    by_key = {(c.G, c.K, c.H): c for c in report.cells}
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["G"] + [f"H{h}_K{k}" for h in Hs for k in Ks])
        for g in Gs:
            row = [g]
            for h in Hs:
                for k in Ks:
                    cell = by_key.get((g, k, h))
                    row.append("" if cell is None else f"{cell.bic:.2f}")
            writer.writerow(row)


def read_bic_replay_csv(path) -> list[GridCell]:
    """Read precomputed per-cell criteria (columns G, K, H, bic, ...)."""
    cells = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for col in ("G", "K", "H", "bic"):
            if col not in (reader.fieldnames or []):
                raise InputError(f"replay file must have column '{col}'")
        for line, row in enumerate(reader, start=2):
            try:
                cells.append(GridCell(
                    G=int(row["G"]), K=int(row["K"]), H=int(row["H"]),
                    bic=float(row["bic"]),
                    aic=float(row["aic"]) if row.get("aic") else float("nan"),
                    loglik=float(row["loglik"]) if row.get("loglik") else float("nan"),
                    n_params=int(row["n_params"]) if row.get("n_params") else 0,
                    converged=bool(int(row.get("converged") or 1)),
                ))
            except ValueError as err:
                raise InputError(f"line {line}: {err}")
    return cells
