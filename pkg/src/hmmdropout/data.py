"""Panel data containers, validation and long-format CSV ingestion.

A panel holds n subjects observed over a common planned horizon of T waves.
Subject i contributes T_i observed responses (1 <= T_i <= T) and
T_i* = min(T_i + 1, T) missingness indicators: the indicator of the wave
right after the last observed one records the dropout event, completers
carry T zeros.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError

#: name of the optional response transform y = log(1 + (ceiling - raw)).
LOG_DEFICIT = "log_deficit"


def log_deficit_transform(raw, ceiling: float = 30.0) -> np.ndarray:
    """Map a bounded score onto log(1 + (ceiling - raw))."""
    raw = np.asarray(raw, dtype=float)
    if np.any(raw > ceiling):
        raise InputError(f"response value above the transform ceiling {ceiling}")
    return np.log1p(ceiling - raw)


@dataclass(frozen=True)
class SubjectRecord:
    """One subject: responses, missingness indicators and covariate rows.

    ``y`` has length T_i, ``r`` length T_i* (0 = observed, 1 = dropped out),
    ``x`` is the T_i x p_x design of the longitudinal equation and ``w`` the
    T_i* x p_w design of the dropout equation.
    """

    id: str
    y: np.ndarray
    r: np.ndarray
    x: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).reshape(-1)
        r = np.asarray(self.r, dtype=np.int8).reshape(-1)
        x = np.asarray(self.x, dtype=float)
        w = np.asarray(self.w, dtype=float)
        if x.ndim == 1:
            x = x.reshape(len(y), -1)
        if w.ndim == 1:
            w = w.reshape(len(r), -1)
        for name, arr in (("y", y), ("r", r), ("x", x), ("w", w)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "id", str(self.id))

    @property
    def n_obs(self) -> int:
        return self.y.size


@dataclass(frozen=True)
class PanelData:
    """A validated-shape collection of subject records over T planned waves."""

    n_waves: int
    subjects: tuple[SubjectRecord, ...]
    x_names: tuple[str, ...] = ()
    w_names: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "subjects", tuple(self.subjects))
        object.__setattr__(self, "x_names", tuple(self.x_names))
        object.__setattr__(self, "w_names", tuple(self.w_names))

    @property
    def n_subjects(self) -> int:
        return len(self.subjects)

    @property
    def p_x(self) -> int:
        return self.subjects[0].x.shape[1] if self.subjects else len(self.x_names)

    @property
    def p_w(self) -> int:
        return self.subjects[0].w.shape[1] if self.subjects else len(self.w_names)


@dataclass(frozen=True)
class Violation:
    subject_id: str
    wave: int | None
    message: str


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)
    n_completers: int = 0
    n_dropouts: int = 0

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_panel(data: PanelData) -> ValidationReport:
    """Check every structural invariant of a panel, reporting all failures.

    Returns a report rather than raising, with one entry per violation
    (non-monotone missingness, length mismatches, covariate gaps), each
    carrying the subject id and wave index where applicable.
    """
    report = ValidationReport()
    T = data.n_waves
    add = report.violations.append

    p_x = p_w = None
    for sub in data.subjects:
        T_i = sub.y.size
        T_star = min(T_i + 1, T)
        if not 1 <= T_i <= T:
            add(Violation(sub.id, None, f"{T_i} responses outside 1..{T}"))
            continue
        if np.any((sub.r != 0) & (sub.r != 1)):
            add(Violation(sub.id, None, "missingness indicators must be 0 or 1"))
            continue
        ones = np.flatnonzero(sub.r == 1)
        if ones.size and (ones.size > 1 or ones[0] != sub.r.size - 1):
            # an indicator after the first dropout event breaks monotonicity
            add(Violation(sub.id, int(ones[0]) + 1, "non-monotone missingness"))
        elif sub.r.size != T_star:
            add(Violation(sub.id, None,
                          f"indicator length {sub.r.size}, expected {T_star}"))
        elif T_i < T and not ones.size:
            add(Violation(sub.id, None, "dropout subject lacks the dropout indicator"))
        elif T_i == T and ones.size:
            add(Violation(sub.id, int(ones[0]) + 1,
                          "completer with a dropout indicator set"))
        elif T_i == T:
            report.n_completers += 1
        else:
            report.n_dropouts += 1

        if sub.x.shape[0] != T_i:
            add(Violation(sub.id, None, f"x has {sub.x.shape[0]} rows, expected {T_i}"))
        if sub.w.shape[0] != T_star:
            add(Violation(sub.id, None, f"w has {sub.w.shape[0]} rows, expected {T_star}"))
        if p_x is None:
            p_x, p_w = sub.x.shape[1], sub.w.shape[1]
        else:
            if sub.x.shape[1] != p_x:
                add(Violation(sub.id, None, "inconsistent x column count"))
            if sub.w.shape[1] != p_w:
                add(Violation(sub.id, None, "inconsistent w column count"))
        for name, arr in (("y", sub.y), ("x", sub.x), ("w", sub.w)):
            if arr.size and not np.all(np.isfinite(arr)):
                wave = int(np.argwhere(~np.isfinite(arr))[0][0]) + 1
                add(Violation(sub.id, wave, f"missing or non-finite value in {name}"))
    return report


# ---------------------------------------------------------------------------
# Long-format CSV ingestion and export
# ---------------------------------------------------------------------------

_BASE_COLUMNS = ("id", "wave", "y", "r")


def _parse_value(text: str, line: int, column: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise InputError(f"line {line}: column '{column}' has non-numeric value '{text}'")


def read_panel_csv(
    path,
    x_cols,
    w_cols,
    *,
    transform: str | None = None,
    ceiling: float = 30.0,
    n_waves: int | None = None,
) -> PanelData:
    """Read one-row-per-subject-wave CSV data into a panel.

    Required columns are id, wave, y (empty on the dropout wave), r, plus
    the named covariate columns.  ``x_cols`` and ``w_cols`` select the
    covariates of the longitudinal and dropout equations.  Subjects with
    incomplete covariate information are dropped with a warning.  The
    planned horizon is the largest wave present unless ``n_waves`` says
    otherwise.  ``transform="log_deficit"`` replaces y by
    log(1 + (ceiling - y)).
    """
    x_cols = list(x_cols)
    w_cols = list(w_cols)
    rows_by_id: dict[str, list] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in (*_BASE_COLUMNS, *x_cols, *w_cols):
            if col not in header:
                raise InputError(f"column '{col}' not found in {path}")
        for line, row in enumerate(reader, start=2):
            sid = (row["id"] or "").strip()
            if not sid:
                raise InputError(f"line {line}: empty subject id")
            wave_txt = (row["wave"] or "").strip()
            try:
                wave = int(wave_txt)
            except ValueError:
                raise InputError(f"line {line}: wave '{wave_txt}' is not an integer")
            if wave < 1:
                raise InputError(f"line {line}: wave must be >= 1")
            r_val = int(_parse_value(row["r"], line, "r"))
            if r_val not in (0, 1):
                raise InputError(f"line {line}: r must be 0 or 1")
            y_txt = (row["y"] or "").strip()
            if y_txt == "":
                if r_val != 1:
                    raise InputError(f"line {line}: empty y on an observed wave")
                y_val = np.nan
            else:
                y_val = _parse_value(y_txt, line, "y")
            covs = {}
            complete = True
            for col in set(x_cols) | set(w_cols):
                txt = (row[col] or "").strip()
                if txt == "":
                    covs[col] = np.nan
                    complete = False
                else:
                    covs[col] = _parse_value(txt, line, col)
            rows_by_id.setdefault(sid, []).append((wave, r_val, y_val, covs, complete, line))

    if not rows_by_id:
        raise InputError(f"{path} contains no data rows")

    T = n_waves if n_waves is not None else max(
        wave for rows in rows_by_id.values() for wave, *_ in rows
    )

    subjects = []
    dropped = []
    for sid, rows in rows_by_id.items():
        rows.sort(key=lambda item: item[0])
        waves = [item[0] for item in rows]
        if len(set(waves)) != len(waves):
            raise InputError(f"subject '{sid}': duplicate wave numbers")
        if waves != list(range(1, len(waves) + 1)):
            raise InputError(f"subject '{sid}': waves must be contiguous from 1")
        r = np.array([item[1] for item in rows], dtype=np.int8)
        y = np.array([item[2] for item in rows], dtype=float)
        T_i = len(rows) - 1 if r[-1] == 1 else len(rows)
        incomplete_x = any(
            not np.isfinite(rows[t][3][c]) for t in range(T_i) for c in x_cols
        )
        incomplete_w = any(
            not np.isfinite(rows[t][3][c]) for t in range(len(rows)) for c in w_cols
        )
        if incomplete_x or incomplete_w:
            dropped.append(sid)
            continue
        x = np.array([[rows[t][3][c] for c in x_cols] for t in range(T_i)], dtype=float)
        x = x.reshape(T_i, len(x_cols))
        w = np.array([[rows[t][3][c] for c in w_cols] for t in range(len(rows))], dtype=float)
        w = w.reshape(len(rows), len(w_cols))
        y_obs = y[:T_i]
        if np.any(~np.isfinite(y_obs)):
            raise InputError(f"subject '{sid}': missing y before dropout")
        if transform == LOG_DEFICIT:
            y_obs = log_deficit_transform(y_obs, ceiling)
        elif transform not in (None, "", "none"):
            raise InputError(f"unknown response transform '{transform}'")
        subjects.append(SubjectRecord(id=sid, y=y_obs, r=r, x=x, w=w))

    if dropped:
        warnings.warn(
            f"dropped {len(dropped)} subject(s) with incomplete covariates: "
            + ", ".join(dropped[:10]) + ("..." if len(dropped) > 10 else ""),
            stacklevel=2,
        )
    return PanelData(
        n_waves=T,
        subjects=tuple(subjects),
        x_names=tuple(x_cols),
        w_names=tuple(w_cols),
    )


def write_panel_csv(data: PanelData, path) -> None:
    """Write a panel in the long format that :func:`read_panel_csv` accepts."""
    x_names = list(data.x_names) or [f"x{j + 1}" for j in range(data.p_x)]
    w_names = list(data.w_names) or [f"w{j + 1}" for j in range(data.p_w)]
    columns = list(dict.fromkeys(x_names + w_names))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(_BASE_COLUMNS) + columns)
        for sub in data.subjects:
            T_i = sub.y.size
            for t in range(sub.r.size):
                values = {}
                for j, name in enumerate(x_names):
                    if t < T_i:
                        values[name] = repr(float(sub.x[t, j]))
                for j, name in enumerate(w_names):
                    values.setdefault(name, repr(float(sub.w[t, j])))
                y_txt = repr(float(sub.y[t])) if t < T_i else ""
                writer.writerow(
                    [sub.id, t + 1, y_txt, int(sub.r[t])]
                    + [values.get(name, "") for name in columns]
                )
