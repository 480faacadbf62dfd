"""Synthetic panel generation with ground-truth latent labels.

The generator follows the model exactly except at the first wave, which is
always observed: an upper-level class, a dropout class and an initial state
are drawn per subject, states evolve along the class-specific chain, each
later wave survives with probability logistic(xi_u + w'gamma), and failure
truncates the record monotonically.  Per-subject RNG streams spawned from
the master seed make the output reproducible and parallelizable.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .chain import clamp_prob
from .data import PanelData, SubjectRecord
from .errors import SpecMismatchError, ValidationError
from .likelihood import dropout_logdensity, emission_logdensity
from .params import ModelSpec, ParameterSet


@dataclass(frozen=True)
class CovariateDesign:
    """Default covariate generator: wave offset plus subject-level binaries.

    The first column is the wave offset 0..T-1 scaled by ``time_scale``;
    each entry of ``binary_probs`` adds one Bernoulli column drawn once per
    subject and repeated across waves.  ``x_cols``/``w_cols`` select which
    generated columns feed each equation (all of them when None).
    """

    binary_probs: tuple[float, ...] = ()
    include_time: bool = True
    time_scale: float = 1.0
    time_values: tuple[float, ...] | None = None  # explicit per-wave coding
    x_cols: tuple[str, ...] | None = None
    w_cols: tuple[str, ...] | None = None

    @property
    def all_names(self) -> tuple[str, ...]:
        cols = ("time",) if self.include_time else ()
        return cols + tuple(f"b{j + 1}" for j in range(len(self.binary_probs)))

    @property
    def x_names(self) -> tuple[str, ...]:
        return tuple(self.x_cols) if self.x_cols is not None else self.all_names

    @property
    def w_names(self) -> tuple[str, ...]:
        return tuple(self.w_cols) if self.w_cols is not None else self.all_names

    def _indices(self, selected) -> list[int]:
        names = self.all_names
        missing = [c for c in selected if c not in names]
        if missing:
            raise ValidationError(f"unknown covariate column(s): {', '.join(missing)}")
        return [names.index(c) for c in selected]

    def generate(self, rng: np.random.Generator, n: int, T: int):
        cols = []
        if self.include_time:
            if self.time_values is not None:
                if len(self.time_values) < T:
                    raise ValidationError("time_values shorter than the horizon")
                time_col = np.asarray(self.time_values[:T], dtype=float)
            else:
                time_col = np.arange(T) * self.time_scale
            cols.append(np.tile(time_col, (n, 1)))
        for prob in self.binary_probs:
            draw = (rng.random(n) < prob).astype(float)
            cols.append(np.tile(draw[:, None], (1, T)))
        full = np.stack(cols, axis=2) if cols else np.zeros((n, T, 0))
        x = full[:, :, self._indices(self.x_names)]
        w = full[:, :, self._indices(self.w_names)]
        return x, w


@dataclass(frozen=True)
class SimTruth:
    """Latent labels behind one simulated panel."""

    v: np.ndarray                 # (n,) upper-level class, 0-based
    u: np.ndarray                 # (n,) dropout class, 0-based
    z: tuple[np.ndarray, ...]     # per subject, state path of length T_i
    dropout_wave: np.ndarray      # (n,) wave of the dropout event, 0 for completers
    params: ParameterSet
    seed: int


def _default_design(p_x: int, p_w: int) -> CovariateDesign:
    """Wave offset plus as many balanced binaries as the dimensions need."""
    p = max(p_x, p_w)
    design = CovariateDesign(
        include_time=p > 0,
        binary_probs=(0.5,) * max(p - 1, 0),
    )
    names = design.all_names
    return CovariateDesign(
        include_time=design.include_time, binary_probs=design.binary_probs,
        x_cols=names[:p_x], w_cols=names[:p_w],
    )


def simulate_panel(params: ParameterSet, spec: ModelSpec | None, n: int, n_waves: int,
                   covariates=None, seed: int = 0):
    """Draw a synthetic panel; returns ``(PanelData, SimTruth)``.

    ``covariates`` is a :class:`CovariateDesign` or any object with a
    matching ``generate(rng, n, T)`` method and name attributes; by default
    a wave-offset column plus balanced subject-level binaries, as many as
    the parameter dimensions require.
    """
    params.validate()
    if spec is not None and (spec.G, spec.K, spec.H) != (params.G, params.K, params.H):
        raise SpecMismatchError("spec and parameter dimensions disagree")
    design = covariates if covariates is not None else _default_design(params.p_x, params.p_w)
    T = int(n_waves)
    if T < 1 or n < 1:
        raise ValidationError("need n >= 1 subjects and at least one wave")

    master = np.random.SeedSequence(seed)
    streams = master.spawn(n + 1)
    x_full, w_full = design.generate(np.random.default_rng(streams[0]), n, T)
    if x_full.shape[2] != params.p_x or w_full.shape[2] != params.p_w:
        raise SpecMismatchError(
            f"covariate design yields (p_x, p_w) = "
            f"{(x_full.shape[2], w_full.shape[2])}, parameters expect "
            f"{(params.p_x, params.p_w)}"
        )

    law = params.chain_law()
    sigma = np.sqrt(params.sigma2)
    subjects = []
    v_all = np.zeros(n, dtype=int)
    u_all = np.zeros(n, dtype=int)
    z_all = []
    drop_all = np.zeros(n, dtype=int)

    for i in range(n):
        rng = np.random.default_rng(streams[i + 1])
        v = int(rng.choice(params.H, p=params.tau))
        u = int(rng.choice(params.K, p=params.pi[v]))
        z = [int(rng.choice(params.G, p=law.delta[v]))]
        y = [params.zeta[z[0]] + float(x_full[i, 0] @ params.beta)
             + sigma * rng.standard_normal()]
        r = [0]
        dropout_wave = 0
        for t in range(1, T):
            p_stay = expit(params.xi[u] + float(w_full[i, t] @ params.gamma))
            if rng.random() >= p_stay:
                r.append(1)
                dropout_wave = t + 1
                break
            r.append(0)
            z.append(int(rng.choice(params.G, p=law.Q[v, z[-1]])))
            y.append(params.zeta[z[-1]] + float(x_full[i, t] @ params.beta)
                     + sigma * rng.standard_normal())
        T_i = len(y)
        subjects.append(SubjectRecord(
            id=f"s{i + 1:05d}",
            y=np.asarray(y), r=np.asarray(r, dtype=np.int8),
            x=x_full[i, :T_i].copy(), w=w_full[i, :len(r)].copy(),
        ))
        v_all[i], u_all[i] = v, u
        z_all.append(np.asarray(z, dtype=int))
        drop_all[i] = dropout_wave

    data = PanelData(n_waves=T, subjects=tuple(subjects),
                     x_names=tuple(getattr(design, "x_names", ())),
                     w_names=tuple(getattr(design, "w_names", ())))
    truth = SimTruth(v=v_all, u=u_all, z=tuple(z_all), dropout_wave=drop_all,
                     params=params, seed=seed)
    return data, truth


def complete_data_loglik(data: PanelData, truth: SimTruth, params: ParameterSet) -> float:
    """Plug-in joint log-likelihood of data and latent labels.

    Adds the upper-level weight, initial-state and transition terms, the
    Gaussian emission terms, the class-membership term and the dropout
    Bernoulli terms of every subject at its true labels.
    """
    law = params.chain_law()
    log_delta = np.log(clamp_prob(law.delta))
    log_Q = np.log(clamp_prob(law.Q))
    log_pi = np.log(clamp_prob(params.pi))
    log_tau = np.log(clamp_prob(params.tau))

    total = 0.0
    for i, sub in enumerate(data.subjects):
        v, u, z = int(truth.v[i]), int(truth.u[i]), truth.z[i]
        total += log_tau[v] + log_pi[v, u] + log_delta[v, z[0]]
        for t in range(1, len(z)):
            total += log_Q[v, z[t - 1], z[t]]
        for t in range(sub.y.size):
            total += emission_logdensity(sub.y[t], z[t], params, sub.x[t])
        for t in range(sub.r.size):
            total += dropout_logdensity(int(sub.r[t]), u, params, sub.w[t])
    return float(total)


def default_truth(spec: ModelSpec, seed: int = 0) -> ParameterSet:
    """A reasonable interior parameter set for demos and smoke tests."""
    rng = np.random.default_rng(seed)
    G, K, H = spec.G, spec.K, spec.H
    zeta = np.linspace(0.0, 1.5 * max(G - 1, 1), G)
    beta = 0.5 * (-1.0) ** np.arange(spec.p_x) * (1.0 + 0.2 * np.arange(spec.p_x))
    gamma = 0.4 * (-1.0) ** np.arange(spec.p_w)
    xi = np.linspace(0.5, 3.0, K) if K > 1 else np.array([1.5])
    grid = np.arange(G - 1)
    alpha0 = np.log((G - 1.0 - grid) / (grid + 1.0)) if G > 1 else np.zeros(0)
    eta1 = np.vstack([
        np.sort(alpha0 + rng.normal(0.6, 0.1, G - 1))[::-1] + (g - (G - 1) / 2.0) * 0.8
        for g in range(G)
    ]) if G > 1 else np.zeros((1, 0))
    psi0 = np.linspace(1.0, 1.5, H - 1) if H > 1 else np.zeros(0)
    psi1 = np.linspace(0.8, 1.2, H - 1) if H > 1 else np.zeros(0)
    base = np.linspace(0.8, 0.2, K) if K > 1 else np.ones(1)
    pi = np.vstack([np.roll(base, h % K) for h in range(H)])
    pi = pi / pi.sum(axis=1, keepdims=True)
    tau = np.linspace(1.5, 1.0, H)
    tau = tau / tau.sum()
    return ParameterSet(
        beta=beta, zeta=zeta, sigma2=0.25, gamma=gamma, xi=xi,
        eta0_alpha=alpha0, eta0_psi=psi0, eta1_alpha=eta1, eta1_psi=psi1,
        pi=pi, tau=tau,
    )


def write_truth_csv(truth: SimTruth, path) -> None:
    """Sidecar CSV of the latent labels (1-based classes and states)."""
    T = max((z.size for z in truth.z), default=0)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "v", "u", "dropout_wave"]
                        + [f"z{t + 1}" for t in range(T)])
        for i, z in enumerate(truth.z):
            writer.writerow(
                [f"s{i + 1:05d}", truth.v[i] + 1, truth.u[i] + 1,
                 truth.dropout_wave[i]]
                + [z[t] + 1 if t < z.size else "" for t in range(T)]
            )
