"""Densities, scaled forward/backward recursions and the observed log-likelihood.

Subject i contributes

    l_i = log sum_h tau_h * f(y_i | V=h) * sum_k pi_{k|h} * prod_t f_r(r_it | U=k)

where f(y_i | V=h) comes from the hidden-chain forward recursion for
upper-level class h and the dropout product runs over t = 1..T_i*.  All
recursions are scaled per wave; cross-products of the mixture layers are
combined with log-sum-exp.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .chain import clamp_prob
from .data import PanelData, SubjectRecord
from .errors import ModelError, NumericalError
from .params import ParameterSet

LOG_2PI = np.log(2.0 * np.pi)
LOG_TINY = np.log(1e-300)


# ---------------------------------------------------------------------------
# Padded array view of a panel
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PackedPanel:
    """Panel as padded rectangular arrays for vectorized computations.

    ``y``, ``r`` and the designs are padded to the planned horizon T;
    ``ymask``/``rmask`` select the valid waves (t < T_i and t < T_i*).
    Padded cells hold zeros.
    """

    y: np.ndarray       # (n, T)
    ymask: np.ndarray   # (n, T) bool
    x: np.ndarray       # (n, T, p_x)
    r: np.ndarray       # (n, T)
    rmask: np.ndarray   # (n, T) bool
    w: np.ndarray       # (n, T, p_w)
    T_obs: np.ndarray   # (n,)
    T_star: np.ndarray  # (n,)
    ids: tuple[str, ...]

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def T(self) -> int:
        return self.y.shape[1]

    @property
    def p_x(self) -> int:
        return self.x.shape[2]

    @property
    def p_w(self) -> int:
        return self.w.shape[2]


def pack_panel(data: PanelData) -> PackedPanel:
    n, T = data.n_subjects, data.n_waves
    p_x, p_w = data.p_x, data.p_w
    y = np.zeros((n, T))
    ymask = np.zeros((n, T), dtype=bool)
    x = np.zeros((n, T, p_x))
    r = np.zeros((n, T))
    rmask = np.zeros((n, T), dtype=bool)
    w = np.zeros((n, T, p_w))
    T_obs = np.zeros(n, dtype=int)
    T_star = np.zeros(n, dtype=int)
    for i, sub in enumerate(data.subjects):
        ti, ts = sub.y.size, sub.r.size
        T_obs[i], T_star[i] = ti, ts
        y[i, :ti] = sub.y
        ymask[i, :ti] = True
        x[i, :ti] = sub.x
        r[i, :ts] = sub.r
        rmask[i, :ts] = True
        w[i, :ts] = sub.w
    return PackedPanel(y=y, ymask=ymask, x=x, r=r, rmask=rmask, w=w,
                       T_obs=T_obs, T_star=T_star,
                       ids=tuple(s.id for s in data.subjects))


def _as_packed(data) -> PackedPanel:
    return data if isinstance(data, PackedPanel) else pack_panel(data)


# ---------------------------------------------------------------------------
# Elementary densities
# ---------------------------------------------------------------------------

def emission_logdensity(y: float, g: int, params: ParameterSet, x_row=None) -> float:
    """log N(y; zeta_g + x'beta, sigma2) for 0-based state index g."""
    mean = params.zeta[g]
    if params.p_x:
        mean = mean + float(np.dot(np.asarray(x_row, float), params.beta))
    return float(-0.5 * (LOG_2PI + np.log(params.sigma2) + (y - mean) ** 2 / params.sigma2))


def dropout_logdensity(r: int, k: int, params: ParameterSet, w_row=None) -> float:
    """log Bernoulli of one missingness indicator under 0-based class k.

    The retention probability is P(R = 0) = logistic(xi_k + w'gamma); the
    log-probability is clamped at log(1e-300) so limits stay finite.
    """
    lin = params.xi[k]
    if params.p_w:
        lin = lin + float(np.dot(np.asarray(w_row, float), params.gamma))
    lp = -np.logaddexp(0.0, lin) if r == 1 else -np.logaddexp(0.0, -lin)
    return float(max(lp, LOG_TINY))


def _emission_cube(packed: PackedPanel, params: ParameterSet) -> np.ndarray:
    """Per-cell Gaussian log-densities, zero on padded waves.  (n, T, G)."""
    mean_x = packed.x @ params.beta if packed.p_x else np.zeros(packed.y.shape)
    resid = packed.y[:, :, None] - mean_x[:, :, None] - params.zeta[None, None, :]
    ll = -0.5 * (LOG_2PI + np.log(params.sigma2) + resid ** 2 / params.sigma2)
    return np.where(packed.ymask[:, :, None], ll, 0.0)


def dropout_class_logliks(data, params: ParameterSet) -> np.ndarray:
    """Joint dropout log-likelihood per subject and class.  (n, K).

    Sums exactly T_i* Bernoulli terms per subject: the observed waves plus,
    for dropouts, the wave of the dropout event itself.
    """
    packed = _as_packed(data)
    lin_w = packed.w @ params.gamma if packed.p_w else np.zeros(packed.y.shape)
    lin = params.xi[None, None, :] + lin_w[:, :, None]
    lp_stay = -np.logaddexp(0.0, -lin)
    lp_drop = -np.logaddexp(0.0, lin)
    lp = np.where(packed.r[:, :, None] == 1.0, lp_drop, lp_stay)
    lp = np.maximum(lp, LOG_TINY)
    lp = np.where(packed.rmask[:, :, None], lp, 0.0)
    return lp.sum(axis=1)


# ---------------------------------------------------------------------------
# Scaled forward/backward recursions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LatticeSlice:
    """Scaled forward/backward values of one subject for one upper class.

    ``forward[t]`` sums to one; ``backward[T_i - 1]`` is all ones;
    ``log_scale[t]`` are the per-wave log normalizers, so the joint
    log-density of the responses given the class is ``log_scale.sum()`` and
    de-scaling reproduces the unscaled recursions.
    """

    forward: np.ndarray    # (T_i, G)
    backward: np.ndarray   # (T_i, G)
    log_scale: np.ndarray  # (T_i,)


class _Lattice:
    """Vectorized forward/backward quantities for a whole panel."""

    __slots__ = ("law", "b", "shift", "fwd", "bwd", "c", "ly")

    def __init__(self, packed: PackedPanel, params: ParameterSet, need_backward: bool):
        law = params.chain_law()
        H, G = law.H, law.G
        n, T = packed.n, packed.T

        logb = _emission_cube(packed, params)
        shift = np.where(packed.ymask, logb.max(axis=2), 0.0)
        b = np.exp(logb - shift[:, :, None])
        b = np.where(packed.ymask[:, :, None], b, 1.0)

        fwd = np.empty((H, n, T, G))
        c = np.ones((H, n, T))
        for h in range(H):
            a = law.delta[h][None, :] * b[:, 0, :]
            ch = a.sum(axis=1)
            self._check_underflow(ch, packed, wave=0)
            fwd[h, :, 0] = a / ch[:, None]
            c[h, :, 0] = ch
            for t in range(1, T):
                active = packed.ymask[:, t]
                if not active.any():
                    fwd[h, :, t] = fwd[h, :, t - 1]
                    continue
                a = (fwd[h, :, t - 1] @ law.Q[h]) * b[:, t, :]
                ch = a.sum(axis=1)
                self._check_underflow(np.where(active, ch, 1.0), packed, wave=t)
                ch = np.where(active, ch, 1.0)
                fwd[h, :, t] = a / ch[:, None]
                c[h, :, t] = ch

        # padded waves contribute exactly zero: c there is forced to 1
        ly = np.log(c).sum(axis=2).T + shift.sum(axis=1)[:, None]  # (n, H)

        bwd = None
        if need_backward:
            bwd = np.ones((H, n, T, G))
            for h in range(H):
                for t in range(T - 2, -1, -1):
                    v = b[:, t + 1, :] * bwd[h, :, t + 1]
                    bwd[h, :, t] = (v @ law.Q[h].T) / c[h, :, t + 1, None]

        self.law = law
        self.b = b
        self.shift = shift
        self.fwd = fwd
        self.bwd = bwd
        self.c = c
        self.ly = ly

    @staticmethod
    def _check_underflow(ch, packed, wave):
        bad = ~(ch > 0.0) | ~np.isfinite(ch)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise NumericalError(
                f"forward recursion underflow at wave {wave + 1} for subject '{packed.ids[i]}'"
            )


def _pack_single(subject: SubjectRecord) -> PackedPanel:
    T_i = subject.y.size
    T = T_i if subject.r.size == T_i else T_i + 1
    return pack_panel(PanelData(n_waves=T, subjects=(subject,)))


def forward_pass(subject: SubjectRecord, h: int, params: ParameterSet):
    """Scaled forward values and per-wave log normalizers of one subject.

    Returns ``(forward, log_scale)`` with ``forward`` of shape (T_i, G) and
    row sums one; ``log_scale.sum()`` equals the log-density of the
    responses given upper-level class h.
    """
    packed = _pack_single(subject)
    lat = _Lattice(packed, params, need_backward=False)
    T_i = subject.y.size
    log_scale = np.log(lat.c[h, 0, :T_i]) + lat.shift[0, :T_i]
    return lat.fwd[h, 0, :T_i].copy(), log_scale


def backward_pass(subject: SubjectRecord, h: int, params: ParameterSet) -> np.ndarray:
    """Scaled backward values of one subject; last row is all ones."""
    packed = _pack_single(subject)
    lat = _Lattice(packed, params, need_backward=True)
    return lat.bwd[h, 0, : subject.y.size].copy()


def subject_lattice(subject: SubjectRecord, h: int, params: ParameterSet) -> LatticeSlice:
    forward, log_scale = forward_pass(subject, h, params)
    backward = backward_pass(subject, h, params)
    return LatticeSlice(forward=forward, backward=backward, log_scale=log_scale)


# ---------------------------------------------------------------------------
# Observed-data log-likelihood
# ---------------------------------------------------------------------------

def _mixture_logliks(packed: PackedPanel, params: ParameterSet, lat: _Lattice):
    """Per-subject pieces: (n, H) chain+dropout mixture and (n, K) dropout."""
    lr = dropout_class_logliks(packed, params)
    log_pi = np.log(clamp_prob(params.pi))
    mix_r = logsumexp(log_pi[None, :, :] + lr[:, None, :], axis=2)  # (n, H)
    return lat.ly + mix_r, lr


def subject_logliks(data, params: ParameterSet) -> np.ndarray:
    """Observed-data log-likelihood contribution of every subject.  (n,)."""
    packed = _as_packed(data)
    lat = _Lattice(packed, params, need_backward=False)
    mix, _ = _mixture_logliks(packed, params, lat)
    log_tau = np.log(clamp_prob(params.tau))
    li = logsumexp(log_tau[None, :] + mix, axis=1)
    if not np.all(np.isfinite(li)):
        i = int(np.flatnonzero(~np.isfinite(li))[0])
        raise NumericalError(f"non-finite log-likelihood for subject '{packed.ids[i]}'")
    return li


def observed_loglik(data, params: ParameterSet) -> float:
    """Total observed-data log-likelihood."""
    return float(subject_logliks(data, params).sum())


def brute_force_loglik(data: PanelData, params: ParameterSet, max_ops: float = 1e7) -> float:
    """Exact log-likelihood by enumerating every latent configuration.

    Sums over upper-level classes, all state paths and all dropout classes
    with log-sum-exp.  Only feasible on tiny instances; serves as the
    independent oracle for the recursive computation.
    """
    law = params.chain_law()
    G, K, H = params.G, params.K, params.H
    log_delta = np.log(clamp_prob(law.delta))
    log_Q = np.log(clamp_prob(law.Q))
    log_pi = np.log(clamp_prob(params.pi))
    log_tau = np.log(clamp_prob(params.tau))

    total = 0.0
    for sub in data.subjects:
        T_i = sub.y.size
        if G ** T_i * K * H > max_ops:
            raise ModelError(
                f"subject '{sub.id}': {G}^{T_i} x {K} x {H} latent configurations "
                f"exceed the enumeration budget"
            )
        emis = np.array(
            [[emission_logdensity(sub.y[t], g, params, sub.x[t]) for g in range(G)]
             for t in range(T_i)]
        )
        lr = np.array(
            [sum(dropout_logdensity(int(sub.r[t]), k, params, sub.w[t])
                 for t in range(sub.r.size))
             for k in range(K)]
        )
        per_h = np.empty(H)
        for h in range(H):
            path_terms = []
            for path in itertools.product(range(G), repeat=T_i):
                lp = log_delta[h, path[0]] + emis[0, path[0]]
                for t in range(1, T_i):
                    lp += log_Q[h, path[t - 1], path[t]] + emis[t, path[t]]
                path_terms.append(lp)
            per_h[h] = logsumexp(np.array(path_terms))
        li = logsumexp(log_tau + per_h + logsumexp(log_pi + lr[None, :], axis=1))
        total += float(li)
    return total
