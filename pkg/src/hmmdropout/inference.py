"""Sandwich covariance of the MLE with delta-method back-transform.

All constrained parameters are mapped onto unconstrained coordinates first:
mixing weights and class rows via baseline-category logits, the ordered
state intercepts via (first value, log increments), the variance via its
log, and the threshold blocks via their decrement form.  The covariance on
that scale is J^{-1} K J^{-1}, with per-subject scores from central finite
differences of the subject log-likelihoods and J from differencing the
total score.  The delta method maps the covariance back to the natural
parameters.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import BoundaryError, NumericalError
from .likelihood import _as_packed, observed_loglik, subject_logliks
from .params import ParameterSet
from .chain import pack_eta0, pack_eta1, unpack_eta0, unpack_eta1

#: relative finite-difference step, cube root of machine epsilon
FD_STEP = float(np.finfo(float).eps) ** (1.0 / 3.0)

_COND_LIMIT = 1e12


# ---------------------------------------------------------------------------
# Unconstrained reparameterization
# ---------------------------------------------------------------------------

def _check_interior(params: ParameterSet) -> None:
    if np.any(params.tau <= 0.0) or np.any(params.pi <= 0.0):
        raise BoundaryError("sandwich undefined at boundary: zero mixture mass")
    if params.G > 1 and np.any(np.diff(params.zeta) <= 0.0):
        raise BoundaryError("sandwich undefined at boundary: tied state intercepts")
    if not params.sigma2 > 0.0:
        raise BoundaryError("sandwich undefined at boundary: zero variance")


def to_unconstrained(params: ParameterSet) -> np.ndarray:
    """Free coordinates of a parameter set (errors at boundary points)."""
    _check_interior(params)
    zeta_star = np.concatenate([params.zeta[:1], np.log(np.diff(params.zeta))])
    tau_star = np.log(params.tau[1:] / params.tau[0])
    pi_star = np.log(params.pi[:, 1:] / params.pi[:, :1]).ravel()
    return np.concatenate([
        params.beta,
        zeta_star,
        [np.log(params.sigma2)],
        params.gamma,
        params.xi,
        pack_eta0(params.eta0_alpha, params.eta0_psi),
        pack_eta1(params.eta1_alpha, params.eta1_psi),
        tau_star,
        pi_star,
    ])


def from_unconstrained(theta_star: np.ndarray, dims) -> ParameterSet:
    """Rebuild a parameter set from free coordinates.

    ``dims`` is anything exposing p_x, G, p_w, K and H (a model spec or a
    template parameter set).
    """
    p_x, G, p_w, K, H = dims.p_x, dims.G, dims.p_w, dims.K, dims.H
    v = np.asarray(theta_star, dtype=float)
    pos = 0

    def take(count):
        nonlocal pos
        out = v[pos: pos + count]
        pos += count
        return out

    beta = take(p_x).copy()
    zs = take(G)
    zeta = np.concatenate([zs[:1], zs[:1] + np.cumsum(np.exp(zs[1:]))])
    sigma2 = float(np.exp(take(1)[0]))
    gamma = take(p_w).copy()
    xi = take(K).copy()
    eta0_alpha, eta0_psi = unpack_eta0(take((G - 1) + (H - 1)), G, H)
    eta1_alpha, eta1_psi = unpack_eta1(take(G * (G - 1) + (H - 1)), G, H)
    tau_star = take(H - 1)
    exp_tau = np.concatenate([[1.0], np.exp(tau_star)])
    tau = exp_tau / exp_tau.sum()
    pi_star = take(H * (K - 1)).reshape(H, K - 1)
    exp_pi = np.concatenate([np.ones((H, 1)), np.exp(pi_star)], axis=1)
    pi = exp_pi / exp_pi.sum(axis=1, keepdims=True)
    if pos != v.size:
        raise NumericalError("unconstrained vector has wrong length")
    return ParameterSet(
        beta=beta, zeta=zeta, sigma2=sigma2, gamma=gamma, xi=xi,
        eta0_alpha=eta0_alpha, eta0_psi=eta0_psi,
        eta1_alpha=eta1_alpha, eta1_psi=eta1_psi, pi=pi, tau=tau,
    )


def _names(params: ParameterSet, x_names=None, w_names=None):
    x_names = list(x_names) if x_names else [f"x{j + 1}" for j in range(params.p_x)]
    w_names = list(w_names) if w_names else [f"w{j + 1}" for j in range(params.p_w)]
    G, K, H = params.G, params.K, params.H
    natural = (
        [f"beta_{c}" for c in x_names]
        + [f"zeta_{g + 1}" for g in range(G)]
        + ["sigma2"]
        + [f"gamma_{c}" for c in w_names]
        + [f"xi_{k + 1}" for k in range(K)]
        + [f"alpha0_{g + 2}" for g in range(G - 1)]
        + [f"psi0_{h + 2}" for h in range(H - 1)]
        + [f"alpha1_{g + 1}_{t + 2}" for g in range(G) for t in range(G - 1)]
        + [f"psi1_{h + 2}" for h in range(H - 1)]
        + [f"tau_{h + 1}" for h in range(H)]
        + [f"pi_{h + 1}_{k + 1}" for h in range(H) for k in range(K)]
    )
    def dec_block(prefix):
        if G == 1:
            return []
        return [f"{prefix}_anchor"] + [f"{prefix}_logdec_{t + 3}" for t in range(G - 2)]
    star = (
        [f"beta_{c}" for c in x_names]
        + ["zeta_1"] + [f"zeta_loginc_{g + 2}" for g in range(G - 1)]
        + ["log_sigma2"]
        + [f"gamma_{c}" for c in w_names]
        + [f"xi_{k + 1}" for k in range(K)]
        + dec_block("alpha0")
        + [f"psi0_{h + 2}" for h in range(H - 1)]
        + sum([dec_block(f"alpha1_{g + 1}") for g in range(G)], [])
        + [f"psi1_{h + 2}" for h in range(H - 1)]
        + [f"tau_star_{h + 2}" for h in range(H - 1)]
        + [f"pi_star_{h + 1}_{k + 2}" for h in range(H) for k in range(K - 1)]
    )
    return natural, star


def natural_vector(params: ParameterSet) -> np.ndarray:
    """Natural-scale parameters in reporting order (same order as names)."""
    return params.flatten()


def _softmax_jacobian(prob: np.ndarray) -> np.ndarray:
    """d prob / d (logits 2..m) for baseline-anchored logits.  (m, m-1)."""
    m = prob.size
    jac = np.empty((m, m - 1))
    for h in range(m):
        for col in range(m - 1):
            jac[h, col] = prob[h] * ((1.0 if h == col + 1 else 0.0) - prob[col + 1])
    return jac


def _decrement_jacobian(free: np.ndarray) -> np.ndarray:
    """d alphas / d (anchor, log decrements).  (m, m) lower-triangular."""
    m = free.size
    jac = np.zeros((m, m))
    if m == 0:
        return jac
    jac[:, 0] = 1.0
    for u in range(1, m):
        jac[u:, u] = -np.exp(free[u])
    return jac


def delta_matrix(params: ParameterSet) -> np.ndarray:
    """Jacobian of the natural parameters in the free coordinates."""
    p_x, G, p_w, K, H = params.p_x, params.G, params.p_w, params.K, params.H
    blocks = []

    blocks.append(np.eye(p_x))

    zeta_jac = np.zeros((G, G))
    zeta_jac[:, 0] = 1.0
    incs = np.diff(params.zeta)
    for j in range(1, G):
        zeta_jac[j:, j] = incs[j - 1]
    blocks.append(zeta_jac)

    blocks.append(np.array([[params.sigma2]]))
    blocks.append(np.eye(p_w))
    blocks.append(np.eye(K))

    eta0_free = pack_eta0(params.eta0_alpha, params.eta0_psi)
    n0 = G - 1
    e0 = np.zeros((n0 + (H - 1), n0 + (H - 1)))
    e0[:n0, :n0] = _decrement_jacobian(eta0_free[:n0])
    e0[n0:, n0:] = np.eye(H - 1)
    blocks.append(e0)

    n1 = G * (G - 1)
    e1 = np.zeros((n1 + (H - 1), n1 + (H - 1)))
    for g in range(G):
        sl = slice(g * (G - 1), (g + 1) * (G - 1))
        row_free = pack_eta0(params.eta1_alpha[g], np.zeros(0))
        e1[sl, sl] = _decrement_jacobian(row_free)
    e1[n1:, n1:] = np.eye(H - 1)
    blocks.append(e1)

    blocks.append(_softmax_jacobian(params.tau))

    pi_block = np.zeros((H * K, H * (K - 1)))
    for h in range(H):
        pi_block[h * K:(h + 1) * K, h * (K - 1):(h + 1) * (K - 1)] = \
            _softmax_jacobian(params.pi[h])
    blocks.append(pi_block)

    rows = sum(b.shape[0] for b in blocks)
    cols = sum(b.shape[1] for b in blocks)
    M = np.zeros((rows, cols))
    r = c = 0
    for b in blocks:
        M[r:r + b.shape[0], c:c + b.shape[1]] = b
        r += b.shape[0]
        c += b.shape[1]
    return M


# ---------------------------------------------------------------------------
# Finite-difference scores
# ---------------------------------------------------------------------------

def _steps(theta_star: np.ndarray) -> np.ndarray:
    return FD_STEP * np.maximum(1.0, np.abs(theta_star))


def _loglik_vector_at(packed, theta_star, dims) -> np.ndarray:
    return subject_logliks(packed, from_unconstrained(theta_star, dims))


def subject_scores(data, params: ParameterSet) -> np.ndarray:
    """Central-difference score of every subject at ``params``.  (n, d)."""
    packed = _as_packed(data)
    theta = to_unconstrained(params)
    h = _steps(theta)
    S = np.empty((packed.n, theta.size))
    for j in range(theta.size):
        step = h[j]
        for attempt in range(2):
            up = theta.copy()
            up[j] += step
            dn = theta.copy()
            dn[j] -= step
            try:
                lp = _loglik_vector_at(packed, up, params)
                lm = _loglik_vector_at(packed, dn, params)
            except NumericalError:
                lp = lm = None
            if lp is not None and np.all(np.isfinite(lp)) and np.all(np.isfinite(lm)):
                break
            if attempt == 1:
                raise NumericalError(
                    f"non-finite likelihood when perturbing coordinate {j}"
                )
            step /= 10.0
        S[:, j] = (lp - lm) / (2.0 * step)
    return S


def subject_score(data, i: int, theta_star: np.ndarray, dims) -> np.ndarray:
    """Score contribution of subject ``i`` at free coordinates ``theta_star``."""
    params = from_unconstrained(np.asarray(theta_star, float), dims)
    sub_data = type(data)(n_waves=data.n_waves, subjects=(data.subjects[i],),
                          x_names=data.x_names, w_names=data.w_names)
    return subject_scores(sub_data, params)[0]


def total_score(data, theta_star: np.ndarray, dims) -> np.ndarray:
    """Finite-difference gradient of the total log-likelihood."""
    packed = _as_packed(data)
    theta = np.asarray(theta_star, dtype=float)
    h = _steps(theta)
    grad = np.empty(theta.size)
    for j in range(theta.size):
        up = theta.copy()
        up[j] += h[j]
        dn = theta.copy()
        dn[j] -= h[j]
        lp = observed_loglik(packed, from_unconstrained(up, dims))
        lm = observed_loglik(packed, from_unconstrained(dn, dims))
        grad[j] = (lp - lm) / (2.0 * h[j])
    return grad


# ---------------------------------------------------------------------------
# Sandwich covariance
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CovarianceReport:
    """Sandwich covariance on both scales with reporting metadata."""

    theta_star: np.ndarray
    cov_star: np.ndarray
    cov_theta: np.ndarray
    se: np.ndarray
    names: list
    star_names: list
    estimates: np.ndarray
    condition_number: float
    used_pinv: bool
    negative_variance: list


def sandwich_covariance(data, theta_hat: ParameterSet, spec=None) -> CovarianceReport:
    """Robust covariance J^{-1} K J^{-1} of the fitted parameters.

    K is the sum of per-subject score outer products; J is the symmetrized
    negative Jacobian of the total finite-difference score.  A condition
    number beyond 1e12 switches to the pseudo-inverse and flags the report.
    The natural-scale covariance comes from the analytic delta-method
    Jacobian, and reported standard errors are the square roots of its
    diagonal (negative diagonal entries are flagged, not clipped).
    """
    if spec is not None and (spec.G, spec.K, spec.H) != (theta_hat.G, theta_hat.K, theta_hat.H):
        raise NumericalError("spec dimensions disagree with the parameter set")
    packed = _as_packed(data)
    theta = to_unconstrained(theta_hat)
    d = theta.size

    S = subject_scores(packed, theta_hat)
    K_hat = S.T @ S

    h = _steps(theta)
    J_raw = np.empty((d, d))
    for j in range(d):
        up = theta.copy()
        up[j] += h[j]
        dn = theta.copy()
        dn[j] -= h[j]
        s_up = total_score(packed, up, theta_hat)
        s_dn = total_score(packed, dn, theta_hat)
        J_raw[:, j] = (s_up - s_dn) / (2.0 * h[j])
    J = -0.5 * (J_raw + J_raw.T)

    cond = float(np.linalg.cond(J))
    used_pinv = not np.isfinite(cond) or cond > _COND_LIMIT
    if used_pinv:
        J_inv = np.linalg.pinv(J)
        cov_star = J_inv @ K_hat @ J_inv
    else:
        cov_star = np.linalg.solve(J, np.linalg.solve(J, K_hat).T)
    cov_star = 0.5 * (cov_star + cov_star.T)

    M = delta_matrix(theta_hat)
    cov_theta = M @ cov_star @ M.T
    cov_theta = 0.5 * (cov_theta + cov_theta.T)

    diag = np.diag(cov_theta).copy()
    names, star_names = _names(
        theta_hat,
        getattr(data, "x_names", None),
        getattr(data, "w_names", None),
    )
    tol = 1e-12 * max(float(diag.max(initial=0.0)), 1.0)
    negative = [names[j] for j in np.flatnonzero(diag < -tol)]
    diag[(diag < 0.0) & (diag >= -tol)] = 0.0
    se = np.where(diag >= 0.0, np.sqrt(np.maximum(diag, 0.0)), np.nan)

    return CovarianceReport(
        theta_star=theta, cov_star=cov_star, cov_theta=cov_theta, se=se,
        names=names, star_names=star_names, estimates=natural_vector(theta_hat),
        condition_number=cond, used_pinv=used_pinv, negative_variance=negative,
    )


def write_covariance_csv(report: CovarianceReport, path) -> None:
    """Natural-scale covariance matrix with parameter names."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["name"] + report.names)
        for name, row in zip(report.names, report.cov_theta):
            writer.writerow([name] + [repr(float(v)) for v in row])


def write_se_csv(report: CovarianceReport, path) -> None:
    """Per-parameter estimates and standard errors."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["name", "estimate", "se"])
        for name, est, se in zip(report.names, report.estimates, report.se):
            writer.writerow([name, repr(float(est)), repr(float(se))])
