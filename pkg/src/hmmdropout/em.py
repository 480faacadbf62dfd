"""EM estimation: posterior expectations, block M-steps, multistart driver.

The E-step computes, for every subject, the posterior expectations of the
latent indicators (state occupancy and transitions conditional on each
upper-level class, dropout-class membership conditional on each upper-level
class, and upper-level membership itself).  The M-step splits into four
separable blocks: closed-form mixture weights, the cumulative-logit chain
blocks, a weighted Gaussian regression with ordered state intercepts, and a
weighted logistic regression for the dropout equation.  Each block never
decreases the expected complete-data log-likelihood, so the observed
log-likelihood trace is nondecreasing.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, logsumexp

from .chain import (
    clamp_prob,
    cumulative_logits,
    pack_eta0,
    pack_eta1,
    rows_from_logits,
    unpack_eta0,
    unpack_eta1,
)
from .data import PanelData, validate_panel
from .errors import (
    ComponentDeathError,
    DegenerateFitError,
    NumericalError,
    SpecMismatchError,
    ValidationError,
)
from .likelihood import PackedPanel, _Lattice, _as_packed, _mixture_logliks, pack_panel
from .params import EMControls, ModelSpec, ParameterSet, canonicalize, count_free_parameters

OCCUPANCY_FLOOR = 1e-8
XI_CAP = 30.0


# ---------------------------------------------------------------------------
# E-step
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Posteriors:
    """Posterior expectations of the latent indicators, padded to T waves.

    ``a_cond[i, h, t, g]`` is the posterior of state g at wave t given the
    data and upper-level class h; ``a_trans[i, h, t]`` the joint posterior
    of the transition into wave t+1; ``d_cond[i, h, k]`` the dropout-class
    posterior given class h; ``e[i, h]`` the upper-level posterior.
    Marginals mix the conditionals with ``e``.  Entries at padded waves are
    zero.
    """

    e: np.ndarray        # (n, H)
    d_cond: np.ndarray   # (n, H, K)
    d_marg: np.ndarray   # (n, K)
    a_cond: np.ndarray   # (n, H, T, G)
    a_trans: np.ndarray  # (n, H, T-1, G, G)
    a_marg: np.ndarray   # (n, T, G)
    T_obs: np.ndarray    # (n,)


def _posteriors_packed(packed: PackedPanel, params: ParameterSet):
    lat = _Lattice(packed, params, need_backward=True)
    mix, lr = _mixture_logliks(packed, params, lat)
    n, T = packed.n, packed.T
    H, G, K = params.H, params.G, params.K

    log_tau = np.log(clamp_prob(params.tau))
    joint = log_tau[None, :] + mix                      # (n, H)
    li = logsumexp(joint, axis=1)
    if not np.all(np.isfinite(li)):
        i = int(np.flatnonzero(~np.isfinite(li))[0])
        raise NumericalError(f"degenerate posterior for subject '{packed.ids[i]}'")
    e = np.exp(joint - li[:, None])

    log_pi = np.log(clamp_prob(params.pi))
    d_unnorm = log_pi[None, :, :] + lr[:, None, :]      # (n, H, K)
    d_cond = np.exp(d_unnorm - logsumexp(d_unnorm, axis=2)[:, :, None])

    ymask = packed.ymask
    a_cond = np.empty((n, H, T, G))
    for h in range(H):
        sm = lat.fwd[h] * lat.bwd[h]                    # (n, T, G)
        tot = sm.sum(axis=2)
        if np.any(~(tot > 0.0) & ymask):
            raise NumericalError("degenerate smoothing posterior")
        sm = sm / np.where(tot > 0.0, tot, 1.0)[:, :, None]
        a_cond[:, h] = np.where(ymask[:, :, None], sm, 0.0)

    a_trans = np.zeros((n, H, max(T - 1, 0), G, G))
    if T > 1:
        tmask = ymask[:, 1:]                            # transition into wave t+1 exists
        for h in range(H):
            xi_h = np.einsum(
                "ntg,gj,ntj,ntj->ntgj",
                lat.fwd[h][:, :-1], lat.law.Q[h], lat.b[:, 1:], lat.bwd[h][:, 1:],
            ) / lat.c[h][:, 1:, None, None]
            tot = xi_h.sum(axis=(2, 3))
            if np.any(~(tot > 0.0) & tmask):
                raise NumericalError("degenerate transition posterior")
            xi_h = xi_h / np.where(tot > 0.0, tot, 1.0)[:, :, None, None]
            a_trans[:, h] = np.where(tmask[:, :, None, None], xi_h, 0.0)

    a_marg = np.einsum("nh,nhtg->ntg", e, a_cond)
    d_marg = np.einsum("nh,nhk->nk", e, d_cond)
    post = Posteriors(e=e, d_cond=d_cond, d_marg=d_marg, a_cond=a_cond,
                      a_trans=a_trans, a_marg=a_marg, T_obs=packed.T_obs.copy())
    return post, float(li.sum())


def e_step(data, params: ParameterSet) -> Posteriors:
    """Posterior expectations of all latent indicators at ``params``."""
    post, _ = _posteriors_packed(_as_packed(data), params)
    return post


# ---------------------------------------------------------------------------
# M-step: mixture weights (closed form)
# ---------------------------------------------------------------------------

def m_step_mixture(post: Posteriors):
    """Closed-form update of the upper-level weights and class rows.

    Raises :class:`ComponentDeathError` when an upper-level class has lost
    its posterior mass; the exception carries the weights computed so far.
    """
    tau = post.e.mean(axis=0)
    den = post.e.sum(axis=0)
    if np.any(den < 1e-12):
        h = int(np.argmin(den))
        raise ComponentDeathError(
            f"upper-level class {h + 1} carries no posterior mass", tau=tau
        )
    pi = np.einsum("nh,nhk->hk", post.e, post.d_cond) / den[:, None]
    pi = pi / pi.sum(axis=1, keepdims=True)
    return tau, pi


# ---------------------------------------------------------------------------
# M-step: hidden-chain logit blocks
# ---------------------------------------------------------------------------

def initial_state_stats(post: Posteriors) -> np.ndarray:
    """Weighted first-wave occupancy counts per upper-level class.  (H, G)."""
    return np.einsum("nh,nhg->hg", post.e, post.a_cond[:, :, 0, :])


def transition_stats(post: Posteriors) -> np.ndarray:
    """Weighted transition counts per upper-level class.  (H, G, G)."""
    return np.einsum("nh,nhtgj->hgj", post.e, post.a_trans)


def _block_value_grad(free: np.ndarray, counts: np.ndarray, G: int, H: int):
    """Weighted log-likelihood of cumulative-logit rows and its gradient.

    ``counts`` has shape (H, R, G) for R threshold rows; the free vector is
    R blocks of (first threshold, log decrements) followed by the H-1
    shifts.  Returns (value, gradient).
    """
    R = counts.shape[1]
    m = G - 1
    rows = free[: R * m].reshape(R, m)
    psi_full = np.concatenate([[0.0], free[R * m:]])

    # thresholds per row: alpha[r, 0] = a2, alpha[r, t] = a2 - cumsum(exp(kappa))
    alpha = np.empty((R, m))
    if m:
        alpha[:, 0] = rows[:, 0]
        if m > 1:
            alpha[:, 1:] = rows[:, :1] - np.cumsum(np.exp(rows[:, 1:]), axis=1)

    lam = alpha[None, :, :] + psi_full[:, None, None]       # (H, R, m)
    s = expit(lam)
    p = rows_from_logits(lam)                               # (H, R, G)
    pc = clamp_prob(p)
    value = float((counts * np.log(pc)).sum())

    ratio = counts / pc
    dfdlam = s * (1.0 - s) * (ratio[..., 1:] - ratio[..., :-1])  # (H, R, m)
    by_row = dfdlam.sum(axis=0)                                  # (R, m)

    grad = np.zeros_like(free)
    if m:
        grad_rows = np.empty((R, m))
        grad_rows[:, 0] = by_row.sum(axis=1)
        if m > 1:
            # kappa_u moves every threshold at or beyond u by -exp(kappa_u)
            tail = np.cumsum(by_row[:, ::-1], axis=1)[:, ::-1]
            grad_rows[:, 1:] = -np.exp(rows[:, 1:]) * tail[:, 1:]
        grad[: R * m] = grad_rows.ravel()
    if H > 1:
        grad[R * m:] = dfdlam[1:].sum(axis=(1, 2))
    return value, grad


def _maximize_block(free0, counts, G, H, inner_callback=None):
    R = counts.shape[1]
    m = G - 1

    def negative(free):
        value, grad = _block_value_grad(free, counts, G, H)
        return -value, -grad

    bounds = []
    for _ in range(R):
        bounds.append((-500.0, 500.0))
        bounds.extend([(-40.0, 40.0)] * (m - 1))
    bounds.extend([(-500.0, 500.0)] * (H - 1))

    callback = None
    if inner_callback is not None:
        callback = lambda xk: inner_callback(_block_value_grad(xk, counts, G, H)[0])

    res = minimize(
        negative, free0, jac=True, method="L-BFGS-B", bounds=bounds,
        callback=callback, options={"maxiter": 300, "ftol": 2e-12, "gtol": 1e-9},
    )
    old_value = _block_value_grad(free0, counts, G, H)[0]
    new_value = -res.fun
    if not np.isfinite(new_value) or new_value < old_value - 1e-9:
        warnings.warn("chain M-step optimizer failed to improve; keeping previous block")
        return free0
    return res.x


def _closed_form_rows(counts: np.ndarray, fallback_alpha: np.ndarray) -> np.ndarray:
    """Saturated (H = 1) threshold rows from weighted counts."""
    out = np.array(fallback_alpha, dtype=float, copy=True)
    for idx in range(counts.shape[0]):
        total = counts[idx].sum()
        if total < 1e-12:
            continue  # row never visited: keep current thresholds
        p = np.clip(counts[idx] / total, 1e-10, None)
        out[idx] = cumulative_logits(p / p.sum())
    return out


def m_step_chain(post: Posteriors, eta0_alpha, eta0_psi, eta1_alpha, eta1_psi,
                 *, inner_callback=None):
    """Update the initial-state and transition logit blocks.

    With a single upper-level class the cumulative-logit rows are saturated
    and the update is closed form; otherwise each block is maximized over
    its free coordinates starting from the current value, so the expected
    complete-data chain terms never decrease.
    """
    eta0_alpha = np.asarray(eta0_alpha, float)
    eta1_alpha = np.asarray(eta1_alpha, float)
    G = eta0_alpha.size + 1
    H = post.e.shape[1]
    if G == 1:
        return eta0_alpha.copy(), np.asarray(eta0_psi, float).copy(), \
            eta1_alpha.copy(), np.asarray(eta1_psi, float).copy()

    N0 = initial_state_stats(post)
    N1 = transition_stats(post)

    if H == 1:
        alpha0 = _closed_form_rows(N0, eta0_alpha[None, :])[0]
        alpha1 = _closed_form_rows(N1[0], eta1_alpha)
        return alpha0, np.empty(0), alpha1, np.empty(0)

    free0 = _maximize_block(pack_eta0(eta0_alpha, eta0_psi), N0[:, None, :], G, H,
                            inner_callback=inner_callback)
    free1 = _maximize_block(pack_eta1(eta1_alpha, eta1_psi), N1, G, H,
                            inner_callback=inner_callback)
    alpha0, psi0 = unpack_eta0(free0, G, H)
    alpha1, psi1 = unpack_eta1(free1, G, H)
    return alpha0, psi0, alpha1, psi1


# ---------------------------------------------------------------------------
# M-step: longitudinal block (weighted Gaussian with ordered intercepts)
# ---------------------------------------------------------------------------

def _pava(values: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Weighted pool-adjacent-violators: closest nondecreasing vector."""
    level = values.astype(float).copy()
    weight = weights.astype(float).copy()
    count = np.ones(len(values), dtype=int)
    j = 0
    for i in range(1, len(values)):
        j += 1
        level[j], weight[j], count[j] = values[i], weights[i], 1
        while j > 0 and level[j - 1] > level[j]:
            total = weight[j - 1] + weight[j]
            level[j - 1] = (weight[j - 1] * level[j - 1] + weight[j] * level[j]) / total
            weight[j - 1] = total
            count[j - 1] += count[j]
            j -= 1
    return np.repeat(level[: j + 1], count[: j + 1])


def _collinear_message(A: np.ndarray, names: list[str]) -> str:
    _, sv, vt = np.linalg.svd(A)
    null = vt[-1]
    involved = [names[j] for j in np.flatnonzero(np.abs(null) > 0.1)]
    return "singular weighted design; near-collinear columns: " + ", ".join(involved)


def _longitudinal_update(packed: PackedPanel, post: Posteriors, params: ParameterSet,
                         x_names: list[str] | None = None):
    wts = post.a_marg                                   # (n, T, G), zero when padded
    y = packed.y
    X = packed.x
    mask = packed.ymask.astype(float)
    G, p = wts.shape[2], packed.p_x

    W = wts.sum(axis=(0, 1))                            # (G,)
    b_z = np.einsum("ntg,nt->g", wts, y)
    if p:
        A_zb = np.einsum("ntg,ntp->gp", wts, X)
        A_bb = np.einsum("nt,ntp,ntq->pq", mask, X, X)
        b_b = np.einsum("nt,ntp->p", mask * y, X)
        full = np.block([[np.diag(W), A_zb], [A_zb.T, A_bb]])
        rhs = np.concatenate([b_z, b_b])
        names = [f"state_{g + 1}" for g in range(G)] + list(
            x_names or [f"x{j + 1}" for j in range(p)]
        )
        try:
            sol = np.linalg.solve(full, rhs)
        except np.linalg.LinAlgError:
            raise NumericalError(_collinear_message(full, names))
        if not np.all(np.isfinite(sol)) or np.linalg.cond(full) > 1e12:
            raise NumericalError(_collinear_message(full, names))
        zeta, beta = sol[:G], sol[G:]
    else:
        if np.any(W <= 0.0):
            raise NumericalError("a state carries no posterior weight")
        zeta, beta = b_z / W, np.zeros(0)
        A_zb = np.zeros((G, 0))
        A_bb = np.zeros((0, 0))
        b_b = np.zeros(0)

    def ssr(beta_v, zeta_v):
        mean_x = X @ beta_v if p else np.zeros_like(y)
        resid = y[:, :, None] - mean_x[:, :, None] - zeta_v[None, None, :]
        return float((wts * resid ** 2).sum())

    if np.any(np.diff(zeta) < 0.0):
        # ordering constraint is active: alternate exact block solves from the
        # previous feasible point so the objective can only improve
        beta_v, zeta_v = params.beta.copy(), params.zeta.copy()
        prev = ssr(beta_v, zeta_v)
        for _ in range(200):
            target = (b_z - A_zb @ beta_v) / np.where(W > 0.0, W, 1.0)
            zeta_v = _pava(target, np.where(W > 0.0, W, 1e-300))
            if p:
                beta_v = np.linalg.solve(A_bb, b_b - A_zb.T @ zeta_v)
            cur = ssr(beta_v, zeta_v)
            if prev - cur < 1e-12 * (1.0 + abs(cur)):
                break
            prev = cur
        beta, zeta = beta_v, zeta_v

    n_obs = float(packed.ymask.sum())
    sigma2 = ssr(beta, zeta) / n_obs
    return beta, zeta, sigma2


def m_step_longitudinal(data, post: Posteriors, params: ParameterSet):
    """Weighted Gaussian update of (beta, zeta, sigma2) with zeta ordered."""
    packed = _as_packed(data)
    names = list(getattr(data, "x_names", ())) or None
    return _longitudinal_update(packed, post, params, x_names=names)


# ---------------------------------------------------------------------------
# M-step: dropout block (weighted logistic regression)
# ---------------------------------------------------------------------------

def _dropout_update(packed: PackedPanel, post: Posteriors, params: ParameterSet,
                    w_names: list[str] | None = None):
    K, p = post.d_marg.shape[1], packed.p_w
    gamma = params.gamma.copy()
    xi = params.xi.copy()

    # stack the valid (subject, wave) rows once; class weights repeat per row
    valid = packed.rmask
    subj = np.broadcast_to(np.arange(packed.n)[:, None], valid.shape)[valid]
    W = packed.w[valid]                                  # (N, p)
    stay = (1.0 - packed.r)[valid][:, None]              # (N, 1)
    wgt = post.d_marg[subj]                              # (N, K)
    log_tiny = np.log(1e-300)

    def loglik(lin):
        lp = np.where(stay == 1.0,
                      -np.logaddexp(0.0, -lin), -np.logaddexp(0.0, lin))
        return float((wgt * np.maximum(lp, log_tiny)).sum())

    def linpred(gamma_v, xi_v):
        base = W @ gamma_v if p else 0.0
        return xi_v[None, :] + (base[:, None] if p else 0.0)

    lin = linpred(gamma, xi)
    ll = loglik(lin)
    for _ in range(100):
        prob = expit(lin)
        resid = wgt * (stay - prob)
        curv = wgt * prob * (1.0 - prob)
        grad_xi = resid.sum(axis=0)
        H_xx = curv.sum(axis=0)
        if p:
            grad = np.concatenate([grad_xi, resid.sum(axis=1) @ W])
            H_xg = curv.T @ W
            H_gg = (W * curv.sum(axis=1)[:, None]).T @ W
            hess = np.block([[np.diag(H_xx), H_xg], [H_xg.T, H_gg]])
        else:
            grad = grad_xi
            hess = np.diag(H_xx)
        names = [f"class_{k + 1}" for k in range(K)] + list(
            w_names or [f"w{j + 1}" for j in range(p)]
        )
        try:
            step = np.linalg.solve(hess + 1e-10 * np.eye(len(grad)), grad)
        except np.linalg.LinAlgError:
            raise NumericalError(_collinear_message(hess, names))
        if not np.all(np.isfinite(step)):
            raise NumericalError(_collinear_message(hess, names))

        improved = False
        for _ in range(30):
            xi_new = np.clip(xi + step[:K], -XI_CAP, XI_CAP)
            gamma_new = gamma + step[K:]
            lin_new = linpred(gamma_new, xi_new)
            ll_new = loglik(lin_new)
            if ll_new >= ll - 1e-12:
                improved = True
                break
            step = step / 2.0
        if not improved:
            break
        delta = max(np.max(np.abs(xi_new - xi)), np.max(np.abs(gamma_new - gamma), initial=0.0))
        gain = ll_new - ll
        gamma, xi, lin, ll = gamma_new, xi_new, lin_new, ll_new
        if delta < 1e-10 or gain < 1e-13 * (1.0 + abs(ll)):
            break

    if np.any(np.abs(xi) >= XI_CAP):
        warnings.warn(
            f"dropout class intercept capped at |{XI_CAP}|: possible separation"
        )
    return gamma, xi


def m_step_dropout(data, post: Posteriors, params: ParameterSet):
    """Weighted Bernoulli update of (gamma, xi) by Newton steps with halving."""
    packed = _as_packed(data)
    names = list(getattr(data, "w_names", ())) or None
    return _dropout_update(packed, post, params, w_names=names)


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

def _logistic_fit(X: np.ndarray, s: np.ndarray, iters: int = 30):
    """Plain Newton logistic MLE of P(s = 1) on design X (with intercept)."""
    coef = np.zeros(X.shape[1])
    rate = np.clip(s.mean(), 1e-3, 1.0 - 1e-3)
    coef[0] = np.log(rate / (1.0 - rate))
    for _ in range(iters):
        prob = expit(X @ coef)
        grad = X.T @ (s - prob)
        hess = (X * (prob * (1.0 - prob))[:, None]).T @ X + 1e-8 * np.eye(X.shape[1])
        step = np.linalg.solve(hess, grad)
        coef = np.clip(coef + step, -XI_CAP, XI_CAP)
        if np.max(np.abs(step)) < 1e-8:
            break
    return coef


def initial_parameters(data, spec: ModelSpec, rng: np.random.Generator) -> ParameterSet:
    """One randomized starting point.

    State intercepts come from response quantiles with jitter, the slopes
    from unweighted single-component fits, the dropout intercepts from
    anchors spread around the pooled logistic intercept, the chain blocks
    from jittered near-uniform rows, and the mixing weights from
    concentrated Dirichlet draws around uniform.
    """
    packed = _as_packed(data)
    G, K, H = spec.G, spec.K, spec.H

    ys = packed.y[packed.ymask]
    if spec.p_x:
        Xs = packed.x[packed.ymask]
        design = np.column_stack([np.ones(len(ys)), Xs])
        coef, *_ = np.linalg.lstsq(design, ys, rcond=None)
        beta_hat = coef[1:]
        resid = ys - Xs @ beta_hat
    else:
        beta_hat = np.zeros(0)
        resid = ys.copy()
    scale = max(float(resid.std()), 1e-3)
    quantiles = np.quantile(resid, (np.arange(G) + 0.5) / G)
    zeta = np.sort(quantiles + rng.normal(0.0, 0.1 * scale, G))
    beta = beta_hat + rng.normal(0.0, 0.05 * scale, spec.p_x)
    sigma2 = float(resid.var()) * rng.uniform(0.8, 1.2) + 1e-6

    stay = (1.0 - packed.r)[packed.rmask]
    if spec.p_w:
        Ws = packed.w[packed.rmask]
        coef = _logistic_fit(np.column_stack([np.ones(len(stay)), Ws]), stay)
        c0, gamma_hat = coef[0], coef[1:]
    else:
        rate = np.clip(stay.mean(), 1e-3, 1.0 - 1e-3)
        c0, gamma_hat = np.log(rate / (1.0 - rate)), np.zeros(0)
    gamma = gamma_hat + rng.normal(0.0, 0.1, spec.p_w)
    spread = np.linspace(-2.0, 2.0, K) if K > 1 else np.zeros(1)
    xi = np.sort(c0 + spread + rng.normal(0.0, 0.25, K))
    xi = xi + 1e-6 * np.arange(K)  # break exact ties

    grid = np.arange(G - 1)
    alpha_uniform = np.log((G - 1.0 - grid) / (grid + 1.0)) if G > 1 else np.zeros(0)
    def jittered_row():
        if G == 1:
            return np.zeros(0)
        free = pack_eta0(alpha_uniform, np.zeros(0))
        free = free + rng.normal(0.0, 0.3, free.size)
        return unpack_eta0(free, G, 1)[0]

    eta0_alpha = jittered_row()
    eta1_alpha = np.vstack([jittered_row() for _ in range(G)]) if G > 1 else np.zeros((1, 0))
    eta0_psi = rng.normal(0.0, 0.5, H - 1)
    eta1_psi = rng.normal(0.0, 0.5, H - 1)

    tau = rng.dirichlet(np.full(H, 20.0))
    pi = rng.dirichlet(np.full(K, 20.0), size=H)
    return ParameterSet(
        beta=beta, zeta=zeta, sigma2=sigma2, gamma=gamma, xi=xi,
        eta0_alpha=eta0_alpha, eta0_psi=eta0_psi,
        eta1_alpha=eta1_alpha, eta1_psi=eta1_psi, pi=pi, tau=tau,
    )


# ---------------------------------------------------------------------------
# Fit driver
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FitResult:
    """Outcome of a multistart EM run."""

    theta_hat: ParameterSet
    loglik: float
    n_iter: int
    converged: bool
    loglik_trace: np.ndarray
    start_index: int
    bic: float
    aic: float
    n_params: int
    n_subjects: int
    spec: ModelSpec
    start_logliks: list
    start_traces: list
    degenerate_starts: int
    x_names: tuple = ()
    w_names: tuple = ()

    def to_dict(self) -> dict:
        return {
            "model": {"G": self.spec.G, "K": self.spec.K, "H": self.spec.H,
                      "p_x": self.spec.p_x, "p_w": self.spec.p_w},
            "em": {"max_iter": self.spec.em.max_iter, "tol": self.spec.em.tol,
                   "norm": self.spec.em.norm, "n_starts": self.spec.em.n_starts,
                   "seed": self.spec.em.seed},
            "params": self.theta_hat.to_dict(),
            "loglik": self.loglik,
            "n_iter": self.n_iter,
            "converged": self.converged,
            "loglik_trace": np.asarray(self.loglik_trace).tolist(),
            "start_index": self.start_index,
            "bic": self.bic,
            "aic": self.aic,
            "n_params": self.n_params,
            "n_subjects": self.n_subjects,
            "degenerate_starts": self.degenerate_starts,
            "x_names": list(self.x_names),
            "w_names": list(self.w_names),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FitResult":
        spec = ModelSpec(G=d["model"]["G"], K=d["model"]["K"], H=d["model"]["H"],
                         p_x=d["model"]["p_x"], p_w=d["model"]["p_w"],
                         em=EMControls(**d["em"]))
        return cls(
            theta_hat=ParameterSet.from_dict(d["params"]),
            loglik=d["loglik"], n_iter=d["n_iter"], converged=d["converged"],
            loglik_trace=np.asarray(d["loglik_trace"]), start_index=d["start_index"],
            bic=d["bic"], aic=d["aic"], n_params=d["n_params"],
            n_subjects=d["n_subjects"], spec=spec,
            start_logliks=[], start_traces=[],
            degenerate_starts=d.get("degenerate_starts", 0),
            x_names=tuple(d.get("x_names", ())), w_names=tuple(d.get("w_names", ())),
        )


@dataclass
class _StartOutcome:
    params: ParameterSet
    trace: np.ndarray
    converged: bool
    degenerate: bool
    n_iter: int
    message: str = ""


def _block_changes(old: ParameterSet, new: ParameterSet) -> dict:
    sup = lambda a, b: float(np.max(np.abs(np.asarray(a) - np.asarray(b)), initial=0.0))
    return {
        "d_beta": sup(old.beta, new.beta),
        "d_zeta": sup(old.zeta, new.zeta),
        "d_sigma2": abs(old.sigma2 - new.sigma2),
        "d_gamma": sup(old.gamma, new.gamma),
        "d_xi": sup(old.xi, new.xi),
        "d_eta": max(
            sup(old.eta0_alpha, new.eta0_alpha), sup(old.eta0_psi, new.eta0_psi),
            sup(old.eta1_alpha, new.eta1_alpha), sup(old.eta1_psi, new.eta1_psi),
        ),
        "d_pi": sup(old.pi, new.pi),
        "d_tau": sup(old.tau, new.tau),
    }


def _run_em(packed: PackedPanel, spec: ModelSpec, params: ParameterSet,
            start_index: int = 0, progress=None, x_names=None, w_names=None) -> _StartOutcome:
    controls = spec.em
    trace = []
    prev_params = params
    converged = False
    degenerate = False
    message = ""
    total_waves = float(packed.T_obs.sum())

    for iteration in range(controls.max_iter + 1):
        try:
            post, ll = _posteriors_packed(packed, params)
        except NumericalError as err:
            degenerate, message = True, str(err)
            break
        trace.append(ll)

        occ_h = post.e.mean(axis=0)
        occ_g = post.a_marg.sum(axis=(0, 1)) / total_waves
        if occ_h.min() < OCCUPANCY_FLOOR or occ_g.min() < OCCUPANCY_FLOOR:
            degenerate, message = True, "posterior mass collapsed on a component"
            break
        if params.sigma2 < 1e-10:
            degenerate, message = True, "residual variance collapsed"
            break

        if iteration > 0:
            if controls.norm == "loglik":
                done = abs(trace[-1] - trace[-2]) < controls.tol
            else:
                done = np.max(np.abs(params.flatten() - prev_params.flatten())) < controls.tol
            if done:
                converged = True
                break
        if iteration == controls.max_iter:
            break

        try:
            tau, pi = m_step_mixture(post)
            e0a, e0p, e1a, e1p = m_step_chain(
                post, params.eta0_alpha, params.eta0_psi,
                params.eta1_alpha, params.eta1_psi,
            )
            beta, zeta, sigma2 = _longitudinal_update(packed, post, params, x_names)
            gamma, xi = _dropout_update(packed, post, params, w_names)
        except ComponentDeathError as err:
            degenerate, message = True, str(err)
            break
        except NumericalError as err:
            degenerate, message = True, str(err)
            break

        new_params = ParameterSet(
            beta=beta, zeta=zeta, sigma2=sigma2, gamma=gamma, xi=xi,
            eta0_alpha=e0a, eta0_psi=e0p, eta1_alpha=e1a, eta1_psi=e1p,
            pi=pi, tau=tau,
        )
        if progress is not None:
            progress({"start": start_index, "iteration": iteration, "loglik": ll,
                      **_block_changes(params, new_params)})
        prev_params, params = params, new_params

    return _StartOutcome(
        params=params, trace=np.asarray(trace), converged=converged,
        degenerate=degenerate, n_iter=max(len(trace) - 1, 0), message=message,
    )


def _run_em_task(args):
    packed, spec, params, idx, x_names, w_names = args
    return _run_em(packed, spec, params, start_index=idx, x_names=x_names, w_names=w_names)


def fit(data: PanelData, spec: ModelSpec, *, workers: int = 1, progress=None,
        starts: list[ParameterSet] | None = None) -> FitResult:
    """Multistart EM estimate of the full model.

    Each start iterates the E-step and the four M-blocks until the
    convergence criterion of ``spec.em`` is met.  Starts whose posterior
    mass collapses on a component are recorded as degenerate and excluded;
    the best remaining log-likelihood wins.  Class labels of the winner are
    put in canonical order before returning.
    """
    report = validate_panel(data)
    if not report.ok:
        first = report.violations[0]
        raise ValidationError(
            f"panel failed validation ({len(report.violations)} violations); "
            f"first: subject '{first.subject_id}': {first.message}"
        )
    if data.p_x != spec.p_x or data.p_w != spec.p_w:
        raise SpecMismatchError(
            f"panel has (p_x, p_w) = {(data.p_x, data.p_w)}, "
            f"spec says {(spec.p_x, spec.p_w)}"
        )
    packed = pack_panel(data)
    x_names = list(data.x_names) or None
    w_names = list(data.w_names) or None

    if starts is not None:
        start_params = list(starts)
    else:
        seeds = np.random.SeedSequence(spec.em.seed).spawn(spec.em.n_starts)
        start_params = [initial_parameters(packed, spec, np.random.default_rng(s))
                        for s in seeds]

    if workers > 1 and len(start_params) > 1:
        tasks = [(packed, spec, p, i, x_names, w_names) for i, p in enumerate(start_params)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_run_em_task, tasks))
    else:
        outcomes = [
            _run_em(packed, spec, p, start_index=i, progress=progress,
                    x_names=x_names, w_names=w_names)
            for i, p in enumerate(start_params)
        ]

    start_logliks = [
        float(o.trace[-1]) if (o.trace.size and not o.degenerate) else float("nan")
        for o in outcomes
    ]
    usable = [i for i, o in enumerate(outcomes) if not o.degenerate and o.trace.size]
    if not usable:
        details = "; ".join(o.message for o in outcomes if o.message)[:200]
        raise DegenerateFitError(
            "every EM start degenerated; consider smaller (G, K, H). " + details
        )
    best = max(usable, key=lambda i: outcomes[i].trace[-1])
    winner = outcomes[best]

    n = data.n_subjects
    n_params = count_free_parameters(spec)
    loglik = float(winner.trace[-1])
    return FitResult(
        theta_hat=canonicalize(winner.params),
        loglik=loglik,
        n_iter=winner.n_iter,
        converged=winner.converged,
        loglik_trace=winner.trace,
        start_index=best,
        bic=-2.0 * loglik + n_params * np.log(n),
        aic=-2.0 * loglik + 2.0 * n_params,
        n_params=n_params,
        n_subjects=n,
        spec=spec,
        start_logliks=start_logliks,
        start_traces=[o.trace for o in outcomes],
        degenerate_starts=sum(1 for o in outcomes if o.degenerate),
        x_names=tuple(data.x_names),
        w_names=tuple(data.w_names),
    )
