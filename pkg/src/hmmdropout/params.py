"""Model dimensions, estimation controls and the full parameter set."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .chain import ChainLaw, build_chain_law
from .errors import ValidationError

SIMPLEX_TOL = 1e-12


@dataclass(frozen=True)
class EMControls:
    """Convergence and multistart settings for the EM estimator."""

    max_iter: int = 1000
    tol: float = 1e-6
    norm: str = "loglik"  # "loglik": |change in log-likelihood|; "param": sup-norm change
    n_starts: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValidationError("max_iter must be >= 1")
        if not self.tol > 0.0:
            raise ValidationError("tol must be > 0")
        if self.norm not in ("loglik", "param"):
            raise ValidationError("norm must be 'loglik' or 'param'")
        if self.n_starts < 1:
            raise ValidationError("n_starts must be >= 1")


@dataclass(frozen=True)
class ModelSpec:
    """Latent dimensions and covariate dimensions of one model.

    G hidden states drive the longitudinal means, K time-constant classes
    drive the dropout propensity, and H upper-level classes tie the two
    together (H = 1 makes them independent).
    """

    G: int
    K: int
    H: int
    p_x: int = 0
    p_w: int = 0
    em: EMControls = field(default_factory=EMControls)

    def __post_init__(self):
        if min(self.G, self.K, self.H) < 1:
            raise ValidationError("G, K and H must all be >= 1")
        if min(self.p_x, self.p_w) < 0:
            raise ValidationError("covariate dimensions must be >= 0")

    def with_em(self, **kwargs) -> "ModelSpec":
        return replace(self, em=replace(self.em, **kwargs))


def count_free_parameters(spec: ModelSpec) -> int:
    """Number of free parameters of the model.

    Adds up the nine blocks: regression slopes of both equations, G state
    intercepts, the common residual variance, K class intercepts, the
    initial-state logit block (G-1)+(H-1), the transition logit block
    G(G-1)+(H-1), the upper-level weights (H-1) and the class-membership
    rows H(K-1).
    """
    G, K, H = spec.G, spec.K, spec.H
    n_eta0 = (G - 1) + (H - 1)
    n_eta1 = G * (G - 1) + (H - 1)
    return spec.p_x + G + 1 + spec.p_w + K + n_eta0 + n_eta1 + (H - 1) + H * (K - 1)


def _as_float_array(value, shape) -> np.ndarray:
    out = np.asarray(value, dtype=float).reshape(shape)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class ParameterSet:
    """All free parameters of the joint model.

    Attributes
    ----------
    beta : (p_x,) slopes of the longitudinal equation.
    zeta : (G,) nondecreasing state intercepts of the longitudinal means.
    sigma2 : common residual variance of the Gaussian responses.
    gamma : (p_w,) slopes of the dropout (retention) logit.
    xi : (K,) class intercepts of the retention logit, increasing.
    eta0_alpha : (G-1,) initial-state thresholds, strictly decreasing.
    eta0_psi : (H-1,) upper-level shifts of the initial distribution.
    eta1_alpha : (G, G-1) transition thresholds, strictly decreasing per row.
    eta1_psi : (H-1,) upper-level shifts of the transition rows.
    pi : (H, K) class-membership probabilities per upper-level class.
    tau : (H,) upper-level mixing weights.
    """

    beta: np.ndarray
    zeta: np.ndarray
    sigma2: float
    gamma: np.ndarray
    xi: np.ndarray
    eta0_alpha: np.ndarray
    eta0_psi: np.ndarray
    eta1_alpha: np.ndarray
    eta1_psi: np.ndarray
    pi: np.ndarray
    tau: np.ndarray

    def __post_init__(self):
        G = np.asarray(self.zeta).size
        H = np.asarray(self.tau).size
        K = np.asarray(self.xi).size
        object.__setattr__(self, "beta", _as_float_array(self.beta, (-1,)))
        object.__setattr__(self, "zeta", _as_float_array(self.zeta, (G,)))
        object.__setattr__(self, "sigma2", float(self.sigma2))
        object.__setattr__(self, "gamma", _as_float_array(self.gamma, (-1,)))
        object.__setattr__(self, "xi", _as_float_array(self.xi, (K,)))
        object.__setattr__(self, "eta0_alpha", _as_float_array(self.eta0_alpha, (G - 1,)))
        object.__setattr__(self, "eta0_psi", _as_float_array(self.eta0_psi, (H - 1,)))
        object.__setattr__(self, "eta1_alpha", _as_float_array(self.eta1_alpha, (G, G - 1)))
        object.__setattr__(self, "eta1_psi", _as_float_array(self.eta1_psi, (H - 1,)))
        object.__setattr__(self, "pi", _as_float_array(self.pi, (H, K)))
        object.__setattr__(self, "tau", _as_float_array(self.tau, (H,)))

    # -- dimensions -------------------------------------------------------
    @property
    def G(self) -> int:
        return self.zeta.size

    @property
    def K(self) -> int:
        return self.xi.size

    @property
    def H(self) -> int:
        return self.tau.size

    @property
    def p_x(self) -> int:
        return self.beta.size

    @property
    def p_w(self) -> int:
        return self.gamma.size

    # -- derived objects --------------------------------------------------
    def chain_law(self) -> ChainLaw:
        return build_chain_law(self.eta0_alpha, self.eta0_psi, self.eta1_alpha, self.eta1_psi)

    def validate(self) -> None:
        """Raise :class:`ValidationError` listing every violated invariant."""
        problems = []
        if not np.all(np.isfinite(self.flatten())):
            problems.append("non-finite parameter value")
        if np.any(np.diff(self.zeta) < 0.0):
            problems.append("state intercepts zeta must be nondecreasing")
        if not self.sigma2 > 0.0:
            problems.append("sigma2 must be positive")
        if self.K > 1 and np.any(np.diff(self.xi) <= 0.0):
            problems.append("class intercepts xi must be strictly increasing")
        if self.G > 1 and np.any(np.diff(self.eta0_alpha) >= 0.0):
            problems.append("initial-state thresholds must be strictly decreasing")
        if self.G > 1 and np.any(np.diff(self.eta1_alpha, axis=1) >= 0.0):
            problems.append("transition thresholds must be strictly decreasing per row")
        if np.any(self.pi < 0.0) or np.any(np.abs(self.pi.sum(axis=1) - 1.0) > SIMPLEX_TOL):
            problems.append("rows of pi must be probability vectors summing to 1")
        if np.any(self.tau < 0.0) or abs(self.tau.sum() - 1.0) > SIMPLEX_TOL:
            problems.append("tau must be a probability vector summing to 1")
        if problems:
            raise ValidationError("; ".join(problems))

    def flatten(self) -> np.ndarray:
        """All parameters as one natural-scale vector (fixed block order)."""
        return np.concatenate([
            self.beta,
            self.zeta,
            [self.sigma2],
            self.gamma,
            self.xi,
            self.eta0_alpha,
            self.eta0_psi,
            self.eta1_alpha.ravel(),
            self.eta1_psi,
            self.tau,
            self.pi.ravel(),
        ])

    # -- serialization ----------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "beta": self.beta.tolist(),
            "zeta": self.zeta.tolist(),
            "sigma2": self.sigma2,
            "gamma": self.gamma.tolist(),
            "xi": self.xi.tolist(),
            "eta0_alpha": self.eta0_alpha.tolist(),
            "eta0_psi": self.eta0_psi.tolist(),
            "eta1_alpha": self.eta1_alpha.tolist(),
            "eta1_psi": self.eta1_psi.tolist(),
            "pi": self.pi.tolist(),
            "tau": self.tau.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ParameterSet":
        return cls(**{k: d[k] for k in (
            "beta", "zeta", "sigma2", "gamma", "xi",
            "eta0_alpha", "eta0_psi", "eta1_alpha", "eta1_psi", "pi", "tau",
        )})


def canonicalize(params: ParameterSet) -> ParameterSet:
    """Resolve label switching without changing the model.

    Dropout classes are ordered by increasing retention intercept xi and
    upper-level classes by decreasing weight tau.  Reordering upper-level
    classes re-anchors the shift of the new first class at zero by folding
    it into the threshold blocks, which leaves every probability row of the
    chain law exactly unchanged.
    """
    order_k = np.argsort(params.xi, kind="stable")
    xi = params.xi[order_k]
    pi = params.pi[:, order_k]

    order_h = np.argsort(-params.tau, kind="stable")
    tau = params.tau[order_h]
    pi = pi[order_h, :]

    psi0_full = np.concatenate([[0.0], params.eta0_psi])[order_h]
    psi1_full = np.concatenate([[0.0], params.eta1_psi])[order_h]
    eta0_alpha = params.eta0_alpha + psi0_full[0]
    eta1_alpha = params.eta1_alpha + psi1_full[0]
    eta0_psi = psi0_full[1:] - psi0_full[0]
    eta1_psi = psi1_full[1:] - psi1_full[0]

    return ParameterSet(
        beta=params.beta, zeta=params.zeta, sigma2=params.sigma2,
        gamma=params.gamma, xi=xi,
        eta0_alpha=eta0_alpha, eta0_psi=eta0_psi,
        eta1_alpha=eta1_alpha, eta1_psi=eta1_psi,
        pi=pi, tau=tau,
    )
