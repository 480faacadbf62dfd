"""Cumulative-logit (global logit) parameterization of the hidden chain.

Initial-state distributions and transition-matrix rows are generated from a
shared block of strictly decreasing thresholds plus an additive per-class
shift, so that H upper-level classes reuse one threshold block.  Threshold
blocks are carried internally in a free "decrement" form (first threshold,
log decrements), which turns the strict-decrease constraint into plain
unconstrained coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import SpecMismatchError, UnboundedLogitError, ValidationError

# Probabilities are clamped to this range before any logarithm.
PROB_FLOOR = 1e-300
PROB_CEIL = 1.0 - 1e-15


def clamp_prob(p):
    return np.clip(p, PROB_FLOOR, PROB_CEIL)


@dataclass(frozen=True)
class ChainLaw:
    """Initial distributions and transition matrices per upper-level class.

    Attributes
    ----------
    delta : ndarray, shape (H, G)
        Row h is the initial-state distribution for upper-level class h.
    Q : ndarray, shape (H, G, G)
        ``Q[h, g, j]`` is the probability of moving from state g to state j
        for upper-level class h.  Rows sum to one.
    """

    delta: np.ndarray
    Q: np.ndarray

    @property
    def H(self) -> int:
        return self.delta.shape[0]

    @property
    def G(self) -> int:
        return self.delta.shape[1]


def rows_from_logits(lam: np.ndarray) -> np.ndarray:
    """Turn cumulative logits (..., G-1) into probability rows (..., G).

    ``lam[..., t]`` is the log-odds of being at state t+2 or above.  The
    returned rows are differences of the survivor values and sum to one.
    """
    s = expit(lam)
    ones = np.ones(lam.shape[:-1] + (1,))
    zeros = np.zeros_like(ones)
    full = np.concatenate([ones, s, zeros], axis=-1)
    return np.maximum(full[..., :-1] - full[..., 1:], 0.0)


def invert_global_logit(alphas, psi: float = 0.0) -> np.ndarray:
    """Map strictly decreasing thresholds plus a shift to a probability row.

    With survivor values s_1 = 1, s_g = logistic(alphas[g-2] + psi) for
    g = 2..G and s_{G+1} = 0, returns p_g = s_g - s_{g+1}.  All entries are
    nonnegative and the row sums to one.
    """
    alphas = np.asarray(alphas, dtype=float)
    if alphas.size and np.any(np.diff(alphas) >= 0.0):
        raise ValidationError(
            "cumulative-logit thresholds must be strictly decreasing"
        )
    return rows_from_logits(alphas + psi)


def cumulative_logits(p) -> np.ndarray:
    """Thresholds log[P(state >= g) / P(state < g)] for g = 2..G.

    Inverse of :func:`invert_global_logit` at psi = 0.  Raises
    :class:`UnboundedLogitError` when a tail probability is 0 or 1, where
    the logit is not finite.
    """
    p = np.asarray(p, dtype=float)
    lower = np.cumsum(p)[:-1]
    upper = np.cumsum(p[::-1])[::-1][1:]
    if np.any(lower <= 0.0) or np.any(upper <= 0.0):
        raise UnboundedLogitError("cumulative logit unbounded: tail probability is 0 or 1")
    return np.log(upper) - np.log(lower)


def build_chain_law(eta0_alpha, eta0_psi, eta1_alpha, eta1_psi) -> ChainLaw:
    """Build initial distributions and transition matrices from logit blocks.

    Parameters
    ----------
    eta0_alpha : (G-1,) strictly decreasing initial-state thresholds.
    eta0_psi : (H-1,) upper-level shifts for the initial distribution
        (class 1 is anchored at zero).
    eta1_alpha : (G, G-1) per-row transition thresholds, each row strictly
        decreasing; row g holds the thresholds used when the previous state
        is g.
    eta1_psi : (H-1,) upper-level shifts for the transition rows.
    """
    eta0_alpha = np.asarray(eta0_alpha, dtype=float)
    eta0_psi = np.asarray(eta0_psi, dtype=float)
    eta1_alpha = np.asarray(eta1_alpha, dtype=float)
    eta1_psi = np.asarray(eta1_psi, dtype=float)

    G = eta0_alpha.size + 1
    if eta1_alpha.shape != (G, G - 1):
        raise SpecMismatchError(
            f"transition threshold block has shape {eta1_alpha.shape}, expected {(G, G - 1)}"
        )
    if eta0_psi.shape != eta1_psi.shape:
        raise SpecMismatchError("initial and transition shift blocks disagree on H")
    if eta0_alpha.size and np.any(np.diff(eta0_alpha) >= 0.0):
        raise ValidationError("initial-state thresholds must be strictly decreasing")
    if G > 1 and np.any(np.diff(eta1_alpha, axis=1) >= 0.0):
        raise ValidationError("transition thresholds must be strictly decreasing in each row")

    psi0_full = np.concatenate([[0.0], eta0_psi])
    psi1_full = np.concatenate([[0.0], eta1_psi])
    delta = rows_from_logits(eta0_alpha[None, :] + psi0_full[:, None])
    Q = rows_from_logits(eta1_alpha[None, :, :] + psi1_full[:, None, None])
    return ChainLaw(delta=delta, Q=Q)


def chain_law_logits(law: ChainLaw, h: int, row: int | None = None) -> np.ndarray:
    """Cumulative logits of one row of a chain law.

    Returns the thresholds of ``law.delta[h]`` or, when ``row`` is given, of
    the transition row ``law.Q[h, row]``.  Composing with the builders
    recovers alpha + psi for interior probabilities.
    """
    p = law.delta[h] if row is None else law.Q[h, row]
    return cumulative_logits(p)


# ---------------------------------------------------------------------------
# Free ("decrement") form of threshold blocks
# ---------------------------------------------------------------------------

def pack_decreasing(alphas) -> np.ndarray:
    """Free coordinates (first value, log decrements) of a decreasing vector."""
    alphas = np.asarray(alphas, dtype=float)
    if alphas.size <= 1:
        return alphas.copy()
    d = -np.diff(alphas)
    if np.any(d <= 0.0):
        raise ValidationError("thresholds must be strictly decreasing")
    return np.concatenate([alphas[:1], np.log(d)])


def unpack_decreasing(free) -> np.ndarray:
    """Inverse of :func:`pack_decreasing`."""
    free = np.asarray(free, dtype=float)
    if free.size <= 1:
        return free.copy()
    return free[0] - np.concatenate([[0.0], np.cumsum(np.exp(free[1:]))])


def pack_eta0(eta0_alpha, eta0_psi) -> np.ndarray:
    return np.concatenate([pack_decreasing(eta0_alpha), np.asarray(eta0_psi, float)])


def unpack_eta0(free, G: int, H: int):
    free = np.asarray(free, dtype=float)
    if free.size != (G - 1) + (H - 1):
        raise SpecMismatchError("initial-state block has wrong length")
    return unpack_decreasing(free[: G - 1]), free[G - 1 :].copy()


def pack_eta1(eta1_alpha, eta1_psi) -> np.ndarray:
    eta1_alpha = np.asarray(eta1_alpha, dtype=float)
    parts = [pack_decreasing(row) for row in eta1_alpha]
    parts.append(np.asarray(eta1_psi, float))
    return np.concatenate(parts) if parts else np.empty(0)


def unpack_eta1(free, G: int, H: int):
    free = np.asarray(free, dtype=float)
    if free.size != G * (G - 1) + (H - 1):
        raise SpecMismatchError("transition block has wrong length")
    alpha = np.empty((G, G - 1))
    for g in range(G):
        alpha[g] = unpack_decreasing(free[g * (G - 1) : (g + 1) * (G - 1)])
    return alpha, free[G * (G - 1) :].copy()
