"""Hitting times, their variances and distributions, and timeout tuning bounds.

All routines take a row-stochastic walk matrix ``P``; for a static graph use
``g.walk_matrix()``, for a dynamic graph the averaged matrix from
:func:`tokencirc.graph.averaged_transition_matrix`.
"""
from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .graph import (
    DynamicGraphProcess,
    StaticGraph,
    averaged_transition_matrix,
    stationary_distribution,
    validate_graph,
)

logger = logging.getLogger(__name__)

RESIDUAL_TOL = 1e-9


class AnalysisError(ValueError):
    pass


class UnreachableTargetError(AnalysisError):
    pass


class TuningError(RuntimeError):
    def __init__(self, msg: str, last_bound: float):
        super().__init__(msg)
        self.last_bound = last_bound


@dataclass(frozen=True)
class HittingStats:
    h: np.ndarray
    V: np.ndarray
    return_h: np.ndarray
    return_V: np.ndarray


def _almost_sure_hitters(P: np.ndarray, j: int) -> np.ndarray:
    """Mask of states from which ``j`` is hit with probability one.

    A state fails when, avoiding ``j``, it can reach a state that cannot
    reach ``j`` at all.
    """
    n = P.shape[0]
    support = P > 0
    can_reach = np.zeros(n, bool)
    can_reach[j] = True
    q = deque([j])
    while q:
        v = q.popleft()
        for u in np.nonzero(support[:, v])[0]:
            if not can_reach[u]:
                can_reach[u] = True
                q.append(u)
    bad = ~can_reach
    q = deque(np.nonzero(bad)[0].tolist())
    while q:
        v = q.popleft()
        for u in np.nonzero(support[:, v])[0]:
            if u != j and not bad[u]:
                bad[u] = True
                q.append(u)
    return ~bad


def _check_stochastic(P: np.ndarray) -> np.ndarray:
    P = np.asarray(P, dtype=float)
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise AnalysisError(f"walk matrix must be square, got shape {P.shape}")
    if (P < 0).any() or np.abs(P.sum(axis=1) - 1).max() > 1e-12:
        raise AnalysisError("walk matrix must be row-stochastic")
    return P


def hitting_column(P: np.ndarray, j: int) -> np.ndarray:
    """Expected steps to first reach ``j`` from every state; ``inf`` where not almost sure."""
    P = _check_stochastic(P)
    n = P.shape[0]
    ok = _almost_sure_hitters(P, j)
    h = np.full(n, np.inf)
    h[j] = 0.0
    idx = np.array([i for i in range(n) if i != j and ok[i]], dtype=int)
    if idx.size:
        A = np.eye(idx.size) - P[np.ix_(idx, idx)]
        x = np.linalg.solve(A, np.ones(idx.size))
        res = np.abs(A @ x - 1.0).max()
        if res > RESIDUAL_TOL * max(1.0, np.abs(x).max()):
            raise AnalysisError(f"hitting-time solve residual {res:.3g} for target {j}")
        h[idx] = x
    return h


def hitting_times(P) -> np.ndarray:
    """Matrix ``h[i, j]`` solving ``h_ij = 1 + sum_k P_ik h_kj`` with ``h_jj = 0``.

    Entries for targets that are not reached almost surely are ``inf``; a
    warning is logged for each such target.
    """
    P = _check_stochastic(P)
    n = P.shape[0]
    H = np.column_stack([hitting_column(P, j) for j in range(n)])
    bad = np.nonzero(~np.isfinite(H).all(axis=0))[0]
    for j in bad:
        logger.warning("target %d is not reached almost surely from every node", j)
    return H


def dynamic_hitting_times(process: DynamicGraphProcess) -> np.ndarray:
    pi = stationary_distribution(process)
    return hitting_times(averaged_transition_matrix(process, pi))


def hitting_distribution(P, j: int, t_max: int) -> np.ndarray:
    """``F[t, i] = P[H_ij <= t]`` for ``t = 0..t_max`` (``j`` made absorbing)."""
    if t_max < 1:
        raise AnalysisError("t_max must be >= 1")
    P = _check_stochastic(P)
    n = P.shape[0]
    Q = P.copy()
    Q[j, :] = 0.0
    u = np.ones(n)  # survival: not yet at j
    u[j] = 0.0
    F = np.empty((t_max + 1, n))
    F[0] = 1.0 - u
    for t in range(1, t_max + 1):
        u = Q @ u
        u[j] = 0.0
        F[t] = 1.0 - u
    np.clip(F, 0.0, 1.0, out=F)
    return F


def return_distribution(P, i: int, t_max: int) -> np.ndarray:
    """``R[t] = P[H_ii <= t]`` for the first return to ``i`` (``R[0] = 0``)."""
    P = _check_stochastic(P)
    F = hitting_distribution(P, i, max(t_max - 1, 1))
    R = np.zeros(t_max + 1)
    for t in range(1, t_max + 1):
        R[t] = P[i] @ F[t - 1]
    return np.clip(R, 0.0, 1.0)


def variance_hitting(P, h: np.ndarray, j: int) -> np.ndarray:
    """Column ``V[H_ij]`` over sources ``i`` for a fixed target ``j``.

    Solves ``M(j) V = v(j)`` where, off the target row, ``M = P - I`` and
    ``v_i = h_ij^2 - sum_k P_ik (h_kj + 1)^2``; the target row pins ``V_jj = 0``.
    For walks without self-loops ``M`` has ``-1`` on the diagonal.
    """
    P = _check_stochastic(P)
    n = P.shape[0]
    hj = np.asarray(h, dtype=float)[:, j]
    if not np.isfinite(hj).all():
        raise UnreachableTargetError(f"target {j} is not reached almost surely; variance undefined")
    M = P - np.eye(n)
    M[j, :] = 0.0
    M[j, j] = 1.0
    v = hj**2 - P @ (hj + 1.0) ** 2
    v[j] = 0.0
    try:
        V = np.linalg.solve(M, v)
    except np.linalg.LinAlgError as exc:
        raise UnreachableTargetError(f"M({j}) is singular") from exc
    res = np.abs(M @ V - v).max()
    if res > RESIDUAL_TOL * max(1.0, np.abs(V).max()):
        raise AnalysisError(f"variance solve residual {res:.3g} for target {j}")
    V[j] = 0.0
    # tiny negative values are round-off on deterministic hits
    return np.where(np.abs(V) < 1e-9, 0.0, V)


def variance_matrix(P, h: np.ndarray) -> np.ndarray:
    n = np.asarray(P).shape[0]
    return np.column_stack([variance_hitting(P, h, j) for j in range(n)])


def first_return_stats(P, h: np.ndarray, V: np.ndarray):
    """Return-time mean and variance per node by first-step decomposition."""
    P = np.asarray(P, dtype=float)
    rh = 1.0 + np.einsum("ik,ki->i", P, h)
    second = np.einsum("ik,ki->i", P, V + (h + 1.0) ** 2)
    return rh, second - rh**2


def return_stats(g: StaticGraph, P, h: np.ndarray, V: np.ndarray):
    """``(return_h, return_V)`` per node; ``return_h`` cross-checked against ``2m/deg``."""
    if not validate_graph(g).connected:
        raise AnalysisError("return statistics need a connected graph")
    rh_step, rV = first_return_stats(P, h, V)
    rh = np.array([2.0 * g.m / g.degree(i) for i in range(g.n)])
    gap = np.abs(rh - rh_step).max()
    if gap > RESIDUAL_TOL * max(1.0, rh.max()):
        raise AnalysisError(f"return time 2m/deg disagrees with first-step value by {gap:.3g}")
    return rh, np.where(np.abs(rV) < 1e-9, 0.0, rV)


def hitting_stats(g: StaticGraph) -> HittingStats:
    P = g.walk_matrix()
    h = hitting_times(P)
    V = variance_matrix(P, h)
    rh, rV = return_stats(g, P, h, V)
    return HittingStats(h, V, rh, rV)


# -- waiting-time bounds -----------------------------------------------------

def chebyshev_return_bound(h_ii: float, V_ii: float, t: float) -> float:
    """Lower bound on ``P[H_ii < t]``; 0 when ``t <= h_ii``."""
    if t <= h_ii:
        return 0.0
    return max(0.0, 1.0 - V_ii / (t - h_ii) ** 2)


def confidence_wait_time(h_ii: float, V_ii: float, eps: float) -> float:
    """Time ``h + sigma/sqrt(eps)`` after which the walk has returned w.p. >= 1 - eps."""
    if not 0.0 < eps <= 1.0:
        raise AnalysisError("eps must be in (0, 1]")
    return h_ii + math.sqrt(V_ii) / math.sqrt(eps)


def lost_probability_bound(V: float, p: float, t: int) -> float:
    """Lower bound on P[token lost | not seen for t steps], per-step loss ``p``.

    ``1 - V 2^(t+1) (1-p)^(t+1) (1 - (1-p)/2) / ((1-p)^(t+1) t^2 + p t^2 2^(t+1))``,
    evaluated in log space. The ``2^t`` terms stand for a minimum degree of 2.
    """
    if p == 0:
        raise AnalysisError("token cannot be lost; bound undefined for p = 0")
    if not 0.0 < p <= 1.0:
        raise AnalysisError("p must be in (0, 1]")
    if t < 1:
        raise AnalysisError("t must be >= 1")
    if V < 0:
        raise AnalysisError("variance must be >= 0")
    if p == 1.0 or V == 0:
        return 1.0
    k = t + 1
    log_surv = k * math.log1p(-p)
    log2k = k * math.log(2.0)
    # ratio = V (1+p)/2 / t^2 * 2^k (1-p)^k / ((1-p)^k + p 2^k)
    log_den = np.logaddexp(log_surv, math.log(p) + log2k)
    log_ratio = math.log(V) + math.log((1.0 + p) / 2.0) - 2.0 * math.log(t) + log2k + log_surv - log_den
    return max(0.0, 1.0 - math.exp(log_ratio))


def tune_timeout_scan(V: float, p: float, eps: float, t_cap: int = 100_000) -> int:
    """Smallest integer ``t`` with ``lost_probability_bound(V, p, t) >= 1 - eps``."""
    if not 0.0 < eps < 1.0:
        raise AnalysisError("eps must be in (0, 1)")
    b = 0.0
    for t in range(1, t_cap + 1):
        b = lost_probability_bound(V, p, t)
        if b >= 1.0 - eps:
            return t
    raise TuningError(f"no t <= {t_cap} reaches confidence {1 - eps} (last bound {b:.6f})", b)


def tune_timeout_closed_form(V: float, h: float, p: float, eps: float) -> float:
    """Closed-form timeout (natural log). Conservative; the scan is authoritative."""
    if not 0.0 < p < 1.0:
        raise AnalysisError("closed form needs p in (0, 1)")
    if not 0.0 < eps < 1.0:
        raise AnalysisError("eps must be in (0, 1)")
    if V <= 0 or h <= 0:
        raise AnalysisError("V and h must be > 0")
    num = math.log(V / h**2) + math.log((1.0 - p * p) / (2.0 * p)) - math.log(eps) + 2.0
    return num / -math.log1p(-p)


def link_failure_survival(g: StaticGraph, F: Sequence[float], T_m: int) -> float:
    """Lower bound on surviving a single link failure without violating the specification.

    ``F[t]`` is ``P[H <= t]`` for the walk reaching the orphaned node. The edge
    factor ``(m - 2n + 2)/m`` is clamped at 0 (trees make the bound vacuous).
    """
    if not validate_graph(g).connected:
        raise AnalysisError("graph must be connected")
    factor = max(0.0, (g.m - 2 * g.n + 2) / g.m)
    idx = math.ceil(T_m / 2) - 1
    if idx < 0:
        return 0.0
    F = np.asarray(F, dtype=float)
    # F is non-decreasing, so truncating to its last sample stays a lower bound
    return factor * float(F[min(idx, len(F) - 1)])


def recommend_timeout(g: StaticGraph, capacity: int, p: float = 0.1, eps: float = 0.01) -> int:
    """Protocol timeout for a static graph: scan on the largest return variance, at least capacity+2."""
    st = hitting_stats(g)
    t = tune_timeout_scan(float(st.return_V.max()), p, eps)
    return max(t, capacity + 2)
