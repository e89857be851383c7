"""Vectorized Monte Carlo random walks, used as the empirical side of the analysis checks."""
from __future__ import annotations

import numpy as np

from .graph import DynamicGraphProcess, stationary_distribution


def _step(cum: np.ndarray, pos: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(pos.size)
    nxt = (u[:, None] >= cum[pos]).sum(axis=1)
    return np.minimum(nxt, cum.shape[1] - 1)


def sample_hitting_times(P, source: int, target: int, n_walks: int, rng: np.random.Generator,
                         max_steps: int = 10**7) -> np.ndarray:
    """First time each of ``n_walks`` independent walks from ``source`` reaches ``target``.

    With ``source == target`` this is the first return time (at least one step).
    """
    cum = np.cumsum(np.asarray(P, dtype=float), axis=1)
    pos = np.full(n_walks, source, dtype=np.int64)
    times = np.zeros(n_walks, dtype=np.int64)
    alive = np.arange(n_walks)
    t = 0
    while alive.size:
        t += 1
        if t > max_steps:
            raise RuntimeError(f"{alive.size} walks did not reach {target} in {max_steps} steps")
        pos[alive] = _step(cum, pos[alive], rng)
        done = pos[alive] == target
        times[alive[done]] = t
        alive = alive[~done]
    return times


def sample_hitting_budget(P, source: int, target: int, step_budget: int, rng: np.random.Generator,
                          batch: int = 20_000) -> np.ndarray:
    """Keep sampling hitting times until the walks have used ``step_budget`` steps in total."""
    out = []
    used = 0
    while used < step_budget:
        ts = sample_hitting_times(P, source, target, batch, rng)
        # keep only as many walks as the budget allows, in sampling order
        cs = np.cumsum(ts)
        k = int(np.searchsorted(cs, step_budget - used, side="right")) + 1
        k = min(k, ts.size)
        out.append(ts[:k])
        used += int(cs[k - 1])
    return np.concatenate(out)


def sample_dynamic_hitting_times(process: DynamicGraphProcess, source: int, target: int, n_walks: int,
                                 rng: np.random.Generator, max_steps: int = 10**7) -> np.ndarray:
    """Hitting times of walks on a topology that evolves independently of the walker.

    Each walk starts with a topology drawn from the stationary law; per step the
    walker moves on the current topology, then the topology makes one transition.
    """
    pi = stationary_distribution(process).weights
    walk_cum = np.stack([np.cumsum(g.walk_matrix(), axis=1) for g in process.states])
    graph_cum = np.cumsum(process.transitions, axis=1)
    n, k = process.n, len(process)
    gs = rng.choice(k, size=n_walks, p=pi)
    pos = np.full(n_walks, source, dtype=np.int64)
    times = np.zeros(n_walks, dtype=np.int64)
    alive = np.arange(n_walks)
    t = 0
    while alive.size:
        t += 1
        if t > max_steps:
            raise RuntimeError(f"{alive.size} walks did not reach {target} in {max_steps} steps")
        u = rng.random(alive.size)
        rows = walk_cum[gs[alive], pos[alive]]
        pos[alive] = np.minimum((u[:, None] >= rows).sum(axis=1), n - 1)
        u = rng.random(alive.size)
        gs[alive] = np.minimum((u[:, None] >= graph_cum[gs[alive]]).sum(axis=1), k - 1)
        done = pos[alive] == target
        times[alive[done]] = t
        alive = alive[~done]
    return times


def sample_lost_given_unseen(P, node: int, p: float, t: int, n_walks: int, rng: np.random.Generator):
    """Estimate ``P[lost by t | no return to node within t steps]`` for a lossy walk.

    Each step the token first survives with probability ``1 - p`` and then moves.
    Returns ``(estimate, n_conditioning_walks)``.
    """
    cum = np.cumsum(np.asarray(P, dtype=float), axis=1)
    pos = np.full(n_walks, node, dtype=np.int64)
    lost = np.zeros(n_walks, bool)
    returned = np.zeros(n_walks, bool)
    for _ in range(t):
        act = np.nonzero(~lost & ~returned)[0]
        if not act.size:
            break
        gone = rng.random(act.size) < p
        lost[act[gone]] = True
        act = act[~gone]
        pos[act] = _step(cum, pos[act], rng)
        returned[act[pos[act] == node]] = True
    unseen = ~returned
    k = int(unseen.sum())
    return (float(lost[unseen].mean()) if k else float("nan")), k
