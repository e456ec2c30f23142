"""MDP value iteration on the hand-relative model and QMDP action selection."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..relmodel import DiscreteModel

__all__ = ["VISolution", "value_iteration", "bellman_backup", "qmdp_act", "qmdp_values",
           "rel_upper_bound"]


@dataclass(frozen=True)
class VISolution:
    V: np.ndarray
    Q: np.ndarray  # (n_states, n_actions)
    gamma: float
    residual: float
    iterations: int


def bellman_backup(model: DiscreteModel, V: np.ndarray) -> np.ndarray:
    """Q(s, a) = R(s) + gamma * sum_s' T(s, a, s') V(s')."""
    Q = np.empty((model.n_states, model.n_actions))
    for a, T in enumerate(model.transition_matrices):
        Q[:, a] = model.reward + model.gamma * (T @ V)
    return Q


def value_iteration(model: DiscreteModel, tol: float = 1e-6, max_iter: int = 100_000) -> VISolution:
    """Iterate to a sup-norm Bellman residual below ``tol``.

    The stopping test is applied to the returned ``V`` itself, so
    ``max(|max_a Q(V) - V|) < tol`` holds for the result.
    """
    V = np.zeros(model.n_states)
    residual = np.inf
    for it in range(1, max_iter + 1):
        Q = bellman_backup(model, V)
        V_new = Q.max(axis=1)
        residual = float(np.max(np.abs(V_new - V)))
        V = V_new
        if residual < tol * (1 - model.gamma):
            break
    Q = bellman_backup(model, V)
    residual = float(np.max(np.abs(Q.max(axis=1) - V)))
    return VISolution(V=V, Q=Q, gamma=model.gamma, residual=residual, iterations=it)


def qmdp_values(vi: VISolution, b: np.ndarray) -> np.ndarray:
    return b @ vi.Q


def qmdp_act(vi: VISolution, b: np.ndarray) -> int:
    """Belief-averaged Q argmax; ``np.argmax`` breaks ties toward index 0."""
    return int(np.argmax(qmdp_values(vi, b)))


def rel_upper_bound(vi: VISolution, b: np.ndarray) -> float:
    return float(np.dot(b, vi.V))
