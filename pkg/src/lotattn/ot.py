"""Entropic optimal transport between discrete measures.

Solves  max_{Gamma in U(alpha, beta)}  <S, Gamma> + eps * H(Gamma)
with H(Gamma) = -sum Gamma * (log Gamma - 1), via log-domain Sinkhorn
iterations on the dual potentials.  The multiplicative scaling form
Gamma = Diag(u) K Diag(v), K = exp(S / eps) overflows for small eps, so
potentials are kept in log space and the plan is exponentiated once at
the end:  Gamma_ab = exp(S_ab / eps + log_u_a + log_v_b).

Also provides a brute-force exact-OT oracle over permutation vertices for
tiny instances, used by feasibility and eps -> 0 consistency checks.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .validation import (
    InvalidInputError,
    ShapeMismatchError,
    UnsupportedSizeError,
    as_matrix,
    as_prob_vector,
    require,
)

EXACT_OT_MAX_N = 8  # n! enumeration; 8! = 40320 is the largest sane size


@dataclass(frozen=True)
class DiscreteMeasure:
    """Weighted point cloud: strictly positive masses on a simplex plus support locations."""

    masses: np.ndarray   # (m,) strictly positive, sums to 1
    support: np.ndarray  # (m, d)

    def __post_init__(self):
        object.__setattr__(self, "masses", as_prob_vector(self.masses, "masses"))
        object.__setattr__(self, "support", as_matrix(self.support, "support"))
        require(
            self.support.shape[0] == self.masses.shape[0],
            f"support rows ({self.support.shape[0]}) must match masses length ({self.masses.shape[0]})",
            ShapeMismatchError,
        )

    @classmethod
    def uniform(cls, support) -> "DiscreteMeasure":
        support = as_matrix(support, "support")
        m = support.shape[0]
        return cls(np.full(m, 1.0 / m), support)

    @property
    def size(self) -> int:
        return self.masses.shape[0]

    @property
    def dim(self) -> int:
        return self.support.shape[1]


@dataclass(frozen=True)
class SinkhornProblem:
    """A score matrix with two marginals and the entropic temperature.

    ``scores[a, b]`` is a dot-product similarity to be *maximized*; rows are
    matched to ``row_marginal`` and columns to ``col_marginal``.
    """

    scores: np.ndarray        # (a, b)
    row_marginal: np.ndarray  # (a,)
    col_marginal: np.ndarray  # (b,)
    epsilon: float
    max_iters: int = 10
    tolerance: float = 1e-9

    def __post_init__(self):
        object.__setattr__(self, "scores", as_matrix(self.scores, "scores"))
        object.__setattr__(self, "row_marginal", as_prob_vector(self.row_marginal, "row_marginal"))
        object.__setattr__(self, "col_marginal", as_prob_vector(self.col_marginal, "col_marginal"))
        a, b = self.scores.shape
        require(self.row_marginal.shape[0] == a, "row_marginal length must match score rows", ShapeMismatchError)
        require(self.col_marginal.shape[0] == b, "col_marginal length must match score columns", ShapeMismatchError)
        require(self.epsilon > 0, "epsilon must be > 0")
        require(self.max_iters >= 1, "max_iters must be >= 1")
        require(self.tolerance >= 0, "tolerance must be >= 0")


@dataclass(frozen=True)
class TransportPlan:
    """An entropic coupling plus the dual state that produced it.

    ``plan`` equals ``exp(scores/epsilon + log_u[:, None] + log_v[None, :])``;
    the marginal named by ``final_axis`` is exact to machine precision, the
    other carries the reported L1 residual.  ``history`` holds one row per
    sweep: (row_residual, col_residual, primal_objective, dual_objective);
    it has a single entry when ``tolerance == 0`` (fixed-iteration mode
    skips per-sweep diagnostics).  The primal objective <S,P> + eps*H(P)
    oscillates toward the optimum; the dual objective decreases monotonically
    (each half-update is an exact block-coordinate minimization).
    """

    plan: np.ndarray
    log_u: np.ndarray
    log_v: np.ndarray
    iters_used: int
    row_residual: float
    col_residual: float
    final_axis: str
    stop_reason: str  # "tolerance" | "max_iters"
    history: np.ndarray = field(repr=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.plan.shape


def build_score_matrix(pivots, tokens) -> np.ndarray:
    """Dot-product similarities: entry (t, i) = <pivot_t, token_i>, shape (r, n)."""
    pivots = as_matrix(pivots, "pivots")
    tokens = as_matrix(tokens, "tokens")
    require(
        pivots.shape[1] == tokens.shape[1],
        f"pivot dim {pivots.shape[1]} != token dim {tokens.shape[1]}",
        ShapeMismatchError,
    )
    return pivots @ tokens.T


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    return np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(a - m), axis=axis))


def sinkhorn(problem: SinkhornProblem, final_axis: str = "row") -> TransportPlan:
    """Solve the entropic transport problem by log-domain Sinkhorn sweeps.

    One full sweep updates both potentials, ending on ``final_axis`` so that
    marginal is satisfied exactly.  Stops when max(row, col) L1 residual
    drops to ``problem.tolerance`` or after ``problem.max_iters`` sweeps,
    whichever comes first.  With ``tolerance == 0`` residuals are only
    evaluated once at the end, so exactly ``max_iters`` sweeps run.
    """
    if final_axis not in ("row", "col"):
        raise InvalidInputError(f"final_axis must be 'row' or 'col', got {final_axis!r}")
    logits = problem.scores / problem.epsilon
    log_alpha = np.log(problem.row_marginal)
    log_beta = np.log(problem.col_marginal)
    log_u = np.zeros_like(log_alpha)
    log_v = np.zeros_like(log_beta)
    check_each_sweep = problem.tolerance > 0

    history = []
    stop_reason = "max_iters"
    iters = 0
    for _ in range(problem.max_iters):
        if final_axis == "row":
            log_v = log_beta - _logsumexp(logits + log_u[:, None], axis=0)
            log_u = log_alpha - _logsumexp(logits + log_v[None, :], axis=1)
        else:
            log_u = log_alpha - _logsumexp(logits + log_v[None, :], axis=1)
            log_v = log_beta - _logsumexp(logits + log_u[:, None], axis=0)
        iters += 1
        if check_each_sweep:
            entry = _diagnostics(logits, log_u, log_v, problem)
            history.append(entry)
            if max(entry[0], entry[1]) <= problem.tolerance:
                stop_reason = "tolerance"
                break

    plan = np.exp(logits + log_u[:, None] + log_v[None, :])
    if not check_each_sweep:
        history.append(_diagnostics(logits, log_u, log_v, problem))
    return TransportPlan(
        plan=plan,
        log_u=log_u,
        log_v=log_v,
        iters_used=iters,
        row_residual=history[-1][0],
        col_residual=history[-1][1],
        final_axis=final_axis,
        stop_reason=stop_reason,
        history=np.asarray(history),
    )


def _diagnostics(logits, log_u, log_v, problem):
    """Marginal residuals plus primal and dual objectives of the iterate.

    Using log(plan) = logits + log_u + log_v, the primal objective
    <S, P> + eps*H(P) collapses to eps * (mass - <log_u, rows> - <log_v, cols>);
    the Lagrangian dual value uses the target marginals instead of the
    achieved ones and is the quantity Sinkhorn descends monotonically.
    """
    plan = np.exp(logits + log_u[:, None] + log_v[None, :])
    rows = plan.sum(axis=1)
    cols = plan.sum(axis=0)
    row_err = float(np.abs(rows - problem.row_marginal).sum())
    col_err = float(np.abs(cols - problem.col_marginal).sum())
    mass = float(plan.sum())
    primal = problem.epsilon * (mass - float(log_u @ rows) - float(log_v @ cols))
    dual = problem.epsilon * (
        mass - float(log_u @ problem.row_marginal) - float(log_v @ problem.col_marginal)
    )
    return row_err, col_err, primal, dual


def _plan_array(plan) -> np.ndarray:
    if isinstance(plan, TransportPlan):
        return plan.plan
    return as_matrix(plan, "plan")


def entropy(plan) -> float:
    """H(Gamma) = -sum Gamma * (log Gamma - 1), with 0*log 0 = 0."""
    gamma = _plan_array(plan)
    require(np.all(gamma >= 0), "plan entries must be nonnegative")
    mask = gamma > 0
    vals = np.zeros_like(gamma)
    vals[mask] = gamma[mask] * (np.log(gamma[mask]) - 1.0)
    return -float(vals.sum())


def transport_cost(plan, scores, convention: str = "similarity_max") -> float:
    """<S, Gamma> under the max-similarity convention, or its negation for cost-min."""
    gamma = _plan_array(plan)
    scores = as_matrix(scores, "scores")
    require(gamma.shape == scores.shape, f"plan shape {gamma.shape} != scores shape {scores.shape}", ShapeMismatchError)
    total = float(np.sum(scores * gamma))
    if convention == "similarity_max":
        return total
    if convention == "cost_min":
        return -total
    raise InvalidInputError(f"unknown convention {convention!r}")


def marginal_residuals(plan, row_marginal, col_marginal) -> tuple[float, float]:
    """L1 deviations ||Gamma 1 - alpha||_1 and ||Gamma^T 1 - beta||_1."""
    gamma = _plan_array(plan)
    alpha = as_prob_vector(row_marginal, "row_marginal")
    beta = as_prob_vector(col_marginal, "col_marginal")
    require(gamma.shape == (alpha.shape[0], beta.shape[0]), "marginal lengths must match plan shape", ShapeMismatchError)
    row_err = float(np.abs(gamma.sum(axis=1) - alpha).sum())
    col_err = float(np.abs(gamma.sum(axis=0) - beta).sum())
    return row_err, col_err


def exact_ot_tiny(cost_matrix) -> tuple[float, np.ndarray]:
    """Exact OT with uniform marginals by enumerating permutation vertices.

    Minimizes <c, Gamma> over U(1/n, 1/n).  An optimum lies at a vertex of
    the Birkhoff polytope, i.e. a permutation matrix scaled by 1/n, so n!
    enumeration is exact.  Ties resolve to the lexicographically smallest
    permutation for determinism.  Guarded at n <= 8.
    """
    cost = as_matrix(cost_matrix, "cost_matrix")
    n = cost.shape[0]
    require(cost.shape[0] == cost.shape[1], "cost matrix must be square", ShapeMismatchError)
    if n > EXACT_OT_MAX_N:
        raise UnsupportedSizeError(f"exact_ot_tiny supports n <= {EXACT_OT_MAX_N}, got {n}")
    best_perm = None
    best_total = np.inf
    rows = np.arange(n)
    for perm in itertools.permutations(range(n)):
        total = cost[rows, perm].sum()
        if total < best_total:
            best_total = total
            best_perm = perm
    plan = np.zeros((n, n))
    plan[rows, best_perm] = 1.0 / n
    return float(best_total / n), plan
