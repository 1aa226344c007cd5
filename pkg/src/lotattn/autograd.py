"""Reverse-mode differentiation through the unrolled attention pipeline.

Training differentiates exactly what the forward pass computes: the Sinkhorn
solves are unrolled for a fixed number of sweeps (no tolerance-based early
exit) and every log-sum-exp reverse rule uses the stabilized subtract-max
form with saved activations, so memory is O(T * n * r) per head.

The engine is a tape of ``Node`` objects: each records its parents, the
vector-Jacobian closure per parent, and a pure recompute function, so a
graph can be replayed bitwise and walked exactly once in reverse execution
order.  It covers only the operations this pipeline needs.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .validation import InvalidInputError, ShapeMismatchError, require

_ORDER = itertools.count()


class Node:
    """A value in the graph: ndarray payload plus reverse-pass provenance."""

    __slots__ = ("value", "parents", "vjps", "needs_grad", "op", "order", "recompute")

    def __init__(self, value, parents=(), vjps=(), op="leaf", recompute=None, needs_grad=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = tuple(parents)
        self.vjps = tuple(vjps)
        self.op = op
        self.order = next(_ORDER)
        self.recompute = recompute
        if needs_grad is None:
            needs_grad = any(p.needs_grad for p in self.parents)
        self.needs_grad = needs_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape}, order={self.order})"


def leaf(value) -> Node:
    return Node(value, op="leaf", needs_grad=True)


def constant(value) -> Node:
    return Node(value, op="const", needs_grad=False)


def _wrap(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcasted gradient back to the parent's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _binary(a, b, forward, da, db, op):
    a, b = _wrap(a), _wrap(b)
    av, bv = a.value, b.value
    value = forward(av, bv)
    return Node(
        value,
        parents=(a, b),
        vjps=(
            lambda g: _unbroadcast(da(g, av, bv), av.shape),
            lambda g: _unbroadcast(db(g, av, bv), bv.shape),
        ),
        op=op,
        recompute=forward,
    )


def add(a, b) -> Node:
    return _binary(a, b, lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g, "add")


def sub(a, b) -> Node:
    return _binary(a, b, lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g, "sub")


def mul(a, b) -> Node:
    return _binary(a, b, lambda x, y: x * y, lambda g, x, y: g * y, lambda g, x, y: g * x, "mul")


def div(a, b) -> Node:
    return _binary(
        a, b, lambda x, y: x / y, lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y), "div"
    )


def neg(a) -> Node:
    a = _wrap(a)
    return Node(a.value * -1.0, (a,), (lambda g: -g,), "neg", recompute=lambda x: -x)


def matmul(a, b) -> Node:
    """Matrix product for (2D,2D), (2D,1D) and (1D,2D) operands."""
    a, b = _wrap(a), _wrap(b)
    av, bv = a.value, b.value
    require(1 <= av.ndim <= 2 and 1 <= bv.ndim <= 2 and av.ndim + bv.ndim >= 3,
            f"matmul supports 2Dx2D, 2Dx1D, 1Dx2D, got {av.ndim}Dx{bv.ndim}D")

    def d_a(g):
        if bv.ndim == 2 and av.ndim == 2:
            return g @ bv.T
        if bv.ndim == 1:  # (m,n)@(n,) -> (m,)
            return np.outer(g, bv)
        return g @ bv.T  # (n,)@(n,m): g is (m,), result (n,)

    def d_b(g):
        if av.ndim == 2 and bv.ndim == 2:
            return av.T @ g
        if bv.ndim == 1:
            return av.T @ g
        return np.outer(av, g)  # a 1D: dB = outer(a, g)

    return Node(av @ bv, (a, b), (d_a, d_b), "matmul", recompute=lambda x, y: x @ y)


def transpose(a) -> Node:
    a = _wrap(a)
    return Node(a.value.T, (a,), (lambda g: g.T,), "transpose", recompute=lambda x: x.T)


def exp(a) -> Node:
    a = _wrap(a)
    ev = np.exp(a.value)
    return Node(ev, (a,), (lambda g: g * ev,), "exp", recompute=np.exp)


def log(a) -> Node:
    a = _wrap(a)
    av = a.value
    return Node(np.log(av), (a,), (lambda g: g / av,), "log", recompute=np.log)


def relu(a) -> Node:
    a = _wrap(a)
    mask = a.value > 0
    return Node(
        a.value * mask, (a,), (lambda g: g * mask,), "relu", recompute=lambda x: x * (x > 0)
    )


def tanh(a) -> Node:
    a = _wrap(a)
    tv = np.tanh(a.value)
    return Node(tv, (a,), (lambda g: g * (1.0 - tv * tv),), "tanh", recompute=np.tanh)


def power(a, exponent: float) -> Node:
    """Zero-safe power for nonnegative bases: 0**p := 0 for p > 0.

    The derivative at exactly zero is taken as 1 when p == 1 (identity map)
    and 0 otherwise (continuous extension for p > 1; pragmatic clamp for
    p < 1 where the true one-sided derivative diverges).
    """
    require(exponent > 0, "exponent must be > 0")
    a = _wrap(a)
    av = a.value
    positive = av > 0

    def forward(x):
        out = np.zeros_like(x)
        pos = x > 0
        out[pos] = x[pos] ** exponent
        return out

    dpow = np.zeros_like(av)
    dpow[positive] = exponent * av[positive] ** (exponent - 1.0)
    if exponent == 1.0:
        dpow = np.ones_like(av)
    return Node(forward(av), (a,), (lambda g: g * dpow,), "power", recompute=forward)


def logsumexp(a, axis: int) -> Node:
    """Stabilized log-sum-exp reduction along one axis."""
    a = _wrap(a)
    av = a.value
    m = np.max(av, axis=axis, keepdims=True)
    shifted = np.exp(av - m)
    total = shifted.sum(axis=axis, keepdims=True)
    value = np.squeeze(m + np.log(total), axis=axis)
    softmax = shifted / total  # saved activation for the reverse rule

    def d_a(g):
        return np.expand_dims(g, axis) * softmax

    def forward(x):
        mm = np.max(x, axis=axis, keepdims=True)
        return np.squeeze(mm + np.log(np.sum(np.exp(x - mm), axis=axis, keepdims=True)), axis=axis)

    return Node(value, (a,), (d_a,), "logsumexp", recompute=forward)


def sum_all(a) -> Node:
    a = _wrap(a)
    shape = a.value.shape
    return Node(
        a.value.sum(), (a,), (lambda g: np.broadcast_to(g, shape).copy(),), "sum", recompute=np.sum
    )


def sum_axis(a, axis: int) -> Node:
    a = _wrap(a)
    shape = a.value.shape

    def d_a(g):
        return np.broadcast_to(np.expand_dims(g, axis), shape).copy()

    return Node(a.value.sum(axis=axis), (a,), (d_a,), "sum_axis", recompute=lambda x: x.sum(axis=axis))


def expand_dims(a, axis: int) -> Node:
    a = _wrap(a)
    return Node(
        np.expand_dims(a.value, axis),
        (a,),
        (lambda g: np.squeeze(g, axis=axis),),
        "expand_dims",
        recompute=lambda x: np.expand_dims(x, axis),
    )


def get_rows(a, start: int, stop: int) -> Node:
    a = _wrap(a)
    shape = a.value.shape

    def d_a(g):
        out = np.zeros(shape)
        out[start:stop] = g
        return out

    return Node(
        a.value[start:stop], (a,), (d_a,), "get_rows", recompute=lambda x: x[start:stop]
    )


def get_index(a, index: int) -> Node:
    """Single-row (or single-element for 1D) selection."""
    a = _wrap(a)
    shape = a.value.shape

    def d_a(g):
        out = np.zeros(shape)
        out[index] = g
        return out

    return Node(a.value[index], (a,), (d_a,), "get_index", recompute=lambda x: x[index])


def concat_rows(nodes) -> Node:
    nodes = [_wrap(x) for x in nodes]
    sizes = [nd.value.shape[0] for nd in nodes]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        return lambda g: g[offsets[i] : offsets[i + 1]]

    return Node(
        np.concatenate([nd.value for nd in nodes], axis=0),
        tuple(nodes),
        tuple(make_vjp(i) for i in range(len(nodes))),
        "concat_rows",
        recompute=lambda *vals: np.concatenate(vals, axis=0),
    )


def gather_rows(table, indices) -> Node:
    """Row lookup (embedding); scatter-add on the way back."""
    table = _wrap(table)
    indices = np.asarray(indices, dtype=np.intp)
    shape = table.value.shape

    def d_a(g):
        out = np.zeros(shape)
        np.add.at(out, indices, g)
        return out

    return Node(
        table.value[indices], (table,), (d_a,), "gather_rows", recompute=lambda x: x[indices]
    )


def depthwise_conv(values, kernel) -> Node:
    """Per-channel 1-D cross-correlation over rows, zero-padded to length."""
    values, kernel = _wrap(values), _wrap(kernel)
    vv, kv = values.value, kernel.value
    k, d = kv.shape
    require(k % 2 == 1, "kernel size must be odd")
    require(vv.shape[1] == d, "kernel channels must match values", ShapeMismatchError)
    n = vv.shape[0]
    half = k // 2

    def forward(v, ker):
        padded = np.zeros((n + 2 * half, d))
        padded[half : half + n] = v
        out = np.zeros_like(v)
        for tap in range(k):
            out += ker[tap] * padded[tap : tap + n]
        return out

    def d_values(g):
        gp = np.zeros((n + 2 * half, d))
        gp[half : half + n] = g
        out = np.zeros_like(vv)
        for tap in range(k):
            out += kv[tap] * gp[2 * half - tap : 2 * half - tap + n]
        return out

    def d_kernel(g):
        padded = np.zeros((n + 2 * half, d))
        padded[half : half + n] = vv
        out = np.zeros_like(kv)
        for tap in range(k):
            out[tap] = (padded[tap : tap + n] * g).sum(axis=0)
        return out

    return Node(forward(vv, kv), (values, kernel), (d_values, d_kernel), "dwc", recompute=forward)


def softmax_1d(a) -> Node:
    """softmax(x) = exp(x - lse(x)) for a 1-D node."""
    return exp(sub(a, logsumexp(a, axis=0)))


def log_softmax_1d(a) -> Node:
    return sub(a, logsumexp(a, axis=0))


# ---------------------------------------------------------------------------
# Graph traversal


@dataclass(frozen=True)
class DifferentiableGraph:
    """Execution-ordered view of all operations reachable from an output."""

    output: Node

    def nodes(self) -> list[Node]:
        seen: dict[int, Node] = {}
        stack = [self.output]
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen[id(node)] = node
            stack.extend(node.parents)
        return sorted(seen.values(), key=lambda nd: nd.order)

    def replay_matches(self) -> bool:
        """Re-execute every recorded operation; True iff all outputs are bitwise equal."""
        for node in self.nodes():
            if node.recompute is None:
                continue
            redone = np.asarray(node.recompute(*(p.value for p in node.parents)))
            if not np.array_equal(redone, node.value, equal_nan=True):
                return False
        return True


def backward(output: Node, seed=None) -> dict[int, np.ndarray]:
    """Reverse pass from ``output``; returns grads keyed by ``id(node)``.

    Visits each reachable gradient-bearing node exactly once, in reverse
    execution order.  ``seed`` defaults to 1 for scalar outputs.
    """
    if seed is None:
        require(output.value.ndim == 0, "seed required for non-scalar outputs")
        seed = np.ones(())
    seed = np.asarray(seed, dtype=np.float64)
    require(seed.shape == output.value.shape, "seed shape must match output", ShapeMismatchError)
    require(bool(np.all(np.isfinite(seed))), "seed gradient must be finite")

    nodes = [nd for nd in DifferentiableGraph(output).nodes() if nd.needs_grad]
    grads: dict[int, np.ndarray] = {id(output): seed}
    for node in reversed(nodes):
        g = grads.get(id(node))
        if g is None:
            continue
        for parent, vjp in zip(node.parents, node.vjps):
            if not parent.needs_grad:
                continue
            contribution = vjp(g)
            acc = grads.get(id(parent))
            grads[id(parent)] = contribution if acc is None else acc + contribution
    return grads


def grad(output: Node, leaves, seed=None) -> list[np.ndarray]:
    """Gradients of ``output`` w.r.t. an iterable of leaf nodes."""
    table = backward(output, seed)
    return [table.get(id(lf), np.zeros_like(lf.value)) for lf in leaves]


# ---------------------------------------------------------------------------
# Pipeline builders (mirror the production forward exactly)


def sinkhorn_plan_graph(scores: Node, log_row_m: Node, log_col_m: Node,
                        epsilon: float, iters: int, final_axis: str) -> Node:
    """Unrolled log-domain Sinkhorn returning the plan as a graph node."""
    require(final_axis in ("row", "col"), "final_axis must be 'row' or 'col'")
    require(iters >= 1, "iters must be >= 1")
    logits = mul(scores, 1.0 / epsilon)
    a, b = scores.value.shape
    log_u: Node = constant(np.zeros(a))
    log_v: Node = constant(np.zeros(b))
    for _ in range(iters):
        if final_axis == "row":
            log_v = sub(log_col_m, logsumexp(add(logits, expand_dims(log_u, 1)), axis=0))
            log_u = sub(log_row_m, logsumexp(add(logits, expand_dims(log_v, 0)), axis=1))
        else:
            log_u = sub(log_row_m, logsumexp(add(logits, expand_dims(log_v, 0)), axis=1))
            log_v = sub(log_col_m, logsumexp(add(logits, expand_dims(log_u, 1)), axis=0))
    return exp(add(add(logits, expand_dims(log_u, 1)), expand_dims(log_v, 0)))


def pivot_mass_graph(mass_logits: Node, temperature: float) -> tuple[Node, Node]:
    """(sigma, log_sigma) from tempered mass logits."""
    require(temperature > 0, "temperature must be > 0")
    scaled = mul(mass_logits, 1.0 / temperature)
    log_sigma = log_softmax_1d(scaled)
    return exp(log_sigma), log_sigma


def lot_attention_graph(Q: Node, K: Node, V: Node, locations: Node,
                        sigma: Node, log_sigma: Node,
                        epsilon: float, iters: int, scaled: bool = True) -> Node:
    """Differentiable LOT attention, identical in arithmetic to the production path."""
    n = Q.value.shape[0]
    log_p_tok = constant(np.full(n, -np.log(n)))
    s_q = matmul(locations, transpose(Q))
    s_k = matmul(locations, transpose(K))
    gamma1 = sinkhorn_plan_graph(s_q, log_sigma, log_p_tok, epsilon, iters, "col")
    gamma2 = sinkhorn_plan_graph(s_k, log_sigma, log_p_tok, epsilon, iters, "row")
    pooled = div(matmul(gamma2, V), expand_dims(sigma, 1))
    out = matmul(transpose(gamma1), pooled)
    if scaled:
        out = mul(out, float(n))
    return out


@dataclass(frozen=True)
class GradientBundle:
    """Gradients for the trainable attention parameters, shaped like them."""

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    pivot_locations: np.ndarray
    mass_logits: np.ndarray

    def __post_init__(self):
        for name in ("w_q", "w_k", "w_v", "pivot_locations", "mass_logits"):
            require(bool(np.all(np.isfinite(getattr(self, name)))), f"gradient {name} is not finite")


def build_lot_attention_graph(
    tokens,
    w_q,
    w_k,
    w_v,
    pivot_locations,
    mass_logits,
    mass_temperature: float,
    epsilon: float,
    iters: int,
):
    """Build the unrolled graph once; return (output_node, parameter_leaves)."""
    X = constant(np.asarray(tokens, dtype=np.float64))
    leaves = {
        "w_q": leaf(w_q),
        "w_k": leaf(w_k),
        "w_v": leaf(w_v),
        "pivot_locations": leaf(pivot_locations),
        "mass_logits": leaf(mass_logits),
    }
    Q = matmul(X, transpose(leaves["w_q"]))
    K = matmul(X, transpose(leaves["w_k"]))
    V = matmul(X, transpose(leaves["w_v"]))
    sigma, log_sigma = pivot_mass_graph(leaves["mass_logits"], mass_temperature)
    out = lot_attention_graph(
        Q, K, V, leaves["pivot_locations"], sigma, log_sigma, epsilon, iters, scaled=True
    )
    return out, leaves


def backward_lot_attention(
    tokens,
    w_q,
    w_k,
    w_v,
    pivot_locations,
    mass_logits,
    upstream_grad,
    mass_temperature: float = 1.0,
    epsilon: float = 1.0,
    iters: int = 10,
) -> GradientBundle:
    """Exact reverse-mode gradients of the T-sweep unrolled attention output.

    ``upstream_grad`` is dLoss/dOutput, shape (n, d_v).  Deterministic: two
    calls on identical inputs produce bitwise-identical gradients.
    """
    upstream = np.asarray(upstream_grad, dtype=np.float64)
    if not np.all(np.isfinite(upstream)):
        raise InvalidInputError("upstream gradient contains non-finite entries")
    out, leaves = build_lot_attention_graph(
        tokens, w_q, w_k, w_v, pivot_locations, mass_logits, mass_temperature, epsilon, iters
    )
    require(upstream.shape == out.value.shape, "upstream gradient shape must match output", ShapeMismatchError)
    grads = backward(out, upstream)
    return GradientBundle(
        w_q=grads.get(id(leaves["w_q"]), np.zeros_like(leaves["w_q"].value)),
        w_k=grads.get(id(leaves["w_k"]), np.zeros_like(leaves["w_k"].value)),
        w_v=grads.get(id(leaves["w_v"]), np.zeros_like(leaves["w_v"].value)),
        pivot_locations=grads.get(id(leaves["pivot_locations"]), np.zeros_like(leaves["pivot_locations"].value)),
        mass_logits=grads.get(id(leaves["mass_logits"]), np.zeros_like(leaves["mass_logits"].value)),
    )


# ---------------------------------------------------------------------------
# Independent verification oracle


def finite_difference_check(loss_fn, grad_fn, params: dict, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn(params) -> float`` must be deterministic; ``grad_fn(params)``
    returns a dict of analytic gradients matching ``params``.  The relative
    error denominator is floored at 1e-8 to avoid blowup at zero gradients.
    """
    require(h > 0, "step size must be > 0")
    analytic = grad_fn(params)
    worst = 0.0
    for name, value in params.items():
        value = np.asarray(value, dtype=np.float64)
        grad_a = np.asarray(analytic[name], dtype=np.float64)
        require(grad_a.shape == value.shape, f"analytic grad shape mismatch for {name}", ShapeMismatchError)
        flat = value.ravel()
        for idx in range(flat.size):
            bumped = dict(params)
            plus = value.copy().ravel()
            plus[idx] += h
            bumped[name] = plus.reshape(value.shape)
            f_plus = float(loss_fn(bumped))
            minus = value.copy().ravel()
            minus[idx] -= h
            bumped[name] = minus.reshape(value.shape)
            f_minus = float(loss_fn(bumped))
            if not np.isfinite(f_plus) or not np.isfinite(f_minus):
                raise InvalidInputError("loss is not finite at perturbed parameters")
            numeric = (f_plus - f_minus) / (2.0 * h)
            err = abs(grad_a.ravel()[idx] - numeric) / max(1e-8, abs(numeric))
            worst = max(worst, err)
    return worst
