"""Dense float64 tensors with reverse-mode automatic differentiation.

Every training-time computation in this package runs through the small set
of primitives below, recorded on an explicit Tape and replayed backward
exactly once.  Gradients land in the ``grad`` slot of parameter tensors.
The engine is deliberately minimal: full-graph forward passes at desk scale
do not need fusion, broadcasting generality, or higher-order derivatives.
"""

from __future__ import annotations

import numpy as np

from . import graph as graph_mod


class TapeError(RuntimeError):
    """Misuse of a tape (e.g. backward run twice)."""


class DivergenceError(RuntimeError):
    """Non-finite loss or gradient encountered during training."""


class EmptyBatchError(ValueError):
    """A loss was requested over a batch with no labeled examples."""


class Tensor:
    """Dense float64 array with an optional gradient slot of equal shape."""

    __slots__ = ("value", "grad", "requires_grad")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of primitive ops, replayable backward exactly once."""

    def __init__(self):
        self._records = []  # (output, inputs, vjp)
        self._spent = False

    def record(self, output: Tensor, inputs: tuple, vjp) -> None:
        self._records.append((output, inputs, vjp))

    def backward(self, loss: Tensor, params=()) -> None:
        """Accumulate d(loss)/d(tensor) for everything reachable from loss.

        Parameters listed in ``params`` always end up with a grad slot;
        those not reachable on the tape get zeros.
        """
        if self._spent:
            raise TapeError("backward already ran on this tape")
        self._spent = True
        if loss.value.shape != ():
            raise TapeError(f"loss must be scalar, got shape {loss.value.shape}")
        adjoint = {id(loss): np.ones((), dtype=np.float64)}
        for output, inputs, vjp in reversed(self._records):
            out_grad = adjoint.pop(id(output), None)
            if out_grad is None:
                continue
            for tensor, grad in zip(inputs, vjp(out_grad)):
                if grad is None:
                    continue
                key = id(tensor)
                if key in adjoint:
                    adjoint[key] = adjoint[key] + grad
                else:
                    adjoint[key] = grad
        for p in params:
            got = adjoint.get(id(p))
            p.grad = np.zeros_like(p.value) if got is None else np.array(got)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def matmul(tape: Tape, a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.value @ b.value)
    av, bv = a.value, b.value

    def vjp(g):
        return g @ bv.T, av.T @ g

    tape.record(out, (a, b), vjp)
    return out


def spmm(tape: Tape, adj: graph_mod.NormalizedAdjacency, x: Tensor) -> Tensor:
    """Normalized-adjacency aggregation; the adjacency is a constant."""
    out = Tensor(graph_mod.spmm(adj, x.value))

    def vjp(g):
        # the normalized adjacency is symmetric, so adj^T g == adj g
        return (graph_mod.spmm(adj, g),)

    tape.record(out, (x,), vjp)
    return out


def add(tape: Tape, a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; also supports a (n, c) + (c,) bias broadcast."""
    av, bv = a.value, b.value
    if av.shape == bv.shape:
        out = Tensor(av + bv)

        def vjp(g):
            return g, g

    elif av.ndim == 2 and bv.shape == (av.shape[1],):
        out = Tensor(av + bv)

        def vjp(g):
            return g, g.sum(axis=0)

    else:
        raise TapeError(f"incompatible shapes for add: {av.shape} vs {bv.shape}")
    tape.record(out, (a, b), vjp)
    return out


def relu(tape: Tape, x: Tensor) -> Tensor:
    mask = x.value > 0
    out = Tensor(np.where(mask, x.value, 0.0))

    def vjp(g):
        return (g * mask,)

    tape.record(out, (x,), vjp)
    return out


def mul_mask(tape: Tape, x: Tensor, mask: np.ndarray) -> Tensor:
    """Multiply by a constant mask (dropout)."""
    out = Tensor(x.value * mask)

    def vjp(g):
        return (g * mask,)

    tape.record(out, (x,), vjp)
    return out


def take_rows(tape: Tape, x: Tensor, indices: np.ndarray) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)
    out = Tensor(x.value[idx])
    shape = x.value.shape

    def vjp(g):
        full = np.zeros(shape, dtype=np.float64)
        np.add.at(full, idx, g)  # duplicate indices accumulate
        return (full,)

    tape.record(out, (x,), vjp)
    return out


def concat_cols(tape: Tape, parts) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    widths = [p.value.shape[1] for p in parts]
    out = Tensor(np.concatenate([p.value for p in parts], axis=1))
    splits = np.cumsum(widths)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=1))

    tape.record(out, tuple(parts), vjp)
    return out


def log_softmax(values: np.ndarray) -> np.ndarray:
    """Numerically stable row-wise log-softmax on plain arrays."""
    shifted = values - values.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(values: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(values))


def softmax_cross_entropy(tape: Tape, logits: Tensor, labels, mask=None) -> Tensor:
    """Mean over masked-in rows of -log softmax(logits)[label].

    ``mask`` selects the labeled rows; rows masked out contribute nothing
    (unknown-label nodes).  An all-false mask raises EmptyBatchError.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.value.shape
    if labels.shape != (n,):
        raise TapeError(f"labels must have shape ({n},), got {labels.shape}")
    if mask is None:
        mask = np.ones(n, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
    rows = np.nonzero(mask)[0]
    if rows.size == 0:
        raise EmptyBatchError("cross-entropy over a batch with no labeled examples")
    if labels[rows].min() < 0 or labels[rows].max() >= c:
        raise TapeError("label outside 0..{} on a masked-in row".format(c - 1))
    logp = log_softmax(logits.value[rows])
    out = Tensor(-logp[np.arange(rows.size), labels[rows]].mean())
    probs = np.exp(logp)

    def vjp(g):
        grad_rows = probs.copy()
        grad_rows[np.arange(rows.size), labels[rows]] -= 1.0
        grad = np.zeros((n, c), dtype=np.float64)
        grad[rows] = grad_rows * (float(g) / rows.size)
        return (grad,)

    tape.record(out, (logits,), vjp)
    return out


def distillation_loss(
    tape: Tape, logits: Tensor, target_probs: np.ndarray, temperature: float,
    n_classes: int | None = None,
) -> Tensor:
    """Temperature-softened cross-entropy against fixed target probabilities,
    shifted by the (constant) target entropy so agreement scores exactly 0.

    Only the first ``n_classes`` logit columns (the classes that existed
    before the current task) enter the loss and receive gradient; the
    entropy shift leaves the gradient untouched.
    """
    if temperature <= 0:
        raise TapeError("temperature must be positive")
    n, c = logits.value.shape
    keep = c if n_classes is None else int(n_classes)
    if not 1 <= keep <= c:
        raise TapeError(f"n_classes must be in 1..{c}, got {keep}")
    target = np.asarray(target_probs, dtype=np.float64)
    if target.shape != (n, keep):
        raise TapeError(f"target probabilities must have shape ({n}, {keep})")
    logq = log_softmax(logits.value[:, :keep] / temperature)
    target_logp = np.where(target > 0, np.log(np.where(target > 0, target, 1.0)), 0.0)
    out = Tensor((target * (target_logp - logq)).sum(axis=1).mean())
    q = np.exp(logq)

    def vjp(g):
        grad = np.zeros((n, c), dtype=np.float64)
        grad[:, :keep] = (q - target) * (float(g) / (n * temperature))
        return (grad,)

    tape.record(out, (logits,), vjp)
    return out


def squared_l2_norm(tape: Tape, x: Tensor) -> Tensor:
    out = Tensor(np.sum(x.value * x.value))
    xv = x.value

    def vjp(g):
        return (2.0 * float(g) * xv,)

    tape.record(out, (x,), vjp)
    return out


def scale_add(tape: Tape, terms, coefficients) -> Tensor:
    """Scalar combine: sum of coefficient * scalar-tensor."""
    terms = list(terms)
    coeffs = [float(c) for c in coefficients]
    if len(terms) != len(coeffs):
        raise TapeError("terms and coefficients must have equal length")
    total = 0.0
    for t, c in zip(terms, coeffs):
        if t.value.shape != ():
            raise TapeError("scale_add operates on scalar tensors")
        total += c * float(t.value)
    out = Tensor(np.float64(total))

    def vjp(g):
        return tuple(np.asarray(c * float(g)) for c in coeffs)

    tape.record(out, tuple(terms), vjp)
    return out


def quadratic_penalty(
    tape: Tape, param: Tensor, anchor: np.ndarray, importance: np.ndarray
) -> Tensor:
    """sum_i importance_i * (param_i - anchor_i)^2 as one fused scalar op."""
    anchor = np.asarray(anchor, dtype=np.float64)
    importance = np.asarray(importance, dtype=np.float64)
    diff = param.value - anchor
    out = Tensor(np.sum(importance * diff * diff))

    def vjp(g):
        return (2.0 * float(g) * importance * diff,)

    tape.record(out, (param,), vjp)
    return out


def dropout(tape: Tape, x: Tensor, rate: float, train: bool, rng=None) -> Tensor:
    """Inverted dropout: zero with probability ``rate``, scale survivors.

    Eval mode is the identity, so inference carries no scale factor.
    """
    if not 0.0 <= rate < 1.0:
        raise TapeError(f"dropout rate must lie in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise TapeError("train-mode dropout needs an rng")
    mask = (rng.random(x.value.shape) >= rate) / (1.0 - rate)
    return mul_mask(tape, x, mask)


class AdamState:
    """First/second moment accumulators plus step counter for Adam."""

    def __init__(self, params, lr: float = 0.001, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.value) for p in params]
        self.v = [np.zeros_like(p.value) for p in params]

    def resize(self, index: int, new_shape: tuple) -> None:
        """Grow the moments of one parameter; new entries start at zero."""
        for moments in (self.m, self.v):
            old = moments[index]
            if old.shape == new_shape:
                continue
            grown = np.zeros(new_shape, dtype=np.float64)
            slices = tuple(slice(0, s) for s in old.shape)
            grown[slices] = old
            moments[index] = grown


def adam_step(params, grads, state: AdamState) -> None:
    """One bias-corrected Adam update, in place.

    Non-finite gradients abort the run: continuing from a diverged state
    would silently poison every later task.
    """
    if len(params) != len(state.m):
        raise TapeError("optimizer state does not match parameter list")
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.value.shape:
            raise TapeError(
                f"gradient {i} has shape {g.shape}, parameter has {p.value.shape}"
            )
        if not np.all(np.isfinite(g)):
            raise DivergenceError(
                f"non-finite gradient for parameter {i}; run aborted"
            )
    state.step_count += 1
    t = state.step_count
    bias1 = 1.0 - state.beta1 ** t
    bias2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / bias1
        v_hat = v / bias2
        p.value = p.value - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


def flatten_params(params) -> np.ndarray:
    """Concatenate parameter values in list order, each raveled row-major."""
    if not params:
        return np.zeros(0, dtype=np.float64)
    return np.concatenate([p.value.ravel() for p in params])


def unflatten_params(vector: np.ndarray, params) -> list[np.ndarray]:
    """Split a flat vector back into arrays shaped like ``params``."""
    vector = np.asarray(vector, dtype=np.float64)
    total = sum(p.value.size for p in params)
    if vector.shape != (total,):
        raise TapeError(
            f"flat vector has length {vector.shape}, expected ({total},)"
        )
    out, offset = [], 0
    for p in params:
        size = p.value.size
        out.append(vector[offset:offset + size].reshape(p.value.shape))
        offset += size
    return out


def finite_difference_gradients(loss_fn, params, step: float = 1e-5) -> list[np.ndarray]:
    """Central-difference gradients of ``loss_fn()`` w.r.t. each parameter.

    The independent oracle for every backward pass in this package: it only
    re-evaluates the forward computation, never the tape.
    """
    grads = []
    for p in params:
        g = np.zeros_like(p.value)
        flat_value = p.value.ravel()
        flat_grad = g.ravel()
        for i in range(flat_value.size):
            original = flat_value[i]
            flat_value[i] = original + step
            up = float(loss_fn())
            flat_value[i] = original - step
            down = float(loss_fn())
            flat_value[i] = original
            flat_grad[i] = (up - down) / (2.0 * step)
        grads.append(g)
    return grads


def relative_gradient_error(analytic, numeric) -> float:
    """max_i |a_i - n_i| / max(1e-8, |a_i|, |n_i|) across parameter arrays."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(1e-8, np.maximum(np.abs(a), np.abs(n)))
        worst = max(worst, float(np.max(np.abs(a - n) / denom))) if a.size else worst
    return worst
