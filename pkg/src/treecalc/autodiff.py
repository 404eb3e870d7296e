"""Reverse-mode automatic differentiation over per-example tapes.

Trees differ per example, so every forward pass records its own ``Tape``.
All values are float64 numpy arrays; binary ops require equal shapes,
except that an operand with a single element broadcasts as a scalar.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    """Dense float64 array plus an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


def _finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not math.isfinite(float(arr.sum())):
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"{op} produced non-finite values")
    return arr


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 + 0.5 * np.tanh(0.5 * x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.full(shape, g.sum())


Backward = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of operations for one forward pass.

    With ``enabled=False`` the ops only compute values (inference mode).
    """

    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Backward]] = []

    def __len__(self) -> int:
        return len(self.nodes)

    # -- recording ---------------------------------------------------------

    def op(self, value: np.ndarray, inputs: Sequence[Tensor], backward: Backward,
           name: str = "op") -> Tensor:
        """Record a custom op; ``backward(g)`` returns one gradient per input."""
        value = _finite(value, name)
        needs = self.enabled and any(t.requires_grad for t in inputs)
        out = Tensor._wrap(value, needs)
        if needs:
            self.nodes.append((out, tuple(inputs), backward))
        return out

    # -- elementwise -------------------------------------------------------

    def elementwise(self, kind: str, a: Tensor, b: Tensor | float | None = None) -> Tensor:
        if kind in ("sigmoid", "tanh"):
            if b is not None:
                raise ShapeError(f"{kind} is unary")
            return getattr(self, kind)(a)
        if kind == "scale":
            return self.scale(a, float(b))
        if kind in ("add", "sub", "hadamard"):
            return getattr(self, kind)(a, b)
        raise ValueError(f"unknown elementwise op {kind!r}")

    @staticmethod
    def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
        if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
            raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        self._check_binary(a, b, "add")
        sa, sb = a.shape, b.shape
        return self.op(a.data + b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        self._check_binary(a, b, "sub")
        sa, sb = a.shape, b.shape
        return self.op(a.data - b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")

    def hadamard(self, a: Tensor, b: Tensor) -> Tensor:
        self._check_binary(a, b, "hadamard")
        ad, bd = a.data, b.data
        return self.op(ad * bd, (a, b),
                       lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
                       "hadamard")

    def scale(self, a: Tensor, c: float) -> Tensor:
        return self.op(a.data * c, (a,), lambda g: (g * c,), "scale")

    def sigmoid(self, a: Tensor) -> Tensor:
        s = _sigmoid(a.data)
        return self.op(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")

    def tanh(self, a: Tensor) -> Tensor:
        t = np.tanh(a.data)
        return self.op(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")

    def add_n(self, terms: Sequence[Tensor]) -> Tensor:
        if not terms:
            raise ShapeError("add_n needs at least one term")
        shape = terms[0].shape
        for t in terms[1:]:
            if t.shape != shape:
                raise ShapeError(f"add_n: shape mismatch {shape} vs {t.shape}")
        total = terms[0].data
        for t in terms[1:]:
            total = total + t.data
        return self.op(total, terms, lambda g: (g,) * len(terms), "add_n")

    def sum_of_products(self, pairs: Sequence[tuple[Tensor, Tensor]]) -> Tensor:
        """Σ a_k ⊙ b_k, one record."""
        flat: list[Tensor] = []
        total = None
        for a, b in pairs:
            self._check_binary(a, b, "sum_of_products")
            prod = a.data * b.data
            total = prod if total is None else total + prod
            flat.extend((a, b))

        def back(g):
            out = []
            for a, b in pairs:
                out.append(g * b.data)
                out.append(g * a.data)
            return out

        return self.op(total, flat, back, "sum_of_products")

    # -- linear algebra ----------------------------------------------------

    def matvec(self, W: Tensor, x: Tensor) -> Tensor:
        if W.data.ndim != 2 or x.data.ndim != 1 or W.shape[1] != x.shape[0]:
            raise ShapeError(f"matvec: cannot multiply {W.shape} by {x.shape}")
        Wd, xd = W.data, x.data
        return self.op(Wd @ xd, (W, x), lambda g: (g[:, None] * xd[None, :], Wd.T @ g), "matvec")

    def linear(self, pairs: Sequence[tuple[Tensor, Tensor]],
               addends: Sequence[Tensor] = ()) -> Tensor:
        """Σ W_k x_k + Σ v_j as a single record."""
        total = None
        for W, x in pairs:
            if W.data.ndim != 2 or x.data.ndim != 1 or W.shape[1] != x.shape[0]:
                raise ShapeError(f"linear: cannot multiply {W.shape} by {x.shape}")
            term = W.data @ x.data
            total = term if total is None else total + term
        for v in addends:
            if total is None:
                total = v.data.copy()
            elif v.shape != total.shape:
                raise ShapeError(f"linear: addend shape {v.shape} vs {total.shape}")
            else:
                total = total + v.data
        if total is None:
            raise ShapeError("linear needs at least one term")
        inputs: list[Tensor] = []
        for W, x in pairs:
            inputs.extend((W, x))
        inputs.extend(addends)
        n_add = len(addends)

        def back(g):
            out = []
            for W, x in pairs:
                out.append(g[:, None] * x.data[None, :])
                out.append(W.data.T @ g)
            out.extend((g,) * n_add)
            return out

        return self.op(total, inputs, back, "linear")

    def bilinear_contract(self, W: Tensor, z: Tensor, x: Tensor) -> Tensor:
        """result[l] = Σ_{i,j} W[l,i,j] z[i] x[j]."""
        if (W.data.ndim != 3 or z.data.ndim != 1 or x.data.ndim != 1
                or W.shape[1] != z.shape[0] or W.shape[2] != x.shape[0]):
            raise ShapeError(f"bilinear_contract: W {W.shape}, z {z.shape}, x {x.shape}")
        Wd, zd, xd = W.data, z.data, x.data
        Wx = Wd @ xd              # (m, n)
        out = Wx @ zd

        def back(g):
            gW = g[:, None, None] * zd[None, :, None] * xd[None, None, :]
            gz = Wx.T @ g
            gx = np.tensordot(g, Wd, axes=(0, 0)).T @ zd
            return gW, gz, gx

        return self.op(out, (W, z, x), back, "bilinear_contract")

    def dot(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape or a.data.ndim != 1:
            raise ShapeError(f"dot: shape mismatch {a.shape} vs {b.shape}")
        ad, bd = a.data, b.data
        return self.op(np.array([ad @ bd]), (a, b),
                       lambda g: (g[0] * bd, g[0] * ad), "dot")

    def sum(self, a: Tensor) -> Tensor:
        shape = a.shape
        return self.op(np.array([a.data.sum()]), (a,),
                       lambda g: (np.full(shape, g[0]),), "sum")

    def concat(self, parts: Sequence[Tensor]) -> Tensor:
        for p in parts:
            if p.data.ndim != 1:
                raise ShapeError(f"concat expects vectors, got {p.shape}")
        sizes = [p.shape[0] for p in parts]
        bounds = np.cumsum([0] + sizes)

        def back(g):
            return [g[bounds[k]:bounds[k + 1]] for k in range(len(parts))]

        return self.op(np.concatenate([p.data for p in parts]), parts, back, "concat")

    def row(self, M: Tensor, i: int) -> Tensor:
        if M.data.ndim != 2:
            raise ShapeError(f"row expects a matrix, got {M.shape}")
        shape = M.shape

        def back(g):
            gm = np.zeros(shape)
            gm[i] = g
            return (gm,)

        return self.op(M.data[i].copy(), (M,), back, "row")

    def pick(self, v: Tensor, i: int) -> Tensor:
        shape = v.shape

        def back(g):
            gv = np.zeros(shape)
            gv[i] = g[0]
            return (gv,)

        return self.op(np.array([v.data[i]]), (v,), back, "pick")

    def softmax(self, v: Tensor) -> Tensor:
        if v.data.ndim != 1 or v.shape[0] < 2:
            raise ShapeError(f"softmax expects a vector of length >= 2, got {v.shape}")
        e = np.exp(v.data - v.data.max())
        s = e / e.sum()
        return self.op(s, (v,), lambda g: (s * (g - g @ s),), "softmax")

    # -- regularisation and loss ---------------------------------------------

    def dropout(self, a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
        """Inverted dropout; the sampled mask is kept in the backward closure."""
        if rate <= 0.0:
            return a
        mask = (rng.random(a.shape) >= rate) / (1.0 - rate)
        return self.op(a.data * mask, (a,), lambda g: (g * mask,), "dropout")

    def binary_cross_entropy(self, p: Tensor, target: float, clamp: float = 1e-12) -> Tensor:
        pv = np.clip(p.data[:1], clamp, 1.0 - clamp)
        value = -np.log(pv) if target >= 0.5 else -np.log1p(-pv)
        grad = -1.0 / pv if target >= 0.5 else 1.0 / (1.0 - pv)
        return self.op(value, (p,), lambda g: (g * grad,), "bce")

    # -- reverse pass --------------------------------------------------------

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            return
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        produced = {id(out) for out, _, _ in self.nodes}
        for out, inputs, back in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for t, gi in zip(inputs, back(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key not in produced:
                    # a leaf: accumulate straight into its buffer
                    if t.grad is None:
                        t.grad = np.zeros_like(t.data)
                    t.grad += gi
                    continue
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))


def numeric_gradient(f: Callable[[], float], param: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function w.r.t. every entry of ``param``.

    Works in the dtype of ``param.data``.
    """
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = f()
        flat[k] = orig - h
        fm = f()
        flat[k] = orig
        gflat[k] = (fp - fm) / (2.0 * h)
    return grad


def grad_check(build: Callable[[Tape], Tensor], params: Sequence[Tensor], h: float = 1e-5,
               precision=np.longdouble) -> float:
    """Max relative error between tape gradients and central differences.

    ``build`` must construct the scalar output on the tape it is given and
    must be deterministic (no fresh randomness between calls).  The
    finite-difference passes run in ``precision`` (extended by default): in
    float64 a gradient entry near 1e-9 moves the output by about 1e-14, which
    is at the rounding level of an O(1) output.
    """
    for p in params:
        p.requires_grad = True
        p.zero_grad()
    tape = Tape()
    out = build(tape)
    tape.backward(out)
    analytic = [p.grad.copy() for p in params]

    saved = [p.data for p in params]
    for p in params:
        p.data = p.data.astype(precision)

    def f():
        return build(Tape(enabled=False)).data.reshape(-1)[0]

    worst = 0.0
    try:
        for p, a in zip(params, analytic):
            num = numeric_gradient(f, p, h).astype(np.float64)
            if a.size:
                worst = max(worst, float(relative_error(a, num).max()))
    finally:
        for p, data in zip(params, saved):
            p.data = data
    return worst
