"""Node transition functions for recursive networks over expression trees.

Every step maps a node's symbol embedding ``x`` (dim n) and the states of its
one or two children to a new ``NodeState``.  Parameters arrive as a plain dict
of tensors for the node's operator symbol, so duplicate operators in a tree
share one set.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tape, Tensor

MAX_ARITY = 2
CELL_KINDS = ("tree_rnn", "tree_lstm", "second_order", "mtree_lstm", "mi_tree_lstm", "stack_rnn")


class ArityError(ValueError):
    pass


@dataclass
class NodeState:
    z: Tensor
    c: Tensor
    stack: Tensor | None = None


def _check_children(children: Sequence[NodeState]) -> None:
    if not 1 <= len(children) <= MAX_ARITY:
        raise ArityError(f"cells take 1..{MAX_ARITY} children, got {len(children)}")


def _zeros(n: int) -> Tensor:
    return Tensor._wrap(np.zeros(n), False)


# -- parameter shapes -----------------------------------------------------------

def _gate_shapes(n: int) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    for g in ("i", "o", "u", "f"):
        shapes[f"W_{g}"] = (n, n)
        shapes[f"b_{g}"] = (n,)
    for g in ("i", "o", "u"):
        for k in range(1, MAX_ARITY + 1):
            shapes[f"U_{g}{k}"] = (n, n)
    # forget gate for child k reads child l through U_f{k}{l}
    for k in range(1, MAX_ARITY + 1):
        for l in range(1, MAX_ARITY + 1):
            shapes[f"U_f{k}{l}"] = (n, n)
    return shapes


def param_shapes(kind: str, n: int, first_order: bool = False) -> dict[str, tuple[int, ...]]:
    """Per-operator parameter shapes for a cell family."""
    k = MAX_ARITY
    if kind == "tree_rnn":
        return {"W": (n, k * n), "b": (n,)}
    if kind == "second_order":
        if first_order:
            return {"W_h": (n, n), "W_x": (n, k * n), "b": (n,)}
        return {"W": (n, n, k * n), "b": (n,)}
    if kind in ("tree_lstm", "mi_tree_lstm"):
        return _gate_shapes(n)
    if kind == "mtree_lstm":
        shapes = {"W_m": (n, n), "R_z": (n, n), "R_m": (n, n)}
        shapes.update(_gate_shapes(n))
        return shapes
    if kind == "stack_rnn":
        return {"W": (n, n), "R": (n, n), "b": (n,)}
    raise ValueError(f"unknown cell kind {kind!r}")


def init_param(name: str, shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    if len(shape) == 1:
        return np.zeros(shape)
    if len(shape) == 3:
        bound = 1.0 / np.sqrt(shape[1] * shape[2])
    else:
        bound = 1.0 / np.sqrt(shape[1])
    return rng.uniform(-bound, bound, size=shape)


# -- cells ---------------------------------------------------------------------

def embed_leaf(tape: Tape, embedding: Tensor, stack_shape: tuple[int, int] | None = None) -> NodeState:
    n = embedding.shape[0]
    stack = Tensor._wrap(np.zeros(stack_shape), False) if stack_shape else None
    return NodeState(tape.tanh(embedding), _zeros(n), stack)


def tree_rnn_step(tape: Tape, p: dict, x: Tensor, children: Sequence[NodeState],
                  first_order: bool = False) -> NodeState:
    _check_children(children)
    n = p["b"].shape[0]
    parts = [ch.z for ch in children]
    if len(parts) < MAX_ARITY:
        parts.append(_zeros(n * (MAX_ARITY - len(parts))))
    h = tape.concat(parts)
    z = tape.tanh(tape.linear([(p["W"], h)], [p["b"]]))
    return NodeState(z, _zeros(n))


def second_order_step(tape: Tape, p: dict, x: Tensor, children: Sequence[NodeState],
                      first_order: bool = False) -> NodeState:
    """z = tanh(W(h, x_children) + b) with h the operator embedding.

    The first-order twin replaces the tensor contraction by W_h h + W_x x.
    """
    _check_children(children)
    n = p["b"].shape[0]
    parts = [ch.z for ch in children]
    if len(parts) < MAX_ARITY:
        parts.append(_zeros(n * (MAX_ARITY - len(parts))))
    xc = tape.concat(parts)
    if first_order:
        pre = tape.linear([(p["W_h"], x), (p["W_x"], xc)], [p["b"]])
    else:
        pre = tape.add(tape.bilinear_contract(p["W"], x, xc), p["b"])
    return NodeState(tape.tanh(pre), _zeros(n))


def _lstm_tail(tape: Tape, gate_pre: Callable[[str, list], Tensor],
               children: Sequence[NodeState]) -> NodeState:
    """Gates from ``gate_pre(gate, U-terms)`` then c and z updates."""
    k = len(children)
    i = tape.sigmoid(gate_pre("i", [f"U_i{l + 1}" for l in range(k)]))
    o = tape.sigmoid(gate_pre("o", [f"U_o{l + 1}" for l in range(k)]))
    u = tape.tanh(gate_pre("u", [f"U_u{l + 1}" for l in range(k)]))
    pairs = [(i, u)]
    for m, ch in enumerate(children):
        f = tape.sigmoid(gate_pre("f", [f"U_f{m + 1}{l + 1}" for l in range(k)]))
        pairs.append((f, ch.c))
    c = tape.sum_of_products(pairs)
    z = tape.hadamard(o, tape.tanh(c))
    return NodeState(z, c)


def tree_lstm_step(tape: Tape, p: dict, x: Tensor, children: Sequence[NodeState],
                   first_order: bool = False) -> NodeState:
    """N-ary Tree-LSTM with the operator embedding as input."""
    _check_children(children)
    zs = [ch.z for ch in children]

    def pre(g, us):
        return tape.linear([(p[f"W_{g}"], x)] + [(p[u], z) for u, z in zip(us, zs)], [p[f"b_{g}"]])

    return _lstm_tail(tape, pre, children)


def mi_tree_lstm_step(tape: Tape, p: dict, x: Tensor, children: Sequence[NodeState],
                      first_order: bool = False) -> NodeState:
    """Gates g = act((W_g x) ⊙ (Σ_l U_gl z_l) + b_g).

    With ``first_order`` the Hadamard becomes a sum, i.e. the plain Tree-LSTM.
    """
    if first_order:
        return tree_lstm_step(tape, p, x, children)
    _check_children(children)
    zs = [ch.z for ch in children]

    def pre(g, us):
        wx = tape.matvec(p[f"W_{g}"], x)
        uz = tape.linear([(p[u], z) for u, z in zip(us, zs)])
        return tape.add(tape.hadamard(wx, uz), p[f"b_{g}"])

    return _lstm_tail(tape, pre, children)


def mtree_lstm_step(tape: Tape, p: dict, x: Tensor, children: Sequence[NodeState],
                    first_order: bool = False) -> NodeState:
    """Multiplicative Tree-LSTM.

    Each child passes through an intermediate state
        zhat_l = W_m x + R_z z_l,   m_l = (W_m x) ⊙ (R_m zhat_l)
    and the m_l replace the child states in every gate.  ``first_order`` uses
    ``+`` in place of the Hadamard product.
    """
    _check_children(children)
    wmx = tape.matvec(p["W_m"], x)
    ms = []
    for ch in children:
        zhat = tape.linear([(p["R_z"], ch.z)], [wmx])
        if first_order:
            ms.append(tape.linear([(p["R_m"], zhat)], [wmx]))
        else:
            ms.append(tape.hadamard(wmx, tape.matvec(p["R_m"], zhat)))

    def pre(g, us):
        return tape.linear([(p[f"W_{g}"], x)] + [(p[u], m) for u, m in zip(us, ms)], [p[f"b_{g}"]])

    return _lstm_tail(tape, pre, children)


def stack_rnn_step(tape: Tape, p: dict, x: Tensor, children: Sequence[NodeState],
                   first_order: bool = False) -> NodeState:
    """z = tanh((W x) ⊙ (R zhat) + b) with zhat the sum of (stack-enriched) children.

    Meant to run with stack memory, whose read is already folded into the
    children's z by the caller.
    """
    _check_children(children)
    n = p["b"].shape[0]
    zhat = tape.add_n([ch.z for ch in children]) if len(children) > 1 else children[0].z
    if first_order:
        pre = tape.linear([(p["W"], x), (p["R"], zhat)], [p["b"]])
    else:
        pre = tape.add(tape.hadamard(tape.matvec(p["W"], x), tape.matvec(p["R"], zhat)), p["b"])
    return NodeState(tape.tanh(pre), _zeros(n))


STEPS = {
    "tree_rnn": tree_rnn_step,
    "tree_lstm": tree_lstm_step,
    "second_order": second_order_step,
    "mtree_lstm": mtree_lstm_step,
    "mi_tree_lstm": mi_tree_lstm_step,
    "stack_rnn": stack_rnn_step,
}
