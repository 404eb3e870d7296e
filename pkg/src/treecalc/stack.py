"""Differentiable stack memory attached to tree nodes.

A stack is a p x n matrix whose row 0 is the top.  Actions are soft
(PUSH, POP, NOOP) probabilities and the update is the matching convex
combination of shifted copies of the stack.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .autodiff import ShapeError, Tape, Tensor
from .cells import NodeState

PUSH, POP, NOOP = 0, 1, 2
N_ACTIONS = 3


def stack_param_shapes(n: int) -> dict[str, tuple[int, ...]]:
    return {"A": (N_ACTIONS, n), "b_a": (N_ACTIONS,), "D": (n, n), "P": (n, n)}


def empty_stack(p: int, n: int) -> Tensor:
    return Tensor._wrap(np.zeros((p, n)), False)


def compute_actions(tape: Tape, z: Tensor, A: Tensor, b: Tensor) -> Tensor:
    """a = softmax(A z + b) over (PUSH, POP, NOOP)."""
    return tape.softmax(tape.linear([(A, z)], [b]))


def _push_view(S: np.ndarray, top: np.ndarray) -> np.ndarray:
    out = np.empty_like(S)
    out[0] = top
    out[1:] = S[:-1]
    return out


def _pop_view(S: np.ndarray) -> np.ndarray:
    out = np.zeros_like(S)
    out[:-1] = S[1:]
    return out


def stack_update(tape: Tape, S: Tensor, a: Tensor, z: Tensor, D: Tensor) -> Tensor:
    """S' = a[PUSH]·push(S, σ(D z)) + a[POP]·pop(S) + a[NOOP]·S.

    Popping past the bottom reads zeros.
    """
    if S.data.ndim != 2 or a.shape != (N_ACTIONS,):
        raise ShapeError(f"stack_update: stack {S.shape}, actions {a.shape}")
    top = tape.sigmoid(tape.matvec(D, z))
    if top.shape[0] != S.shape[1]:
        raise ShapeError(f"stack_update: pushed row {top.shape} vs stack width {S.shape[1]}")
    return convex_shift(tape, S, a, top)


def convex_shift(tape: Tape, S: Tensor, a: Tensor, top: Tensor) -> Tensor:
    Sd, ad, td = S.data, a.data, top.data
    pushed = _push_view(Sd, td)
    popped = _pop_view(Sd)
    out = ad[PUSH] * pushed + ad[POP] * popped + ad[NOOP] * Sd

    def back(g):
        gS = ad[NOOP] * g
        gS[:-1] += ad[PUSH] * g[1:]
        gS[1:] += ad[POP] * g[:-1]
        ga = np.array([(g * pushed).sum(), (g * popped).sum(), (g * Sd).sum()])
        return gS, ga, ad[PUSH] * g[0]

    return tape.op(out, (S, a, top), back, "stack_update")


def stack_read_state(tape: Tape, children: Sequence[NodeState], P: Tensor) -> Tensor:
    """Σ_n P · S_n[0] over the children's stack tops."""
    stacks = [ch.stack for ch in children]
    if any(s is None for s in stacks):
        raise ShapeError("stack_read_state: a child carries no stack")
    shape = stacks[0].shape
    for s in stacks[1:]:
        if s.shape != shape:
            raise ShapeError(f"stack_read_state: stack shapes {shape} vs {s.shape}")
    tops = [tape.row(s, 0) for s in stacks]
    return tape.linear([(P, t) for t in tops])


def merge_child_stacks(tape: Tape, updated: Sequence[Tensor]) -> Tensor:
    """Element-wise mean of the children's updated stacks."""
    if not updated:
        raise ShapeError("merge_child_stacks needs at least one stack")
    if len(updated) == 1:
        return updated[0]
    return tape.scale(tape.add_n(list(updated)), 1.0 / len(updated))


def stack_node(tape: Tape, p: dict, z: Tensor, children: Sequence[NodeState]) -> Tensor:
    """Actions from the parent state, applied to every child stack, then merged."""
    a = compute_actions(tape, z, p["A"], p["b_a"])
    updated = [stack_update(tape, ch.stack, a, z, p["D"]) for ch in children]
    return merge_child_stacks(tape, updated)
