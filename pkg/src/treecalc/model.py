"""Recursive verifier: compile an equation tree into a per-example graph.

Each operator symbol owns one parameter set, shared by all of its occurrences;
leaves are embeddings.  The ``=`` root scores the equation with the dot product
of the two side states, squashed by a learned scale and bias.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterator

import numpy as np

from .autodiff import Tape, Tensor
from .cells import CELL_KINDS, STEPS, NodeState, embed_leaf, init_param, param_shapes
from .expr import FUNCTIONS, LEAVES, Expr, Label, to_sexpr
from .stack import stack_node, stack_param_shapes, stack_read_state

CHECKPOINT_MAGIC = "treecalc-checkpoint"
CHECKPOINT_VERSION = 1
SEQ_KIND = "seq_lstm"
VOCAB = LEAVES + FUNCTIONS


@dataclass(frozen=True)
class ModelConfig:
    cell: str = "mtree_lstm"
    stack: bool = False
    hidden: int = 25
    stack_size: int = 10
    dropout: float = 0.0
    first_order: bool = False

    def __post_init__(self):
        if self.cell not in CELL_KINDS + (SEQ_KIND,):
            raise ValueError(f"unknown cell {self.cell!r}; expected one of {CELL_KINDS + (SEQ_KIND,)}")
        if self.hidden < 1:
            raise ValueError("hidden must be >= 1")
        if self.stack_size < 1:
            raise ValueError("stack_size must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.cell == "stack_rnn" and not self.stack:
            object.__setattr__(self, "stack", True)
        if self.cell == SEQ_KIND and self.stack:
            raise ValueError("the sequence baseline has no stack variant")

    @property
    def uses_stack(self) -> bool:
        return self.stack

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class VerificationOutput:
    score: Tensor
    prob: Tensor

    @property
    def prob_correct(self) -> float:
        return float(self.prob.data[0])


class ParameterBank:
    """Named parameter tensors; operator sets are keyed by symbol."""

    def __init__(self):
        self.tensors: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.tensors:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(value, requires_grad=True, name=name)
        self.tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.tensors.values())

    def __len__(self) -> int:
        return len(self.tensors)

    def names(self) -> list[str]:
        return list(self.tensors)

    def group(self, prefix: str) -> dict[str, Tensor]:
        """Tensors under ``prefix/`` keyed by their last name component."""
        cut = len(prefix) + 1
        return {k[cut:]: v for k, v in self.tensors.items() if k.startswith(prefix + "/")}

    def count(self) -> int:
        return sum(t.data.size for t in self)

    def zero_grad(self) -> None:
        for t in self:
            t.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.tensors.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.tensors) - set(state)
        extra = set(state) - set(self.tensors)
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, v in state.items():
            if v.shape != self.tensors[k].shape:
                raise ValueError(f"shape mismatch for {k}: {v.shape} vs {self.tensors[k].shape}")
            self.tensors[k].data[...] = v


class TreeModel:
    def __init__(self, config: ModelConfig, seed: int = 0, rng: np.random.Generator | None = None):
        self.config = config
        rng = rng if rng is not None else np.random.default_rng(seed)
        n = config.hidden
        bank = ParameterBank()
        for sym in VOCAB:
            bank.add(f"emb/{sym}", rng.uniform(-1.0, 1.0, size=n))
        if config.cell == SEQ_KIND:
            for g in ("i", "f", "o", "u"):
                for name, shape in ((f"W_{g}", (n, n)), (f"U_{g}", (n, n)), (f"b_{g}", (n,))):
                    bank.add(f"seq/{name}", init_param(name, shape, rng))
        else:
            shapes = param_shapes(config.cell, n, config.first_order)
            for sym in FUNCTIONS:
                for name, shape in shapes.items():
                    bank.add(f"cell/{sym}/{name}", init_param(name, shape, rng))
                if config.stack:
                    for name, shape in stack_param_shapes(n).items():
                        bank.add(f"stack/{sym}/{name}", init_param(name, shape, rng))
        bank.add("out/scale", np.array([1.0]))
        bank.add("out/bias", np.array([0.0]))
        self.params = bank
        self._groups = {sym: bank.group(f"cell/{sym}") for sym in FUNCTIONS}
        self._stack_groups = {sym: bank.group(f"stack/{sym}") for sym in FUNCTIONS}

    # -- forward -------------------------------------------------------------

    def operator_params(self, symbol: str) -> dict[str, Tensor]:
        return self._groups[symbol]

    def _embedding(self, symbol: str) -> Tensor:
        try:
            return self.params[f"emb/{symbol}"]
        except KeyError:
            raise KeyError(f"symbol not in vocabulary: {symbol!r}") from None

    def encode(self, tape: Tape, e: Expr, train: bool = False,
               rng: np.random.Generator | None = None) -> NodeState:
        """Bottom-up state of one side of an equation."""
        cfg = self.config
        if cfg.cell == SEQ_KIND:
            return self._encode_sequence(tape, e, train, rng)
        stack_shape = (cfg.stack_size, cfg.hidden) if cfg.stack else None
        leaf_cache: dict[str, NodeState] = {}
        rate = cfg.dropout if train else 0.0

        def drop(state: NodeState) -> NodeState:
            if rate > 0.0:
                return NodeState(tape.dropout(state.z, rate, rng), state.c, state.stack)
            return state

        def visit(node: Expr) -> NodeState:
            if not node.children:
                st = leaf_cache.get(node.symbol)
                if st is None:
                    st = embed_leaf(tape, self._embedding(node.symbol), stack_shape)
                    leaf_cache[node.symbol] = st
                return drop(st)
            kids = [visit(c) for c in node.children]
            sp = self._stack_groups[node.symbol] if cfg.stack else None
            st = node_step(tape, cfg.cell, self._groups[node.symbol], self._embedding(node.symbol),
                           kids, cfg.first_order, sp)
            return drop(st)

        return visit(e)

    def _encode_sequence(self, tape, e, train, rng) -> NodeState:
        p = self.params.group("seq")
        n = self.config.hidden
        h = Tensor._wrap(np.zeros(n), False)
        c = Tensor._wrap(np.zeros(n), False)
        rate = self.config.dropout if train else 0.0
        for tok in _prefix_tokens(e):
            x = self._embedding(tok)

            def pre(g):
                return tape.linear([(p[f"W_{g}"], x), (p[f"U_{g}"], h)], [p[f"b_{g}"]])

            i, f, o = tape.sigmoid(pre("i")), tape.sigmoid(pre("f")), tape.sigmoid(pre("o"))
            u = tape.tanh(pre("u"))
            c = tape.sum_of_products([(i, u), (f, c)])
            h = tape.hadamard(o, tape.tanh(c))
        if rate > 0.0:
            h = tape.dropout(h, rate, rng)
        return NodeState(h, c)

    def forward(self, tape: Tape, eq: Expr, train: bool = False,
                rng: np.random.Generator | None = None) -> VerificationOutput:
        if eq.symbol != "=":
            raise ValueError(f"expected an equation rooted at '=', got {to_sexpr(eq)}")
        if train and self.config.dropout > 0.0 and rng is None:
            raise ValueError("dropout in train mode needs an rng")
        left = self.encode(tape, eq.children[0], train, rng)
        right = self.encode(tape, eq.children[1], train, rng)
        score = tape.dot(left.z, right.z)
        logit = tape.add(tape.hadamard(score, self.params["out/scale"]), self.params["out/bias"])
        return VerificationOutput(score, tape.sigmoid(logit))

    def predict_proba(self, eq: Expr) -> float:
        return self.forward(Tape(enabled=False), eq).prob_correct


def node_step(tape: Tape, kind: str, p: dict, x: Tensor, kids: list[NodeState],
              first_order: bool = False, stack_params: dict | None = None) -> NodeState:
    """One internal node: optional stack read into the children, cell step, stack update."""
    step = STEPS[kind]
    if stack_params is None:
        return step(tape, p, x, kids, first_order)
    r = stack_read_state(tape, kids, stack_params["P"])
    enriched = [NodeState(tape.add(k.z, r), k.c, k.stack) for k in kids]
    st = step(tape, p, x, enriched, first_order)
    st.stack = stack_node(tape, stack_params, st.z, kids)
    return st


def _prefix_tokens(e: Expr) -> Iterator[str]:
    yield e.symbol
    for c in e.children:
        yield from _prefix_tokens(c)


def compile_and_forward(eq: Expr, model: TreeModel, train_mode: bool = False,
                        rng: np.random.Generator | None = None,
                        tape: Tape | None = None) -> VerificationOutput:
    tape = tape if tape is not None else Tape(enabled=train_mode)
    return model.forward(tape, eq, train_mode, rng)


def loss(tape: Tape, out: VerificationOutput, label: Label | bool) -> Tensor:
    """Binary cross-entropy of the Correct probability."""
    correct = label is Label.CORRECT if isinstance(label, Label) else bool(label)
    return tape.binary_cross_entropy(out.prob, 1.0 if correct else 0.0)


def predict(out: VerificationOutput | float) -> Label:
    p = out.prob_correct if isinstance(out, VerificationOutput) else float(out)
    return Label.CORRECT if p >= 0.5 else Label.INCORRECT


# -- checkpoints ----------------------------------------------------------------

def save_checkpoint(path: str | Path, model: TreeModel, meta: dict | None = None) -> None:
    lines = [f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}",
             "config " + json.dumps(model.config.to_dict(), sort_keys=True),
             "meta " + json.dumps(meta or {}, sort_keys=True)]
    for name, t in model.params.tensors.items():
        shape = "x".join(str(s) for s in t.shape)
        vals = " ".join(float(v).hex() for v in t.data.reshape(-1))
        lines.append(f"param {name} {shape} {vals}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_checkpoint(path: str | Path) -> tuple[ModelConfig, dict, dict[str, np.ndarray]]:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    head = lines[0].split()
    if len(head) != 2 or head[0] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    if int(head[1]) != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {head[1]}")
    config = meta = None
    state: dict[str, np.ndarray] = {}
    for line in lines[1:]:
        if not line:
            continue
        tag, _, rest = line.partition(" ")
        if tag == "config":
            config = ModelConfig.from_dict(json.loads(rest))
        elif tag == "meta":
            meta = json.loads(rest)
        elif tag == "param":
            name, shape, *vals = rest.split(" ")
            dims = tuple(int(s) for s in shape.split("x"))
            state[name] = np.array([float.fromhex(v) for v in vals]).reshape(dims)
        else:
            raise ValueError(f"{path}: unknown record {tag!r}")
    if config is None:
        raise ValueError(f"{path}: missing config record")
    return config, meta or {}, state


def load_checkpoint(path: str | Path) -> tuple[TreeModel, dict]:
    config, meta, state = read_checkpoint(path)
    model = TreeModel(config, seed=0)
    model.params.load_state(state)
    return model, meta
