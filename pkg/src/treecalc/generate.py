"""Grammar sampling, identity mutation, dataset generation and completion blanks."""

from __future__ import annotations

import logging
from collections import Counter, deque
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path as FsPath
from typing import Iterable, Sequence

import numpy as np

from .expr import (
    COMMUTATIVE,
    CONSTANTS,
    Expr,
    Label,
    LEAVES,
    NUMBERS,
    OPERATORS,
    VARIABLES,
    depth,
    get_at,
    iter_paths,
    label_identity,
    parse,
    replace_at,
    to_sexpr,
)

log = logging.getLogger(__name__)

UNARY = tuple(s for s, a in OPERATORS.items() if a == 1)
BINARY = tuple(s for s, a in OPERATORS.items() if a == 2 and s != "=")
MUTATIONS = ("replace", "swap", "perturb", "wrap")


@dataclass(frozen=True)
class LabeledEquation:
    expr: Expr
    label: Label
    depth: int

    @classmethod
    def make(cls, expr: Expr, label: Label) -> "LabeledEquation":
        return cls(expr, Label(label), depth(expr))

    @property
    def correct(self) -> bool:
        return self.label is Label.CORRECT


@dataclass
class Dataset:
    items: list[LabeledEquation]
    split: str = "train"

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(self.items)


@dataclass
class MutationConfig:
    weights: tuple[float, float, float, float] = (0.4, 0.1, 0.15, 0.35)
    replace_max_height: int = 3
    max_depth: int = 13
    trials: int = 16
    tol: float = 1e-6
    # cap on Correct fraction per depth bucket (shallow, deep); pairs keep it >= 0.5
    cc_cap_shallow: float = 0.6
    cc_cap_deep: float = 0.5
    deep_from: int = 8
    pool_cap: int = 20000
    max_iterations_factor: int = 60


@dataclass
class GenerationResult:
    items: list[LabeledEquation]
    complete: bool
    iterations: int
    mutation_counts: Counter = field(default_factory=Counter)

    def stats(self) -> dict[int, tuple[int, float]]:
        return depth_stats(self.items)


# -- axiom files ----------------------------------------------------------------

def default_axiom_path() -> FsPath:
    return FsPath(str(resources.files("treecalc") / "data" / "axioms.txt"))


def load_axioms(path: str | FsPath | None = None) -> list[Expr]:
    path = FsPath(path) if path is not None else default_axiom_path()
    out = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").split("\n"), 1):
        line = line.strip()
        if not line or line.startswith(";"):
            continue
        try:
            e = parse(line)
        except ValueError as err:
            raise ValueError(f"{path}:{lineno}: {err}") from None
        if e.symbol != "=":
            raise ValueError(f"{path}:{lineno}: axiom is not an equation")
        out.append(e)
    return out


# -- dataset files ----------------------------------------------------------------

def format_record(item: LabeledEquation) -> str:
    return f"{item.label.value}\t{item.depth}\t{to_sexpr(item.expr)}"


def write_dataset(path: str | FsPath, items: Iterable[LabeledEquation]) -> None:
    text = "".join(format_record(it) + "\n" for it in items)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def read_dataset(path: str | FsPath, split: str = "train") -> Dataset:
    items = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                label, d, text = line.split("\t")
                e = parse(text)
            except ValueError as err:
                raise ValueError(f"{path}:{lineno}: bad record ({err})") from None
            item = LabeledEquation(e, Label(label), int(d))
            if item.depth != depth(e):
                raise ValueError(f"{path}:{lineno}: depth {d} disagrees with tree depth {depth(e)}")
            items.append(item)
    return Dataset(items, split)


def depth_stats(items: Iterable[LabeledEquation]) -> dict[int, tuple[int, float]]:
    """depth -> (count, fraction Correct)."""
    total: Counter = Counter()
    good: Counter = Counter()
    for it in items:
        total[it.depth] += 1
        good[it.depth] += it.correct
    return {d: (total[d], good[d] / total[d]) for d in sorted(total)}


def format_stats(items: Sequence[LabeledEquation]) -> str:
    stats = depth_stats(items)
    n = len(items)
    cc_all = sum(it.correct for it in items) / n if n else 0.0
    cols = ["all"] + [str(d) for d in stats]
    counts = [str(n)] + [str(c) for c, _ in stats.values()]
    ccs = [f"{cc_all:.2f}"] + [f"{cc:.2f}" for _, cc in stats.values()]
    width = max(len(s) for s in cols + counts + ccs) + 1
    row = lambda name, vals: f"{name:<6}" + "".join(v.rjust(width) for v in vals)
    return "\n".join([row("depth", cols), row("# Eqs", counts), row("CC", ccs)])


# -- grammar ------------------------------------------------------------------------

def sample_leaf(rng: np.random.Generator) -> Expr:
    r = rng.random()
    if r < 0.45:
        return Expr(VARIABLES[rng.integers(len(VARIABLES))])
    if r < 0.92:
        return Expr(NUMBERS[rng.integers(len(NUMBERS))])
    return Expr(CONSTANTS[0])


def sample_expression(rng: np.random.Generator, height: int) -> Expr:
    """Random expression of exactly ``height`` levels (1 = a leaf)."""
    if height <= 1:
        return sample_leaf(rng)
    if rng.random() < 0.4:
        op = UNARY[rng.integers(len(UNARY))]
        return Expr(op, (sample_expression(rng, height - 1),))
    op = BINARY[rng.integers(len(BINARY))]
    tall = sample_expression(rng, height - 1)
    other = sample_expression(rng, int(rng.integers(1, height)))
    kids = (tall, other) if rng.random() < 0.5 else (other, tall)
    return Expr(op, kids)


def count_expressions(max_height: int) -> int:
    total = len(LEAVES)
    for _ in range(max_height - 1):
        total = len(LEAVES) + len(UNARY) * total + len(BINARY) * total * total
    return total


@lru_cache(maxsize=4)
def enumerate_expressions(max_height: int) -> tuple[Expr, ...]:
    """Every expression up to ``max_height`` levels, in a fixed order."""
    if max_height > 2:
        raise ValueError("full enumeration is only tractable up to height 2")
    level = [Expr(s) for s in LEAVES]
    for _ in range(max_height - 1):
        nxt = [Expr(s) for s in LEAVES]
        nxt += [Expr(op, (a,)) for op in UNARY for a in level]
        nxt += [Expr(op, (a, b)) for op in BINARY for a in level for b in level]
        level = nxt
    return tuple(level)


# -- mutations -------------------------------------------------------------------

_WRAPS = ("mul1", "1mul", "add0", "0add", "pow1", "sqrtsq")


def _wrap(e: Expr, kind: str) -> Expr:
    one, zero = Expr("1"), Expr("0")
    if kind == "mul1":
        return Expr("*", (e, one))
    if kind == "1mul":
        return Expr("*", (one, e))
    if kind == "add0":
        return Expr("+", (e, zero))
    if kind == "0add":
        return Expr("+", (zero, e))
    if kind == "pow1":
        return Expr("pow", (e, one))
    return Expr("sqrt", (Expr("pow", (e, Expr("2"))),))


def _non_root_paths(eq: Expr):
    return [p for p, _ in iter_paths(eq) if p]


def mutate(eq: Expr, kind: str, rng: np.random.Generator, cfg: MutationConfig) -> Expr | None:
    """One local change; returns None when the mutation does not apply."""
    paths = _non_root_paths(eq)
    if kind == "replace":
        path = paths[rng.integers(len(paths))]
        old_h = get_at(eq, path).height()
        h = int(rng.integers(1, min(cfg.replace_max_height, old_h + 1) + 1))
        new = sample_expression(rng, h)
        return replace_at(eq, path, new)
    if kind == "swap":
        cands = [p for p in paths if get_at(eq, p).symbol in COMMUTATIVE]
        if not cands:
            return None
        path = cands[rng.integers(len(cands))]
        node = get_at(eq, path)
        a, b = node.children
        if a == b:
            return None
        return replace_at(eq, path, Expr(node.symbol, (b, a)))
    if kind == "perturb":
        cands = [p for p in paths if get_at(eq, p).symbol in NUMBERS + CONSTANTS]
        if not cands:
            return None
        path = cands[rng.integers(len(cands))]
        old = get_at(eq, path).symbol
        choices = [s for s in NUMBERS + CONSTANTS if s != old]
        return replace_at(eq, path, Expr(choices[rng.integers(len(choices))]))
    if kind == "wrap":
        path = paths[rng.integers(len(paths))]
        w = _WRAPS[rng.integers(len(_WRAPS))]
        target = get_at(eq, path)
        # radical wrapper only on small subtrees to keep branch counts bounded
        if w == "sqrtsq" and target.height() > 3:
            w = "mul1"
        return replace_at(eq, path, _wrap(target, w))
    raise ValueError(f"unknown mutation {kind!r}")


# -- dataset generation ---------------------------------------------------------------

class _Balancer:
    """Releases items per depth so each bucket's Correct fraction stays in range.

    Items wait in per-(depth, label) queues; a Correct/Incorrect pair is released
    together, and a lone Correct is released while the bucket stays under its cap.
    """

    def __init__(self, cfg: MutationConfig):
        self.cfg = cfg
        self.queues: dict[tuple[int, bool], deque] = {}
        self.counts: dict[int, list[int]] = {}

    def push(self, item: LabeledEquation) -> list[LabeledEquation]:
        d = item.depth
        self.queues.setdefault((d, item.correct), deque()).append(item)
        good = self.queues.setdefault((d, True), deque())
        bad = self.queues.setdefault((d, False), deque())
        c, i = self.counts.setdefault(d, [0, 0])
        out = []
        if good and bad:
            out = [good.popleft(), bad.popleft()]
            self.counts[d] = [c + 1, i + 1]
        elif good:
            cap = self.cfg.cc_cap_deep if d >= self.cfg.deep_from else self.cfg.cc_cap_shallow
            if i > 0 and (c + 1) / (c + i + 1) <= cap:
                out = [good.popleft()]
                self.counts[d] = [c + 1, i]
        return out


def generate_dataset(axioms: Sequence[Expr], n_target: int, seed: int,
                     cfg: MutationConfig | None = None) -> GenerationResult:
    """Grow a labelled equation set by local random changes to known identities.

    A random identity from the pool is mutated, re-labelled by the numeric oracle,
    and kept whatever its label; Correct results join the pool.  Undecided and
    duplicate equations are dropped.
    """
    cfg = cfg or MutationConfig()
    rng = np.random.default_rng(seed)
    pool: list[Expr] = []
    seen: set[str] = set()
    balancer = _Balancer(cfg)
    items: list[LabeledEquation] = []
    counts: Counter = Counter()

    for ax in axioms:
        lab = label_identity(ax, cfg.trials, cfg.tol, seed=int(rng.integers(2**31)))
        if lab is not Label.CORRECT:
            raise ValueError(f"axiom does not check out numerically: {to_sexpr(ax)}")
        key = to_sexpr(ax)
        if key in seen or depth(ax) > cfg.max_depth:
            continue
        seen.add(key)
        pool.append(ax)
        items.extend(balancer.push(LabeledEquation.make(ax, lab)))
    if not pool:
        raise ValueError("no usable axioms")

    weights = np.asarray(cfg.weights, dtype=float)
    weights = weights / weights.sum()
    budget = cfg.max_iterations_factor * max(n_target, 1)
    it = 0
    while len(items) < n_target and it < budget:
        it += 1
        parent = pool[rng.integers(len(pool))]
        kind = MUTATIONS[rng.choice(len(MUTATIONS), p=weights)]
        child = mutate(parent, kind, rng, cfg)
        if child is None:
            continue
        key = to_sexpr(child)
        if key in seen:
            continue
        seen.add(key)
        if depth(child) > cfg.max_depth:
            continue
        lab = label_identity(child, cfg.trials, cfg.tol, seed=int(rng.integers(2**31)))
        if lab is Label.UNDECIDED:
            continue
        counts[kind] += 1
        if lab is Label.CORRECT and len(pool) < cfg.pool_cap:
            pool.append(child)
        items.extend(balancer.push(LabeledEquation.make(child, lab)))

    complete = len(items) >= n_target
    if not complete:
        log.warning("generated %d of %d equations within %d iterations",
                    len(items), n_target, budget)
    items = _trim(items, n_target, cfg)
    return GenerationResult(items, complete, it, counts)


def _trim(items: list[LabeledEquation], n_target: int, cfg: MutationConfig) -> list[LabeledEquation]:
    # a released pair can overshoot by one; drop from the end while staying balanced
    while len(items) > n_target:
        last = items[-1]
        rest = [it for it in items[:-1] if it.depth == last.depth]
        if rest:
            cc = sum(it.correct for it in rest) / len(rest)
            cap = cfg.cc_cap_deep if last.depth >= cfg.deep_from else cfg.cc_cap_shallow
            if not (0.45 <= cc <= max(cap, 0.55)):
                break
        items = items[:-1]
    return items


def split_dataset(items: Sequence[LabeledEquation], seed: int, train_max_depth: int = 7,
                  test_min_depth: int = 8, test_max_depth: int = 13,
                  valid_frac: float = 0.2) -> dict[str, Dataset]:
    """Depth split: shallow equations to train/valid, deep ones to test."""
    rng = np.random.default_rng(seed)
    shallow = [it for it in items if it.depth <= train_max_depth]
    deep = [it for it in items if test_min_depth <= it.depth <= test_max_depth]
    order = rng.permutation(len(shallow))
    n_valid = int(round(valid_frac * len(shallow)))
    valid = [shallow[k] for k in sorted(order[:n_valid])]
    train = [shallow[k] for k in sorted(order[n_valid:])]
    return {"train": Dataset(train, "train"), "valid": Dataset(valid, "valid"),
            "test": Dataset(deep, "test")}


# -- equation completion --------------------------------------------------------------

@dataclass
class CompletionInstance:
    equation: Expr
    path: tuple[int, ...]
    candidates: list[Expr]
    gold: frozenset[int]
    original_index: int

    @property
    def depth(self) -> int:
        return depth(self.equation)

    def filled(self, k: int) -> Expr:
        return replace_at(self.equation, self.path, self.candidates[k])

    def blanked(self) -> str:
        """The equation with the chosen node shown as ``?``."""
        return _render_blank(self.equation, self.path)


def _render_blank(e: Expr, path: tuple[int, ...]) -> str:
    if not path:
        return "?"
    parts = []
    for i, c in enumerate(e.children):
        parts.append(_render_blank(c, path[1:]) if i == path[0] else to_sexpr(c))
    return "(" + e.symbol + " " + " ".join(parts) + ")"


def completion_candidates(item: LabeledEquation, seed: int, max_depth: int = 2, cap: int = 50,
                          blank_height: int | None = None, trials: int = 16,
                          tol: float = 1e-6) -> CompletionInstance | None:
    """Blank one node of a Correct equation and build its candidate fill-ins.

    Candidates are grammar expressions of 1..``max_depth`` levels, randomly
    subsampled to ``cap`` with the original subtree always kept; gold marks the
    candidates that make the equation Correct again.  Returns None when no node
    of the requested ``blank_height`` exists.
    """
    if not item.correct:
        raise ValueError("completion blanks are drawn from Correct equations")
    rng = np.random.default_rng(seed)
    eq = item.expr
    paths = _non_root_paths(eq)
    if blank_height is not None:
        paths = [p for p in paths if get_at(eq, p).height() == blank_height]
    if not paths:
        return None
    path = paths[rng.integers(len(paths))]
    original = get_at(eq, path)

    if count_expressions(max_depth) <= 5000:
        pool = [c for c in enumerate_expressions(max_depth) if c != original]
        take = min(cap - 1, len(pool))
        picks = rng.choice(len(pool), size=take, replace=False)
        others = [pool[k] for k in sorted(picks)]
    else:
        others, keys = [], {to_sexpr(original)}
        while len(others) < cap - 1:
            c = sample_expression(rng, int(rng.integers(1, max_depth + 1)))
            if to_sexpr(c) not in keys:
                keys.add(to_sexpr(c))
                others.append(c)
    pos = int(rng.integers(len(others) + 1))
    candidates = others[:pos] + [original] + others[pos:]

    gold = {pos}
    for k, c in enumerate(candidates):
        if k == pos:
            continue
        filled = replace_at(eq, path, c)
        if label_identity(filled, trials, tol, seed=seed + k) is Label.CORRECT:
            gold.add(k)
    return CompletionInstance(eq, path, candidates, frozenset(gold), pos)
