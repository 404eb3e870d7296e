"""Expression trees, s-expression I/O, depth, and the numeric identity oracle."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterator, Mapping

import numpy as np

# operator symbol -> arity
OPERATORS: dict[str, int] = {
    "=": 2,
    "+": 2,
    "*": 2,
    "pow": 2,
    "sqrt": 1,
    "sin": 1,
    "cos": 1,
    "tan": 1,
    "sec": 1,
    "csc": 1,
}
ALIASES = {"eq": "=", "add": "+", "mul": "*", "^": "pow", "Pi": "pi", "π": "pi"}
VARIABLES = ("x", "y", "z", "w")
NUMBERS = ("-1", "0", "1", "2", "3", "4")
CONSTANTS = ("pi",)
LEAVES = VARIABLES + NUMBERS + CONSTANTS
FUNCTIONS = ("+", "*", "pow", "sqrt", "sin", "cos", "tan", "sec", "csc")
COMMUTATIVE = ("+", "*")
NARY = ("+", "*")


class ParseError(ValueError):
    def __init__(self, message: str, pos: int):
        super().__init__(f"{message} at position {pos}")
        self.pos = pos


class Kind(str, Enum):
    OPERATOR = "operator"
    VARIABLE = "variable"
    NUMBER = "number"
    CONSTANT = "constant"


def kind_of(symbol: str) -> Kind:
    if symbol in OPERATORS:
        return Kind.OPERATOR
    if symbol in VARIABLES:
        return Kind.VARIABLE
    if symbol in NUMBERS:
        return Kind.NUMBER
    if symbol in CONSTANTS:
        return Kind.CONSTANT
    raise KeyError(symbol)


@dataclass(frozen=True)
class Expr:
    symbol: str
    children: tuple["Expr", ...] = ()

    def __post_init__(self):
        arity = OPERATORS.get(self.symbol)
        if arity is None:
            if self.symbol not in LEAVES:
                raise ValueError(f"unknown symbol {self.symbol!r}")
            if self.children:
                raise ValueError(f"leaf {self.symbol!r} cannot have children")
        elif len(self.children) != arity:
            raise ValueError(f"{self.symbol} takes {arity} argument(s), got {len(self.children)}")

    @property
    def kind(self) -> Kind:
        return kind_of(self.symbol)

    @property
    def is_leaf(self) -> bool:
        return not self.children

    def __str__(self) -> str:
        return to_sexpr(self)

    def size(self) -> int:
        return 1 + sum(c.size() for c in self.children)

    def height(self) -> int:
        """Nodes on the longest root-to-leaf path (a leaf has height 1)."""
        if not self.children:
            return 1
        return 1 + max(c.height() for c in self.children)

    def variables(self) -> set[str]:
        if self.symbol in VARIABLES:
            return {self.symbol}
        out: set[str] = set()
        for c in self.children:
            out |= c.variables()
        return out


def leaf(symbol: str) -> Expr:
    return Expr(symbol)


def equation(lhs: Expr, rhs: Expr) -> Expr:
    return Expr("=", (lhs, rhs))


# -- traversal by path --------------------------------------------------------

Path = tuple[int, ...]


def iter_paths(e: Expr, prefix: Path = ()) -> Iterator[tuple[Path, Expr]]:
    """Pre-order (path, subtree) pairs."""
    yield prefix, e
    for i, c in enumerate(e.children):
        yield from iter_paths(c, prefix + (i,))


def get_at(e: Expr, path: Path) -> Expr:
    for i in path:
        e = e.children[i]
    return e


def replace_at(e: Expr, path: Path, new: Expr) -> Expr:
    if not path:
        return new
    i = path[0]
    kids = list(e.children)
    kids[i] = replace_at(kids[i], path[1:], new)
    return Expr(e.symbol, tuple(kids))


# -- parsing and printing -----------------------------------------------------

def _tokenize(text: str) -> list[tuple[str, int]]:
    tokens = []
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch.isspace():
            i += 1
        elif ch in "()":
            tokens.append((ch, i))
            i += 1
        else:
            j = i
            while j < n and not text[j].isspace() and text[j] not in "()":
                j += 1
            tokens.append((text[i:j], i))
            i = j
    return tokens


def _fold_right(symbol: str, args: list[Expr]) -> Expr:
    out = args[-1]
    for a in reversed(args[:-1]):
        out = Expr(symbol, (a, out))
    return out


def parse(text: str) -> Expr:
    """Parse prefix s-expression text; n-ary ``+``/``*`` fold to the right."""
    tokens = _tokenize(text)
    if not tokens:
        raise ParseError("empty input", 0)
    expr, k = _parse_at(tokens, 0, len(text))
    if k != len(tokens):
        raise ParseError(f"unexpected trailing token {tokens[k][0]!r}", tokens[k][1])
    return expr


def _parse_at(tokens, k: int, end: int) -> tuple[Expr, int]:
    if k >= len(tokens):
        raise ParseError("unexpected end of input", end)
    tok, pos = tokens[k]
    if tok == ")":
        raise ParseError("unbalanced ')'", pos)
    if tok != "(":
        sym = ALIASES.get(tok, tok)
        if sym in OPERATORS:
            raise ParseError(f"operator {sym!r} outside parentheses", pos)
        if sym not in LEAVES:
            raise ParseError(f"unknown token {tok!r}", pos)
        return Expr(sym), k + 1
    k += 1
    if k >= len(tokens):
        raise ParseError("unbalanced '('", pos)
    head, hpos = tokens[k]
    sym = ALIASES.get(head, head)
    if sym not in OPERATORS:
        raise ParseError(f"unknown operator {head!r}", hpos)
    k += 1
    args = []
    while True:
        if k >= len(tokens):
            raise ParseError("unbalanced '('", pos)
        if tokens[k][0] == ")":
            k += 1
            break
        arg, k = _parse_at(tokens, k, end)
        args.append(arg)
    arity = OPERATORS[sym]
    if sym in NARY and len(args) > arity:
        return _fold_right(sym, args), k
    if len(args) != arity:
        raise ParseError(f"{sym} takes {arity} argument(s), got {len(args)}", hpos)
    return Expr(sym, tuple(args)), k


def to_sexpr(e: Expr) -> str:
    if not e.children:
        return e.symbol
    return "(" + e.symbol + " " + " ".join(to_sexpr(c) for c in e.children) + ")"


_INFIX = {"+": " + ", "*": " × "}


def to_infix(e: Expr) -> str:
    """Human-readable rendering, for logs only."""
    if not e.children:
        return "π" if e.symbol == "pi" else e.symbol
    if e.symbol == "=":
        return f"{to_infix(e.children[0])} = {to_infix(e.children[1])}"
    if e.symbol in _INFIX:
        return "(" + _INFIX[e.symbol].join(to_infix(c) for c in e.children) + ")"
    if e.symbol == "pow":
        return f"{to_infix(e.children[0])}^{to_infix(e.children[1])}"
    return f"{e.symbol}({to_infix(e.children[0])})"


# -- depth --------------------------------------------------------------------

def depth(e: Expr) -> int:
    """Equation depth: the taller side's height, the ``=`` node excluded."""
    if e.symbol == "=":
        return max(c.height() for c in e.children)
    return e.height()


# -- numeric evaluation -------------------------------------------------------

class EvalFailure(ArithmeticError):
    """Raised on a domain violation (negative radicand, pole, overflow)."""


NEAR_ZERO = 1e-9
HUGE = 1e12
MAX_BRANCHES = 256
_NUMBER_VALUES = {s: float(s) for s in NUMBERS}


def _pow(base: float, exp: float) -> float:
    if base == 0.0 and exp < 0:
        raise EvalFailure("zero to a negative power")
    if abs(base) < NEAR_ZERO and exp < 0:
        raise EvalFailure("near-zero base with negative exponent")
    if base < 0 and exp != math.floor(exp):
        raise EvalFailure("negative base with fractional exponent")
    try:
        out = math.pow(base, exp)
    except (OverflowError, ValueError) as err:
        raise EvalFailure(str(err)) from None
    return out


def _recip(v: float) -> float:
    if abs(v) < NEAR_ZERO:
        raise EvalFailure("pole")
    return 1.0 / v


def _apply(sym: str, args: list[float]) -> float:
    if sym == "+":
        out = args[0] + args[1]
    elif sym == "*":
        out = args[0] * args[1]
    elif sym == "pow":
        out = _pow(args[0], args[1])
    elif sym == "sqrt":
        if args[0] < 0:
            raise EvalFailure("negative radicand")
        out = math.sqrt(args[0])
    elif sym == "sin":
        out = math.sin(args[0])
    elif sym == "cos":
        out = math.cos(args[0])
    elif sym == "tan":
        c = math.cos(args[0])
        if abs(c) < NEAR_ZERO:
            raise EvalFailure("pole")
        out = math.sin(args[0]) / c
    elif sym == "sec":
        out = _recip(math.cos(args[0]))
    elif sym == "csc":
        out = _recip(math.sin(args[0]))
    else:
        raise ValueError(f"cannot evaluate {sym!r}")
    if not math.isfinite(out) or abs(out) > HUGE:
        raise EvalFailure("overflow")
    return out


def _leaf_value(sym: str, assignment: Mapping[str, float]) -> float:
    if sym in _NUMBER_VALUES:
        return _NUMBER_VALUES[sym]
    if sym == "pi":
        return math.pi
    try:
        return float(assignment[sym])
    except KeyError:
        raise KeyError(f"no value assigned to variable {sym!r}") from None


def numeric_eval(e: Expr, assignment: Mapping[str, float]) -> float:
    """Principal-branch real value of one side; raises EvalFailure off-domain."""
    if e.symbol == "=":
        raise ValueError("numeric_eval works on one side, not an equation")
    if not e.children:
        return _leaf_value(e.symbol, assignment)
    return _apply(e.symbol, [numeric_eval(c, assignment) for c in e.children])


def evaluate_or_none(e: Expr, assignment: Mapping[str, float]) -> float | None:
    try:
        return numeric_eval(e, assignment)
    except EvalFailure:
        return None


def branch_values(e: Expr, assignment: Mapping[str, float]) -> list[float]:
    """All real values of ``e`` when every radical may take either sign.

    Branches that hit a domain violation are dropped; an empty list means the
    point is outside the domain on every branch.
    """
    if not e.children:
        return [_leaf_value(e.symbol, assignment)]
    child_sets = [branch_values(c, assignment) for c in e.children]
    out: dict[float, None] = {}
    if len(child_sets) == 1:
        combos = ((a,) for a in child_sets[0])
    else:
        combos = ((a, b) for a in child_sets[0] for b in child_sets[1])
    for args in combos:
        try:
            v = _apply(e.symbol, list(args))
        except EvalFailure:
            continue
        out[v] = None
        if e.symbol == "sqrt" and v != 0.0:
            out[-v] = None
    if len(out) > MAX_BRANCHES:
        raise EvalFailure("too many radical branches")
    return list(out)


class Label(str, Enum):
    CORRECT = "Correct"
    INCORRECT = "Incorrect"
    UNDECIDED = "Undecided"


def _residual(lhs: list[float], rhs: list[float]) -> float:
    best = math.inf
    for a in lhs:
        for b in rhs:
            r = abs(a - b) / (1.0 + max(abs(a), abs(b)))
            if r < best:
                best = r
    return best


def sample_points(variables, trials: int, rng: np.random.Generator,
                  low: float = -2.0, high: float = 2.0) -> list[dict[str, float]]:
    names = sorted(variables)
    vals = rng.uniform(low, high, size=(trials, len(names)))
    return [dict(zip(names, row)) for row in vals]


def label_identity(eq: Expr, trials: int = 16, tol: float = 1e-6, seed: int = 0,
                   max_draws_factor: int = 8, min_valid: int = 8) -> Label:
    """Label an equation by evaluating both sides at random points in [-2, 2].

    Radicals are two-valued: a point agrees when some choice of signs makes the
    sides match.  Points where either side is undefined are redrawn, up to
    ``max_draws_factor * trials`` draws.  Correct iff every valid point agrees
    within ``tol``; Incorrect iff some point misses by more than ``10 * tol``.
    """
    if eq.symbol != "=":
        raise ValueError("label_identity expects an equation")
    if trials < min_valid:
        raise ValueError(f"trials must be >= {min_valid}")
    lhs, rhs = eq.children
    rng = np.random.default_rng(seed)
    variables = eq.variables()
    valid = 0
    worst = 0.0
    draws = 0
    budget = max_draws_factor * trials
    while valid < trials and draws < budget:
        batch = sample_points(variables, trials, rng)
        for point in batch:
            draws += 1
            try:
                lv = branch_values(lhs, point)
                rv = branch_values(rhs, point)
            except EvalFailure:
                continue
            if not lv or not rv:
                continue
            valid += 1
            worst = max(worst, _residual(lv, rv))
            if valid >= trials:
                break
        if not variables:
            break
    if valid == 0 or (valid < min_valid and variables):
        return Label.UNDECIDED
    if worst > 10 * tol:
        return Label.INCORRECT
    if worst <= tol:
        return Label.CORRECT
    return Label.UNDECIDED
