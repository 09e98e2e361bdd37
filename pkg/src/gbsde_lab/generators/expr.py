"""Arithmetic expressions for user-defined drivers.

Grammar (EBNF)::

    expr    = term { ("+" | "-") term } ;
    term    = unary { ("*" | "/") unary } ;
    unary   = ("+" | "-") unary | power ;
    power   = atom [ ("^" | "**") unary ] ;
    atom    = number | name | name "(" expr { "," expr } ")" | "(" expr ")" ;
    name    = "t" | "x" | "y" | "z" | "u" | "u1" ... "u9" | "pi" | "e" ;

Power is right-associative and binds tighter than unary minus, so ``-y^2``
is ``-(y^2)``. Functions: min, max (two or more args), abs, sqrt, exp, log,
sin, cos, tanh, pow (two args), sign.
"""
from dataclasses import dataclass
import math
import re

import numpy as np

from ..errors import GeneratorEvaluationError, ParseError

__all__ = ["Node", "parse", "to_text", "evaluate", "compile_expr", "VARIABLES", "FUNCTIONS"]

VARIABLES = ("t", "x", "y", "z", "u") + tuple(f"u{i}" for i in range(1, 10))
CONSTANTS = {"pi": math.pi, "e": math.e}
FUNCTIONS = {
    "abs": (1, 1),
    "sqrt": (1, 1),
    "exp": (1, 1),
    "log": (1, 1),
    "sign": (1, 1),
    "sin": (1, 1),
    "cos": (1, 1),
    "tanh": (1, 1),
    "pow": (2, 2),
    "min": (2, None),
    "max": (2, None),
}

_ELEMENTARY = {"sin": np.sin, "cos": np.cos, "tanh": np.tanh}

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_]\w*)"
    r"|(?P<op>\*\*|[-+*/^(),]))"
)


@dataclass(frozen=True)
class Node:
    """Immutable expression tree node.

    ``kind`` is one of ``num``, ``var``, ``neg``, ``bin``, ``call``.
    """

    kind: str
    value: object = None
    args: tuple = ()


def _tokenize(text):
    pos = 0
    out = []
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            bad = pos + len(text[pos:]) - len(text[pos:].lstrip())
            raise ParseError(f"unexpected character {text[bad]!r}", bad)
        kind = m.lastgroup
        start = m.start(kind)
        out.append((kind, m.group(kind), start))
        pos = m.end()
    out.append(("end", "", len(text)))
    return out


class _Parser:
    def __init__(self, text):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value):
        tok = self.take()
        if tok[1] != value:
            found = "end of input" if tok[0] == "end" else repr(tok[1])
            raise ParseError(f"found {found}", tok[2], expected=repr(value))
        return tok

    def parse(self):
        node = self.expr()
        tok = self.peek()
        if tok[0] != "end":
            raise ParseError(f"unexpected {tok[1]!r}", tok[2], expected="operator or end of input")
        return node

    def expr(self):
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            node = Node("bin", op, (node, self.term()))
        return node

    def term(self):
        node = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            node = Node("bin", op, (node, self.unary()))
        return node

    def unary(self):
        tok = self.peek()
        if tok[0] == "op" and tok[1] in ("+", "-"):
            self.take()
            inner = self.unary()
            return Node("neg", None, (inner,)) if tok[1] == "-" else inner
        return self.power()

    def power(self):
        base = self.atom()
        tok = self.peek()
        if tok[0] == "op" and tok[1] in ("^", "**"):
            self.take()
            return Node("bin", "^", (base, self.unary()))
        return base

    def atom(self):
        kind, val, pos = self.take()
        if kind == "num":
            return Node("num", float(val))
        if kind == "name":
            if self.peek()[1] == "(":
                if val not in FUNCTIONS:
                    raise ParseError(f"unknown function {val!r}", pos,
                                     expected="one of " + ", ".join(sorted(FUNCTIONS)))
                self.take()
                args = [self.expr()]
                while self.peek()[1] == ",":
                    self.take()
                    args.append(self.expr())
                self.expect(")")
                lo, hi = FUNCTIONS[val]
                if len(args) < lo or (hi is not None and len(args) > hi):
                    raise ParseError(f"{val} takes {lo}{'' if hi == lo else '+'} arguments, got {len(args)}", pos)
                return Node("call", val, tuple(args))
            if val in VARIABLES:
                return Node("var", val)
            if val in CONSTANTS:
                return Node("num", CONSTANTS[val])
            raise ParseError(f"unknown identifier {val!r}", pos,
                             expected="one of " + ", ".join(VARIABLES + tuple(CONSTANTS)))
        if kind == "op" and val == "(":
            node = self.expr()
            self.expect(")")
            return node
        found = "end of input" if kind == "end" else repr(val)
        raise ParseError(f"found {found}", pos, expected="number, name or '('")


def parse(text):
    """Parse an expression into an immutable ``Node`` tree."""
    if not isinstance(text, str):
        raise ParseError("expression must be a string", 0)
    return _Parser(text).parse()


def to_text(node):
    """Fully parenthesized text that parses back to the same tree."""
    if node.kind == "num":
        return repr(float(node.value))
    if node.kind == "var":
        return node.value
    if node.kind == "neg":
        return f"(-{to_text(node.args[0])})"
    if node.kind == "bin":
        a, b = node.args
        return f"({to_text(a)} {node.value} {to_text(b)})"
    return f"{node.value}(" + ", ".join(to_text(a) for a in node.args) + ")"


def _eval(node, env):
    k = node.kind
    if k == "num":
        return node.value
    if k == "var":
        return env[node.value]
    if k == "neg":
        return -_eval(node.args[0], env)
    if k == "bin":
        a = _eval(node.args[0], env)
        b = _eval(node.args[1], env)
        op = node.value
        if op == "+":
            return a + b
        if op == "-":
            return a - b
        if op == "*":
            return a * b
        if op == "/":
            return np.divide(a, b)
        return np.power(np.asarray(a, dtype=np.float64), b)
    name = node.value
    vals = [_eval(a, env) for a in node.args]
    if name == "abs":
        return np.abs(vals[0])
    if name == "sqrt":
        return np.sqrt(vals[0])
    if name == "exp":
        return np.exp(vals[0])
    if name == "log":
        return np.log(vals[0])
    if name == "sign":
        return np.sign(vals[0])
    if name in _ELEMENTARY:
        return _ELEMENTARY[name](vals[0])
    if name == "pow":
        return np.power(np.asarray(vals[0], dtype=np.float64), vals[1])
    if name == "min":
        out = vals[0]
        for v in vals[1:]:
            out = np.minimum(out, v)
        return out
    out = vals[0]
    for v in vals[1:]:
        out = np.maximum(out, v)
    return out


def _environment(t, x, y, z, u):
    u = np.asarray(u, dtype=np.float64)
    env = {"t": t, "x": x, "y": y, "z": z}
    if u.ndim == 0:
        env["u"] = env["u1"] = u
    else:
        env["u"] = u[..., 0]
        for i in range(u.shape[-1]):
            env[f"u{i + 1}"] = u[..., i]
    return env


def _first_bad(arrays, mask):
    idx = np.argwhere(mask)
    if idx.size == 0:
        return None
    first = tuple(idx[0])
    point = {}
    for key, arr in arrays.items():
        a = np.asarray(arr)
        try:
            point[key] = float(np.broadcast_to(a, mask.shape)[first]) if a.ndim else float(a)
        except ValueError:
            point[key] = np.asarray(a).tolist()
    return point


def evaluate(node, t, x, y, z, u=0.0, text=None):
    """Evaluate a tree with numpy broadcasting.

    Any floating-point failure or non-finite output raises
    ``GeneratorEvaluationError`` carrying the first offending point.
    """
    env = _environment(t, x, y, z, u)
    missing = [name for name in _names(node) if name not in env]
    if missing:
        raise GeneratorEvaluationError(f"variable {missing[0]!r} has no value (control has too few components)")
    label = text if text is not None else to_text(node)
    try:
        with np.errstate(all="raise"):
            out = _eval(node, env)
    except FloatingPointError as exc:
        with np.errstate(all="ignore"):
            out = np.asarray(_eval(node, env), dtype=np.float64)
        bad = ~np.isfinite(out) if out.ndim else None
        point = _first_bad({"t": t, "x": x, "y": y, "z": z}, bad) if bad is not None and bad.any() else None
        raise GeneratorEvaluationError(f"evaluating {label!r} failed ({exc})", point) from None
    out = np.asarray(out, dtype=np.float64)
    if not np.all(np.isfinite(out)):
        point = _first_bad({"t": t, "x": x, "y": y, "z": z}, ~np.isfinite(out)) if out.ndim else {
            "t": float(np.asarray(t)), "x": float(np.asarray(x)), "y": float(np.asarray(y)), "z": float(np.asarray(z))}
        raise GeneratorEvaluationError(f"evaluating {label!r} gave a non-finite value", point)
    return out


def _names(node):
    if node.kind == "var":
        yield node.value
    for a in node.args:
        yield from _names(a)


def compile_expr(text):
    """Parse once and return ``fn(t, x, y, z, u)`` with ``.source`` and ``.tree``."""
    tree = parse(text)

    def fn(t, x, y, z, u=0.0):
        return evaluate(tree, t, x, y, z, u, text=text)

    fn.source = text
    fn.tree = tree
    return fn
