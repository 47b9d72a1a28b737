"""Tiny arithmetic expression language for coefficients in config files.

Grammar (a subset of Python expression syntax)::

    expr   := number | name | expr op expr | -expr | +expr | call
    op     := + - * / **
    call   := func "(" expr {"," expr} ")"
    func   := sin cos tan exp log sqrt abs tanh sinh cosh arctan sign min max
    name   := x | x1..xn | v | v1..vm | z | z1..zd | t | pi | e

``x``, ``v`` and ``z`` alias the first component.  Expressions are evaluated
vectorized over a batch of spatial points; every result is broadcast to the
batch length.
"""

import ast
import math

import numpy as np

from .errors import ConfigError

_FUNCS = {
    "sin": np.sin,
    "cos": np.cos,
    "tan": np.tan,
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "abs": np.abs,
    "tanh": np.tanh,
    "sinh": np.sinh,
    "cosh": np.cosh,
    "arctan": np.arctan,
    "sign": np.sign,
    "min": np.minimum,
    "max": np.maximum,
}

_CONSTS = {"pi": math.pi, "e": math.e}

_BINOPS = {
    ast.Add: np.add,
    ast.Sub: np.subtract,
    ast.Mult: np.multiply,
    ast.Div: np.divide,
    ast.Pow: np.power,
}


class Expression:
    """A parsed expression; call with ``(x, v, z, t)`` batch arguments."""

    def __init__(self, source):
        if isinstance(source, (int, float)):
            source = repr(float(source))
        self.source = str(source)
        try:
            tree = ast.parse(self.source, mode="eval")
        except SyntaxError as exc:
            raise ConfigError(f"cannot parse expression {self.source!r}: {exc.msg}") from None
        self._body = tree.body
        self._check(self._body)

    def _check(self, node):
        if isinstance(node, ast.Constant):
            if not isinstance(node.value, (int, float)) or isinstance(node.value, bool):
                raise ConfigError(f"unsupported literal in {self.source!r}")
        elif isinstance(node, ast.Name):
            if node.id not in _CONSTS and _parse_var(node.id) is None:
                raise ConfigError(f"unknown name {node.id!r} in {self.source!r}")
        elif isinstance(node, ast.BinOp):
            if type(node.op) not in _BINOPS:
                raise ConfigError(f"unsupported operator in {self.source!r}")
            self._check(node.left)
            self._check(node.right)
        elif isinstance(node, ast.UnaryOp):
            if not isinstance(node.op, (ast.USub, ast.UAdd)):
                raise ConfigError(f"unsupported unary operator in {self.source!r}")
            self._check(node.operand)
        elif isinstance(node, ast.Call):
            if not isinstance(node.func, ast.Name) or node.func.id not in _FUNCS or node.keywords:
                raise ConfigError(f"unsupported function call in {self.source!r}")
            for arg in node.args:
                self._check(arg)
        else:
            raise ConfigError(f"unsupported syntax {type(node).__name__} in {self.source!r}")

    def variables(self):
        names = set()
        for node in ast.walk(self._body):
            if isinstance(node, ast.Name) and node.id not in _CONSTS:
                names.add(node.id)
        return names

    def __call__(self, x, v, z, t):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        env = {"x": x, "v": np.atleast_1d(np.asarray(v, dtype=float)),
               "z": np.atleast_1d(np.asarray(z, dtype=float)), "t": float(t)}
        out = self._eval(self._body, env)
        return np.broadcast_to(np.asarray(out, dtype=float), (x.shape[0],)).copy()

    def _eval(self, node, env):
        if isinstance(node, ast.Constant):
            return float(node.value)
        if isinstance(node, ast.Name):
            if node.id in _CONSTS:
                return _CONSTS[node.id]
            kind, idx = _parse_var(node.id)
            if kind == "t":
                return env["t"]
            arr = env[kind]
            if kind == "x":
                if idx >= arr.shape[1]:
                    raise ConfigError(f"{node.id} exceeds spatial dimension {arr.shape[1]}")
                return arr[:, idx]
            if idx >= arr.shape[0]:
                raise ConfigError(f"{node.id} exceeds available components ({arr.shape[0]})")
            return arr[idx]
        if isinstance(node, ast.BinOp):
            return _BINOPS[type(node.op)](self._eval(node.left, env), self._eval(node.right, env))
        if isinstance(node, ast.UnaryOp):
            val = self._eval(node.operand, env)
            return -val if isinstance(node.op, ast.USub) else val
        fn = _FUNCS[node.func.id]
        args = [self._eval(a, env) for a in node.args]
        if fn in (np.minimum, np.maximum) and len(args) > 2:
            out = args[0]
            for a in args[1:]:
                out = fn(out, a)
            return out
        return fn(*args)

    def __repr__(self):
        return f"Expression({self.source!r})"


def _parse_var(name):
    if name == "t":
        return ("t", 0)
    if name and name[0] in "xvz":
        rest = name[1:]
        if rest == "":
            return (name[0], 0)
        if rest.isdigit() and int(rest) >= 1:
            return (name[0], int(rest) - 1)
    return None


def compile_vector(sources):
    """Compile a list of expressions into ``f(x, v, z, t) -> (P, len)``."""
    exprs = [Expression(s) for s in sources]

    def fn(x, v, z, t):
        return np.stack([e(x, v, z, t) for e in exprs], axis=-1)

    fn.sources = [e.source for e in exprs]
    return fn


def compile_matrix(rows):
    """Compile a nested list of expressions into ``f(x, v, z, t) -> (P, n, n)``."""
    exprs = [[Expression(s) for s in row] for row in rows]

    def fn(x, v, z, t):
        return np.stack([np.stack([e(x, v, z, t) for e in row], axis=-1) for row in exprs], axis=-2)

    fn.sources = [[e.source for e in row] for row in exprs]
    return fn


def compile_scalar(source):
    expr = Expression(source)

    def fn(x, v, z, t):
        return expr(x, v, z, t)

    fn.sources = expr.source
    return fn
