"""Safe arithmetic expressions for user-supplied coefficient functions.

Expressions are parsed once with :mod:`ast` and evaluated on numpy arrays.
Allowed: numbers, ``+ - * / ^ **``, unary minus, named constants, the
variables ``t, x, y, z`` (plus ``x0, x1, ...`` / ``z0, z1, ...`` for
components) and the functions listed in ``FUNCTIONS``.
"""

from __future__ import annotations

import ast
import math

import numpy as np

FUNCTIONS = {
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "abs": np.abs,
    "sin": np.sin,
    "cos": np.cos,
    "tanh": np.tanh,
    "max": np.maximum,
    "min": np.minimum,
    "pos": lambda a: np.maximum(a, 0.0),
    "neg": lambda a: np.maximum(-a, 0.0),
    "norm": lambda a: np.abs(a),
    "step": lambda a: np.where(a >= 0, 1.0, 0.0),
}

CONSTANTS = {"pi": math.pi, "e": math.e}

_BINOPS = {
    ast.Add: np.add,
    ast.Sub: np.subtract,
    ast.Mult: np.multiply,
    ast.Div: np.divide,
    ast.Pow: np.power,
    ast.BitXor: np.power,
}


class ExpressionError(ValueError):
    pass


class Expression:
    """A compiled expression ``source`` in the given variables.

    >>> Expression("-y^3", ["y"])(y=np.array([2.0]))
    array([-8.])
    """

    def __init__(self, source, variables, params=None):
        self.source = str(source)
        self.variables = tuple(variables)
        self.params = dict(params or {})
        try:
            tree = ast.parse(self.source.replace("^", "**"), mode="eval")
        except SyntaxError as exc:
            raise ExpressionError(f"cannot parse {self.source!r}: {exc.msg}") from None
        self._tree = tree.body
        self.names = set()
        self._check(self._tree)

    def _check(self, node):
        if isinstance(node, ast.Constant):
            if not isinstance(node.value, (int, float)):
                raise ExpressionError(f"non-numeric literal in {self.source!r}")
        elif isinstance(node, ast.Name):
            if not self._known(node.id):
                raise ExpressionError(f"unknown name {node.id!r} in {self.source!r}")
            self.names.add(node.id)
        elif isinstance(node, ast.BinOp):
            if type(node.op) not in _BINOPS:
                raise ExpressionError(f"operator not allowed in {self.source!r}")
            self._check(node.left)
            self._check(node.right)
        elif isinstance(node, ast.UnaryOp):
            if not isinstance(node.op, (ast.USub, ast.UAdd)):
                raise ExpressionError(f"operator not allowed in {self.source!r}")
            self._check(node.operand)
        elif isinstance(node, ast.Call):
            if not isinstance(node.func, ast.Name) or node.func.id not in FUNCTIONS:
                raise ExpressionError(f"unknown function in {self.source!r}")
            if node.keywords:
                raise ExpressionError(f"keyword arguments not allowed in {self.source!r}")
            for arg in node.args:
                self._check(arg)
        else:
            raise ExpressionError(f"unsupported syntax in {self.source!r}")

    def _known(self, name):
        if name in self.variables or name in self.params or name in CONSTANTS:
            return True
        # component access: x0, x1, z0, ...
        return name[:1] in self.variables and name[1:].isdigit()

    def depends_on(self, name):
        return any(n == name or (n[:1] == name and n[1:].isdigit()) for n in self.names)

    def __call__(self, **values):
        # non-finite results are reported by the callers, not as warnings
        with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
            return self._eval(self._tree, values)

    def _eval(self, node, values):
        if isinstance(node, ast.Constant):
            return float(node.value)
        if isinstance(node, ast.Name):
            name = node.id
            if name in values:
                return values[name]
            if name in self.params:
                return self.params[name]
            if name in CONSTANTS:
                return CONSTANTS[name]
            base = values[name[:1]]
            return base[..., int(name[1:])]
        if isinstance(node, ast.BinOp):
            return _BINOPS[type(node.op)](self._eval(node.left, values), self._eval(node.right, values))
        if isinstance(node, ast.UnaryOp):
            operand = self._eval(node.operand, values)
            return -operand if isinstance(node.op, ast.USub) else operand
        func = FUNCTIONS[node.func.id]
        return func(*(self._eval(arg, values) for arg in node.args))

    def __repr__(self):
        return f"Expression({self.source!r})"
