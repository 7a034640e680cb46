"""Small, safe arithmetic expression language.

Expressions are parsed with :mod:`ast`, checked against a whitelist of node
types and compiled to Python code objects.  The same compiled expression can
be evaluated on floats (``math`` backend, fast for ODE right-hand sides) or on
numpy arrays (vectorized design-matrix construction).

Grammar
-------
* numbers, the constants ``pi`` and ``e``
* variables such as ``x1``, ``dx2``, ``u1``, ``t``
* lagged variables ``x1(-2)`` (value of ``x1`` two samples back) and the
  index-free form ``x(-1)`` used by vector-valued terms
* binary operators ``+ - * /`` and power written ``^`` or ``**``
* functions ``sin cos tan exp log sqrt abs tanh``
* in conditions: comparisons ``< <= > >=`` joined with ``and`` / ``or``
"""
from __future__ import annotations

import ast
import math
from dataclasses import dataclass, field
from types import SimpleNamespace
from typing import Any, Mapping

import numpy as np

FUNCTIONS = ("sin", "cos", "tan", "exp", "log", "sqrt", "abs", "tanh")
CONSTANTS = {"pi": math.pi, "e": math.e}

_NUMPY_LIB = SimpleNamespace(
    sin=np.sin, cos=np.cos, tan=np.tan, exp=np.exp, log=np.log, sqrt=np.sqrt,
    abs=np.abs, tanh=np.tanh, minimum=np.minimum, maximum=np.maximum,
)
_MATH_LIB = SimpleNamespace(
    sin=math.sin, cos=math.cos, tan=math.tan, exp=math.exp, log=math.log,
    sqrt=math.sqrt, abs=abs, tanh=math.tanh, minimum=min, maximum=max,
)

_BINOPS = {ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow}
_CMP_LE = (ast.Lt, ast.LtE)
_CMP_GE = (ast.Gt, ast.GtE)


class ExpressionError(ValueError):
    """Raised for syntax errors or disallowed constructs."""


class EvaluationError(ArithmeticError):
    """Raised when an expression produces a non-finite or complex value."""


def lag_symbol(var: str, lag: int) -> str:
    """Internal variable name used for ``var(-lag)``."""
    return f"{var}__{lag}"


@dataclass(frozen=True)
class Expression:
    """A compiled expression.

    Attributes
    ----------
    source : str
        The expression as written by the user.
    names : frozenset of str
        Plain variable names referenced (functions and constants excluded).
    lagged : frozenset of (str, int)
        ``(variable, lag)`` pairs referenced through the call syntax.
    is_condition : bool
        True for comparisons; evaluation then returns a signed margin that is
        non-negative exactly when the condition holds.
    """

    source: str
    names: frozenset
    lagged: frozenset
    is_condition: bool
    _code: Any = field(repr=False, compare=False)

    @property
    def max_lag(self) -> int:
        return max((lag for _, lag in self.lagged), default=0)

    @property
    def symbols(self) -> frozenset:
        """Every name that must be bound in the evaluation environment."""
        return self.names | {lag_symbol(v, k) for v, k in self.lagged}

    def evaluate(self, env: Mapping[str, Any], backend: str = "numpy"):
        """Evaluate with variables bound from ``env``.

        Parameters
        ----------
        env : mapping
            Values for :attr:`symbols`; floats or numpy arrays.
        backend : {"numpy", "math"}
            ``math`` is faster for scalars and raises on domain errors.

        Raises
        ------
        EvaluationError
            If the result is complex or not finite.
        """
        lib = _MATH_LIB if backend == "math" else _NUMPY_LIB
        scope = {"__builtins__": {}, "_lib": lib, **CONSTANTS}
        try:
            with np.errstate(all="ignore"):
                value = eval(self._code, scope, dict(env))  # noqa: S307 - whitelisted AST
        except (ValueError, ZeroDivisionError, OverflowError) as exc:
            raise EvaluationError(f"{self.source!r}: {exc}") from None
        if isinstance(value, complex):
            raise EvaluationError(f"{self.source!r}: complex result")
        return value

    def __str__(self) -> str:
        return self.source


class _Compiler(ast.NodeTransformer):
    def __init__(self, allow_lags: bool, allow_conditions: bool):
        self.allow_lags = allow_lags
        self.allow_conditions = allow_conditions
        self.names: set[str] = set()
        self.lagged: set[tuple[str, int]] = set()

    def generic_visit(self, node):
        raise ExpressionError(f"unsupported syntax: {type(node).__name__}")

    def visit_Expression(self, node):
        node.body = self.visit(node.body)
        return node

    def visit_Constant(self, node):
        if isinstance(node.value, bool) or not isinstance(node.value, (int, float)):
            raise ExpressionError(f"unsupported constant {node.value!r}")
        return node

    def visit_Name(self, node):
        if node.id in FUNCTIONS:
            raise ExpressionError(f"function {node.id!r} used without argument")
        if node.id.startswith("_"):
            raise ExpressionError(f"invalid name {node.id!r}")
        if node.id not in CONSTANTS:
            self.names.add(node.id)
        return node

    def visit_BinOp(self, node):
        if type(node.op) not in _BINOPS:
            raise ExpressionError(f"unsupported operator {type(node.op).__name__}")
        node.left = self.visit(node.left)
        node.right = self.visit(node.right)
        return node

    def visit_UnaryOp(self, node):
        if not isinstance(node.op, (ast.USub, ast.UAdd)):
            raise ExpressionError(f"unsupported operator {type(node.op).__name__}")
        node.operand = self.visit(node.operand)
        return node

    def visit_Call(self, node):
        if not isinstance(node.func, ast.Name) or node.keywords or len(node.args) != 1:
            raise ExpressionError("calls must look like f(arg) or x1(-lag)")
        name = node.func.id
        if name in FUNCTIONS:
            arg = self.visit(node.args[0])
            func = ast.Attribute(value=ast.Name(id="_lib", ctx=ast.Load()), attr=name, ctx=ast.Load())
            return ast.copy_location(ast.Call(func=func, args=[arg], keywords=[]), node)
        if not self.allow_lags:
            raise ExpressionError(f"unknown function {name!r}")
        lag = _lag_value(node.args[0])
        if lag is None:
            raise ExpressionError(f"lag of {name!r} must be written as {name}(-<integer>)")
        self.lagged.add((name, lag))
        return ast.copy_location(ast.Name(id=lag_symbol(name, lag), ctx=ast.Load()), node)

    def visit_Compare(self, node):
        if not self.allow_conditions:
            raise ExpressionError("comparison not allowed here")
        operands = [self.visit(node.left)] + [self.visit(c) for c in node.comparators]
        margins = []
        for op, lhs, rhs in zip(node.ops, operands[:-1], operands[1:]):
            if isinstance(op, _CMP_LE):
                margins.append(ast.BinOp(left=rhs, op=ast.Sub(), right=lhs))
            elif isinstance(op, _CMP_GE):
                margins.append(ast.BinOp(left=lhs, op=ast.Sub(), right=rhs))
            else:
                raise ExpressionError(f"unsupported comparison {type(op).__name__}")
        return _reduce("minimum", margins)

    def visit_BoolOp(self, node):
        if not self.allow_conditions:
            raise ExpressionError("boolean operator not allowed here")
        parts = [self.visit(v) for v in node.values]
        return _reduce("minimum" if isinstance(node.op, ast.And) else "maximum", parts)


def _reduce(func: str, parts: list) -> ast.expr:
    out = parts[0]
    for p in parts[1:]:
        f = ast.Attribute(value=ast.Name(id="_lib", ctx=ast.Load()), attr=func, ctx=ast.Load())
        out = ast.Call(func=f, args=[out, p], keywords=[])
    return out


def _lag_value(node) -> int | None:
    if (isinstance(node, ast.UnaryOp) and isinstance(node.op, ast.USub)
            and isinstance(node.operand, ast.Constant) and type(node.operand.value) is int):
        return node.operand.value
    if isinstance(node, ast.Constant) and type(node.value) is int and node.value <= 0:
        return -node.value
    return None


def _is_condition(tree: ast.Expression) -> bool:
    return isinstance(tree.body, (ast.Compare, ast.BoolOp))


def parse(source: str, *, lags: bool = False, condition: bool = False) -> Expression:
    """Parse and compile ``source``.

    Parameters
    ----------
    source : str
        Expression text.  ``^`` is accepted as the power operator.
    lags : bool
        Allow the lag syntax ``x1(-2)``.
    condition : bool
        Require a boolean condition (comparisons, ``and``, ``or``).
    """
    if not isinstance(source, str) or not source.strip():
        raise ExpressionError("expression must be a non-empty string")
    text = source.strip().replace("^", "**")
    try:
        tree = ast.parse(text, mode="eval")
    except SyntaxError as exc:
        raise ExpressionError(f"cannot parse {source!r}: {exc.msg}") from None
    if condition and not _is_condition(tree):
        raise ExpressionError(f"{source!r} is not a condition")
    if not condition and _is_condition(tree):
        raise ExpressionError(f"{source!r}: comparison not allowed here")
    comp = _Compiler(allow_lags=lags, allow_conditions=condition)
    tree = ast.fix_missing_locations(comp.visit(tree))
    code = compile(tree, "<expr>", "eval")
    return Expression(
        source=source.strip(),
        names=frozenset(comp.names),
        lagged=frozenset(comp.lagged),
        is_condition=condition,
        _code=code,
    )
