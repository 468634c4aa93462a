"""Scalar coefficient fields defined by arithmetic expressions.

Metric coefficients, mass terms, sources and nonlinearity coefficients are
all space-time scalar functions. To keep run configs reproducible without
dynamic code loading, a field is either a number, the name of a built-in
family, or a small arithmetic expression in ``t``, ``x`` and (on the
cylinder) ``theta``. Expressions are compiled through a whitelisted AST so
a config file can never execute arbitrary code.
"""

from __future__ import annotations

import ast
import math
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

__all__ = [
    "FieldError",
    "ScalarField",
    "compile_expression",
    "make_field",
    "BUILTIN_FAMILIES",
]


class FieldError(ValueError):
    """Raised for malformed or disallowed field expressions."""


_FUNCTIONS: dict[str, Callable] = {
    "sin": np.sin,
    "cos": np.cos,
    "tan": np.tan,
    "sinh": np.sinh,
    "cosh": np.cosh,
    "tanh": np.tanh,
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "abs": np.abs,
    "atan": np.arctan,
    "atan2": np.arctan2,
    "min": np.minimum,
    "max": np.maximum,
    "where": np.where,
}

_CONSTANTS = {"pi": math.pi, "e": math.e}

_ALLOWED_NODES = (
    ast.Expression,
    ast.BinOp,
    ast.UnaryOp,
    ast.Add,
    ast.Sub,
    ast.Mult,
    ast.Div,
    ast.Pow,
    ast.Mod,
    ast.USub,
    ast.UAdd,
    ast.Call,
    ast.Name,
    ast.Load,
    ast.Constant,
    ast.Compare,
    ast.Gt,
    ast.GtE,
    ast.Lt,
    ast.LtE,
)


def _validate(tree: ast.AST, variables: tuple[str, ...], src: str) -> None:
    for node in ast.walk(tree):
        if not isinstance(node, _ALLOWED_NODES):
            raise FieldError(
                f"disallowed syntax {type(node).__name__!r} in field expression {src!r}"
            )
        if isinstance(node, ast.Call):
            if not isinstance(node.func, ast.Name) or node.func.id not in _FUNCTIONS:
                raise FieldError(f"unknown function call in field expression {src!r}")
            if node.keywords:
                raise FieldError(f"keyword arguments not supported in {src!r}")
        if isinstance(node, ast.Name):
            if node.id not in variables and node.id not in _FUNCTIONS and node.id not in _CONSTANTS:
                raise FieldError(
                    f"unknown name {node.id!r} in field expression {src!r}; "
                    f"allowed variables: {', '.join(variables)}"
                )
        if isinstance(node, ast.Constant) and not isinstance(node.value, (int, float)):
            raise FieldError(f"non-numeric constant in field expression {src!r}")


def compile_expression(src: str, variables: tuple[str, ...] = ("t", "x", "theta")) -> Callable:
    """Compile ``src`` to a vectorized callable of the named variables.

    Only arithmetic, comparisons, numeric constants and the whitelisted
    math functions are accepted.
    """
    try:
        tree = ast.parse(src, mode="eval")
    except SyntaxError as exc:
        raise FieldError(f"cannot parse field expression {src!r}: {exc.msg}") from exc
    _validate(tree, variables, src)
    code = compile(tree, filename="<field>", mode="eval")
    env: dict = {"__builtins__": {}}
    env.update(_FUNCTIONS)
    env.update(_CONSTANTS)

    def fn(**kwargs):
        local = dict(env)
        local.update(kwargs)
        return eval(code, {"__builtins__": {}}, local)

    return fn


@dataclass(frozen=True)
class ScalarField:
    """A scalar function of (t, x[, theta]) evaluable on node arrays."""

    expr: str
    _fn: Callable

    def __call__(self, t, x, theta=None):
        kwargs = {"t": np.asarray(t, dtype=float), "x": np.asarray(x, dtype=float)}
        if theta is not None:
            kwargs["theta"] = np.asarray(theta, dtype=float)
        out = np.asarray(self._fn(**kwargs), dtype=float)
        target = np.broadcast_shapes(*(np.shape(v) for v in kwargs.values()))
        if out.shape != target:
            out = np.broadcast_to(out, target).copy()
        return out

    def __repr__(self):  # keep config echoes readable
        return f"ScalarField({self.expr!r})"


# Built-in families; each maps keyword parameters onto a plain expression so
# that the manifest can always echo the exact formula that ran.
BUILTIN_FAMILIES: Mapping[str, Callable[..., str]] = {
    "zero": lambda: "0",
    "one": lambda: "1",
    "flat": lambda: "1",
    "constant": lambda value: f"({value})",
    "pulse": lambda eps=0.1, omega=1.0: f"1 + ({eps})*sin(({omega})*t)",
    "conformal_pulse": lambda eps=0.1, omega=1.0, x0=0.5, width=0.25: (
        f"1 + ({eps})*sin(({omega})*t)*exp(-((x-({x0}))/({width}))**2)"
    ),
    "bump": lambda center=0.5, radius=0.25, amplitude=1.0: (
        f"({amplitude})*where(abs(x-({center})) < ({radius}), "
        f"exp(1 - 1/max(1 - ((x-({center}))/({radius}))**2, 1e-300)), 0)"
    ),
}


def make_field(spec, variables: tuple[str, ...] = ("t", "x", "theta")) -> ScalarField:
    """Build a ScalarField from a number, expression string, or family dict.

    Family dicts look like ``{"family": "pulse", "eps": 0.1, "omega": 2.0}``.
    """
    if isinstance(spec, ScalarField):
        return spec
    if isinstance(spec, (int, float)):
        expr = repr(float(spec))
    elif isinstance(spec, str):
        expr = BUILTIN_FAMILIES[spec]() if spec in BUILTIN_FAMILIES else spec
    elif isinstance(spec, dict):
        params = dict(spec)
        name = params.pop("family", None)
        if name not in BUILTIN_FAMILIES:
            raise FieldError(f"unknown field family {name!r}")
        try:
            expr = BUILTIN_FAMILIES[name](**params)
        except TypeError as exc:
            raise FieldError(f"bad parameters for field family {name!r}: {exc}") from exc
    else:
        raise FieldError(f"cannot interpret field spec {spec!r}")
    return ScalarField(expr, compile_expression(expr, variables))
