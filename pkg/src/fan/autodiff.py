"""Reverse-mode differentiation over the dense kernels.

A :class:`Var` wraps a numpy array. Vars created through
:meth:`GradTape.param` are tracked; every op whose inputs include a tracked
Var is appended to the tape together with its vector-Jacobian product.
Ops on untracked Vars just compute forward values, so the same model code
serves training and inference.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import kernels as K
from .errors import DimensionError, ProbeError


class Var:
    __slots__ = ("data", "tape", "name")

    def __init__(self, data, tape: "GradTape | None" = None, name: str | None = None):
        self.data = np.asarray(data)
        self.tape = tape
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        tracked = "tracked" if self.tape is not None else "const"
        return f"Var({self.name or ''} shape={self.data.shape}, {tracked})"

    # operator sugar; all of these dispatch to the strict ops below
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


@dataclass
class _Record:
    out: Var
    inputs: tuple
    vjp: Callable


@dataclass
class GradTape:
    """Op recording plus a name -> parameter registry.

    One tape per training worker; tapes are not thread-safe.
    """

    records: list = field(default_factory=list)
    params: dict = field(default_factory=dict)

    def param(self, name: str, data) -> Var:
        if name in self.params:
            raise KeyError(f"parameter {name!r} already registered")
        v = Var(data, tape=self, name=name)
        self.params[name] = v
        return v

    def params_from(self, arrays: dict) -> dict:
        return {k: self.param(k, v) for k, v in arrays.items()}

    def backward(self, loss: Var) -> dict:
        """Gradients of scalar ``loss`` for every registered parameter."""
        if loss.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        grads = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.vjp(g)):
                if gi is None or not isinstance(inp, Var) or inp.tape is not self:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        return {
            name: grads.get(id(v), np.zeros_like(v.data)) for name, v in self.params.items()
        }

    def clear(self):
        self.records.clear()


def _record(out_data, inputs, vjp) -> Var:
    tape = None
    for x in inputs:
        if isinstance(x, Var) and x.tape is not None:
            tape = x.tape
            break
    out = Var(out_data, tape=tape)
    if tape is not None:
        tape.records.append(_Record(out, tuple(inputs), vjp))
    return out


def _check_same(op, a, b):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _check_bcast(op, x, b):
    ok = b.ndim <= x.ndim and all(
        bs in (1, xs) for bs, xs in zip(b.shape[::-1], x.shape[::-1])
    )
    if not ok:
        raise DimensionError(f"{op}: cannot broadcast {b.shape} against {x.shape}")


# ---------------------------------------------------------------- ops


def matmul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    out = K.matmul(a.data, b.data)
    return _record(out, (a, b), lambda g: K.matmul_backward(a.data, b.data, g))


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    _check_same("add", a.data, b.data)
    return _record(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    _check_same("mul", a.data, b.data)
    return _record(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a, c: float) -> Var:
    a = as_var(a)
    return _record(a.data * c, (a,), lambda g: (g * c,))


def broadcast_add(x, b) -> Var:
    """``x + b`` where ``b`` broadcasts over leading or size-1 axes of ``x``."""
    x, b = as_var(x), as_var(b)
    _check_bcast("broadcast_add", x.data, b.data)
    return _record(
        x.data + b.data, (x, b), lambda g: (g, K.reduce_to_shape(g, b.data.shape))
    )


def broadcast_mul(x, b) -> Var:
    """``x * b`` where ``b`` broadcasts over leading or size-1 axes of ``x``."""
    x, b = as_var(x), as_var(b)
    _check_bcast("broadcast_mul", x.data, b.data)
    return _record(
        x.data * b.data,
        (x, b),
        lambda g: (g * b.data, K.reduce_to_shape(g * x.data, b.data.shape)),
    )


def add_bias(x, b) -> Var:
    """Add a per-channel bias of shape ``(d,)`` to ``(..., d, n)`` tokens."""
    b = as_var(b)
    return broadcast_add(x, reshape(b, b.data.shape + (1,)))


def transpose(x) -> Var:
    x = as_var(x)
    return _record(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(x, shape) -> Var:
    x = as_var(x)
    orig = x.data.shape
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(orig),))


def softmax(x, axis: int = -1) -> Var:
    x = as_var(x)
    y = K.softmax(x.data, axis)
    return _record(y, (x,), lambda g: (K.softmax_backward(y, g, axis),))


def sigmoid(x) -> Var:
    x = as_var(x)
    y = K.sigmoid(x.data)
    return _record(y, (x,), lambda g: (K.sigmoid_backward(y, g),))


def gelu(x) -> Var:
    x = as_var(x)
    return _record(K.gelu(x.data), (x,), lambda g: (K.gelu_backward(x.data, g),))


def layer_norm(x, gamma, beta, axis: int = -2, eps: float = K.LN_EPS) -> Var:
    x, gamma, beta = as_var(x), as_var(gamma), as_var(beta)
    y, cache = K.layer_norm(x.data, gamma.data, beta.data, axis, eps)
    return _record(y, (x, gamma, beta), lambda g: K.layer_norm_backward(gamma.data, cache, g))


def mean(x, axis: int, keepdims: bool = True) -> Var:
    x = as_var(x)
    axis = axis % x.data.ndim
    size = x.data.shape[axis]
    out = x.data.mean(axis=axis, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / size, x.data.shape).copy(),)

    return _record(out, (x,), vjp)


def total(x) -> Var:
    x = as_var(x)
    return _record(np.asarray(x.data.sum()), (x,), lambda g: (np.full_like(x.data, g),))


def cross_entropy(logits, labels, smoothing: float = 0.0) -> Var:
    logits = as_var(logits)
    loss, cache = K.cross_entropy(logits.data, np.asarray(labels), smoothing)
    return _record(
        np.asarray(loss), (logits,), lambda g: (K.cross_entropy_backward(cache, g),)
    )


# ---------------------------------------------------------------- checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict

    def __float__(self):
        return self.max_rel_error


def grad_check(f, params: dict, h: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``f`` maps a dict of Vars to a scalar Var. The relative error of one
    element is ``|a - c| / (|a| + |c| + 1e-12)``; the report keeps the max
    per parameter and overall.
    """
    if not params:
        return GradCheckReport(0.0, {})
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    tape = GradTape()
    loss = f(tape.params_from({k: v.copy() for k, v in params.items()}))
    if not np.all(np.isfinite(loss.data)):
        raise ProbeError("grad_check: loss is not finite")
    analytic = tape.backward(loss)

    def evaluate(arrays):
        val = float(f({k: Var(v) for k, v in arrays.items()}).data)
        if not np.isfinite(val):
            raise ProbeError("grad_check: perturbed loss is not finite")
        return val

    per_param = {}
    for name, p in params.items():
        worst = 0.0
        flat = p.reshape(-1)
        ga = analytic[name].reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = evaluate(params)
            flat[i] = old - h
            fm = evaluate(params)
            flat[i] = old
            cd = (fp - fm) / (2 * h)
            err = abs(ga[i] - cd) / (abs(ga[i]) + abs(cd) + 1e-12)
            worst = max(worst, err)
        per_param[name] = worst
    return GradCheckReport(max(per_param.values()), per_param)
