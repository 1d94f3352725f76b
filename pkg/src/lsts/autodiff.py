"""Reverse-mode differentiation over a recorded operation graph.

Every differentiable op (see :mod:`lsts.ops`) produces a :class:`Variable`
that remembers its parents and a backward rule.  Node ids come from a global
counter, so creation order is already a topological order.  A graph is
single-shot: after :func:`backward` has run through it, its interior nodes are
marked consumed and a second call raises.
"""

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

_ids = itertools.count()
_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Evaluate ops without recording them."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Variable:
    __slots__ = ("value", "grad", "requires_grad", "name", "node_id",
                 "_parents", "_backward", "_consumed")

    def __init__(self, value, requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.node_id = next(_ids)
        self._parents = ()
        self._backward = None
        self._consumed = False

    @property
    def shape(self):
        return self.value.shape

    @property
    def is_leaf(self):
        return self._backward is None and not self._consumed

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Variable{tag}(shape={self.value.shape}, requires_grad={self.requires_grad})"

    # operator sugar; the actual rules live in lsts.ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __getitem__(self, index):
        from . import ops
        return ops.take(self, index)


def as_variable(x) -> Variable:
    return x if isinstance(x, Variable) else Variable(x)


def record(value, parents, backward) -> Variable:
    """Wrap an op result; ``backward(g)`` returns one gradient (or None) per parent."""
    out = Variable(value)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


@dataclass
class TapeEntry:
    output: int
    inputs: tuple
    rule: object


@dataclass
class Tape:
    """The recorded operations reachable from one loss, in topological order."""

    entries: list = field(default_factory=list)
    nodes: dict = field(default_factory=dict)

    @classmethod
    def from_loss(cls, loss: Variable) -> "Tape":
        tape = cls()
        seen = set()
        stack = [loss]
        while stack:
            v = stack.pop()
            if v.node_id in seen:
                continue
            seen.add(v.node_id)
            tape.nodes[v.node_id] = v
            if v._consumed:
                raise RuntimeError("graph has already been consumed by a backward pass; "
                                   "re-run the forward computation")
            if v._backward is not None:
                stack.extend(v._parents)
        ops = [v for v in tape.nodes.values() if v._backward is not None]
        ops.sort(key=lambda v: v.node_id)
        tape.entries = [TapeEntry(v.node_id, tuple(p.node_id for p in v._parents), v._backward)
                        for v in ops]
        return tape


def backward(loss: Variable) -> None:
    """Populate ``.grad`` of every requires-grad leaf reachable from ``loss``."""
    if loss.value.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    if loss._consumed:
        raise RuntimeError("graph has already been consumed by a backward pass; "
                           "re-run the forward computation")
    if not loss.requires_grad:
        return
    tape = Tape.from_loss(loss)
    grads = {loss.node_id: np.ones_like(loss.value)}
    if loss._backward is None:
        _accumulate(loss, grads[loss.node_id])
        return
    for entry in reversed(tape.entries):
        g = grads.pop(entry.output, None)
        node = tape.nodes[entry.output]
        if g is not None:
            parent_grads = entry.rule(g)
            for pid, pg in zip(entry.inputs, parent_grads):
                parent = tape.nodes[pid]
                if pg is None or not parent.requires_grad:
                    continue
                if parent._backward is None:
                    _accumulate(parent, pg)
                elif pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg
        node._backward = None
        node._parents = ()
        node._consumed = True


def _accumulate(leaf, g):
    g = np.asarray(g, dtype=np.float64)
    if g.shape != leaf.value.shape:
        g = g.reshape(leaf.value.shape)
    leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def zero_grad(params) -> None:
    for p in params:
        p.grad = None


def sgd_step(params, lr: float) -> None:
    """Plain SGD: ``value -= lr * grad``, then clear the gradients."""
    for p in params:
        if p.grad is not None:
            p.value = p.value - lr * p.grad
        p.grad = None


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------

class NondeterminismError(RuntimeError):
    pass


@dataclass
class GradCheckEntry:
    name: str
    max_error: float
    mean_error: float
    checked: int
    skipped: int
    passed: bool

    def format(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{self.name}: max_rel={self.max_error:.3e} mean_rel={self.mean_error:.3e} "
                f"checked={self.checked} skipped={self.skipped} {status}")


@dataclass
class GradCheckReport:
    entries: list
    tol: float

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    @property
    def max_error(self) -> float:
        return max((e.max_error for e in self.entries), default=0.0)

    def format(self) -> str:
        return "\n".join(e.format() for e in self.entries)


def relative_error(a, n):
    a = np.asarray(a)
    n = np.asarray(n)
    return np.abs(a - n) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))


def _near_integer(v, step):
    return np.abs(v - np.round(v)) <= step


def grad_check(f, inputs, step=1e-5, tol=1e-4, locations=()) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f()`` with central differences.

    ``f`` takes no arguments and reads the current ``.value`` of ``inputs``.
    Coordinates of inputs listed in ``locations`` (sampling positions) that sit
    within ``step`` of an integer grid line are skipped, since the bilinear
    kernel has a kink there.
    """
    inputs = list(inputs)
    location_ids = {id(v) for v in locations}
    for v in inputs:
        v.requires_grad = True
        v.grad = None
    loss = f()
    backward(loss)
    analytic = [np.zeros_like(v.value) if v.grad is None else v.grad.copy() for v in inputs]
    for v in inputs:
        v.grad = None

    with no_grad():
        base_1 = float(np.asarray(f().value).ravel()[0])
        base_2 = float(np.asarray(f().value).ravel()[0])
    if base_1 != base_2:
        raise NondeterminismError(f"f returned {base_1!r} then {base_2!r} for identical inputs")

    entries = []
    for idx, (v, a) in enumerate(zip(inputs, analytic)):
        original = v.value
        errors = []
        skipped = 0
        flat = original.ravel()
        for i in range(flat.size):
            if id(v) in location_ids and _near_integer(flat[i], step):
                skipped += 1
                continue
            plus = flat.copy()
            plus[i] += step
            minus = flat.copy()
            minus[i] -= step
            with no_grad():
                v.value = plus.reshape(original.shape)
                fp = float(np.asarray(f().value).ravel()[0])
                v.value = minus.reshape(original.shape)
                fm = float(np.asarray(f().value).ravel()[0])
            v.value = original
            numeric = (fp - fm) / (2.0 * step)
            errors.append(float(relative_error(a.ravel()[i], numeric)))
        name = v.name or f"input{idx}"
        max_err = max(errors, default=0.0)
        mean_err = float(np.mean(errors)) if errors else 0.0
        entries.append(GradCheckEntry(name, max_err, mean_err, len(errors), skipped,
                                      max_err <= tol))
    return GradCheckReport(entries, tol)
