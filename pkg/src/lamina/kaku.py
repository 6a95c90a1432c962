"""Core contracts: IO, State, Assessment, criteria, optimizers and LearningMachine.

A learning machine owns five operations:

* ``forward(x, state)`` computes its output and stashes what later steps need
  in ``state``;
* ``assess_y(y, t)`` scores an output against a target;
* ``accumulate(x, t, state)`` (optional) gathers parameter changes;
* ``step(x, t, state)`` updates the parameters;
* ``step_x(x, t, state)`` returns a target for the machine feeding ``x``.

Machines are stacked by passing the result of one machine's ``step_x`` as the
target of the machine before it.
"""

from __future__ import annotations

import functools
import itertools
from dataclasses import dataclass
from typing import Any, Callable

import numpy as np

from lamina.errors import MissingStateError, OrderingError, ShapeError
from lamina.numerics import check_labels, log_softmax, softmax

_io_ids = itertools.count()


class IO:
    """An ordered tuple of arrays with a unique identity.

    Two IOs built from equal arrays are still distinct; the identity is what
    :class:`State` keys on.
    """

    __slots__ = ("parts", "id")

    def __init__(self, *parts):
        if not parts:
            raise ValueError("IO needs at least one part")
        self.parts = tuple(np.asarray(p) for p in parts)
        self.id = next(_io_ids)

    @property
    def f(self):
        """The first part."""
        return self.parts[0]

    def __len__(self):
        return len(self.parts)

    def __getitem__(self, i):
        return self.parts[i]

    def __iter__(self):
        return iter(self.parts)

    def clone(self):
        """Copy the data under a fresh identity."""
        return IO(*(p.copy() for p in self.parts))

    def freshen(self):
        # no autodiff tape to detach from; kept for interface parity
        return self

    def __repr__(self):
        shapes = ", ".join(str(p.shape) for p in self.parts)
        return f"IO(id={self.id}, shapes=[{shapes}])"


def io_data(x):
    """First array of an IO, or the array itself."""
    return x.f if isinstance(x, IO) else np.asarray(x)


@dataclass(frozen=True)
class Assessment:
    value: float
    maximize: bool = False

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise ValueError(f"assessment value must be finite, got {self.value}")

    def better_than(self, other):
        if self.maximize:
            return self.value > other.value
        return self.value < other.value

    def __lt__(self, other):
        # "a < b" means a is worse than b
        return other.better_than(self)

    def __float__(self):
        return float(self.value)


def best_index(assessments):
    """Index of the best assessment; ties resolve to the lowest index."""
    best = 0
    for i in range(1, len(assessments)):
        if assessments[i].better_than(assessments[best]):
            best = i
    return best


class StateView:
    """Attribute-style access to one machine's entries for one IO."""

    def __init__(self, state, machine, io):
        object.__setattr__(self, "_state", state)
        object.__setattr__(self, "_machine", machine)
        object.__setattr__(self, "_io", io)

    def __getattr__(self, key):
        return self._state.fetch(self._machine, self._io, key)

    def __setattr__(self, key, value):
        self._state.store(self._machine, self._io, key, value)

    def __contains__(self, key):
        return self._state.has(self._machine, self._io, key)


class State:
    """Per-step scratch storage keyed by (machine, IO id, key).

    ``state[machine, io, "key"]`` and ``state[machine, "key"]`` are both
    accepted; the second form is keyed on the machine alone.
    """

    def __init__(self):
        self._data = {}

    @staticmethod
    def _key(machine, io, key):
        io_id = None if io is None else (io.id if isinstance(io, IO) else io)
        return (id(machine), io_id, key)

    def store(self, machine, io, key, value):
        # machines are held so their ids cannot be reused while stored
        self._data[self._key(machine, io, key)] = (machine, value)

    def fetch(self, machine, io, key):
        try:
            return self._data[self._key(machine, io, key)][1]
        except KeyError:
            raise MissingStateError(machine, key) from None

    def get(self, machine, io, key, default=None):
        entry = self._data.get(self._key(machine, io, key))
        return default if entry is None else entry[1]

    def has(self, machine, io, key):
        return self._key(machine, io, key) in self._data

    def mine(self, machine, io=None):
        return StateView(self, machine, io)

    def clear(self):
        self._data.clear()

    def __len__(self):
        return len(self._data)

    @staticmethod
    def _split(index):
        if len(index) == 3:
            return index
        if len(index) == 2:
            return index[0], None, index[1]
        raise KeyError(f"state keys are (machine, io, key) or (machine, key), got {index!r}")

    def __getitem__(self, index):
        return self.fetch(*self._split(index))

    def __setitem__(self, index, value):
        self.store(*self._split(index), value)

    def __contains__(self, index):
        return self.has(*self._split(index))


def step_dep(key):
    """Require that ``step`` stored ``key`` for this (machine, x) before ``step_x`` runs."""

    def decorator(fn):
        @functools.wraps(fn)
        def wrapper(self, x, t, state, *args, **kwargs):
            if not state.has(self, x, key):
                raise OrderingError(
                    f"{type(self).__name__}.{fn.__name__} requires step() to run first "
                    f"(state key {key!r} missing)"
                )
            return fn(self, x, t, state, *args, **kwargs)

        return wrapper

    return decorator


# ---------------------------------------------------------------------------
# criteria


_KINDS = ("sse", "mse", "cross_entropy")
_REDUCTIONS = ("sum", "mean", "none")
_DEFAULT_REDUCTION = {"sse": "sum", "mse": "mean", "cross_entropy": "mean"}


@dataclass(frozen=True)
class Criterion:
    """A loss with a batch reduction and a scale factor.

    Per-sample losses: SSE sums squared errors over features, MSE averages them,
    cross-entropy is ``-log softmax(y)[label]``. The batch reduction then sums,
    averages, or (``"none"``) returns the elementwise values.
    """

    kind: str
    reduction: str | None = None
    weight: float = 1.0

    def __post_init__(self):
        kind = self.kind.lower().replace("-", "_")
        if kind == "ce":
            kind = "cross_entropy"
        if kind not in _KINDS:
            raise ValueError(f"unknown criterion {self.kind!r}; expected one of {_KINDS}")
        object.__setattr__(self, "kind", kind)
        reduction = self.reduction or _DEFAULT_REDUCTION[kind]
        if reduction not in _REDUCTIONS:
            raise ValueError(f"unknown reduction {reduction!r}")
        object.__setattr__(self, "reduction", reduction)

    @classmethod
    def sse(cls, weight=0.5, reduction="sum"):
        return cls("sse", reduction, weight)

    def _check(self, y, t):
        y = io_data(y)
        t = io_data(t)
        if self.kind == "cross_entropy":
            if y.ndim != 2:
                raise ShapeError(f"logits must be 2-D, got {y.shape}")
            labels = check_labels(t, y.shape[1])
            if labels.shape[0] != y.shape[0]:
                raise ShapeError(f"{labels.shape[0]} labels for {y.shape[0]} rows")
            return y, labels
        if y.shape != t.shape:
            raise ShapeError(f"output shape {y.shape} does not match target shape {t.shape}")
        return y, t

    def elementwise(self, y, t):
        y, t = self._check(y, t)
        if self.kind == "cross_entropy":
            return -log_softmax(y)[np.arange(len(t)), t][:, None]
        d = (y - t) ** 2
        if self.kind == "mse":
            d = d / y.shape[1]
        return d

    def __call__(self, y, t):
        """The reduced loss (a float), or the weighted elementwise matrix for ``"none"``."""
        e = self.elementwise(y, t)
        if self.reduction == "none":
            return self.weight * e
        per_sample = e.sum(axis=1)
        if self.reduction == "sum":
            return self.weight * float(per_sample.sum())
        return self.weight * float(per_sample.mean())

    def grad(self, y, t):
        """Gradient of the reduced loss w.r.t. ``y`` (``"none"`` differentiates the sum)."""
        y, t = self._check(y, t)
        n = y.shape[0]
        if self.kind == "cross_entropy":
            g = softmax(y)
            g[np.arange(n), t] -= 1.0
        else:
            g = 2.0 * (y - t)
            if self.kind == "mse":
                g /= y.shape[1]
        if self.reduction == "mean":
            g /= n
        return self.weight * g

    def assess(self, y, t):
        value = self(y, t)
        if self.reduction == "none":
            value = float(np.mean(value))
        return Assessment(value, maximize=False)


def assess(criterion, y, t):
    return criterion.assess(y, t)


# ---------------------------------------------------------------------------
# parameters and optimizers


class Parameter:
    """A trainable array and its gradient buffer."""

    __slots__ = ("value", "grad", "name")

    def __init__(self, value, name=""):
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.name = name

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


class Optimizer:
    """SGD or Adam over a fixed list of parameters.

    ``step()`` applies the accumulated gradients and then zeroes them.
    """

    def __init__(self, params, kind="adam", lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        kind = kind.lower()
        if kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {kind!r}")
        self.params = list(params)
        self.kind = kind
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self):
        self.apply([p.grad for p in self.params])
        for p in self.params:
            p.zero_grad()

    def apply(self, grads):
        grads = list(grads)
        if len(grads) != len(self.params):
            raise ShapeError(f"{len(grads)} gradients for {len(self.params)} parameters")
        for p, g in zip(self.params, grads):
            if np.shape(g) != p.value.shape:
                raise ShapeError(f"gradient {np.shape(g)} does not match parameter {p.value.shape}")
        if self.kind == "sgd":
            for p, g in zip(self.params, grads):
                p.value -= self.lr * g
            return
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            m_hat = self.m[i] / c1
            v_hat = self.v[i] / c2
            p.value -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


def optimizer_step(opt, params, grads):
    """Apply ``grads`` to ``params`` using ``opt``'s update rule.

    ``params`` must be the optimizer's own parameter list (same order).
    """
    if list(params) != opt.params:
        raise ShapeError("params do not match the optimizer's parameter list")
    opt.apply(grads)


@dataclass(frozen=True)
class OptimFactory:
    kind: str = "adam"
    lr: float = 1e-3

    def __call__(self, params):
        return Optimizer(params, self.kind, self.lr)


# ---------------------------------------------------------------------------
# learning machines


class LearningMachine:
    """Base class for a layer-level learner. Subclasses override the five operations."""

    training = True

    def forward(self, x: IO, state: State, release: bool = True) -> IO:
        raise NotImplementedError

    def __call__(self, x, state=None, release=True):
        return self.forward(x, State() if state is None else state, release)

    def predict(self, x):
        """Evaluation-mode output for raw array ``x``; must not mutate the machine."""
        raise NotImplementedError

    def assess_y(self, y: IO, t: IO) -> Assessment:
        raise NotImplementedError

    def accumulate(self, x: IO, t: IO, state: State):
        pass

    def step(self, x: IO, t: IO, state: State):
        raise NotImplementedError

    def step_x(self, x: IO, t: IO, state: State) -> IO:
        raise NotImplementedError

    def train(self, mode=True):
        self.training = mode
        return self

    def eval(self):
        return self.train(False)

    def set_epoch(self, epoch):
        pass

    @property
    def criterion(self):
        return getattr(self, "_criterion", None)


def _prediction(machine, x):
    if isinstance(machine, LearningMachine):
        return machine.predict(io_data(x))
    return machine(io_data(x))


def global_error_reduction(criterion, pre, post, x_pre, x_post, t):
    """Drop in the global loss across an update: ``L(pre(x_pre), t) - L(post(x_post), t)``.

    ``pre`` and ``post`` map the layer's input to the network output (a machine's
    ``predict`` or any callable); ``pre`` is a snapshot taken before the update.
    Positive values mean the update helped.
    """
    before = criterion.assess(_prediction(pre, x_pre), t).value
    after = criterion.assess(_prediction(post, x_post), t).value
    return before - after


def local_error_reduction(criterion, pre, post, x_pre, x_post, t):
    """Same as :func:`global_error_reduction` for one layer against its own target."""
    return global_error_reduction(criterion, pre, post, x_pre, x_post, t)
