"""Central finite-difference checks for layer backward passes.

The scalar probed is ``sum(forward(x) * R)`` for a fixed random ``R``, so the
upstream gradient is ``R``. Every perturbed evaluation runs on a fresh deep
copy of the layer, which keeps dropout masks and batch statistics identical
across evaluations and leaves the original untouched.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from lamina.layers import BatchNorm1d, Dropout, Identity, Linear, ReLU, Sequential
from lamina.numerics import Rng

H = 1e-5
TOLERANCE = 1e-5
SCALE_FLOOR = 1e-3


def relative_error(analytic, numeric):
    """``||a - n|| / max(||a||, ||n||, floor)``; the floor keeps exactly-zero
    gradients (a bias feeding batch norm) from dividing noise by noise."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), SCALE_FLOOR)
    return float(np.linalg.norm(analytic - numeric) / scale)


def _probe(layer, x, r, train):
    return float(np.sum(copy.deepcopy(layer).forward(x, train=train) * r))


def numeric_input_grad(layer, x, r, train=True, h=H):
    grad = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        orig = x[idx]
        x[idx] = orig + h
        up = _probe(layer, x, r, train)
        x[idx] = orig - h
        down = _probe(layer, x, r, train)
        x[idx] = orig
        grad[idx] = (up - down) / (2 * h)
    return grad


def numeric_param_grad(layer, index, x, r, train=True, h=H):
    value = layer.parameters()[index].value
    grad = np.zeros_like(value)
    for idx in np.ndindex(*value.shape):
        orig = value[idx]
        value[idx] = orig + h
        up = _probe(layer, x, r, train)
        value[idx] = orig - h
        down = _probe(layer, x, r, train)
        value[idx] = orig
        grad[idx] = (up - down) / (2 * h)
    return grad


@dataclass
class CheckResult:
    name: str
    shape: tuple
    input_error: float
    param_errors: list

    @property
    def max_error(self):
        return max([self.input_error] + self.param_errors)

    @property
    def passed(self):
        return self.max_error < TOLERANCE


def check_layer(layer, x, rng, name=None, train=True):
    """Compare ``layer.backward`` against finite differences at ``x``."""
    x = np.array(x, dtype=np.float64)
    # snapshot first: drawing R below must not advance a stream the layer shares
    layer = copy.deepcopy(layer)
    probe = copy.deepcopy(layer)
    out = probe.forward(x, train=train)
    r = rng.normal(0.0, 1.0, size=out.shape)
    probe.zero_grad()
    analytic_x = probe.backward(r)
    analytic_p = [p.grad.copy() for p in probe.parameters()]
    input_error = relative_error(analytic_x, numeric_input_grad(layer, x, r, train))
    param_errors = [
        relative_error(analytic_p[i], numeric_param_grad(layer, i, x, r, train)) for i in range(len(analytic_p))
    ]
    return CheckResult(name or type(layer).__name__, x.shape, input_error, param_errors)


def _case_factories(rng):
    def lin(i, o):
        return Linear(i, o, rng.split(f"lin{i}x{o}"))

    return [
        ("Linear", lambda n, d: lin(d, 4)),
        ("ReLU", lambda n, d: ReLU()),
        ("Dropout", lambda n, d: Dropout(0.3, rng.split("dropout"))),
        ("BatchNorm1d", lambda n, d: _bn(d, rng)),
        ("Identity", lambda n, d: Identity()),
        ("Sequential[Linear,ReLU,BatchNorm1d]", lambda n, d: Sequential(lin(d, 6), ReLU(), _bn(6, rng))),
        ("Sequential[Linear,BatchNorm1d,ReLU,Linear]", lambda n, d: Sequential(lin(d, 5), _bn(5, rng), ReLU(), lin(5, 3))),
        ("Sequential[Dropout,Linear,BatchNorm1d]", lambda n, d: Sequential(Dropout(0.5, rng.split("d2")), lin(d, 4), _bn(4, rng))),
    ]


def _bn(d, rng):
    bn = BatchNorm1d(d)
    bn.gamma.value = rng.uniform(0.5, 1.5, (1, d))
    bn.beta.value = rng.normal(0.0, 0.5, (1, d))
    return bn


def run_suite(seed=0, n_shapes=12):
    """Check every layer type and several compositions on ``n_shapes`` random shapes each."""
    rng = Rng(seed).split("gradcheck")
    results = []
    grid = [(n, d) for n in range(3, 8) for d in range(2, 7)]
    for name, factory in _case_factories(rng):
        for pick in rng.permutation(len(grid))[:n_shapes]:
            n, d = grid[pick]
            x = rng.normal(0.0, 1.0, size=(n, d))
            layer = factory(n, d)
            results.append(check_layer(layer, x, rng, name))
    # evaluation-mode batch norm uses running statistics
    bn = _bn(4, rng)
    bn.running_mean = rng.normal(0.0, 1.0, (1, 4))
    bn.running_var = rng.uniform(0.5, 2.0, (1, 4))
    results.append(check_layer(bn, rng.normal(0.0, 1.0, (5, 4)), rng, "BatchNorm1d(eval)", train=False))
    return results
