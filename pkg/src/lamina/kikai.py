"""Concrete learning machines and the linear stack that chains them.

Each learner wraps a :class:`~lamina.layers.Sequential` and decides for itself
how to update its parameters (``step``) and what target to hand the layer
below (``step_x``):

* :class:`GradLearner` - gradient update; target ``x - dL/dx``.
* :class:`LeastSquaresLearner` - gradient update; target from a ridge solve
  against the leading linear layer's weights.
* :class:`TargetPropLearner` - learns a reverse model and uses it as the
  approximate inverse to map targets down.
* :class:`FALearner` / :class:`DFALearner` - feedback alignment with a fixed
  random matrix in place of the transposed weights.
* :class:`StackedLearner` - runs forward through a list of machines and walks
  back through them, feeding each ``step_x`` result to the machine below.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from lamina.errors import OrderingError, ShapeError
from lamina.kaku import (
    IO,
    Criterion,
    LearningMachine,
    OptimFactory,
    State,
    io_data,
    step_dep,
)
from lamina.layers import Linear, Sequential
from lamina.numerics import Rng, as_matrix, gaussian, ridge_solve


def _as_sequential(module):
    return module if isinstance(module, Sequential) else Sequential(module)


class ModuleLearner(LearningMachine):
    """Shared plumbing for learners built around one Sequential."""

    def __init__(self, module, criterion, optim=None):
        self.module = _as_sequential(module)
        self._criterion = criterion
        self.optim_factory = optim or OptimFactory()
        self.optimizer = self.optim_factory(self.module.parameters())
        self._forward_id = None

    def forward(self, x, state, release=True):
        y = IO(self.module.forward(x.f, train=self.training))
        self._forward_id = x.id
        state[self, x, "y"] = y
        state[self, y, "x"] = x
        return y

    def predict(self, x):
        return self.module.infer(x)

    def sample(self, x):
        """A training-mode pass that leaves caches and running statistics untouched."""
        return self.module.forward(io_data(x), train=True, record=False)

    def assess_y(self, y, t):
        return self._criterion.assess(y, t)

    def parameters(self):
        return self.module.parameters()

    def _check_cached(self, x):
        if self._forward_id != x.id:
            raise OrderingError(
                f"{type(self).__name__}: the module cache does not belong to this input; "
                "call forward(x) before accumulate/step/step_x"
            )

    def _backprop(self, x, t, state):
        """Backpropagate the local loss once per (x, step); returns dL/dx."""
        if state.has(self, x, "grad_x"):
            return state[self, x, "grad_x"]
        self._check_cached(x)
        y = state[self, x, "y"]
        grad_y = self._criterion.grad(y.f, t.f)
        grad_x = self.module.backward(grad_y)
        state[self, x, "grad_y"] = grad_y
        state[self, x, "grad_x"] = grad_x
        return grad_x

    def accumulate(self, x, t, state):
        self._backprop(x, t, state)

    def step(self, x, t, state):
        self._backprop(x, t, state)
        self.optimizer.step()
        state[self, x, "stepped"] = True


class GradLearner(ModuleLearner):
    """Gradient-descent learner whose input target is ``x - step * dL/dx``.

    With ``x_iterations > 1`` the input is refined by repeated gradient steps on
    a scratch copy of the module; the machine itself is never touched.
    """

    def __init__(self, module, criterion, optim=None, x_step=1.0, x_iterations=1):
        super().__init__(module, criterion, optim)
        self.x_step = x_step
        self.x_iterations = x_iterations

    def step_x(self, x, t, state):
        return grad_step_x(self, x, t, state)


def grad_step_x(learner, x, t, state):
    grad_x = learner._backprop(x, t, state)
    if learner.x_iterations <= 1:
        return IO(x.f - learner.x_step * grad_x)
    scratch = copy.deepcopy(learner.module)
    x_work = x.f.copy()
    for _ in range(learner.x_iterations):
        y = scratch.forward(x_work, train=learner.training)
        g = scratch.backward(learner._criterion.grad(y, t.f))
        x_work = x_work - learner.x_step * g
    return IO(x_work)


def least_squares_step_x(linear, x, t, lam):
    """Input target for a linear layer by ridge regression.

    Finds ``dx`` minimising ``||dx W^T - (t - y)||^2 + lam ||dx||^2`` where
    ``y = x W^T + b`` and returns ``x + dx``.
    """
    x = as_matrix(io_data(x), "x")
    t = as_matrix(io_data(t), "t")
    y = linear.forward(x, record=False)
    if t.shape != y.shape:
        raise ShapeError(f"target {t.shape} does not match layer output {y.shape}")
    dx = ridge_solve(linear.weight.value, (t - y).T, lam).T
    return x + dx


class LeastSquaresLearner(GradLearner):
    """Gradient learner whose input target comes from a ridge solve.

    The module must start with a :class:`Linear`. The target at the linear
    output is found by a gradient step through the rest of the module, then
    pulled back through the weights with :func:`least_squares_step_x`.
    """

    def __init__(self, module, criterion, optim=None, lam=1e-3, x_step=1.0):
        super().__init__(module, criterion, optim, x_step=x_step)
        if not isinstance(self.module[0], Linear):
            raise TypeError("LeastSquaresLearner needs a Linear first layer")
        self.lam = lam

    @property
    def linear(self):
        return self.module[0]

    def step_x(self, x, t, state):
        self._backprop(x, t, state)
        grad_z = self.module.output_grads[0]
        z = self.linear.forward(x.f, record=False)
        return IO(least_squares_step_x(self.linear, x.f, z - self.x_step * grad_z, self.lam))


class TargetPropLearner(LearningMachine):
    """A layer with a learned reverse model used as its approximate inverse.

    Training alternates by epoch: odd epochs fit the reverse model on
    ``(y -> x)`` pairs, even epochs fit the forward model toward its target.
    ``step_x`` maps the target through the reverse model in evaluation mode.
    """

    def __init__(
        self,
        forward_module,
        reverse_module,
        criterion=None,
        reverse_criterion=None,
        optim=None,
        reverse_optim=None,
        alternate=True,
    ):
        self.forward_learner = GradLearner(forward_module, criterion or Criterion.sse(), optim)
        self.reverse_learner = GradLearner(
            reverse_module, reverse_criterion or Criterion("mse"), reverse_optim or optim
        )
        self.alternate = alternate
        self.epoch = 1

    @property
    def _criterion(self):
        return self.forward_learner._criterion

    @property
    def forward_module(self):
        return self.forward_learner.module

    @property
    def reverse_module(self):
        return self.reverse_learner.module

    def set_epoch(self, epoch):
        self.epoch = epoch

    def phase(self, epoch=None):
        epoch = self.epoch if epoch is None else epoch
        if not self.alternate:
            return "both"
        return "reverse" if epoch % 2 == 1 else "forward"

    def train(self, mode=True):
        self.training = mode
        self.forward_learner.train(mode)
        self.reverse_learner.train(mode)
        return self

    def forward(self, x, state, release=True):
        y = self.forward_learner.forward(x, state, release)
        state[self, x, "y"] = y
        return y

    def predict(self, x):
        return self.forward_learner.predict(x)

    def assess_y(self, y, t):
        return self.forward_learner.assess_y(y, t)

    def step(self, x, t, state):
        self.train_tick(x, state[self, x, "y"], t, state, self.epoch)
        state[self, x, "stepped"] = True

    def train_tick(self, x, y, t, state, epoch):
        phase = self.phase(epoch)
        if phase in ("reverse", "both"):
            y_in = IO(y.f.copy())
            self.reverse_learner.forward(y_in, state)
            self.reverse_learner.step(y_in, IO(x.f.copy()), state)
        if phase in ("forward", "both"):
            self.forward_learner.step(x, t, state)

    def step_x(self, x, t, state):
        return target_prop_step_x(self, t)


def target_prop_step_x(tp, t):
    t = io_data(t)
    expected = tp.reverse_module.layers[0]
    if isinstance(expected, Linear) and t.shape[1] != expected.in_features:
        raise ShapeError(f"reverse model expects width {expected.in_features}, got {t.shape}")
    return IO(tp.reverse_module.infer(t))


def feedback_matrix(rng, rows, cols, fan_in):
    """Fixed random feedback weights, N(0, 1/fan_in)."""
    return gaussian(rng, rows, cols, 0.0, 1.0 / np.sqrt(fan_in))


class FALearner(GradLearner):
    """Feedback-alignment learner.

    Parameters follow the ordinary local gradient. The target for the layer
    below uses the fixed matrix ``B`` (shape of ``W``) in place of ``W``:
    ``x - step * (dL/dz) B``.
    """

    def __init__(self, module, criterion=None, optim=None, rng=None, x_step=1.0):
        super().__init__(module, criterion or Criterion.sse(), optim, x_step=x_step)
        linear = self.module[0]
        if not isinstance(linear, Linear):
            raise TypeError("FALearner needs a Linear first layer")
        rng = rng if rng is not None else Rng(0)
        self.B = feedback_matrix(rng, linear.out_features, linear.in_features, linear.out_features)
        self.B.setflags(write=False)

    def step_x(self, x, t, state):
        self._backprop(x, t, state)
        grad_z = self.module.output_grads[0]
        return IO(x.f - self.x_step * (grad_z @ self.B))


def fa_accumulate(layer, x, delta_out, feedback):
    """Accumulate a feedback-alignment update into ``layer``'s gradient buffers.

    ``delta_out`` is the error at the next layer's pre-activation and
    ``feedback`` that layer's fixed matrix; the signal reaching this layer's
    output is ``delta_out @ feedback``, which is multiplied by the activation
    derivative on the way back to the weights. Returns the pre-activation
    error of this layer.
    """
    layer._check_cached(x)
    delta_out = as_matrix(delta_out, "delta_out")
    feedback = as_matrix(feedback, "feedback")
    if delta_out.shape[1] != feedback.shape[0]:
        raise ShapeError(f"delta {delta_out.shape} incompatible with feedback {feedback.shape}")
    layer.module.backward(delta_out @ feedback)
    return layer.module.output_grads[0]


class DFALearner(ModuleLearner):
    """Direct-feedback-alignment learner.

    ``step`` expects the target IO to hold the network's output error
    (``[batch, O]``); it is projected through the fixed ``B`` (``[N, O]``) onto
    this layer's output and backpropagated locally.
    """

    def __init__(self, module, n_outputs, optim=None, rng=None):
        super().__init__(module, None, optim)
        rng = rng if rng is not None else Rng(0)
        width = self._out_width()
        self.n_outputs = n_outputs
        self.B = feedback_matrix(rng, width, n_outputs, n_outputs)
        self.B.setflags(write=False)

    def _out_width(self):
        for layer in reversed(self.module.layers):
            for attr in ("out_features", "num_features"):
                if hasattr(layer, attr):
                    return getattr(layer, attr)
        raise TypeError("cannot infer the output width of the DFA module")

    def assess_y(self, y, t):
        raise NotImplementedError("a DFA layer has no local target to assess against")

    def _backprop(self, x, t, state):
        if state.has(self, x, "grad_x"):
            return state[self, x, "grad_x"]
        self._check_cached(x)
        grad_x = dfa_accumulate(self, x, t.f)
        state[self, x, "grad_x"] = grad_x
        return grad_x

    @step_dep("stepped")
    def step_x(self, x, t, state):
        return IO(x.f - state[self, x, "grad_x"])


def dfa_accumulate(layer, x, global_error):
    global_error = as_matrix(global_error, "global_error")
    if global_error.shape[1] != layer.n_outputs:
        raise ShapeError(
            f"global error width {global_error.shape[1]} != feedback width {layer.n_outputs}"
        )
    return layer.module.backward(global_error @ layer.B.T)


# ---------------------------------------------------------------------------
# stacking


@dataclass
class StepRecord:
    """What one stacked training step produced (per layer lists are front-to-back)."""

    loss: float
    ger: list = field(default_factory=list)
    ler: list = field(default_factory=list)
    mad: list = field(default_factory=list)
    snapshots: list | None = None


class StackedLearner(LearningMachine):
    """A linear chain of learning machines.

    ``propagation="chain"`` walks back through the layers, giving each the
    target returned by its successor's ``step_x`` (the last layer gets the
    global target). ``step_order`` picks whether a layer's ``step_x`` runs
    before or after its ``step``. ``propagation="direct"`` instead hands every
    hidden layer the output error and never calls ``step_x``.
    """

    def __init__(self, layers, step_order="step_x_first", propagation="chain"):
        if not layers:
            raise ValueError("a stack needs at least one layer")
        if step_order not in ("step_x_first", "step_first"):
            raise ValueError(f"unknown step order {step_order!r}")
        if propagation not in ("chain", "direct"):
            raise ValueError(f"unknown propagation {propagation!r}")
        self.layers = list(layers)
        self.step_order = step_order
        self.propagation = propagation
        self.step_x_calls = 0

    @property
    def _criterion(self):
        return self.layers[-1].criterion

    def train(self, mode=True):
        self.training = mode
        for layer in self.layers:
            layer.train(mode)
        return self

    def set_epoch(self, epoch):
        for layer in self.layers:
            layer.set_epoch(epoch)

    def forward(self, x, state, release=True):
        cur = x
        for i, layer in enumerate(self.layers):
            state[self, x, f"x{i}"] = cur
            cur = layer.forward(cur, state, release)
            state[self, x, f"y{i}"] = cur
        state[self, x, "y"] = cur
        return cur

    def predict(self, x, start=0):
        for layer in self.layers[start:]:
            x = layer.predict(x)
        return x

    def assess_y(self, y, t):
        return self.layers[-1].assess_y(y, t)

    def step(self, x, t, state, diagnostics=False, snapshots=False):
        record = self._walk(x, t, state, diagnostics, snapshots)
        state[self, x, "stepped"] = True
        state[self, x, "record"] = record

    @step_dep("stepped")
    def step_x(self, x, t, state):
        self.step_x_calls += 1
        return self.layers[0].step_x(x, state[self, x, "t0"], state)

    def train_step(self, x, t, diagnostics=False, snapshots=False):
        """Forward, then update every layer; returns a :class:`StepRecord`."""
        if not isinstance(x, IO):
            x = IO(x)
        if not isinstance(t, IO):
            t = IO(t)
        state = State()
        self.train()
        self.forward(x, state)
        self.step(x, t, state, diagnostics, snapshots)
        return state[self, x, "record"]

    # the walk ---------------------------------------------------------------

    def _walk(self, x, t_global, state, diagnostics, snapshots):
        n = len(self.layers)
        xs = [state[self, x, f"x{i}"] for i in range(n)]
        ys = [state[self, x, f"y{i}"] for i in range(n)]
        criterion = self._criterion
        loss = criterion.assess(ys[-1].f, t_global.f).value if criterion is not None else float("nan")
        record = StepRecord(
            loss=loss,
            ger=[None] * n,
            ler=[None] * n,
            mad=[None] * n,
            snapshots=[None] * n if snapshots else None,
        )

        if self.propagation == "direct":
            out = self.layers[-1]
            error = out.criterion.grad(ys[-1].f, t_global.f)
            targets = [IO(error) for _ in range(n - 1)] + [t_global]
            for i in range(n - 1, -1, -1):
                self._update(i, xs[i], targets[i], t_global, state, record, diagnostics, snapshots)
        else:
            t = t_global
            for i in range(n - 1, -1, -1):
                state[self, x, f"t{i}"] = t
                if i > 0 and self.step_order == "step_x_first":
                    t_below = self._call_step_x(i, xs[i], t, state)
                self._update(i, xs[i], t, t_global, state, record, diagnostics, snapshots)
                if i > 0 and self.step_order == "step_first":
                    t_below = self._call_step_x(i, xs[i], t, state)
                if i > 0:
                    if t_below.f.shape != xs[i].f.shape:
                        raise ShapeError(
                            f"layer {i} step_x returned {t_below.f.shape}, expected {xs[i].f.shape}"
                        )
                    record.mad[i - 1] = float(np.mean(np.abs(t_below.f - ys[i - 1].f)))
                    t = t_below
        return record

    def _call_step_x(self, i, x, t, state):
        self.step_x_calls += 1
        return self.layers[i].step_x(x, t, state)

    def _update(self, i, x_i, t_i, t_global, state, record, diagnostics, snapshots):
        layer = self.layers[i]
        if not diagnostics:
            layer.step(x_i, t_i, state)
            return
        pre = copy.deepcopy(layer)
        layer.step(x_i, t_i, state)
        suffix = self.layers[i + 1 :]
        record.ger[i] = _suffix_loss(self._criterion, [pre] + suffix, x_i, t_global) - _suffix_loss(
            self._criterion, [layer] + suffix, x_i, t_global
        )
        local = layer.criterion
        if local is not None:
            record.ler[i] = (
                local.assess(pre.predict(x_i.f), t_i.f).value
                - local.assess(layer.predict(x_i.f), t_i.f).value
            )
        if snapshots:
            record.snapshots[i] = {
                "pre": [pre] + [copy.deepcopy(m) for m in suffix],
                "post": [copy.deepcopy(layer)] + [copy.deepcopy(m) for m in suffix],
                "x": x_i.f.copy(),
                "t_local": t_i.f.copy(),
                "t_global": t_global.f.copy(),
            }


def _suffix_loss(criterion, machines, x, t):
    out = io_data(x)
    for m in machines:
        out = m.predict(out)
    return criterion.assess(out, t.f).value
