"""Builders for the seven named experiments.

Each builder turns an :class:`ExperimentConfig` into a :class:`StackedLearner`
for inputs of width ``in_features`` and ``n_classes`` outputs. Every random
stream (initial weights, feedback matrices, dropout masks) is split from the
single ``rng`` by a fixed label, so a seed fully determines the model.
"""

from __future__ import annotations

from lamina.errors import ConfigError
from lamina.harness.config import EXPERIMENTS
from lamina.kaku import Criterion, OptimFactory
from lamina.kikai import (
    DFALearner,
    FALearner,
    GradLearner,
    LeastSquaresLearner,
    StackedLearner,
    TargetPropLearner,
)
from lamina.layers import BatchNorm1d, Dropout, Linear, ReLU, Sequential
from lamina.numerics import Rng
from lamina.trees import TreeLayerLearner

DESCRIPTIONS = {
    "baseline": "gradient learners 784-128-32-10 (Linear, ReLU, BatchNorm); SSE between layers, cross entropy on top",
    "decision-linear": "32-output regression-tree ensemble (depth 11, 9 members) -> BatchNorm, Linear head with 40-step input descent",
    "least-squares-tp": "four Linear-BatchNorm-ReLU layers (128 wide); targets pulled back by ridge regression",
    "linear-tp": "four Linear-ReLU layers (128 wide); middle layers learn reverse models used as inverses",
    "fa": "feedback alignment 784-32-10 with a fixed random backward matrix",
    "dfa": "direct feedback alignment 784-32-32-10; output error projected straight to each hidden layer",
    "neural-decision": "dropout MLP front end -> classification-tree ensemble (depth 10, 9 members) with hill-climbed targets",
}


def _optim(params, key="lr"):
    return OptimFactory("adam", float(params.get(key, params.get("lr", 1e-3))))


def _linear(rng, label, n_in, n_out):
    return Linear(n_in, n_out, rng.split(label))


def build_baseline(config, in_features, n_classes, rng):
    p = config.params
    h1, h2 = p.get("hidden", [128, 32])
    opt = _optim(p)
    layers = [
        GradLearner(Sequential(_linear(rng, "l1", in_features, h1), ReLU(), BatchNorm1d(h1)), Criterion.sse(), opt),
        GradLearner(Sequential(_linear(rng, "l2", h1, h2), ReLU(), BatchNorm1d(h2)), Criterion.sse(), opt),
        GradLearner(Sequential(_linear(rng, "l3", h2, n_classes)), Criterion("cross_entropy"), opt),
    ]
    return StackedLearner(layers, step_order=config.step_order)


def build_decision_linear(config, in_features, n_classes, rng):
    p = config.params
    width = p.get("tree_outputs", 32)
    trees = TreeLayerLearner(
        width,
        task="regression",
        capacity=p.get("capacity", 9),
        max_depth=p.get("max_depth", 11),
    )
    head = GradLearner(
        Sequential(BatchNorm1d(width), _linear(rng, "head", width, n_classes)),
        Criterion("cross_entropy"),
        _optim(p),
        x_step=float(p.get("x_step", 1.0)),
        x_iterations=int(p.get("x_iterations", 40)),
    )
    return StackedLearner([trees, head], step_order=config.step_order)


def _lin_bn_relu(rng, label, n_in, n_out):
    return Sequential(_linear(rng, label, n_in, n_out), BatchNorm1d(n_out), ReLU())


def build_least_squares_tp(config, in_features, n_classes, rng):
    p = config.params
    h = p.get("hidden", 128)
    lam = float(p.get("lam", 1e-3))
    x_step = float(p.get("x_step", 1.0))
    opt = _optim(p)
    layers = [
        GradLearner(_lin_bn_relu(rng, "l1", in_features, h), Criterion.sse(), opt),
        LeastSquaresLearner(_lin_bn_relu(rng, "l2", h, h), Criterion.sse(), opt, lam=lam, x_step=x_step),
        LeastSquaresLearner(_lin_bn_relu(rng, "l3", h, h), Criterion.sse(), opt, lam=lam, x_step=x_step),
        LeastSquaresLearner(
            Sequential(_linear(rng, "l4", h, n_classes)), Criterion("cross_entropy"), opt, lam=lam, x_step=x_step
        ),
    ]
    return StackedLearner(layers, step_order=config.step_order)


def _reverse(rng, label, n_out, n_in):
    return Sequential(
        _linear(rng, label + "a", n_out, n_in),
        BatchNorm1d(n_in),
        ReLU(),
        _linear(rng, label + "b", n_in, n_in),
        BatchNorm1d(n_in),
        ReLU(),
    )


def build_linear_tp(config, in_features, n_classes, rng):
    p = config.params
    h = p.get("hidden", 128)
    opt = _optim(p)
    rev_opt = _optim(p, "reverse_lr")
    alternate = bool(p.get("alternate", True))

    def tp(label, n_in, n_out):
        return TargetPropLearner(
            Sequential(_linear(rng, label, n_in, n_out), ReLU()),
            _reverse(rng, label + "r", n_out, n_in),
            Criterion.sse(),
            Criterion("mse"),
            opt,
            rev_opt,
            alternate=alternate,
        )

    layers = [
        GradLearner(Sequential(_linear(rng, "l1", in_features, h), ReLU()), Criterion.sse(), opt),
        tp("l2", h, h),
        tp("l3", h, h),
        GradLearner(
            Sequential(_linear(rng, "l4", h, n_classes)),
            Criterion("cross_entropy"),
            opt,
            x_step=float(p.get("x_step", 1.0)),
        ),
    ]
    return StackedLearner(layers, step_order=config.step_order)


def build_fa(config, in_features, n_classes, rng):
    p = config.params
    h = p.get("hidden", 32)
    opt = _optim(p)
    x_step = float(p.get("x_step", 1.0))
    layers = [
        FALearner(Sequential(_linear(rng, "l1", in_features, h), ReLU()), Criterion.sse(), opt, rng.split("b1"), x_step),
        FALearner(
            Sequential(_linear(rng, "l2", h, n_classes)), Criterion("cross_entropy"), opt, rng.split("b2"), x_step
        ),
    ]
    return StackedLearner(layers, step_order=config.step_order)


def build_dfa(config, in_features, n_classes, rng):
    p = config.params
    h1, h2 = p.get("hidden", [32, 32])
    opt = _optim(p)
    layers = [
        DFALearner(_lin_bn_relu(rng, "l1", in_features, h1), n_classes, opt, rng.split("b1")),
        DFALearner(_lin_bn_relu(rng, "l2", h1, h2), n_classes, opt, rng.split("b2")),
        FALearner(Sequential(_linear(rng, "l3", h2, n_classes)), Criterion("cross_entropy"), opt, rng.split("b3")),
    ]
    return StackedLearner(layers, step_order=config.step_order, propagation="direct")


def build_neural_decision(config, in_features, n_classes, rng):
    p = config.params
    hidden = p.get("hidden", 256)
    width = p.get("features", 64)
    front = GradLearner(
        Sequential(
            Dropout(float(p.get("dropout", 0.5)), rng.split("dropout")),
            _linear(rng, "l1", in_features, hidden),
            BatchNorm1d(hidden),
            ReLU(),
            _linear(rng, "l2", hidden, width),
            BatchNorm1d(width),
        ),
        Criterion("mse"),
        _optim(p),
    )
    trees = TreeLayerLearner(
        n_classes,
        task="classification",
        capacity=p.get("capacity", 9),
        max_depth=p.get("max_depth", 10),
        k=p.get("k", 8),
        incoming=front,
    )
    return StackedLearner([front, trees], step_order=config.step_order)


BUILDERS = {
    "baseline": build_baseline,
    "decision-linear": build_decision_linear,
    "least-squares-tp": build_least_squares_tp,
    "linear-tp": build_linear_tp,
    "fa": build_fa,
    "dfa": build_dfa,
    "neural-decision": build_neural_decision,
}
assert set(BUILDERS) == set(EXPERIMENTS) == set(DESCRIPTIONS)


def _dropouts(stack):
    pending = [getattr(layer, "module", None) for layer in stack.layers]
    while pending:
        m = pending.pop()
        if isinstance(m, Dropout):
            yield m
        elif isinstance(m, Sequential):
            pending.extend(m.layers)


def apply_dropout_schedule(stack, config, epoch):
    """Linear decay of dropout probability per epoch; off unless ``dropout_decay`` is set."""
    decay = float(config.params.get("dropout_decay", 0.0))
    if not decay:
        return
    base = float(config.params.get("dropout", 0.5))
    for layer in _dropouts(stack):
        layer.p = max(0.0, base - decay * (epoch - 1))


def build_experiment(config, in_features=784, n_classes=10, rng=None):
    if config.name not in BUILDERS:
        raise ConfigError(f"unknown experiment {config.name!r}; valid names: {', '.join(EXPERIMENTS)}")
    rng = rng if rng is not None else Rng(config.seed).split("model")
    return BUILDERS[config.name](config, in_features, n_classes, rng)
