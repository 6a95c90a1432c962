"""Training orchestration: shuffle, step, evaluate, record."""

from __future__ import annotations

import time

import numpy as np

from lamina.errors import LaminaError
from lamina.harness.experiments import apply_dropout_schedule, build_experiment
from lamina.harness.metrics import MetricsRecord
from lamina.numerics import Rng


class ExperimentError(LaminaError):
    """A failure inside a run, tagged with the experiment, epoch and step."""


def accuracy(stack, x, labels):
    stack.eval()
    try:
        scores = stack.predict(x)
    finally:
        stack.train()
    return float(np.mean(np.argmax(scores, axis=1) == labels))


def batches(rng, n, batch_size):
    """Shuffled index batches; a trailing batch of one sample is dropped (batch norm needs two)."""
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = perm[start : start + batch_size]
        if len(idx) >= 2:
            yield idx


def run_experiment(config, dataset, stack=None, on_step=None, snapshots=False):
    """Train the configured stack on ``dataset`` and return a :class:`MetricsRecord`.

    ``on_step(stack, record, epoch, step)`` is called after every train step
    (the diagnostics tests use it to grab checkpoints). ``snapshots`` keeps
    pre/post copies of the layers in each step record for such checks.
    """
    started = time.perf_counter()
    rng = Rng(config.seed)
    if stack is None:
        stack = build_experiment(config, dataset.n_features, dataset.n_classes, rng.split("model"))
    shuffle_rng = rng.split("shuffle")
    n_layers = len(stack.layers)
    ger = [[] for _ in range(n_layers)]
    ler = [[] for _ in range(n_layers)]
    mad = [[] for _ in range(n_layers)]

    record = MetricsRecord(
        experiment=config.name,
        seed=config.seed,
        config=config.to_dict(),
        dataset=dict(dataset.description),
        initial_test_accuracy=accuracy(stack, dataset.x_test, dataset.y_test),
    )
    n = len(dataset.y_train)
    for epoch in range(1, config.epochs + 1):
        stack.set_epoch(epoch)
        apply_dropout_schedule(stack, config, epoch)
        batch_size = min(config.batch_size_at(epoch), n)
        losses = []
        for step, idx in enumerate(batches(shuffle_rng, n, batch_size)):
            try:
                rec = stack.train_step(dataset.x_train[idx], dataset.y_train[idx], diagnostics=config.diagnostics, snapshots=snapshots)
            except Exception as exc:
                raise ExperimentError(f"{config.name}: epoch {epoch}, step {step}: {exc}") from exc
            losses.append(rec.loss)
            for i in range(n_layers):
                mad[i].append(rec.mad[i])
                if config.diagnostics:
                    ger[i].append(rec.ger[i])
                    ler[i].append(rec.ler[i])
            if on_step is not None:
                on_step(stack, rec, epoch, step)
        record.epochs.append(
            {
                "epoch": epoch,
                "batch_size": batch_size,
                "steps": len(losses),
                "train_loss": float(np.mean(losses)) if losses else float("nan"),
                "train_accuracy": accuracy(stack, dataset.x_train, dataset.y_train),
                "test_accuracy": accuracy(stack, dataset.x_test, dataset.y_test),
            }
        )
    if config.diagnostics:
        record.ger, record.ler = ger, ler
    record.mad = mad
    record.wall_clock = time.perf_counter() - started
    return record
