"""Native CART trees, the FIFO tree ensemble, and tree-based learning machines.

Splits are searched exhaustively over midpoints between consecutive distinct
feature values. Regression minimises the summed squared error of the two
children, classification the count-weighted Gini impurity. Near-equal
candidates (within a small relative tolerance) resolve to the lowest feature
index, then the lowest threshold, so fitting is deterministic.
"""

from __future__ import annotations

import copy

import numpy as np
from numba import njit

from lamina.errors import ConfigError, EmptyInputError, ShapeError
from lamina.kaku import IO, Assessment, Criterion, LearningMachine, io_data
from lamina.numerics import as_matrix, check_labels

TIE_TOL = 1e-10


@njit(cache=True)
def _grow(xt, targets, order, max_depth, min_samples_split, regression, tol):
    """Grow one tree from presorted feature orders.

    ``xt`` is ``[f, n]``; ``order[j]`` lists sample indices sorted by feature
    ``j`` and is partitioned in place as nodes split, so each node owns the
    same ``[start, end)`` slice of every row.
    """
    f, n = xt.shape
    k = targets.shape[1]
    cap = 2 * n
    feature = np.full(cap, -1, dtype=np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    value = np.zeros((cap, k))
    depth_of = np.zeros(cap, dtype=np.int64)
    impurity = np.empty((f, n))
    active = np.zeros(f, dtype=np.bool_)
    go_left = np.zeros(n, dtype=np.bool_)
    buf = np.empty(n, dtype=np.int64)
    members = np.arange(n)  # node samples, always partitioned
    total = np.zeros(k)
    total_sq = np.zeros(k)
    acc = np.zeros(k)
    acc_sq = np.zeros(k)

    stack = np.empty((cap, 3), dtype=np.int64)  # node, start, end
    stack[0, 0] = 0
    stack[0, 1] = 0
    stack[0, 2] = n
    top = 1
    count = 1
    while top > 0:
        top -= 1
        node = stack[top, 0]
        start = stack[top, 1]
        end = stack[top, 2]
        m = end - start
        depth = depth_of[node]

        total[:] = 0.0
        total_sq[:] = 0.0
        pure = True
        first = members[start]
        for a in range(start, end):
            s = members[a]
            for c in range(k):
                v = targets[s, c]
                total[c] += v
                total_sq[c] += v * v
                if v != targets[first, c]:
                    pure = False
        for c in range(k):
            value[node, c] = total[c] / m

        if max_depth >= 0 and depth >= max_depth:
            continue
        if m < min_samples_split or pure:
            continue

        best = np.inf
        for j in range(f):
            row = order[j]
            active[j] = xt[j, row[end - 1]] > xt[j, row[start]]
            if not active[j]:
                continue
            acc[:] = 0.0
            acc_sq[:] = 0.0
            for p in range(m - 1):
                s = row[start + p]
                for c in range(k):
                    v = targets[s, c]
                    acc[c] += v
                    acc_sq[c] += v * v
                v0 = xt[j, s]
                v1 = xt[j, row[start + p + 1]]
                if not v1 > v0:
                    impurity[j, p] = np.inf
                    continue
                n_left = p + 1.0
                n_right = m - n_left
                imp = 0.0
                if regression:
                    for c in range(k):
                        r = total[c] - acc[c]
                        imp += acc_sq[c] - acc[c] * acc[c] / n_left
                        imp += (total_sq[c] - acc_sq[c]) - r * r / n_right
                else:
                    sl = 0.0
                    sr = 0.0
                    for c in range(k):
                        r = total[c] - acc[c]
                        sl += acc[c] * acc[c]
                        sr += r * r
                    imp = (n_left - sl / n_left) + (n_right - sr / n_right)
                impurity[j, p] = imp
                if imp < best:
                    best = imp
        if best == np.inf:
            continue

        limit = best + tol * (1.0 + abs(best))
        bj = -1
        bp = -1
        for j in range(f):
            if not active[j]:
                continue
            for p in range(m - 1):
                if impurity[j, p] <= limit:
                    bj = j
                    bp = p
                    break
            if bj >= 0:
                break
        row = order[bj]
        thr = (xt[bj, row[start + bp]] + xt[bj, row[start + bp + 1]]) / 2.0
        for a in range(start, end):
            s = row[a]
            go_left[s] = xt[bj, s] <= thr
        # a feature constant on this node stays constant below it, so its
        # slice never needs to be kept in sample order
        for j in range(-1, f):
            if j >= 0 and not active[j]:
                continue
            row = members if j < 0 else order[j]
            li = start
            ri = 0
            for a in range(start, end):
                s = row[a]
                if go_left[s]:
                    row[li] = s
                    li += 1
                else:
                    buf[ri] = s
                    ri += 1
            for r in range(ri):
                row[li + r] = buf[r]

        mid = start + bp + 1
        feature[node] = bj
        threshold[node] = thr
        left[node] = count
        right[node] = count + 1
        depth_of[count] = depth + 1
        depth_of[count + 1] = depth + 1
        stack[top, 0] = count + 1
        stack[top, 1] = mid
        stack[top, 2] = end
        stack[top + 1, 0] = count
        stack[top + 1, 1] = start
        stack[top + 1, 2] = mid
        top += 2
        count += 2

    return (
        feature[:count],
        threshold[:count],
        left[:count],
        right[:count],
        value[:count],
        depth_of[:count],
    )


def presort(x):
    """Per-feature sample order of ``x`` (``[n, f]``), shaped ``[f, n]``."""
    xt = np.ascontiguousarray(np.asarray(x, dtype=np.float64).T)
    return xt, np.ascontiguousarray(np.argsort(xt, axis=1, kind="stable"))


class CartTree:
    """A single CART tree stored as flat node arrays.

    ``feature[i] == -1`` marks a leaf; ``value[i]`` is the leaf mean
    (regression, ``[k]``) or class-probability vector (classification).
    """

    def __init__(self, max_depth=None, min_samples_split=2, task="regression", n_classes=None):
        if task not in ("regression", "classification"):
            raise ConfigError(f"unknown tree task {task!r}")
        self.max_depth = max_depth
        self.min_samples_split = min_samples_split
        self.task = task
        self.n_classes = n_classes

    def _targets(self, y):
        if self.task == "classification":
            y = np.asarray(y)
            n_classes = self.n_classes or int(y.max()) + 1
            self.n_classes = n_classes
            labels = check_labels(y, n_classes)
            onehot = np.zeros((labels.shape[0], n_classes))
            onehot[np.arange(labels.shape[0]), labels] = 1.0
            return onehot
        y = np.asarray(y, dtype=np.float64)
        self.single_output = y.ndim == 1
        return np.ascontiguousarray(y[:, None] if y.ndim == 1 else y)

    def fit(self, x, y, presorted=None):
        x = as_matrix(x, "x")
        if x.shape[0] == 0:
            raise EmptyInputError("cannot fit a tree on zero samples")
        targets = self._targets(y)
        if targets.shape[0] != x.shape[0]:
            raise ShapeError(f"{targets.shape[0]} targets for {x.shape[0]} samples")
        xt, order = presorted if presorted is not None else presort(x)
        max_depth = -1 if self.max_depth is None else int(self.max_depth)
        grown = _grow(
            xt,
            targets,
            order.copy(),
            max_depth,
            int(self.min_samples_split),
            self.task == "regression",
            TIE_TOL,
        )
        self.feature, self.threshold, self.left, self.right, self.value, depths = grown
        self.depth = int(depths.max())
        return self

    @property
    def n_nodes(self):
        return len(self.feature)

    def apply(self, x):
        """Leaf index reached by each row of ``x``."""
        x = as_matrix(x, "x")
        node = np.zeros(x.shape[0], dtype=np.int64)
        while True:
            f = self.feature[node]
            live = np.nonzero(f >= 0)[0]
            if live.size == 0:
                return node
            cur = node[live]
            go_left = x[live, f[live]] <= self.threshold[cur]
            node[live] = np.where(go_left, self.left[cur], self.right[cur])

    def predict(self, x):
        values = self.value[self.apply(x)]
        if self.task == "classification":
            return np.argmax(values, axis=1)
        return values[:, 0] if self.single_output else values

    def predict_proba(self, x):
        return self.value[self.apply(x)]


def fit_tree(data, targets, task="regression", max_depth=None, min_samples_split=2, n_classes=None):
    return CartTree(max_depth, min_samples_split, task, n_classes).fit(data, targets)


class MultiOutputRegressor:
    """One independent regression tree per target column."""

    def __init__(self, max_depth=None, min_samples_split=2):
        self.max_depth = max_depth
        self.min_samples_split = min_samples_split
        self.trees = []

    def fit(self, x, y):
        y = as_matrix(y, "y")
        presorted = presort(x)
        self.trees = [
            CartTree(self.max_depth, self.min_samples_split).fit(x, y[:, j], presorted)
            for j in range(y.shape[1])
        ]
        return self

    def predict(self, x):
        return np.stack([tree.predict(x) for tree in self.trees], axis=1)


class TemporalEnsemble:
    """FIFO ensemble of estimators refitted one per update.

    When full, the oldest member is dropped before a fresh copy of the base
    estimator is fitted and appended.
    """

    def __init__(self, base_estimator, capacity=9, task="regression", n_classes=None):
        if capacity < 1:
            raise ConfigError("ensemble capacity must be at least 1")
        self.base_estimator = base_estimator
        self.capacity = capacity
        self.task = task
        self.n_classes = n_classes
        self.members = []
        self.fit_count = 0

    def __len__(self):
        return len(self.members)

    def full(self):
        return len(self.members) >= self.capacity

    def update(self, x, t):
        if self.full():
            self.members.pop(0)
        estimator = copy.deepcopy(self.base_estimator)
        estimator.fit(x, t)
        estimator.fit_index = self.fit_count
        self.fit_count += 1
        self.members.append(estimator)

    def member_predictions(self, x):
        if not self.members:
            raise EmptyInputError("the ensemble has no fitted members")
        return np.stack([m.predict(x) for m in self.members])

    def votes(self, x):
        """Fraction of members voting for each class, ``[n, n_classes]``."""
        preds = self.member_predictions(x)
        n_classes = self.n_classes or int(preds.max()) + 1
        counts = np.zeros((preds.shape[1], n_classes))
        for p in preds:
            counts[np.arange(preds.shape[1]), p] += 1
        return counts / len(self.members)

    def predict(self, x):
        if self.task == "classification":
            return np.argmax(self.votes(x), axis=1)
        return self.member_predictions(x).mean(axis=0)


def ensemble_update(ensemble, x, t):
    ensemble.update(x, t)


def ensemble_predict(ensemble, x):
    return ensemble.predict(x)


class ClassificationError:
    """Misclassification rate of class scores (argmax) against labels; lower is better."""

    def assess(self, y, t):
        y = io_data(y)
        labels = np.asarray(io_data(t)).reshape(-1)
        return Assessment(float(np.mean(np.argmax(y, axis=1) != labels)), maximize=False)

    def __call__(self, y, t):
        return self.assess(y, t).value


def hill_climb_step_x(layer, incoming, x_raw, t, k=None):
    """Pick, per sample, the stochastic incoming output the ensemble classifies best.

    The incoming machine is sampled ``k`` times on ``x_raw``; each candidate is
    scored by the fraction of ensemble members that predict its label, and the
    best candidate per sample is returned (ties go to the lowest index).
    """
    k = layer.k if k is None else k
    if k < 1:
        raise ConfigError(f"population size must be at least 1, got {k}")
    x_raw = io_data(x_raw)
    labels = np.asarray(io_data(t)).reshape(-1)
    candidates = np.stack([incoming.sample(x_raw) for _ in range(k)])  # [k, b, d]
    scores = candidate_scores(layer.ensemble, candidates, labels)
    best = np.argmax(scores, axis=0)
    return IO(candidates[best, np.arange(candidates.shape[1])])


def candidate_scores(ensemble, candidates, labels):
    """Average member accuracy of every candidate, ``[k, b]``."""
    k, b, d = candidates.shape
    if not len(ensemble):
        return np.zeros((k, b))
    preds = ensemble.member_predictions(candidates.reshape(k * b, d))  # [m, k*b]
    hits = preds.reshape(-1, k, b) == labels[None, None, :]
    return hits.mean(axis=0)


class TreeLayerLearner(LearningMachine):
    """A layer made of a temporal ensemble of CART trees.

    ``task="regression"`` fits one multi-output regressor per step and
    outputs the member mean (zeros before the first fit).
    ``task="classification"`` fits one classifier per step and outputs the
    members' vote fractions; its ``step_x`` hill-climbs over samples of the
    stochastic ``incoming`` machine.
    """

    def __init__(
        self,
        n_outputs,
        task="regression",
        capacity=9,
        max_depth=11,
        min_samples_split=2,
        k=8,
        incoming=None,
        criterion=None,
    ):
        self.task = task
        self.n_outputs = n_outputs
        self.k = k
        self.incoming = incoming
        if task == "regression":
            base = MultiOutputRegressor(max_depth, min_samples_split)
            self._criterion = criterion or Criterion.sse()
        else:
            base = CartTree(max_depth, min_samples_split, "classification", n_outputs)
            self._criterion = criterion or ClassificationError()
        self.ensemble = TemporalEnsemble(base, capacity, task, n_outputs if task != "regression" else None)

    def _output(self, x):
        x = io_data(x)
        if not len(self.ensemble):
            return np.zeros((x.shape[0], self.n_outputs))
        if self.task == "regression":
            return self.ensemble.predict(x)
        return self.ensemble.votes(x)

    def forward(self, x, state, release=True):
        y = IO(self._output(x.f))
        state[self, x, "y"] = y
        return y

    def predict(self, x):
        return self._output(x)

    def assess_y(self, y, t):
        return self._criterion.assess(y, t)

    def step(self, x, t, state):
        self.ensemble.update(x.f, t.f)
        state[self, x, "stepped"] = True

    def step_x(self, x, t, state):
        if self.incoming is None:
            raise ConfigError("step_x needs a stochastic incoming machine")
        x_raw = state[self.incoming, x, "x"]
        return hill_climb_step_x(self, self.incoming, x_raw, t)
