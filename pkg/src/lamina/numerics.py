"""Dense matrix kernels and seeded randomness.

Every value in lamina is a 2-D ``float64`` numpy array laid out batch-first
(``[batch, features]``). Weights are stored ``[out, in]`` so a linear map is
``x @ W.T + b``.

Randomness goes through :class:`Rng`, a thin wrapper over numpy's counter-based
Philox generator. Child streams are derived from ``(seed, label path)`` only, so
``rng.split("init")`` returns the same stream no matter how much of the parent
has been consumed.
"""

from __future__ import annotations

import zlib

import numpy as np
import scipy.linalg

from lamina.errors import ShapeError, SingularMatrixError


def as_matrix(a, name="matrix"):
    """Return ``a`` as a 2-D float64 array, raising ShapeError otherwise."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def matmul(a, b):
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}: inner dimensions differ")
    return a @ b


def ridge_solve(a, b, lam):
    """Solve ``min_X ||a X - b||^2 + lam ||X||^2``.

    Uses a Cholesky factorization of ``a.T a + lam I``. With ``lam == 0`` the
    normal matrix must be positive definite.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"ridge_solve: a {a.shape} and b {b.shape} need equal row counts")
    if lam < 0:
        raise ValueError(f"ridge coefficient must be non-negative, got {lam}")
    gram = a.T @ a
    if lam:
        gram[np.diag_indices_from(gram)] += lam
    try:
        factor = scipy.linalg.cho_factor(gram, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError(
            "normal matrix is singular or not positive definite; use lambda > 0"
        ) from exc
    return scipy.linalg.cho_solve(factor, a.T @ b, check_finite=False)


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def check_labels(labels, n_classes):
    labels = np.asarray(labels)
    if labels.ndim == 2 and labels.shape[1] == 1:
        labels = labels[:, 0]
    if labels.ndim != 1:
        raise ShapeError(f"labels must be 1-D, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        bad = labels[(labels < 0) | (labels >= n_classes)][0]
        raise IndexError(f"label {bad} outside [0, {n_classes})")
    return labels.astype(np.int64)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch and its gradient w.r.t. ``logits``."""
    logits = as_matrix(logits, "logits")
    labels = check_labels(labels, logits.shape[1])
    if labels.shape[0] != logits.shape[0]:
        raise ShapeError(f"{labels.shape[0]} labels for {logits.shape[0]} rows")
    n = logits.shape[0]
    rows = np.arange(n)
    loss = -log_softmax(logits)[rows, labels].mean()
    grad = softmax(logits)
    grad[rows, labels] -= 1.0
    grad /= n
    return float(loss), grad


def one_hot(labels, n_classes):
    out = np.zeros((len(labels), n_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


class Rng:
    """Seeded, splittable random stream.

    >>> a = Rng(7).split("init").uniform(size=2)
    >>> b = Rng(7).split("init").uniform(size=2)
    >>> bool((a == b).all())
    True
    """

    def __init__(self, seed, path=()):
        self.seed = int(seed)
        self.path = tuple(path)
        seq = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self.generator = np.random.Generator(np.random.Philox(seq))

    def split(self, label):
        return Rng(self.seed, self.path + (zlib.crc32(str(label).encode()),))

    def normal(self, mean=0.0, std=1.0, size=None):
        return self.generator.normal(mean, std, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def random(self, size=None):
        return self.generator.random(size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={self.path})"


def gaussian(rng, rows, cols, mean=0.0, std=1.0):
    if std < 0:
        raise ValueError(f"std must be non-negative, got {std}")
    return rng.normal(mean, std, size=(rows, cols))
