"""Shared test substrate: tiny protocol-compatible models and synthetic data.

The toy models implement the same forward protocol as the zoo models
(forward(images_or_expr, depth=..., params=...) -> logits Expr, num_classes,
params) but stay small enough for exhaustive and finite-difference oracles.
"""

from __future__ import annotations

from types import SimpleNamespace

import numpy as np

from cvtr import autodiff as ad
from cvtr.autodiff import ParameterSet
from cvtr.data import LabeledDataset


class LinearModel:
    """Binary classifier with logits (0, w.x + b) over flattened input."""

    def __init__(self, w, b=0.0):
        self.w = np.asarray(w, dtype=np.float64)
        self.b = float(b)
        self.num_classes = 2
        self.config = SimpleNamespace(input_shape=(1, 1, self.w.size))
        self.params = ParameterSet([("w", self.w), ("b", np.array([self.b]))])
        self._W2 = np.stack([np.zeros_like(self.w), self.w], axis=1)  # [d,2]
        self._b2 = np.array([0.0, self.b])

    def forward(self, images, depth: int = 1, params=None):
        x = images if isinstance(images, ad.Expr) else ad.leaf(images, depth)
        n = x.value.shape[0]
        flat = ad.reshape(x, (n, self.w.size))
        return ad.add(ad.matmul(flat, ad.constant(self._W2)),
                      ad.constant(self._b2))


class MultiLinearModel:
    """K-class affine classifier over flattened input: logits = x W + b."""

    def __init__(self, W, b=None):
        self.W = np.asarray(W, dtype=np.float64)  # [d, k]
        d, k = self.W.shape
        self.b = np.zeros(k) if b is None else np.asarray(b, dtype=np.float64)
        self.num_classes = k
        self.config = SimpleNamespace(input_shape=(1, 1, d))
        self.params = ParameterSet([("W", self.W), ("b", self.b)])

    def forward(self, images, depth: int = 1, params=None):
        x = images if isinstance(images, ad.Expr) else ad.leaf(images, depth)
        n = x.value.shape[0]
        flat = ad.reshape(x, (n, self.W.shape[0]))
        if params is not None:
            W, b = params["W"], params["b"]
        else:
            W, b = ad.constant(self.W), ad.constant(self.b)
        return ad.add(ad.matmul(flat, W), b)


class TinyMLP:
    """dense-relu-dense toy network, the substrate for weight-gradient oracles."""

    def __init__(self, d_in: int, hidden: int, classes: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.num_classes = classes
        self.d_in = d_in
        self.config = SimpleNamespace(input_shape=(1, 1, d_in))
        self.params = ParameterSet([
            ("w1", rng.normal(0, 0.6, (d_in, hidden))),
            ("b1", rng.normal(0, 0.1, hidden)),
            ("w2", rng.normal(0, 0.6, (hidden, classes))),
            ("b2", rng.normal(0, 0.1, classes)),
        ])

    def with_params(self, params: ParameterSet) -> "TinyMLP":
        clone = TinyMLP.__new__(TinyMLP)
        clone.num_classes = self.num_classes
        clone.d_in = self.d_in
        clone.config = self.config
        clone.params = params
        return clone

    def forward(self, images, depth: int = 1, params=None):
        x = images if isinstance(images, ad.Expr) else ad.leaf(images, depth)
        n = x.value.shape[0]
        flat = ad.reshape(x, (n, self.d_in))

        def p(name):
            if params is not None and name in params:
                return params[name]
            return ad.constant(self.params[name])

        h = ad.relu(ad.add(ad.matmul(flat, p("w1")), p("b1")))
        return ad.add(ad.matmul(h, p("w2")), p("b2"))


def patterned_digits(n: int, seed: int = 0, noise: float = 0.05,
                     size: int = 28, classes: int = 10) -> LabeledDataset:
    """Class-coded bump images: quick to learn, robustly separable.

    Each class places a fixed Gaussian bump on a coarse grid; amplitude 1.0
    dwarfs the attack budgets used in tests, so a well-trained model can be
    robust at eps <= 0.3.
    """
    rng = np.random.default_rng(seed)
    grid = [(r, c) for r in (6, 14, 22) for c in (6, 14, 22)] + [(10, 18)]
    yy, xx = np.mgrid[0:size, 0:size]
    images = np.empty((n, 1, size, size))
    labels = rng.integers(0, classes, n)
    for i, lab in enumerate(labels):
        r, c = grid[lab % len(grid)]
        bump = np.exp(-((yy - r) ** 2 + (xx - c) ** 2) / (2 * 2.0 ** 2))
        img = bump + noise * rng.random((size, size))
        images[i, 0] = np.clip(img, 0.0, 1.0)
    return LabeledDataset(images, labels, num_classes=classes)


def loss_of(model, x: np.ndarray, y) -> float:
    """Scalar mean cross-entropy of a batch, parameters constant."""
    logits = model.forward(x, depth=0)
    return float(ad.softmax_cross_entropy(logits, np.atleast_1d(y)).value)


def input_grad(model, x: np.ndarray, y) -> np.ndarray:
    xe = ad.leaf(x, depth=1)
    loss = ad.softmax_cross_entropy(model.forward(xe), np.atleast_1d(y))
    return ad.gradient(loss, [xe])[0].value
