"""Evaluation metrics: PSNR, SSIM, silhouette IoU, and a judge classifier.

The judge is a small conv net trained on real images only; its accuracy on
generated images is the class-correctness score. A judge is only considered
valid once it clears 95% held-out accuracy on real images.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .checkpoint import read_checkpoint, write_checkpoint
from .datasets import _dilate, edge_map, luminance
from .errors import DivergenceError, ModelError
from .layers import (BilinearResize, Conv2d, Dense, ReLU, Sequential,
                     collect_adam_params)
from .optim import Adam
from .rng import Rng
from .validation import as_f64, check_image

PSNR_INF = float("inf")  # sentinel for MSE == 0


def psnr(a: np.ndarray, b: np.ndarray, max_val: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs return +inf."""
    a, b = as_f64(a, "a"), as_f64(b, "b")
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_INF
    return 10.0 * np.log10(max_val * max_val / mse)


def ssim(a: np.ndarray, b: np.ndarray, window: int = 8,
         k1: float = 0.01, k2: float = 0.03, max_val: float = 1.0) -> float:
    """Mean local SSIM over dense sliding windows on luminance.

    Uses uniform (unweighted) windows and biased variance, which keeps the
    value exactly 1.0 for identical inputs.
    """
    a, b = as_f64(a, "a"), as_f64(b, "b")
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    ga = luminance(a) if a.ndim == 3 else a
    gb = luminance(b) if b.ndim == 3 else b
    h, w = ga.shape
    if h < window or w < window:
        raise ValueError(f"images smaller than the {window}x{window} window")
    c1 = (k1 * max_val) ** 2
    c2 = (k2 * max_val) ** 2
    # integral-image window sums
    def win_sums(x):
        csum = np.cumsum(np.cumsum(np.pad(x, ((1, 0), (1, 0))), axis=0), axis=1)
        return (csum[window:, window:] - csum[:-window, window:]
                - csum[window:, :-window] + csum[:-window, :-window])
    n = window * window
    mu_a = win_sums(ga) / n
    mu_b = win_sums(gb) / n
    var_a = win_sums(ga * ga) / n - mu_a ** 2
    var_b = win_sums(gb * gb) / n - mu_b ** 2
    cov = win_sums(ga * gb) / n - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def silhouette_iou(gen_image: np.ndarray, sketch_mask: np.ndarray) -> float:
    """Structural consistency: IoU between the generated image's (dilated)
    edge map and the input sketch mask."""
    sketch = as_f64(sketch_mask, "sketch_mask") > 0.5
    if not sketch.any():
        raise ValueError("sketch mask is empty; IoU undefined")
    gen_edges = _dilate(edge_map(gen_image) > 0.5)
    inter = np.logical_and(gen_edges, sketch).sum()
    union = np.logical_or(gen_edges, sketch).sum()
    return float(inter / union)


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Plain IoU between two binary masks (union must be nonempty)."""
    a, b = np.asarray(a) > 0.5, np.asarray(b) > 0.5
    union = np.logical_or(a, b).sum()
    if union == 0:
        raise ValueError("both masks empty; IoU undefined")
    return float(np.logical_and(a, b).sum() / union)


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class ShapeClassifier(BaseEstimator):
    """Small conv-net judge: fit on real (image, class) pairs, then predict.

    Deterministic under `seed`. The fitted attributes follow sklearn naming
    (`net_`, `classes_`), so the estimator composes with standard tooling.
    """

    def __init__(self, n_classes: int = 8, image_size: int = 32,
                 channels: int = 16, steps: int = 3000, batch_size: int = 32,
                 lr: float = 1e-3, seed: int = 0):
        self.n_classes = n_classes
        self.image_size = image_size
        self.channels = channels
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed

    def _build(self, rng):
        c = self.channels
        s = self.image_size
        self._trunk = Sequential([
            ("conv1", Conv2d(3, c, rng)),
            ("relu1", ReLU()),
            ("pool1", BilinearResize((s, s), (s // 2, s // 2))),
            ("conv2", Conv2d(c, 2 * c, rng)),
            ("relu2", ReLU()),
            ("pool2", BilinearResize((s // 2, s // 2), (s // 4, s // 4))),
            ("conv3", Conv2d(2 * c, 2 * c, rng)),
            ("relu3", ReLU()),
        ])
        feat = 2 * c * (s // 4) ** 2
        self._head = Sequential([
            ("fc1", Dense(feat, 64, rng)),
            ("relu", ReLU()),
            ("fc2", Dense(64, self.n_classes, rng)),
        ])

    def _logits(self, images: np.ndarray, train: bool = False) -> np.ndarray:
        h = self._trunk.forward(images, train=train)
        flat = h.reshape(h.shape[0], -1)
        return self._head.forward(flat, train=train)

    def fit(self, X, y):
        X = check_image(X, size=self.image_size, name="X")
        y = np.asarray(y, dtype=int)
        if X.ndim != 4 or len(X) != len(y):
            raise ValueError("X must be (N,3,S,S) with matching labels")
        if y.min() < 0 or y.max() >= self.n_classes:
            raise ValueError(f"labels out of range for n_classes={self.n_classes}")
        root = Rng(self.seed)
        self._build(root.stream("init"))
        opt = Adam(collect_adam_params(self._trunk, self._head), lr=self.lr)
        data = root.stream("data")
        losses = []
        for step in range(self.steps):
            idx = data.integers(0, len(X), size=self.batch_size)
            logits = self._logits(X[idx], train=True)
            probs = _softmax(logits)
            batch_y = y[idx]
            loss = -np.mean(np.log(probs[np.arange(len(idx)), batch_y] + 1e-12))
            if not np.isfinite(loss):
                raise DivergenceError(f"classifier loss became {loss} at step {step}")
            grad = probs.copy()
            grad[np.arange(len(idx)), batch_y] -= 1.0
            grad /= len(idx)
            flat_grad = self._head.backward(grad)
            s4 = self.image_size // 4
            self._trunk.backward(flat_grad.reshape(idx.size, 2 * self.channels, s4, s4))
            opt.step()
            losses.append(float(loss))
        self.losses_ = losses
        self.classes_ = np.arange(self.n_classes)
        return self

    def _check_fitted(self):
        if not hasattr(self, "classes_"):
            raise NotFittedError("ShapeClassifier is not fitted; call fit first")

    def predict_proba(self, X) -> np.ndarray:
        self._check_fitted()
        X = check_image(X, size=self.image_size, name="X")
        if X.ndim == 3:
            X = X[None]
        return _softmax(self._logits(X, train=False))

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=1)

    def score(self, X, y) -> float:
        """Classification accuracy."""
        y = np.asarray(y, dtype=int)
        return float(np.mean(self.predict(X) == y))

    def confidence(self, X, y) -> np.ndarray:
        """Per-item softmax probability assigned to the intended class."""
        y = np.asarray(y, dtype=int)
        probs = self.predict_proba(X)
        return probs[np.arange(len(y)), y]

    def save(self, path) -> str:
        self._check_fitted()
        tensors = {f"trunk.{n}": p for n, p, _ in self._trunk.param_items()}
        tensors.update({f"head.{n}": p for n, p, _ in self._head.param_items()})
        meta = {"n_classes": self.n_classes, "image_size": self.image_size,
                "channels": self.channels}
        return write_checkpoint(path, "classifier", tensors, meta)

    @staticmethod
    def load(path) -> "ShapeClassifier":
        ckpt = read_checkpoint(path)
        if ckpt.model_kind != "classifier":
            raise ModelError(f"{path} holds a {ckpt.model_kind!r} checkpoint, "
                             "expected 'classifier'")
        meta = ckpt.metadata
        clf = ShapeClassifier(n_classes=meta["n_classes"],
                              image_size=meta["image_size"],
                              channels=meta["channels"])
        clf._build(Rng(0).stream("load"))
        for prefix, model in (("trunk", clf._trunk), ("head", clf._head)):
            for n, p, _ in model.param_items():
                p[...] = ckpt.tensors[f"{prefix}.{n}"]
        clf.classes_ = np.arange(meta["n_classes"])
        clf.losses_ = []
        return clf


def classify_acc(clf: ShapeClassifier, images, labels) -> float:
    return clf.score(images, labels)


@dataclass
class EvalReport:
    """Aggregated metric table; serializes with stable key order."""

    n: int
    k_ratio: float | None
    metrics: dict = field(default_factory=dict)          # name -> {mean, std, n}
    per_class_acc: dict = field(default_factory=dict)    # class name -> acc
    judge_real_acc: float | None = None

    def add(self, name: str, values) -> None:
        arr = np.asarray([v for v in values if np.isfinite(v)], dtype=float)
        finite_n = int(arr.size)
        self.metrics[name] = {
            "mean": float(arr.mean()) if finite_n else None,
            "std": float(arr.std()) if finite_n else None,
            "n": finite_n,
        }

    def to_json(self) -> str:
        payload = {
            "n": self.n,
            "k_ratio": self.k_ratio,
            "metrics": self.metrics,
            "per_class_acc": self.per_class_acc,
            "judge_real_acc": self.judge_real_acc,
        }
        return json.dumps(payload, sort_keys=True, indent=1)
