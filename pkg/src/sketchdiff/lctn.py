"""Latent code translation: frozen-backbone features -> image-domain latents.

Feature stacks are built from one denoiser pass at t=0 on the sketch latent:
each named tap activation is bilinearly resized to the latent grid and
channel-concatenated in fixed tap order. The translator itself is a small
per-position MLP (512/256/128/64 hidden units, ReLU + batch-norm), applied
independently at every spatial position, trained with MSE against the frozen
autoencoder's latents of the corresponding real images.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .backbone import LATENT_CHANNELS, LATENT_SIZE, TAP_NAMES, BackboneBundle
from .checkpoint import read_checkpoint, write_checkpoint
from .errors import (DigestMismatchError, DivergenceError, FrozenBundleError,
                     ModelError)
from .layers import BatchNorm, BilinearResize, Dense, ReLU, Sequential
from .optim import Adam, warmup_lr
from .rng import Rng

HIDDEN_WIDTHS = (512, 256, 128, 64)

_RESIZERS: dict[tuple[int, int], BilinearResize] = {}


def _resize_to_latent(x: np.ndarray) -> np.ndarray:
    hw = x.shape[2:]
    if hw == (LATENT_SIZE, LATENT_SIZE):
        return x
    key = (hw[0], hw[1])
    if key not in _RESIZERS:
        _RESIZERS[key] = BilinearResize(key, (LATENT_SIZE, LATENT_SIZE))
    return _RESIZERS[key].forward(x)


def extract_features(bundle: BackboneBundle, sketch_latent: np.ndarray,
                     cond: np.ndarray) -> np.ndarray:
    """Feature stack(s) for sketch latent(s): one t=0 denoiser pass with taps.

    Refuses an unfrozen bundle: feature extraction is part of the
    no-retraining contract, so it only ever reads digest-locked parameters.
    """
    if not bundle.frozen:
        raise FrozenBundleError("feature extraction requires a frozen backbone")
    sketch_latent = np.asarray(sketch_latent, dtype=np.float64)
    single = sketch_latent.ndim == 3
    _, taps = bundle.denoise_eps(sketch_latent, 0, cond, want_taps=True)
    if single:
        taps = {k: v[None] for k, v in taps.items()}
    stacked = np.concatenate([_resize_to_latent(taps[name]) for name in TAP_NAMES],
                             axis=1)
    return stacked[0] if single else stacked


def _to_rows(stacks: np.ndarray) -> np.ndarray:
    """(N, D, H, W) -> (N*H*W, D): one row per spatial position."""
    n, d, h, w = stacks.shape
    return stacks.transpose(0, 2, 3, 1).reshape(n * h * w, d)


def _from_rows(rows: np.ndarray, n: int) -> np.ndarray:
    c = rows.shape[1]
    return rows.reshape(n, LATENT_SIZE, LATENT_SIZE, c).transpose(0, 3, 1, 2)


class LatentCodeTranslator(BaseEstimator):
    """Per-position MLP from feature stacks to 4-channel latent codes.

    fit(X, y) with X (N, D_f, 8, 8) feature stacks and y (N, 4, 8, 8) target
    latents. Training follows the fixed recipe: Adam(0.9, 0.999), constant
    lr 0.001 after 100 linear warmup steps, batch of 4 items (so batch-norm
    sees 4*64 position vectors), weights initialized N(0, 0.02).
    """

    def __init__(self, hidden=HIDDEN_WIDTHS, iters: int = 20000, batch_size: int = 4,
                 lr: float = 1e-3, warmup: int = 100, betas=(0.9, 0.999),
                 init_std: float = 0.02, bn_momentum: float = 0.9, seed: int = 0):
        self.hidden = tuple(hidden)
        self.iters = iters
        self.batch_size = batch_size
        self.lr = lr
        self.warmup = warmup
        self.betas = betas
        self.init_std = init_std
        self.bn_momentum = bn_momentum
        self.seed = seed

    def _build(self, in_dim: int, rng) -> None:
        layers: list[tuple] = []
        prev = in_dim
        for i, width in enumerate(self.hidden, start=1):
            layers.append((f"fc{i}", Dense(prev, width, rng, w_std=self.init_std)))
            layers.append((f"relu{i}", ReLU()))
            layers.append((f"bn{i}", BatchNorm(width, momentum=self.bn_momentum)))
            prev = width
        layers.append(("out", Dense(prev, LATENT_CHANNELS, rng, w_std=self.init_std)))
        self.mlp_ = Sequential(layers)
        self.in_dim_ = in_dim

    def fit(self, X, y, X_val=None, y_val=None, epoch_callback=None,
            epoch_steps: int = 2000):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if X.ndim != 4 or y.ndim != 4 or len(X) != len(y):
            raise ValueError("X must be (N,D,8,8) feature stacks with matching "
                             "(N,4,8,8) latent targets")
        root = Rng(self.seed)
        self._build(X.shape[1], root.stream("init"))
        pairs = [(p, g) for _, p, g in self.mlp_.param_items()]
        opt = Adam(pairs, lr=self.lr, betas=self.betas)
        data = root.stream("data")
        losses = []
        for step in range(1, self.iters + 1):
            idx = data.integers(0, len(X), size=self.batch_size)
            rows = _to_rows(X[idx])
            target = _to_rows(y[idx])
            out = self.mlp_.forward(rows, train=True)
            diff = out - target
            loss = float(np.mean(diff * diff))
            if not np.isfinite(loss):
                raise DivergenceError(f"translator loss became {loss} at step {step}")
            losses.append(loss)
            self.mlp_.backward(2.0 * diff / diff.size)
            opt.step(lr=warmup_lr(step, self.lr, self.warmup))
            if epoch_callback is not None and step % epoch_steps == 0:
                epoch_callback(step)
        self.losses_ = losses
        self.baseline_latent_ = y.mean(axis=0)
        self.report_ = {"final_loss": losses[-1] if losses else None}
        if X_val is not None and y_val is not None and len(X_val):
            pred = self.transform(X_val)
            self.report_["holdout_mse"] = float(np.mean((pred - y_val) ** 2))
            self.report_["baseline_mse"] = float(
                np.mean((self.baseline_latent_[None] - y_val) ** 2))
        return self

    def _check_fitted(self):
        if not hasattr(self, "mlp_"):
            raise NotFittedError("translator not fitted")

    def transform(self, X) -> np.ndarray:
        """Latent code(s) for feature stack(s), eval mode (running BN stats)."""
        self._check_fitted()
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 3
        if single:
            X = X[None]
        if X.shape[1] != self.in_dim_:
            raise ValueError(f"feature dim {X.shape[1]} != model width {self.in_dim_}")
        out = _from_rows(self.mlp_.forward(_to_rows(X), train=False), len(X))
        return out[0] if single else out

    # -- persistence -------------------------------------------------------

    def _state_tensors(self) -> dict[str, np.ndarray]:
        self._check_fitted()
        tensors = {f"mlp.{name}": p for name, p, _ in self.mlp_.param_items()}
        for lname, layer in zip(self.mlp_.names, self.mlp_.layers):
            if isinstance(layer, BatchNorm):
                tensors[f"mlp.{lname}.running_mean"] = layer.running_mean
                tensors[f"mlp.{lname}.running_var"] = layer.running_var
        tensors["baseline_latent"] = self.baseline_latent_
        return tensors

    def save(self, path, backbone_digest: str) -> str:
        meta = {
            "feature_dim": self.in_dim_,
            "hidden": list(self.hidden),
            "backbone_digest": backbone_digest,
            "report": {k: v for k, v in self.report_.items() if v is not None},
        }
        return write_checkpoint(path, "lctn", self._state_tensors(), meta)

    @staticmethod
    def load(path, bundle: BackboneBundle | None = None) -> "LatentCodeTranslator":
        """Load a translator; verifies it was trained against `bundle`."""
        ckpt = read_checkpoint(path)
        if ckpt.model_kind != "lctn":
            raise ModelError(f"{path} holds a {ckpt.model_kind!r} checkpoint, "
                             "expected 'lctn'")
        meta = ckpt.metadata
        model = LatentCodeTranslator(hidden=tuple(meta["hidden"]))
        model._build(meta["feature_dim"], Rng(0).stream("load"))
        for name, p, _ in model.mlp_.param_items():
            p[...] = ckpt.tensors[f"mlp.{name}"]
        for lname, layer in zip(model.mlp_.names, model.mlp_.layers):
            if isinstance(layer, BatchNorm):
                layer.running_mean = ckpt.tensors[f"mlp.{lname}.running_mean"]
                layer.running_var = ckpt.tensors[f"mlp.{lname}.running_var"]
        model.baseline_latent_ = ckpt.tensors["baseline_latent"]
        model.losses_ = []
        model.report_ = dict(meta.get("report", {}))
        model.backbone_digest_ = meta["backbone_digest"]
        if bundle is not None and bundle.content_digest != model.backbone_digest_:
            raise DigestMismatchError(
                f"translator was trained against backbone {model.backbone_digest_}, "
                f"but the loaded backbone digest is {bundle.content_digest}")
        return model


def sketch_to_latent(bundle: BackboneBundle, sketches: np.ndarray) -> np.ndarray:
    """Encode grayscale sketch(es) by replicating to three channels."""
    sketches = np.asarray(sketches, dtype=np.float64)
    single = sketches.ndim == 2
    if single:
        sketches = sketches[None]
    rgb = np.repeat(sketches[:, None, :, :], 3, axis=1)
    z = bundle.encode_image(rgb)
    return z[0] if single else z


def prepare_pairs(bundle: BackboneBundle, dataset, chunk: int = 64,
                  log=None) -> tuple[np.ndarray, np.ndarray]:
    """Precompute (feature stack, target latent) pairs for every item.

    Features are deterministic per item (frozen backbone, fixed edge maps),
    so computing them once up front is numerically identical to recomputing
    per step, and far faster.
    """
    n = dataset.n
    feats = np.empty((n, bundle.feature_dim, LATENT_SIZE, LATENT_SIZE))
    targets = np.empty((n, LATENT_CHANNELS, LATENT_SIZE, LATENT_SIZE))
    for start in range(0, n, chunk):
        sl = slice(start, min(start + chunk, n))
        sketch_lat = sketch_to_latent(bundle, dataset.edges[sl])
        cond = bundle.cond.batch(dataset.class_ids[sl], None)
        feats[sl] = extract_features(bundle, sketch_lat, cond)
        targets[sl] = bundle.encode_image(dataset.images[sl])
        if log and start % (chunk * 8) == 0:
            log(f"  features {sl.stop}/{n}")
    return feats, targets


def train_lctn(bundle: BackboneBundle, dataset, iters: int = 20000,
               batch_size: int = 4, lr: float = 1e-3, warmup: int = 100,
               seed: int = 0, log=None) -> LatentCodeTranslator:
    """Full training entry point: extract pairs, fit, verify the frozen bundle.

    The backbone digest is checked before training, every 2000 steps, and
    after training; any drift is a fatal contract violation.
    """
    if not bundle.frozen:
        raise FrozenBundleError("train_lctn requires a frozen backbone")
    digest_before = bundle.check_digest()
    train = dataset.subset("train")
    test = dataset.subset("test")
    if train.n == 0:
        raise ModelError("empty training split")
    if log:
        log(f"extracting features for {train.n} train / {test.n} holdout items")
    X, y = prepare_pairs(bundle, train, log=log)
    X_val, y_val = (None, None)
    if test.n:
        X_val, y_val = prepare_pairs(bundle, test)
    model = LatentCodeTranslator(iters=iters, batch_size=batch_size, lr=lr,
                                 warmup=warmup, seed=seed)
    if log:
        log(f"training translator: {iters} iterations, batch {batch_size}")
    model.fit(X, y, X_val=X_val, y_val=y_val,
              epoch_callback=lambda step: bundle.check_digest())
    if bundle.check_digest() != digest_before:
        raise DigestMismatchError("backbone digest changed during LCTN training")
    model.backbone_digest_ = digest_before
    if log and "holdout_mse" in model.report_:
        log(f"holdout latent MSE {model.report_['holdout_mse']:.5f} vs "
            f"constant-baseline {model.report_['baseline_mse']:.5f}")
    return model
