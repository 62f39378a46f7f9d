"""The miniature frozen backbone: latent autoencoder, conditional denoiser,
and conditioning table.

Everything here is trained once on the synthetic dataset and then frozen;
the whole point of the translation stage is that it never touches these
parameters again. Freezing marks every parameter array read-only and records
a content digest, so any later mutation fails loudly and the no-retraining
claim is checkable bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .checkpoint import content_digest, read_checkpoint, write_checkpoint
from .errors import (DigestMismatchError, DivergenceError, FrozenBundleError,
                     ModelError)
from .layers import (BilinearResize, Conv2d, Dense, Embedding, ReLU,
                     Sequential, SinusoidalTimeEmbed, collect_adam_params)
from .metrics import psnr
from .optim import Adam
from .rng import Rng
from .schedule import NoiseSchedule, ddpm_loss, make_schedule, q_sample
from .validation import check_finite, check_image

LATENT_CHANNELS = 4
LATENT_SIZE = 8
IMAGE_SIZE = 32
COND_DIM = 64
TAP_NAMES = ("down1", "down2", "mid", "up1", "up2")


class ConvAutoencoder(BaseEstimator):
    """Deterministic conv autoencoder: (3,32,32) images <-> (4,8,8) latents.

    transform == encode (latent scaling applied), inverse_transform == decode
    (output clamped to [0,1]). Fitting records held-out reconstruction PSNR
    and fits per-channel latent scales so scaled latents have unit-ish std.
    """

    def __init__(self, channels: int = 32, steps: int = 10000, batch_size: int = 16,
                 lr: float = 1e-3, latent_l2: float = 1e-4, seed: int = 0):
        self.channels = channels
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.latent_l2 = latent_l2
        self.seed = seed

    def _build(self, rng):
        c = self.channels
        hi = max(c // 2, 8)  # few channels at full resolution keeps convs cheap
        s = IMAGE_SIZE
        self.encoder_ = Sequential([
            ("conv1", Conv2d(3, hi, rng)), ("relu1", ReLU()),
            ("down1", BilinearResize((s, s), (s // 2, s // 2))),
            ("conv2", Conv2d(hi, c, rng)), ("relu2", ReLU()),
            ("down2", BilinearResize((s // 2, s // 2), (s // 4, s // 4))),
            ("conv3", Conv2d(c, 2 * c, rng)), ("relu3", ReLU()),
            ("conv4", Conv2d(2 * c, LATENT_CHANNELS, rng)),
        ])
        self.decoder_ = Sequential([
            ("conv1", Conv2d(LATENT_CHANNELS, 2 * c, rng)), ("relu1", ReLU()),
            ("conv2", Conv2d(2 * c, 2 * c, rng)), ("relu2", ReLU()),
            ("up1", BilinearResize((s // 4, s // 4), (s // 2, s // 2))),
            ("conv3", Conv2d(2 * c, hi, rng)), ("relu3", ReLU()),
            ("up2", BilinearResize((s // 2, s // 2), (s, s))),
            ("conv4", Conv2d(hi, 3, rng)),
        ])

    def fit(self, X, X_val=None):
        X = check_image(X, size=IMAGE_SIZE, name="X")
        root = Rng(self.seed)
        self._build(root.stream("init"))
        opt = Adam(collect_adam_params(self.encoder_, self.decoder_), lr=self.lr)
        data = root.stream("data")
        losses = []
        for step in range(self.steps):
            idx = data.integers(0, len(X), size=self.batch_size)
            batch = X[idx]
            z = self.encoder_.forward(batch, train=True)
            recon = self.decoder_.forward(z, train=True)
            diff = recon - batch
            loss = float(np.mean(diff * diff)) + self.latent_l2 * float(np.mean(z * z))
            if not np.isfinite(loss):
                raise DivergenceError(f"autoencoder loss became {loss} at step {step}")
            losses.append(loss)
            g_recon = 2.0 * diff / diff.size
            g_z = self.decoder_.backward(g_recon)
            g_z += 2.0 * self.latent_l2 * z / z.size
            self.encoder_.backward(g_z)
            opt.step()
        self.losses_ = losses
        # per-channel scale so scaled training latents have std 1
        lat = self._encode_raw(X)
        std = lat.std(axis=(0, 2, 3))
        self.latent_scale_ = 1.0 / np.maximum(std, 1e-8)
        held = X_val if X_val is not None and len(X_val) else X
        recon = self.inverse_transform(self.transform(held))
        self.recon_mse_ = float(np.mean((recon - held) ** 2))
        self.recon_psnr_ = psnr(held, recon)
        return self

    def _check_fitted(self):
        if not hasattr(self, "latent_scale_"):
            raise NotFittedError("autoencoder not fitted")

    def _encode_raw(self, images: np.ndarray) -> np.ndarray:
        out = []
        for start in range(0, len(images), 64):
            out.append(self.encoder_.forward(images[start:start + 64], train=False))
        return np.concatenate(out, axis=0)

    def transform(self, images) -> np.ndarray:
        """Encode to scaled latents; accepts (3,S,S) or (N,3,S,S)."""
        self._check_fitted()
        images = check_image(images, size=IMAGE_SIZE, name="image")
        single = images.ndim == 3
        if single:
            images = images[None]
        z = self._encode_raw(images) * self.latent_scale_[None, :, None, None]
        return z[0] if single else z

    def inverse_transform(self, latents) -> np.ndarray:
        """Decode scaled latents to images clamped to [0,1]."""
        self._check_fitted()
        latents = np.asarray(latents, dtype=np.float64)
        single = latents.ndim == 3
        if single:
            latents = latents[None]
        raw = latents / self.latent_scale_[None, :, None, None]
        out = []
        for start in range(0, len(raw), 64):
            out.append(self.decoder_.forward(raw[start:start + 64], train=False))
        img = np.clip(np.concatenate(out, axis=0), 0.0, 1.0)
        return img[0] if single else img

    def param_items(self):
        for name, p, g in self.encoder_.param_items():
            yield f"ae.enc.{name}", p, g
        for name, p, g in self.decoder_.param_items():
            yield f"ae.dec.{name}", p, g


class CondTable:
    """Learned class/style embedding rows; the conditioning vector is their sum."""

    def __init__(self, n_classes: int, n_styles: int, rng, dim: int = COND_DIM,
                 init_std: float = 0.1):
        self.n_classes = n_classes
        self.n_styles = n_styles
        self.dim = dim
        self.class_emb = Embedding(n_classes, dim, rng, std=init_std)
        self.style_emb = Embedding(n_styles, dim, rng, std=init_std)

    def vector(self, class_id: int, style_id: int | None = None) -> np.ndarray:
        """Single conditioning vector: class row plus optional style row."""
        v = self.class_emb.forward(np.array([class_id]))[0].copy()
        if style_id is not None:
            v += self.style_emb.forward(np.array([style_id]))[0]
        return v

    def batch(self, class_ids: np.ndarray, style_ids: np.ndarray | None,
              train: bool = False) -> np.ndarray:
        """Batched vectors; style_ids may contain -1 for "no style"."""
        out = self.class_emb.forward(class_ids, train=train)
        if train:
            self._style_mask = None
        if style_ids is not None:
            mask = style_ids >= 0
            styled = self.style_emb.forward(np.where(mask, style_ids, 0), train=train)
            out = out + np.where(mask[:, None], styled, 0.0)
            if train:
                self._style_mask = mask
        return out

    def backward(self, g_cond: np.ndarray) -> None:
        self.class_emb.backward(g_cond)
        if self._style_mask is not None:
            self.style_emb.backward(g_cond * self._style_mask[:, None])

    def param_items(self):
        yield "cond.class.table", self.class_emb.params["table"], self.class_emb.grads["table"]
        yield "cond.style.table", self.style_emb.params["table"], self.style_emb.grads["table"]

    def zero_grad(self):
        self.class_emb.zero_grad()
        self.style_emb.zero_grad()


class _UNet:
    """Tiny conditional U-Net over (4,8,8) latents with five named taps.

    Block layout: conv -> group-norm -> + proj(time_embed + cond) -> relu,
    at resolutions 8, 4, 2, 4, 8 with skip concatenations on the way up.
    """

    def __init__(self, rng, channels: int = 32, cond_dim: int = COND_DIM,
                 groups: int = 8):
        from .layers import GroupNorm  # local import keeps module header lean
        c = self.channels = channels
        self.cond_dim = cond_dim
        self.time_embed = SinusoidalTimeEmbed(cond_dim)
        self.blocks = {}

        def block(name, c_in, c_out):
            self.blocks[name] = {
                "conv": Conv2d(c_in, c_out, rng),
                "norm": GroupNorm(c_out, groups),
                "proj": Dense(cond_dim, c_out, rng, w_std=np.sqrt(1.0 / cond_dim)),
                "relu": ReLU(),
            }

        block("down1", LATENT_CHANNELS, c)
        block("down2", c, 2 * c)
        block("mid", 2 * c, 2 * c)
        block("up1", 4 * c, 2 * c)
        block("up2", 3 * c, c)
        self.out_conv = Conv2d(c, LATENT_CHANNELS, rng)
        self.shrink1 = BilinearResize((8, 8), (4, 4))
        self.shrink2 = BilinearResize((4, 4), (2, 2))
        self.grow1 = BilinearResize((2, 2), (4, 4))
        self.grow2 = BilinearResize((4, 4), (8, 8))
        self.tap_channels = {"down1": c, "down2": 2 * c, "mid": 2 * c,
                             "up1": 2 * c, "up2": c}

    def _run_block(self, name, x, e, train):
        b = self.blocks[name]
        h = b["conv"].forward(x, train=train)
        h = b["norm"].forward(h, train=train)
        h = h + b["proj"].forward(e, train=train)[:, :, None, None]
        return b["relu"].forward(h, train=train)

    def _back_block(self, name, g):
        b = self.blocks[name]
        g = b["relu"].backward(g)
        self._g_e += b["proj"].backward(g.sum(axis=(2, 3)))
        g = b["norm"].backward(g)
        return b["conv"].backward(g)

    def forward(self, z, t, cond, train: bool = False, want_taps: bool = False):
        n = z.shape[0]
        t_arr = np.broadcast_to(np.atleast_1d(np.asarray(t, dtype=np.float64)), (n,))
        e = self.time_embed.forward(t_arr) + cond
        d1 = self._run_block("down1", z, e, train)
        d2 = self._run_block("down2", self.shrink1.forward(d1, train=train), e, train)
        m = self._run_block("mid", self.shrink2.forward(d2, train=train), e, train)
        u1 = self._run_block("up1", np.concatenate(
            [self.grow1.forward(m, train=train), d2], axis=1), e, train)
        u2 = self._run_block("up2", np.concatenate(
            [self.grow2.forward(u1, train=train), d1], axis=1), e, train)
        eps = self.out_conv.forward(u2, train=train)
        check_finite(eps, "denoiser output")
        if want_taps:
            taps = {"down1": d1, "down2": d2, "mid": m, "up1": u1, "up2": u2}
            return eps, taps
        return eps

    def backward(self, g_eps):
        """Returns the gradient w.r.t. the conditioning vector (N, cond_dim)."""
        c = self.channels
        self._g_e = 0.0
        g_u2 = self.out_conv.backward(g_eps)
        g_cat2 = self._back_block("up2", g_u2)
        g_u1 = self.grow2.backward(g_cat2[:, :2 * c])
        g_d1_skip = g_cat2[:, 2 * c:]
        g_cat1 = self._back_block("up1", g_u1)
        g_m = self.grow1.backward(g_cat1[:, :2 * c])
        g_d2_skip = g_cat1[:, 2 * c:]
        g_s2 = self._back_block("mid", g_m)
        g_d2 = self.shrink2.backward(g_s2) + g_d2_skip
        g_s1 = self._back_block("down2", g_d2)
        g_d1 = self.shrink1.backward(g_s1) + g_d1_skip
        self._back_block("down1", g_d1)
        return self._g_e

    def param_items(self):
        for name in TAP_NAMES:
            b = self.blocks[name]
            for part in ("conv", "norm", "proj"):
                for pname, p, g in b[part].param_items():
                    yield f"unet.{name}.{part}.{pname}", p, g
        for pname, p, g in self.out_conv.param_items():
            yield f"unet.out.{pname}", p, g

    def zero_grad(self):
        for b in self.blocks.values():
            for part in ("conv", "norm", "proj"):
                b[part].zero_grad()
        self.out_conv.zero_grad()


class LatentDenoiser(BaseEstimator):
    """Noise-prediction network trained on frozen-autoencoder latents.

    fit() follows the standard recipe: per step draw a batch of latents,
    uniform timesteps, fresh Gaussian noise, form z_t with the closed-form
    marginal, and regress the noise under class(+style) conditioning. A
    fraction of style labels is dropped so class-only conditioning stays
    in-distribution for sampling.
    """

    def __init__(self, channels: int = 32, steps: int = 30000, batch_size: int = 16,
                 lr: float = 1e-3, style_dropout: float = 0.3, seed: int = 0):
        self.channels = channels
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.style_dropout = style_dropout
        self.seed = seed

    def fit(self, latents, class_ids, style_ids, n_classes: int, n_styles: int,
            sched: NoiseSchedule):
        latents = np.asarray(latents, dtype=np.float64)
        class_ids = np.asarray(class_ids, dtype=np.int64)
        style_ids = np.asarray(style_ids, dtype=np.int64)
        root = Rng(self.seed)
        init = root.stream("init")
        self.unet_ = _UNet(init, channels=self.channels)
        self.cond_ = CondTable(n_classes, n_styles, init)
        self.sched_ = sched
        opt = Adam(collect_adam_params(self.unet_, self.cond_), lr=self.lr)
        data = root.stream("data")
        noise = root.stream("noise")
        losses = []
        for step in range(self.steps):
            idx = data.integers(0, len(latents), size=self.batch_size)
            z0 = latents[idx]
            t = data.integers(1, sched.T + 1, size=self.batch_size)
            eps = noise.standard_normal(z0.shape)
            z_t = q_sample(z0, t, eps, sched)
            sid = style_ids[idx].copy()
            sid[data.uniform(size=self.batch_size) < self.style_dropout] = -1
            cond = self.cond_.batch(class_ids[idx], sid, train=True)
            eps_hat = self.unet_.forward(z_t, t, cond, train=True)
            loss = ddpm_loss(eps, eps_hat)
            if not np.isfinite(loss):
                raise DivergenceError(f"denoiser loss became {loss} at step {step}")
            losses.append(loss)
            g = 2.0 * (eps_hat - eps) / eps.size
            g_cond = self.unet_.backward(g)
            self.cond_.backward(g_cond)
            opt.step()
        self.losses_ = losses
        return self

    def param_items(self):
        self._check_fitted()
        yield from self.unet_.param_items()
        yield from self.cond_.param_items()

    def _check_fitted(self):
        if not hasattr(self, "unet_"):
            raise NotFittedError("denoiser not fitted")


@dataclass
class BackboneBundle:
    """Frozen-after-training container for everything the pipeline consumes."""

    autoencoder: ConvAutoencoder
    denoiser: LatentDenoiser
    schedule: NoiseSchedule
    class_names: list[str]
    style_names: list[str]
    frozen: bool = False
    content_digest: str | None = None
    recon_psnr: float | None = None

    @property
    def cond(self) -> CondTable:
        return self.denoiser.cond_

    @property
    def tap_channels(self) -> dict:
        return dict(self.denoiser.unet_.tap_channels)

    @property
    def feature_dim(self) -> int:
        return sum(self.tap_channels.values())

    def named_params(self) -> dict[str, np.ndarray]:
        params = {}
        for name, p, _ in self.autoencoder.param_items():
            params[name] = p
        for name, p, _ in self.denoiser.param_items():
            params[name] = p
        return params

    # -- spec operations ---------------------------------------------------

    def encode_image(self, image) -> np.ndarray:
        """Scaled latent(s) of an RGB image (pixels must be in [0,1])."""
        return self.autoencoder.transform(image)

    def decode_latent(self, z) -> np.ndarray:
        """Image(s) for scaled latent(s); pixels clamped to [0,1]."""
        return self.autoencoder.inverse_transform(z)

    def embed_condition(self, class_id: int, style_id: int | None = None) -> np.ndarray:
        if not 0 <= int(class_id) < len(self.class_names):
            raise ValueError(f"class_id {class_id} out of range "
                             f"[0, {len(self.class_names)})")
        if style_id is not None and not 0 <= int(style_id) < len(self.style_names):
            raise ValueError(f"style_id {style_id} out of range "
                             f"[0, {len(self.style_names)})")
        return self.cond.vector(int(class_id), None if style_id is None else int(style_id))

    def denoise_eps(self, z_t, t, cond, want_taps: bool = False):
        """Predicted noise (and optionally the named tap activations).

        t may be 0 only for feature extraction; the schedule is consulted by
        callers, not here.
        """
        z_t = np.asarray(z_t, dtype=np.float64)
        single = z_t.ndim == 3
        if single:
            z_t = z_t[None]
        if z_t.shape[1:] != (LATENT_CHANNELS, LATENT_SIZE, LATENT_SIZE):
            raise ValueError(f"latent must be (4,{LATENT_SIZE},{LATENT_SIZE}), "
                             f"got {z_t.shape[1:]}")
        t_arr = np.atleast_1d(np.asarray(t))
        if np.any(t_arr < 0) or np.any(t_arr > self.schedule.T):
            raise ValueError(f"t={t} outside [0, {self.schedule.T}]")
        cond = np.asarray(cond, dtype=np.float64)
        if cond.ndim == 1:
            cond = np.broadcast_to(cond, (z_t.shape[0], cond.shape[0]))
        out = self.denoiser.unet_.forward(z_t, t, cond, train=False,
                                          want_taps=want_taps)
        if want_taps:
            eps, taps = out
            return (eps[0] if single else eps,
                    {k: (v[0] if single else v) for k, v in taps.items()})
        return out[0] if single else out

    # -- freezing ------------------------------------------------------------

    def freeze(self) -> "BackboneBundle":
        if not hasattr(self.autoencoder, "latent_scale_"):
            raise FrozenBundleError("cannot freeze: autoencoder not trained")
        self.denoiser._check_fitted()
        params = self.named_params()
        for p in params.values():
            p.flags.writeable = False
        self.content_digest = content_digest(params)
        self.frozen = True
        return self

    def check_digest(self) -> str:
        """Recompute the digest and verify it matches the frozen one."""
        actual = content_digest(self.named_params())
        if self.frozen and actual != self.content_digest:
            raise DigestMismatchError(
                f"backbone parameters changed: digest {actual} != frozen "
                f"{self.content_digest}")
        return actual

    # -- persistence -----------------------------------------------------------

    def save(self, path) -> str:
        if not self.frozen:
            raise FrozenBundleError("freeze() the bundle before saving")
        meta = {
            "schedule": self.schedule.to_meta(),
            "latent_scale": [float(v) for v in self.autoencoder.latent_scale_],
            "class_names": list(self.class_names),
            "style_names": list(self.style_names),
            "tap_channels": [[k, int(v)] for k, v in self.tap_channels.items()],
            "recon_psnr": self.recon_psnr,
            "recon_mse": self.autoencoder.recon_mse_,
            "arch": {
                "ae_channels": self.autoencoder.channels,
                "unet_channels": self.denoiser.channels,
            },
        }
        return write_checkpoint(path, "backbone", self.named_params(), meta)

    @staticmethod
    def load(path) -> "BackboneBundle":
        ckpt = read_checkpoint(path)
        if ckpt.model_kind != "backbone":
            raise ModelError(f"{path} holds a {ckpt.model_kind!r} checkpoint, "
                             "expected 'backbone'")
        meta = ckpt.metadata
        sched = NoiseSchedule.from_meta(meta["schedule"])
        ae = ConvAutoencoder(channels=meta["arch"]["ae_channels"])
        ae._build(Rng(0).stream("load"))
        ae.latent_scale_ = np.array(meta["latent_scale"], dtype=np.float64)
        ae.recon_mse_ = meta.get("recon_mse", float("nan"))
        ae.recon_psnr_ = meta.get("recon_psnr", float("nan"))
        dn = LatentDenoiser(channels=meta["arch"]["unet_channels"])
        dn.unet_ = _UNet(Rng(0).stream("load"), channels=dn.channels)
        dn.cond_ = CondTable(len(meta["class_names"]), len(meta["style_names"]),
                             Rng(0).stream("load"))
        dn.sched_ = sched
        bundle = BackboneBundle(autoencoder=ae, denoiser=dn, schedule=sched,
                                class_names=list(meta["class_names"]),
                                style_names=list(meta["style_names"]),
                                recon_psnr=meta.get("recon_psnr"))
        params = bundle.named_params()
        if set(params) != set(ckpt.tensors):
            missing = set(params) ^ set(ckpt.tensors)
            raise ModelError(f"{path}: parameter name mismatch ({sorted(missing)[:4]}...)")
        for name, arr in params.items():
            arr[...] = ckpt.tensors[name]
        bundle.freeze()
        if bundle.content_digest != meta["content_digest"]:
            raise DigestMismatchError(
                f"{path}: rebuilt digest {bundle.content_digest} != stored "
                f"{meta['content_digest']}")
        return bundle


def train_backbone(dataset, ae_steps: int = 10000, dn_steps: int = 30000,
                   batch_size: int = 16, lr: float = 1e-3, channels: int = 32,
                   sched: NoiseSchedule | None = None, seed: int = 0,
                   log=None) -> BackboneBundle:
    """Train autoencoder then denoiser on the train split and freeze the result."""
    if sched is None:
        sched = make_schedule()
    train = dataset.subset("train")
    test = dataset.subset("test")
    if train.n == 0:
        raise ModelError("empty training split")
    if log:
        log(f"training autoencoder: {ae_steps} steps, batch {batch_size}")
    ae = ConvAutoencoder(channels=channels, steps=ae_steps, batch_size=batch_size,
                         lr=lr, seed=Rng(seed).draw_seed("ae"))
    ae.fit(train.images, X_val=test.images if test.n else None)
    if log:
        log(f"autoencoder held-out PSNR: {ae.recon_psnr_:.2f} dB")
    latents = ae.transform(train.images)
    if log:
        log(f"training denoiser: {dn_steps} steps on {len(latents)} latents")
    dn = LatentDenoiser(channels=channels, steps=dn_steps, batch_size=batch_size,
                        lr=lr, seed=Rng(seed).draw_seed("dn"))
    dn.fit(latents, train.class_ids, train.style_ids,
           n_classes=len(dataset.class_names), n_styles=len(dataset.style_names),
           sched=sched)
    bundle = BackboneBundle(autoencoder=ae, denoiser=dn, schedule=sched,
                            class_names=list(dataset.class_names),
                            style_names=list(dataset.style_names),
                            recon_psnr=ae.recon_psnr_)
    return bundle.freeze()
