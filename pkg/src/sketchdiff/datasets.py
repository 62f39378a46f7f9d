"""Synthetic shape dataset: the training corpus and its edge-map sketches.

The default spec deliberately makes half of the classes share one circular
silhouette (they differ only in texture and palette), which is the key
stressor the translation pipeline must overcome: identical sketches that
must still generate class-distinctive images. Backgrounds are always white.

Images are rendered analytically at 4x supersampling and box-averaged down,
so generation is bit-reproducible from the seed alone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import pnm
from .errors import DataError
from .layers import _resize_matrix
from .rng import Rng

SUPERSAMPLE = 4
BASE_RADIUS = 10.0  # pixels, before scale jitter
EDGE_TAU = 0.15
LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class ClassSpec:
    name: str
    silhouette: str  # circle | square | triangle | star | crescent
    texture: str     # solid | rings | radial-stripes | dots
    palette: tuple   # (base_rgb, accent_rgb)


@dataclass(frozen=True)
class StyleSpec:
    name: str
    # affine palette transform: rgb' = rgb * gain + bias (then clipped)
    gain: tuple = (1.0, 1.0, 1.0)
    bias: tuple = (0.0, 0.0, 0.0)


@dataclass(frozen=True)
class DatasetSpec:
    classes: tuple
    styles: tuple
    per_class: int = 200
    image_size: int = 32
    seed: int = 7
    jitter: float = 1.0  # 0 disables position/scale/rotation randomization

    def class_names(self):
        return [c.name for c in self.classes]

    def style_names(self):
        return [s.name for s in self.styles]


def default_spec(per_class: int = 200, seed: int = 7) -> DatasetSpec:
    """Eight classes; the first four share an identical circular silhouette.

    The circle classes also pair up on base color (orange/basketball and
    soccer/watermelon), so within a pair only the texture separates them:
    silhouette AND palette stay ambiguous, texture carries the class.
    """
    classes = (
        ClassSpec("orange", "circle", "solid",
                  ((1.00, 0.58, 0.06), (0.85, 0.40, 0.02))),
        ClassSpec("basketball", "circle", "rings",
                  ((1.00, 0.58, 0.06), (0.10, 0.05, 0.04))),
        ClassSpec("soccer", "circle", "dots",
                  ((0.55, 0.68, 0.30), (0.05, 0.05, 0.08))),
        ClassSpec("watermelon", "circle", "radial-stripes",
                  ((0.55, 0.68, 0.30), (0.06, 0.30, 0.10))),
        ClassSpec("square", "square", "solid",
                  ((0.16, 0.35, 0.72), (0.10, 0.22, 0.50))),
        ClassSpec("triangle", "triangle", "solid",
                  ((0.82, 0.18, 0.16), (0.60, 0.10, 0.10))),
        ClassSpec("star", "star", "solid",
                  ((0.85, 0.62, 0.05), (0.65, 0.45, 0.02))),
        ClassSpec("crescent", "crescent", "solid",
                  ((0.45, 0.28, 0.58), (0.30, 0.18, 0.42))),
    )
    styles = (
        StyleSpec("day"),
        StyleSpec("night", gain=(0.30, 0.34, 0.55), bias=(0.02, 0.03, 0.18)),
    )
    return DatasetSpec(classes=classes, styles=styles, per_class=per_class, seed=seed)


@dataclass(frozen=True)
class Transform:
    dx: float
    dy: float
    scale: float
    rot: float


def draw_transform(spec: DatasetSpec, rng: np.random.Generator) -> Transform:
    """Position/scale/rotation jitter; draw order is part of the contract so
    two classes rendered from identically seeded streams share a transform."""
    u = rng.uniform(-1.0, 1.0, size=3)
    ang = rng.uniform(0.0, 2.0 * np.pi)
    j = spec.jitter
    return Transform(dx=u[0] * 3.0 * j, dy=u[1] * 3.0 * j,
                     scale=1.0 + u[2] * 0.15 * j, rot=ang * j)


def _inside(silhouette: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Point-in-shape test in object coordinates (unit characteristic radius)."""
    if silhouette == "circle":
        return u * u + v * v <= 1.0
    if silhouette == "square":
        k = 0.82
        return (np.abs(u) <= k) & (np.abs(v) <= k)
    if silhouette == "triangle":
        # equilateral, apex up (image y grows downward), inscribed in the unit circle
        a = (0.0, -1.0)
        b = (np.sin(2 * np.pi / 3), -np.cos(2 * np.pi / 3))
        c = (-b[0], b[1])
        def cross(p, q):
            return (q[0] - p[0]) * (v - p[1]) - (q[1] - p[1]) * (u - p[0])
        h1, h2, h3 = cross(a, b), cross(b, c), cross(c, a)
        return ((h1 <= 0) & (h2 <= 0) & (h3 <= 0)) | ((h1 >= 0) & (h2 >= 0) & (h3 >= 0))
    if silhouette == "star":
        phi = np.arctan2(v, u) + 0.5 * np.pi  # apex up
        r = np.hypot(u, v)
        spike = np.mod(phi, 2 * np.pi / 5)
        frac = np.abs(spike - np.pi / 5) / (np.pi / 5)  # 1 at point, 0 at valley
        limit = 0.42 + (1.0 - 0.42) * frac ** 1.6
        return r <= limit
    if silhouette == "crescent":
        disk = u * u + v * v <= 1.0
        hole = (u - 0.52) ** 2 + v * v <= 0.78 ** 2
        return disk & ~hole
    raise ValueError(f"unknown silhouette {silhouette!r}")


def _texture(cls: ClassSpec, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Per-point RGB in object coordinates; accent drawn over base."""
    base = np.array(cls.palette[0])
    accent = np.array(cls.palette[1])
    h, w = u.shape
    rgb = np.empty((h, w, 3))
    rgb[...] = base
    if cls.texture == "solid":
        return rgb
    if cls.texture == "rings":
        lw = 0.07
        seam = (np.abs(u) < lw) | (np.abs(v) < lw)
        rgb[seam] = accent
        return rgb
    if cls.texture == "dots":
        spots = np.hypot(u, v) < 0.26
        for k in range(3):
            ang = 2 * np.pi * k / 3 + 0.4
            spots |= np.hypot(u - 0.62 * np.cos(ang), v - 0.62 * np.sin(ang)) < 0.22
        rgb[spots] = accent
        return rgb
    if cls.texture == "radial-stripes":
        phi = np.arctan2(v, u)
        wedge = np.floor(phi / (2.0 * np.pi / 3.0)).astype(int)
        rgb[wedge % 2 == 0] = accent
        return rgb
    raise ValueError(f"unknown texture {cls.texture!r}")


def render_with_transform(spec: DatasetSpec, class_id: int, style_id: int,
                          tf: Transform) -> tuple[np.ndarray, np.ndarray]:
    """Render one item; returns (image (3,S,S) float in [0,1], silhouette mask).

    The mask is the geometric silhouette at output resolution (coverage >= 0.5),
    independent of texture and palette.
    """
    cls = spec.classes[class_id]
    style = spec.styles[style_id]
    s = spec.image_size
    ss = s * SUPERSAMPLE
    # supersample grid in pixel units
    coords = (np.arange(ss) + 0.5) / SUPERSAMPLE
    gx, gy = np.meshgrid(coords, coords)  # gx: column/x, gy: row/y
    cx = s / 2.0 + tf.dx
    cy = s / 2.0 + tf.dy
    r = BASE_RADIUS * tf.scale
    x = (gx - cx) / r
    y = (gy - cy) / r
    cos_t, sin_t = np.cos(tf.rot), np.sin(tf.rot)
    u = cos_t * x + sin_t * y
    v = -sin_t * x + cos_t * y
    mask_ss = _inside(cls.silhouette, u, v)
    rgb = _texture(cls, u, v)
    rgb = np.clip(rgb * np.array(style.gain) + np.array(style.bias), 0.0, 1.0)
    canvas = np.ones((ss, ss, 3))
    canvas[mask_ss] = rgb[mask_ss]
    # box-average down to output resolution
    img = canvas.reshape(s, SUPERSAMPLE, s, SUPERSAMPLE, 3).mean(axis=(1, 3))
    coverage = mask_ss.reshape(s, SUPERSAMPLE, s, SUPERSAMPLE).mean(axis=(1, 3))
    return img.transpose(2, 0, 1), coverage >= 0.5


def render_item(spec: DatasetSpec, class_id: int, style_id: int,
                rng: np.random.Generator) -> np.ndarray:
    """Render one randomized item image (3,S,S); transform draws come first."""
    tf = draw_transform(spec, rng)
    img, _ = render_with_transform(spec, class_id, style_id, tf)
    return img


def luminance(image_chw: np.ndarray) -> np.ndarray:
    return np.tensordot(LUMA, image_chw, axes=([0], [0]))


def _dilate(mask: np.ndarray) -> np.ndarray:
    """Binary dilation with a 3x3 structuring element."""
    out = mask.copy()
    out[1:, :] |= mask[:-1, :]
    out[:-1, :] |= mask[1:, :]
    out[:, 1:] |= mask[:, :-1]
    out[:, :-1] |= mask[:, 1:]
    out[1:, 1:] |= mask[:-1, :-1]
    out[1:, :-1] |= mask[:-1, 1:]
    out[:-1, 1:] |= mask[1:, :-1]
    out[:-1, :-1] |= mask[1:, 1:]
    return out


def edge_map(image_chw: np.ndarray) -> np.ndarray:
    """Deterministic contour operator: Sobel magnitude on luminance,
    threshold at tau=0.15, one-pixel dilation. Returns {0,1} float (H,W)."""
    lum = luminance(np.asarray(image_chw, dtype=np.float64))
    p = np.pad(lum, 1, mode="edge")
    # Sobel responses normalized so a unit step yields magnitude ~1
    gx = (p[:-2, 2:] + 2 * p[1:-1, 2:] + p[2:, 2:]
          - p[:-2, :-2] - 2 * p[1:-1, :-2] - p[2:, :-2]) / 4.0
    gy = (p[2:, :-2] + 2 * p[2:, 1:-1] + p[2:, 2:]
          - p[:-2, :-2] - 2 * p[:-2, 1:-1] - p[:-2, 2:]) / 4.0
    edges = np.hypot(gx, gy) > EDGE_TAU
    return _dilate(edges).astype(np.float64)


def jitter_sketch(edges: np.ndarray, strength: float,
                  rng: np.random.Generator) -> np.ndarray:
    """Simulate freehand deviation from a clean edge map.

    A smooth random displacement field (max magnitude strength*3 px) warps
    the strokes, then up to strength*20% of edge pixels are dropped in small
    blobs. strength=0 is the identity.
    """
    if not 0.0 <= strength <= 1.0:
        raise ValueError(f"strength must be in [0,1], got {strength}")
    edges = np.asarray(edges, dtype=np.float64)
    h, w = edges.shape
    coarse = rng.standard_normal((2, 4, 4))
    drop_u = rng.uniform(size=1024)  # reserved draws keep the stream layout fixed
    if strength == 0.0:
        return edges.copy()
    rh = _resize_matrix(4, h)
    rw = _resize_matrix(4, w)
    field = np.einsum("oi,cij,pj->cop", rh, coarse, rw)
    peak = np.max(np.abs(field))
    if peak > 0:
        field = field / peak * 3.0 * strength
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    src_r = np.clip(np.rint(rows + field[0]), 0, h - 1).astype(int)
    src_c = np.clip(np.rint(cols + field[1]), 0, w - 1).astype(int)
    warped = edges[src_r, src_c]
    warped = warped.copy()
    on = np.flatnonzero(warped.reshape(-1) > 0)
    n_drop = int(round(strength * 0.2 * on.size))
    if n_drop > 0 and on.size > 0:
        # each blob clears a 2x2 patch, so ~n_drop/4 seed points
        n_seeds = max(1, n_drop // 4)
        picks = (drop_u[:n_seeds] * on.size).astype(int)
        for s0 in on[picks]:
            r0, c0 = divmod(int(s0), w)
            warped[r0:min(r0 + 2, h), c0:min(c0 + 2, w)] = 0.0
    return (warped > 0).astype(np.float64)


@dataclass
class Dataset:
    """In-memory view of a generated dataset directory."""

    root: Path
    image_size: int
    class_names: list[str]
    style_names: list[str]
    images: np.ndarray   # (N, 3, S, S) float64
    edges: np.ndarray    # (N, S, S) float64 in {0,1}
    class_ids: np.ndarray
    style_ids: np.ndarray
    splits: list[str]
    item_ids: list[int]

    @property
    def n(self) -> int:
        return len(self.item_ids)

    def indices(self, split: str | None = None) -> np.ndarray:
        if split is None:
            return np.arange(self.n)
        return np.array([i for i, s in enumerate(self.splits) if s == split],
                        dtype=int)

    def subset(self, split: str) -> "Dataset":
        idx = self.indices(split)
        return Dataset(root=self.root, image_size=self.image_size,
                       class_names=self.class_names, style_names=self.style_names,
                       images=self.images[idx], edges=self.edges[idx],
                       class_ids=self.class_ids[idx], style_ids=self.style_ids[idx],
                       splits=[self.splits[i] for i in idx],
                       item_ids=[self.item_ids[i] for i in idx])


def gen_dataset(spec: DatasetSpec, out_dir, force: bool = False) -> dict:
    """Render the full dataset to disk; returns the manifest dict.

    Layout: out/manifest.json, out/img/NNNNNN.ppm, out/edge/NNNNNN.pgm.
    The train/test split is 90/10, stratified per class. Regeneration with
    the same spec is byte-identical.
    """
    out = Path(out_dir)
    manifest_path = out / "manifest.json"
    if manifest_path.exists() and not force:
        raise DataError(f"{manifest_path} already exists; pass force=True "
                        "(--force) to overwrite")
    rng = Rng(spec.seed)
    n_classes = len(spec.classes)
    n_test = round(spec.per_class * 0.1)
    test_picks = {}
    for cid, cls in enumerate(spec.classes):
        perm = rng.stream("split", cls.name).permutation(spec.per_class)
        test_picks[cid] = set(int(i) for i in perm[:n_test])
    items = []
    for item_id in range(n_classes * spec.per_class):
        cid = item_id // spec.per_class
        within = item_id % spec.per_class
        g = rng.stream("item", str(item_id))
        tf = draw_transform(spec, g)
        sid = int(g.integers(0, len(spec.styles)))
        img, _ = render_with_transform(spec, cid, sid, tf)
        u8 = pnm.to_u8_hwc(img)
        edges = edge_map(pnm.to_float_chw(u8))
        img_rel = f"img/{item_id:06d}.ppm"
        edge_rel = f"edge/{item_id:06d}.pgm"
        pnm.write_ppm(out / img_rel, u8)
        pnm.write_pgm(out / edge_rel, pnm.gray_to_u8(edges))
        items.append({"id": item_id, "image": img_rel, "edges": edge_rel,
                      "class_id": cid, "style_id": sid,
                      "split": "test" if within in test_picks[cid] else "train"})
    manifest = {
        "version": 1,
        "image_size": spec.image_size,
        "classes": [{"id": i, "name": c.name} for i, c in enumerate(spec.classes)],
        "styles": [{"id": i, "name": s.name} for i, s in enumerate(spec.styles)],
        "items": items,
    }
    manifest_path.write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n",
                             encoding="utf-8")
    return manifest


def load_dataset(root) -> Dataset:
    """Load a generated dataset directory back into memory."""
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"no manifest.json under {root}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataError(f"{manifest_path}: invalid JSON: {e}") from e
    items = manifest["items"]
    size = manifest["image_size"]
    images = np.empty((len(items), 3, size, size))
    edges = np.empty((len(items), size, size))
    class_ids = np.empty(len(items), dtype=int)
    style_ids = np.empty(len(items), dtype=int)
    splits, item_ids = [], []
    for i, item in enumerate(items):
        images[i] = pnm.to_float_chw(pnm.read_ppm(root / item["image"]))
        edges[i] = pnm.gray_to_float(pnm.read_pgm(root / item["edges"]))
        class_ids[i] = item["class_id"]
        style_ids[i] = item["style_id"]
        splits.append(item["split"])
        item_ids.append(item["id"])
    return Dataset(root=root, image_size=size,
                   class_names=[c["name"] for c in manifest["classes"]],
                   style_names=[s["name"] for s in manifest["styles"]],
                   images=images, edges=(edges > 0.5).astype(np.float64),
                   class_ids=class_ids, style_ids=style_ids,
                   splits=splits, item_ids=item_ids)
