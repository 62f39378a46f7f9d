import numpy as np
import pytest

from sketchdiff import pnm
from sketchdiff.datasets import (DatasetSpec, Transform, default_spec,
                                 draw_transform, edge_map, gen_dataset,
                                 jitter_sketch, load_dataset, luminance,
                                 render_item, render_with_transform)
from sketchdiff.errors import DataError
from sketchdiff.metrics import mask_iou
from sketchdiff.rng import Rng

SPEC = default_spec(per_class=10, seed=3)
CANONICAL = Transform(0.0, 0.0, 1.0, 0.0)


def rgb_distance(a, b):
    """Mean per-pixel Euclidean RGB distance."""
    return float(np.mean(np.sqrt(((a - b) ** 2).sum(axis=0))))


class TestRender:
    def test_fixed_seed_identical_image(self):
        a = render_item(SPEC, 2, 0, Rng(5).stream("item"))
        b = render_item(SPEC, 2, 0, Rng(5).stream("item"))
        assert np.array_equal(a, b)

    def test_zero_jitter_is_centered_canonical(self):
        spec = DatasetSpec(classes=SPEC.classes, styles=SPEC.styles,
                           per_class=10, jitter=0.0)
        tf = draw_transform(spec, Rng(1).stream("t"))
        assert tf == CANONICAL
        img, mask = render_with_transform(spec, 0, 0, tf)
        # canonical circle is symmetric around the center
        assert np.array_equal(mask, mask[::-1, :])
        assert np.array_equal(mask, mask[:, ::-1])

    def test_matched_transforms_share_silhouette_but_not_texture(self):
        # two circle classes drawn from identically seeded streams: the
        # binary silhouettes match exactly while the images differ
        g1 = Rng(11).stream("item")
        g2 = Rng(11).stream("item")
        tf1 = draw_transform(SPEC, g1)
        tf2 = draw_transform(SPEC, g2)
        img_a, mask_a = render_with_transform(SPEC, 0, 0, tf1)
        img_b, mask_b = render_with_transform(SPEC, 1, 0, tf2)
        assert np.array_equal(mask_a, mask_b)
        assert rgb_distance(img_a, img_b) > 0.05

    def test_circle_class_ambiguity_quota(self):
        circle_ids = [i for i, c in enumerate(SPEC.classes)
                      if c.silhouette == "circle"]
        assert len(circle_ids) >= 4
        masks, images = {}, {}
        for cid in circle_ids:
            images[cid], masks[cid] = render_with_transform(SPEC, cid, 0, CANONICAL)
        for a in circle_ids:
            for b in circle_ids:
                if a < b:
                    assert mask_iou(masks[a], masks[b]) > 0.95
                    assert rgb_distance(images[a], images[b]) > 0.05

    def test_images_in_range_with_white_background(self):
        for cid in range(len(SPEC.classes)):
            img = render_item(SPEC, cid, 0, Rng(cid).stream("x"))
            assert img.min() >= 0.0 and img.max() <= 1.0
            assert np.allclose(img[:, 0, 0], 1.0)  # corner stays white

    def test_night_style_darkens_and_blue_shifts(self):
        day, mask = render_with_transform(SPEC, 0, 0, CANONICAL)
        night, _ = render_with_transform(SPEC, 0, 1, CANONICAL)
        assert luminance(night)[mask].mean() < luminance(day)[mask].mean()
        day_blue = day[2][mask].mean() / day[:, mask].mean()
        night_blue = night[2][mask].mean() / night[:, mask].mean()
        assert night_blue > day_blue


class TestEdgeMap:
    def test_constant_image_has_no_edges(self):
        img = np.full((3, 32, 32), 0.5)
        assert edge_map(img).sum() == 0.0

    def test_edges_are_binary_and_deterministic(self):
        img = render_item(SPEC, 3, 0, Rng(2).stream("e"))
        e1 = edge_map(img)
        e2 = edge_map(img)
        assert np.array_equal(e1, e2)
        assert set(np.unique(e1)) <= {0.0, 1.0}

    def test_circle_edge_ring_near_analytic_boundary(self):
        img, _ = render_with_transform(SPEC, 0, 0, CANONICAL)
        edges = edge_map(img)
        assert edges.sum() > 0
        yy, xx = np.nonzero(edges)
        # distance of every edge pixel from the analytic circle of radius 10
        r = np.hypot(yy + 0.5 - 16.0, xx + 0.5 - 16.0)
        assert np.all(np.abs(r - 10.0) <= 2.5)
        # and the ring surrounds the whole boundary (all quadrants hit)
        assert len({(y < 16, x < 16) for y, x in zip(yy, xx)}) == 4

    def test_every_class_produces_edges_in_both_styles(self):
        for cid in range(len(SPEC.classes)):
            for sid in range(len(SPEC.styles)):
                img, _ = render_with_transform(SPEC, cid, sid, CANONICAL)
                assert edge_map(img).sum() >= 40, (cid, sid)


class TestJitter:
    def edges(self):
        img, _ = render_with_transform(SPEC, 1, 0, CANONICAL)
        return edge_map(img)

    def test_strength_zero_is_identity(self):
        e = self.edges()
        out = jitter_sketch(e, 0.0, Rng(1).stream("j"))
        assert np.array_equal(out, e)

    def test_mid_strength_iou_band(self):
        e = self.edges()
        ious = []
        for seed in range(20):
            j = jitter_sketch(e, 0.5, Rng(seed).stream("j"))
            ious.append(mask_iou(j, e))
        assert 0.3 < min(ious) and max(ious) < 0.95

    def test_fixed_seed_reproducible(self):
        e = self.edges()
        a = jitter_sketch(e, 0.7, Rng(9).stream("j"))
        b = jitter_sketch(e, 0.7, Rng(9).stream("j"))
        assert np.array_equal(a, b)

    def test_invalid_strength_rejected(self):
        with pytest.raises(ValueError):
            jitter_sketch(self.edges(), 1.5, Rng(0).stream("j"))


class TestGenDataset:
    def test_full_generation_and_load(self, tmp_path):
        spec = default_spec(per_class=10, seed=3)
        manifest = gen_dataset(spec, tmp_path / "d")
        assert len(manifest["items"]) == 80
        splits = [it["split"] for it in manifest["items"]]
        assert splits.count("train") == 72 and splits.count("test") == 8
        ds = load_dataset(tmp_path / "d")
        assert ds.n == 80
        assert ds.class_names == [c.name for c in spec.classes]
        assert ds.images.shape == (80, 3, 32, 32)
        assert set(np.unique(ds.edges)) <= {0.0, 1.0}
        # per-class stratification: exactly one test item per 10
        for cid in range(8):
            cls_splits = [s for s, c in zip(ds.splits, ds.class_ids) if c == cid]
            assert cls_splits.count("test") == 1

    def test_refuses_overwrite_without_force(self, tmp_path):
        spec = default_spec(per_class=2, seed=1)
        gen_dataset(spec, tmp_path / "d")
        with pytest.raises(DataError):
            gen_dataset(spec, tmp_path / "d")
        gen_dataset(spec, tmp_path / "d", force=True)

    def test_regeneration_is_byte_identical(self, tmp_path):
        spec = default_spec(per_class=3, seed=9)
        gen_dataset(spec, tmp_path / "a")
        gen_dataset(spec, tmp_path / "b")
        files_a = sorted(p.relative_to(tmp_path / "a")
                         for p in (tmp_path / "a").rglob("*") if p.is_file())
        files_b = sorted(p.relative_to(tmp_path / "b")
                         for p in (tmp_path / "b").rglob("*") if p.is_file())
        assert files_a == files_b
        for rel in files_a:
            assert (tmp_path / "a" / rel).read_bytes() == \
                   (tmp_path / "b" / rel).read_bytes(), rel

    def test_edges_rederivable_from_stored_images(self, tmp_path):
        spec = default_spec(per_class=2, seed=4)
        gen_dataset(spec, tmp_path / "d")
        ds = load_dataset(tmp_path / "d")
        for i in range(ds.n):
            assert np.array_equal(edge_map(ds.images[i]), ds.edges[i])


class TestPnm:
    def test_ppm_round_trip(self, tmp_path):
        g = Rng(0).stream("img")
        rgb = g.integers(0, 256, size=(32, 32, 3)).astype(np.uint8)
        pnm.write_ppm(tmp_path / "x.ppm", rgb)
        assert np.array_equal(pnm.read_ppm(tmp_path / "x.ppm"), rgb)

    def test_pgm_round_trip(self, tmp_path):
        g = Rng(1).stream("img")
        gray = g.integers(0, 256, size=(16, 24)).astype(np.uint8)
        pnm.write_pgm(tmp_path / "x.pgm", gray)
        assert np.array_equal(pnm.read_pgm(tmp_path / "x.pgm"), gray)

    def test_reader_handles_comments(self, tmp_path):
        body = bytes(range(6))
        (tmp_path / "c.ppm").write_bytes(b"P6\n# a comment\n2 1\n255\n" + body)
        img = pnm.read_ppm(tmp_path / "c.ppm")
        assert img.shape == (1, 2, 3)
        assert img.tobytes() == body

    def test_truncated_file_rejected(self, tmp_path):
        (tmp_path / "bad.ppm").write_bytes(b"P6\n4 4\n255\nxx")
        with pytest.raises(DataError):
            pnm.read_ppm(tmp_path / "bad.ppm")

    def test_wrong_magic_rejected(self, tmp_path):
        (tmp_path / "bad.pgm").write_bytes(b"P6\n1 1\n255\n" + bytes(3))
        with pytest.raises(DataError):
            pnm.read_pgm(tmp_path / "bad.pgm")

    def test_float_conversions_round_trip(self):
        g = Rng(2).stream("img")
        u8 = g.integers(0, 256, size=(8, 8, 3)).astype(np.uint8)
        chw = pnm.to_float_chw(u8)
        assert chw.shape == (3, 8, 8)
        assert np.array_equal(pnm.to_u8_hwc(chw), u8)
