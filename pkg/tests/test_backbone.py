import numpy as np
import pytest
from sklearn.exceptions import NotFittedError

from sketchdiff.backbone import (BackboneBundle, ConvAutoencoder, LatentDenoiser,
                                 train_backbone)
from sketchdiff.checkpoint import content_digest
from sketchdiff.errors import DigestMismatchError, FrozenBundleError, ModelError
from sketchdiff.rng import Rng
from sketchdiff.schedule import ddpm_loss, make_schedule, q_sample


class TestAutoencoder:
    def test_loss_decreases(self, mini_dataset):
        ae = ConvAutoencoder(channels=8, steps=250, batch_size=8, seed=0)
        ae.fit(mini_dataset.images)
        first = np.median(ae.losses_[:25])
        last = np.median(ae.losses_[-25:])
        assert last < 0.25 * first

    def test_single_image_overfit(self, mini_dataset):
        ae = ConvAutoencoder(channels=8, steps=600, batch_size=4, seed=0)
        ae.fit(mini_dataset.images[:1])
        assert ae.recon_mse_ < 1e-4

    def test_encode_decode_contracts(self, mini_stack):
        _, bundle, _ = mini_stack
        ae = bundle.autoencoder
        img = np.clip(Rng(0).stream("i").uniform(size=(3, 32, 32)), 0, 1)
        z = ae.transform(img)
        assert z.shape == (4, 8, 8)
        assert np.array_equal(z, ae.transform(img))  # deterministic
        out = ae.inverse_transform(z)
        assert out.shape == (3, 32, 32)
        assert out.min() >= 0.0 and out.max() <= 1.0
        # re-encoding a reconstruction stays near the first encoding
        z2 = ae.transform(out)
        assert np.mean((z2 - z) ** 2) < 10 * max(ae.recon_mse_, 1e-3)

    def test_rejects_out_of_range_pixels(self, mini_stack):
        _, bundle, _ = mini_stack
        with pytest.raises(ValueError):
            bundle.encode_image(np.full((3, 32, 32), 1.5))

    def test_unfitted_raises(self):
        with pytest.raises(NotFittedError):
            ConvAutoencoder().transform(np.zeros((3, 32, 32)))

    def test_scaled_latent_std_in_band(self, mini_stack):
        ds, bundle, _ = mini_stack
        z = bundle.encode_image(ds.subset("train").images)
        std = z.std(axis=(0, 2, 3))
        assert np.all((0.8 <= std) & (std <= 1.25))

    def test_decode_small_perturbation_is_small(self, mini_stack):
        _, bundle, _ = mini_stack
        z = bundle.encode_image(np.clip(Rng(3).stream("x").uniform(size=(3, 32, 32)), 0, 1))
        a = bundle.decode_latent(z)
        b = bundle.decode_latent(z + 1e-6)
        assert np.max(np.abs(a - b)) < 1e-2


class TestCondTable:
    def test_additive_rule(self, mini_stack):
        _, bundle, _ = mini_stack
        base = bundle.embed_condition(2, None)
        styled = bundle.embed_condition(2, 1)
        style_row = bundle.cond.style_emb.params["table"][1]
        assert np.allclose(styled - base, style_row)

    def test_distinct_classes_after_training(self, full_stack):
        _, bundle, _, _ = full_stack
        vecs = [bundle.embed_condition(c, None) for c in range(8)]
        for a in range(8):
            for b in range(a + 1, 8):
                assert np.linalg.norm(vecs[a] - vecs[b]) > 0.1

    def test_id_range_checked(self, mini_stack):
        _, bundle, _ = mini_stack
        with pytest.raises(ValueError):
            bundle.embed_condition(99, None)
        with pytest.raises(ValueError):
            bundle.embed_condition(0, 99)


class TestDenoiser:
    def test_deterministic_eval(self, mini_stack):
        _, bundle, _ = mini_stack
        g = Rng(1).stream("z")
        z = g.standard_normal((4, 8, 8))
        cond = bundle.embed_condition(1, None)
        a = bundle.denoise_eps(z, 5, cond)
        b = bundle.denoise_eps(z, 5, cond)
        assert np.array_equal(a, b)
        assert a.shape == z.shape

    def test_t_zero_allowed_t_range_checked(self, mini_stack):
        _, bundle, _ = mini_stack
        z = Rng(2).stream("z").standard_normal((4, 8, 8))
        cond = bundle.embed_condition(0, None)
        bundle.denoise_eps(z, 0, cond)  # feature-extraction timestep
        with pytest.raises(ValueError):
            bundle.denoise_eps(z, bundle.schedule.T + 1, cond)

    def test_tap_stability(self, mini_stack):
        _, bundle, _ = mini_stack
        g = Rng(3).stream("z")
        cond = bundle.embed_condition(0, None)
        _, taps1 = bundle.denoise_eps(g.standard_normal((4, 8, 8)), 3, cond,
                                      want_taps=True)
        _, taps2 = bundle.denoise_eps(g.standard_normal((4, 8, 8)), 7, cond,
                                      want_taps=True)
        assert list(taps1) == list(taps2) == ["down1", "down2", "mid", "up1", "up2"]
        for name in taps1:
            assert taps1[name].shape == taps2[name].shape
            assert taps1[name].shape[0] == bundle.tap_channels[name]
        assert bundle.feature_dim == sum(bundle.tap_channels.values())

    def test_training_quality_gates(self, full_stack):
        # held-out eps loss under half the untrained level; correlation > 0.5
        ds, bundle, _, _ = full_stack
        test = ds.subset("test")
        lat = bundle.encode_image(test.images)
        g = Rng(42).stream("probe")
        t_mid = bundle.schedule.T // 2
        eps = g.standard_normal(lat.shape)
        z_t = q_sample(lat, t_mid, eps, bundle.schedule)
        cond = bundle.cond.batch(test.class_ids, None)
        eps_hat = bundle.denoise_eps(z_t, t_mid, cond)
        trained_loss = ddpm_loss(eps, eps_hat)
        untrained = LatentDenoiser(channels=bundle.denoiser.channels,
                                   steps=0, seed=9)
        untrained.fit(lat, test.class_ids, test.style_ids, 8, 2, bundle.schedule)
        untrained_loss = ddpm_loss(eps, untrained.unet_.forward(
            z_t, t_mid, untrained.cond_.batch(test.class_ids, None)))
        assert trained_loss < 0.5 * untrained_loss
        corr = np.corrcoef(eps.reshape(-1), eps_hat.reshape(-1))[0, 1]
        assert corr > 0.5

    def test_loss_trend(self, mini_stack):
        _, bundle, _ = mini_stack
        losses = bundle.denoiser.losses_
        assert np.median(losses[-100:]) < np.median(losses[:100])


class TestFreezeAndPersistence:
    def test_frozen_params_are_immutable(self, mini_stack):
        _, bundle, _ = mini_stack
        params = bundle.named_params()
        name = sorted(params)[0]
        with pytest.raises(ValueError):
            params[name][...] = 0.0

    def test_digest_matches_recomputation(self, mini_stack):
        _, bundle, _ = mini_stack
        assert bundle.check_digest() == bundle.content_digest
        assert bundle.content_digest == content_digest(bundle.named_params())

    def test_freeze_untrained_rejected(self):
        bundle = BackboneBundle(autoencoder=ConvAutoencoder(),
                                denoiser=LatentDenoiser(),
                                schedule=make_schedule(),
                                class_names=["a"], style_names=["s"])
        with pytest.raises(FrozenBundleError):
            bundle.freeze()

    def test_save_load_round_trip(self, mini_stack, tmp_path):
        _, bundle, _ = mini_stack
        path = tmp_path / "bb.dsk"
        digest = bundle.save(path)
        loaded = BackboneBundle.load(path)
        assert loaded.content_digest == digest
        assert loaded.frozen
        assert loaded.class_names == bundle.class_names
        assert loaded.schedule.T == bundle.schedule.T
        # functional equivalence after the f32 round trip
        g = Rng(5).stream("z")
        z = g.standard_normal((4, 8, 8))
        cond_a = bundle.embed_condition(1, None)
        cond_b = loaded.embed_condition(1, None)
        a = bundle.denoise_eps(z, 3, cond_a)
        b = loaded.denoise_eps(z, 3, cond_b)
        assert np.max(np.abs(a - b)) < 1e-5

    def test_loading_truncated_file_fails(self, mini_stack, tmp_path):
        _, bundle, _ = mini_stack
        path = tmp_path / "bb.dsk"
        bundle.save(path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(ModelError):
            BackboneBundle.load(path)

    def test_training_is_seed_reproducible(self, mini_dataset):
        a = train_backbone(mini_dataset, ae_steps=40, dn_steps=60,
                           batch_size=4, channels=8, seed=5)
        b = train_backbone(mini_dataset, ae_steps=40, dn_steps=60,
                           batch_size=4, channels=8, seed=5)
        assert a.content_digest == b.content_digest
        c = train_backbone(mini_dataset, ae_steps=40, dn_steps=60,
                           batch_size=4, channels=8, seed=6)
        assert c.content_digest != a.content_digest
