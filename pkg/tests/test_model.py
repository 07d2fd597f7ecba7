import numpy as np
import pytest
import torch

from transmrsr.blocks import ShapeError
from transmrsr.model import (PROFILES, AblationFlags, Decoder, ModelConfig, TransMRSRNet, get_profile,
                             restore_volume)
from transmrsr.prior import new_gan
from transmrsr.volume import Volume, degrade_volume, upsample_to_hr

TOY = get_profile("toy")


def zero_head(model):
    with torch.no_grad():
        model.head.out.weight.zero_()
        model.head.out.bias.zero_()
    return model


class TestConfig:
    def test_full_edges(self):
        assert PROFILES["full"].edges == [256, 128, 64, 32, 16, 8, 4]

    def test_toy_edges(self):
        assert TOY.edges == [64, 32, 16, 8]

    def test_bundle_length(self):
        assert PROFILES["full"].n_style_blocks == 14
        assert TOY.n_style_blocks == 8

    def test_channels_capped(self):
        assert PROFILES["full"].channels == [32, 64, 128, 256, 256, 256, 256]

    def test_bad_geometry(self):
        with pytest.raises(ShapeError):
            ModelConfig(image_size=48, n_levels=6)
        with pytest.raises(ShapeError):
            ModelConfig(heads=3, embed_dim=12)

    def test_unknown_profile(self):
        with pytest.raises(ValueError):
            get_profile("huge")

    def test_sixteen_flag_combinations(self):
        combos = AblationFlags.all_combinations()
        assert len(set(combos)) == 16


class TestForward:
    def test_encoder_pyramid_toy(self):
        model = TransMRSRNet(TOY, AblationFlags(False, False, True, True))
        pyramid, top = model.encode(model.shallow_extract(torch.rand(2, 1, 64, 64)))
        assert [p.shape[-1] for p in pyramid] == TOY.edges
        assert [p.shape[1] for p in pyramid] == TOY.channels
        assert top is pyramid[-1]

    def test_encoder_pyramid_full(self):
        cfg = PROFILES["full"]
        model = TransMRSRNet(cfg, AblationFlags(False, False, False, True))
        with torch.no_grad():
            pyramid, top = model.encode(model.shallow_extract(torch.rand(1, 1, 256, 256)))
            latents = model.project_latents(top)
        assert [p.shape[-1] for p in pyramid] == [256, 128, 64, 32, 16, 8, 4]
        assert latents.shape == (1, 14, 512)

    def test_output_shapes(self):
        model = TransMRSRNet(TOY, AblationFlags(False, False, True, True))
        sr, res = model(torch.rand(3, 1, 64, 64))
        assert sr.shape == res.shape == (3, 1, 64, 64)

    def test_zero_head_is_identity(self):
        model = TransMRSRNet(TOY, AblationFlags(False, False, True, True))
        x = torch.rand(2, 1, 64, 64)
        sr, res = model(x)
        assert torch.equal(sr, x)
        assert not res.any()

    def test_without_skip(self):
        model = zero_head(TransMRSRNet(TOY, AblationFlags(False, False, True, False)))
        sr, res = model(torch.rand(2, 1, 64, 64))
        assert res is None and not sr.any()

    def test_without_mref_ignores_pyramid(self):
        model = TransMRSRNet(TOY, AblationFlags(False, False, False, True))
        assert model.decoder.cwss is None
        x = torch.rand(1, 1, 64, 64)
        pyramid, top = model.encode(model.shallow_extract(x))
        lat = model.project_latents(top)
        zeroed = [torch.zeros_like(p) for p in pyramid]
        assert torch.equal(model.decode(lat, pyramid), model.decode(lat, zeroed))

    def test_mref_uses_pyramid(self):
        model = TransMRSRNet(TOY, AblationFlags(False, False, True, True))
        x = torch.rand(1, 1, 64, 64)
        pyramid, top = model.encode(model.shallow_extract(x))
        lat = model.project_latents(top)
        zeroed = [torch.zeros_like(p) for p in pyramid]
        assert not torch.equal(model.decode(lat, pyramid), model.decode(lat, zeroed))

    def test_batch_independence(self):
        model = TransMRSRNet(TOY, AblationFlags(False, False, True, True)).eval()
        with torch.no_grad():
            model.head.out.weight.normal_()
        x = torch.rand(3, 1, 64, 64)
        torch.testing.assert_close(model(x)[0][1:2], model(x[1:2])[0])

    def test_wrong_input_size(self):
        model = TransMRSRNet(TOY, AblationFlags(False, False, True, True))
        with pytest.raises(ShapeError):
            model(torch.rand(1, 1, 32, 32))

    def test_decoder_latent_count(self):
        dec = Decoder(TOY)
        with pytest.raises(ShapeError):
            dec(torch.zeros(1, 3, TOY.latent_dim))

    def test_predict_clamps(self):
        model = TransMRSRNet(TOY, AblationFlags(False, False, True, True))
        with torch.no_grad():
            model.head.out.bias.fill_(5.0)
        out = model.predict(torch.rand(2, 1, 64, 64))
        assert out.max() == 1.0 and model.training


class TestTruncationAndPrior:
    def test_phi_one_matches_untruncated(self):
        torch.manual_seed(1)
        plain = TransMRSRNet(TOY, AblationFlags(False, False, True, True))
        trunc = TransMRSRNet(TOY, AblationFlags(False, True, True, True), phi=1.0)
        trunc.load_state_dict(plain.state_dict(), strict=False)
        trunc.set_centroids(np.random.default_rng(0).standard_normal((8, TOY.latent_dim)))
        with torch.no_grad():
            for m in (plain, trunc):
                m.head.out.weight.fill_(0.1)
        x = torch.rand(2, 1, 64, 64)
        assert torch.equal(plain(x)[0], trunc(x)[0])

    def test_centroid_dim_checked(self):
        model = TransMRSRNet(TOY, AblationFlags(False, True, True, True))
        with pytest.raises(ShapeError):
            model.set_centroids(np.zeros((8, 3)))

    def test_centroids_need_sdt(self):
        with pytest.raises(ValueError):
            TransMRSRNet(TOY, AblationFlags(False, False, True, True)).set_centroids(np.zeros((2, 64)))

    def test_load_prior_copies_decoder(self):
        gan = new_gan(TOY, seed=3)
        model = TransMRSRNet(TOY, AblationFlags(True, False, True, True))
        model.load_prior(gan.generator)
        for k, v in gan.generator.decoder.state_dict().items():
            assert torch.equal(model.decoder.state_dict()[k], v)

    def test_load_prior_shape_mismatch(self):
        gan = new_gan(ModelConfig(image_size=64, embed_dim=8, latent_dim=64, window=4, heads=2, n_levels=3))
        model = TransMRSRNet(TOY, AblationFlags(True, False, True, True))
        with pytest.raises(RuntimeError):
            model.load_prior(gan.generator)


class TestRestoreVolume:
    def test_identity_model_returns_interpolation(self):
        rng = np.random.default_rng(0)
        data = np.zeros((40, 10, 36), dtype=np.float32)
        data[4:36, 2:8, 4:32] = rng.random((32, 6, 28))
        hr = Volume(data)
        low = degrade_volume(hr, 4, "z")
        model = TransMRSRNet(TOY, AblationFlags(False, False, True, True))
        out = restore_volume(low, 4, "z", model, "x-z", target_len=36)
        interp = upsample_to_hr(low, 4, "z", 36)
        assert out.dims == hr.dims
        np.testing.assert_array_equal(out.data, interp.data)

    def test_blank_slices_stay_blank(self):
        data = np.zeros((20, 6, 20), dtype=np.float32)
        data[5:15, 2, 5:15] = 0.5
        model = TransMRSRNet(TOY, AblationFlags(False, False, True, True))
        with torch.no_grad():
            model.head.out.bias.fill_(0.3)
        out = restore_volume(degrade_volume(Volume(data), 4, "z"), 4, "z", model, target_len=20)
        assert not out.data[:, 0].any()
        assert out.data[:, 2].min() > 0

    def test_plane_must_contain_axis(self):
        model = TransMRSRNet(TOY, AblationFlags(False, False, True, True))
        with pytest.raises(ValueError):
            restore_volume(Volume(np.ones((8, 8, 2))), 4, "z", model, plane="x-y")
