import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from transmrsr.model import get_profile
from transmrsr.prior import (CentroidBank, DivergenceError, GanState, PretrainConfig, build_centroid_bank,
                             generate, kmeans, mapped_latents, nearest_center, new_gan, pretrain,
                             sample_latent, sse, truncate, truncate_torch)

TOY = get_profile("toy")


def brute_force_partition(x, k):
    """Minimum within-cluster SSE over every assignment of points to k non-empty clusters."""
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    best, best_centers = np.inf, None
    for labels in itertools.product(range(k), repeat=len(x)):
        labels = np.array(labels)
        if len(set(labels)) < k or labels[0] != 0:
            continue
        centers = np.array([x[labels == j].mean(0) for j in range(k)])
        cost = sum(((x[labels == j] - centers[j]) ** 2).sum() for j in range(k))
        if cost < best - 1e-12:
            best, best_centers = cost, centers
    return best, best_centers


class TestKMeans:
    def test_four_points(self):
        bank = build_centroid_bank(None, n=2, latents=[0.0, 1.0, 10.0, 11.0])
        assert sorted(bank.centers.ravel().tolist()) == [0.5, 10.5]
        cost, centers = brute_force_partition([0, 1, 10, 11], 2)
        assert sorted(centers.ravel().tolist()) == [0.5, 10.5]
        assert sse(np.array([0, 1, 10, 11.0])[:, None], bank.centers) == cost

    def test_single_cluster_is_mean(self):
        x = np.random.default_rng(0).standard_normal((30, 3))
        centers, labels, _ = kmeans(x, 1, np.random.default_rng(1))
        np.testing.assert_allclose(centers[0], x.mean(0))
        assert not labels.any()

    @pytest.mark.parametrize("seed", range(5))
    def test_separable_instances_match_oracle(self, seed):
        rng = np.random.default_rng(seed)
        means = np.array([[0, 0], [20, 0], [0, 20]])
        x = np.concatenate([m + rng.standard_normal((3, 2)) for m in means])
        cost, _ = brute_force_partition(x, 3)
        centers, _, trace = kmeans(x, 3, rng)
        assert trace[-1] == pytest.approx(cost, rel=1e-12)

    @given(seed=st.integers(0, 10_000), n=st.integers(3, 12), k=st.integers(1, 3), dim=st.integers(1, 3))
    @settings(max_examples=40, deadline=None)
    def test_sse_never_increases(self, seed, n, k, dim):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((n, dim))
        _, _, trace = kmeans(x, k, rng)
        assert all(b <= a + 1e-9 * max(a, 1) for a, b in zip(trace, trace[1:]))

    def test_labels_are_nearest(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((50, 4))
        centers, labels, _ = kmeans(x, 4, rng)
        d2 = ((x[:, None] - centers[None]) ** 2).sum(-1)
        np.testing.assert_array_equal(labels, d2.argmin(1))

    def test_too_few_points(self):
        with pytest.raises(ValueError):
            build_centroid_bank(None, n=5, latents=np.zeros((3, 2)))
        with pytest.raises(ValueError):
            build_centroid_bank(new_gan(TOY), m=2, n=3)

    def test_from_generator(self):
        gan = new_gan(TOY, seed=0)
        bank = build_centroid_bank(gan, m=500, n=4, rng=np.random.default_rng(0))
        assert bank.centers.shape == (4, TOY.latent_dim)
        assert bank.sample_count == 500
        # centers live in the mapped space
        w = mapped_latents(gan, 500, np.random.default_rng(0))
        assert np.abs(bank.centers.mean(0) - w.mean(0)).max() < np.abs(w).max()


class TestBank:
    def test_round_trip_bit_exact(self, tmp_path):
        bank = CentroidBank(np.random.default_rng(0).standard_normal((8, 64)))
        bank.save(tmp_path / "b.tmcb")
        back = CentroidBank.load(tmp_path / "b.tmcb")
        assert back == bank
        assert back.centers.tobytes() == bank.centers.tobytes()

    def test_layout(self, tmp_path):
        CentroidBank([[1.0, 2.0, 3.0]]).save(tmp_path / "b.tmcb")
        raw = (tmp_path / "b.tmcb").read_bytes()
        assert raw[:5] == b"TMCB1"
        assert np.frombuffer(raw[5:13], "<u4").tolist() == [1, 3]
        assert np.frombuffer(raw[13:], "<f4").tolist() == [1.0, 2.0, 3.0]

    def test_rejects_bad_files(self, tmp_path):
        (tmp_path / "x").write_bytes(b"TMCB0" + bytes(8))
        with pytest.raises(ValueError):
            CentroidBank.load(tmp_path / "x")
        CentroidBank([[1.0, 2.0]]).save(tmp_path / "y")
        (tmp_path / "y").write_bytes((tmp_path / "y").read_bytes()[:-2])
        with pytest.raises(ValueError):
            CentroidBank.load(tmp_path / "y")

    def test_rejects_empty_or_nan(self):
        with pytest.raises(ValueError):
            CentroidBank(np.zeros((0, 3)))
        with pytest.raises(ValueError):
            CentroidBank([[np.nan]])


class TestTruncate:
    bank = CentroidBank([[0.0, 2.0], [10.0, 10.0]])

    def test_arithmetic(self):
        np.testing.assert_allclose(truncate([2.0, 0.0], self.bank, 0.5), [1.0, 1.0])

    def test_endpoints(self):
        rng = np.random.default_rng(0)
        bank = CentroidBank(rng.standard_normal((8, 16)))
        f = rng.standard_normal((100, 16))
        assert np.array_equal(truncate(f, bank, 1.0), f)
        nearest = bank.centers[[nearest_center(v, bank) for v in f]].astype(np.float64)
        assert np.array_equal(truncate(f, bank, 0.0), nearest)

    def test_tie_goes_to_lowest_index(self):
        bank = CentroidBank([[2.0, 0.0], [0.0, 2.0]])
        assert nearest_center([0.0, 0.0], bank) == 0
        np.testing.assert_allclose(truncate([0.0, 0.0], bank, 0.0), [2.0, 0.0])

    @given(seed=st.integers(0, 10_000), a=st.floats(0, 1), b=st.floats(0, 1))
    @settings(max_examples=50, deadline=None)
    def test_distance_non_increasing_in_phi(self, seed, a, b):
        lo, hi = sorted((a, b))
        rng = np.random.default_rng(seed)
        bank = CentroidBank(rng.standard_normal((4, 5)))
        f = rng.standard_normal(5) * 3
        d_lo = np.linalg.norm(truncate(f, bank, lo) - f)
        d_hi = np.linalg.norm(truncate(f, bank, hi) - f)
        assert d_hi <= d_lo + 1e-9

    def test_bad_inputs(self):
        with pytest.raises(ValueError):
            truncate([1.0, 2.0], self.bank, 1.5)
        with pytest.raises(ValueError):
            truncate([1.0, 2.0, 3.0], self.bank)
        with pytest.raises(ValueError):
            truncate_torch(torch.zeros(2, 3), torch.zeros(0, 3), 0.5)

    def test_torch_version_passes_gradient(self):
        f = torch.randn(2, 3, 4, requires_grad=True)
        out = truncate_torch(f, torch.randn(5, 4), 0.7)
        out.sum().backward()
        torch.testing.assert_close(f.grad, torch.full_like(f, 0.7))


class TestLatentsAndGenerator:
    def test_sample_latent_reproducible(self):
        a = sample_latent(np.random.default_rng(5), 64)
        b = sample_latent(np.random.default_rng(5), 64)
        c = sample_latent(np.random.default_rng(6), 64)
        assert np.array_equal(a, b) and not np.array_equal(a, c)

    def test_sample_latent_mean(self):
        z = sample_latent(np.random.default_rng(0), 8, 100_000)
        assert np.abs(z.mean(0)).max() < 0.02

    def test_generate_shape_and_determinism(self):
        gan = new_gan(TOY, seed=0)
        z = sample_latent(np.random.default_rng(0), TOY.latent_dim)
        img = generate(z, gan)
        assert img.shape == (64, 64)
        assert np.array_equal(img, generate(z, gan))
        assert not np.array_equal(img, generate(-z, gan))

    def test_generate_dim_mismatch(self):
        with pytest.raises(ValueError):
            generate(np.zeros(3), new_gan(TOY))

    def test_state_round_trip(self, tmp_path):
        gan = new_gan(TOY, seed=2)
        gan.step = 7
        gan.save(tmp_path / "g.pt")
        back = GanState.load(tmp_path / "g.pt")
        assert back.step == 7 and back.seed == 2
        for k, v in gan.generator.state_dict().items():
            assert torch.equal(back.generator.state_dict()[k], v)


class TestPretrain:
    def images(self, n=6):
        rng = np.random.default_rng(0)
        return rng.random((n, 64, 64)).astype(np.float32)

    def test_one_step_changes_generator(self, tmp_path):
        gan = new_gan(TOY, seed=0)
        before = {k: v.clone() for k, v in gan.generator.state_dict().items()}
        pretrain(self.images(), TOY, PretrainConfig(steps=1, batch_size=2, sample_every=1), gan,
                 sample_dir=tmp_path)
        assert gan.step == 1
        assert any(not torch.equal(before[k], v) for k, v in gan.generator.state_dict().items())
        assert (tmp_path / "samples_000001.pgm").exists()

    def test_stable_for_200_steps(self):
        gan = pretrain(self.images(), TOY, PretrainConfig(steps=200, batch_size=2))
        losses = np.array(gan.history)
        assert losses.shape == (200, 2) and np.isfinite(losses).all()
        imgs = generate(sample_latent(np.random.default_rng(0), TOY.latent_dim, 3), gan)
        assert np.isfinite(imgs).all() and imgs.std() > 0

    def test_divergence_detected(self):
        gan = new_gan(TOY)
        with torch.no_grad():
            gan.discriminator.fc.weight.fill_(np.inf)
        with pytest.raises(DivergenceError):
            pretrain(self.images(), TOY, PretrainConfig(steps=1, batch_size=2), gan)

    def test_rejects_bad_images(self):
        with pytest.raises(ValueError):
            pretrain(np.zeros((2, 32, 32)), TOY, PretrainConfig(steps=1))
