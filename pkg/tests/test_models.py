import numpy as np
import pytest
import torch
import torch.nn.functional as F

from inloc import models as mz


def one_hot(idx, batch=1):
    return F.one_hot(torch.tensor([idx] * batch), 8).float()


@pytest.fixture(scope="module")
def gen():
    return mz.build_generator(0.25, seed=11)


@pytest.fixture(scope="module")
def disc():
    return mz.build_discriminator(0.25, seed=12)


class TestGenerator:
    def test_output_shapes_and_ranges(self, gen):
        x = torch.randn(2, 1, 150, 3)
        img, probs = gen(x, one_hot(3, 2))
        assert img.shape == (2, 1, 150, 3)
        assert float(img.min()) > -1.0 and float(img.max()) < 1.0
        assert torch.allclose(probs.sum(dim=1), torch.ones(2), atol=1e-6)

    def test_tanh_bound_for_extreme_inputs(self, gen):
        x = torch.full((1, 1, 150, 3), 1e4)
        img, probs = gen(x, one_hot(0))
        assert torch.isfinite(img).all()
        assert float(img.abs().max()) <= 1.0
        assert torch.allclose(probs.sum(dim=1), torch.ones(1), atol=1e-6)

    def test_concatenated_input_has_nine_channels(self, gen):
        plane = gen.label_plane(one_hot(5))
        assert plane.shape == (1, 8, 150, 3)
        x = torch.randn(1, 1, 150, 3)
        assert torch.cat([x, plane], dim=1).shape[1] == 9

    def test_soft_labels_accepted(self, gen):
        x = torch.randn(1, 1, 150, 3)
        soft = torch.full((1, 8), 1 / 8.0)
        img, probs = gen(x, soft)
        assert img.shape == (1, 1, 150, 3)

    def test_bottleneck_label_tap(self):
        g = mz.build_generator(0.125, seed=0, label_tap="bottleneck")
        x = torch.randn(1, 1, 150, 3)
        img, probs = g(x, one_hot(1))
        assert probs.shape == (1, 8)
        assert torch.allclose(probs.sum(dim=1), torch.ones(1), atol=1e-6)

    def test_spatial_shape_preserved_through_all_stages(self, gen):
        x = torch.randn(1, 1, 150, 3)
        h = torch.cat([x, gen.label_plane(one_hot(0))], dim=1)
        h = gen.encoder(h)
        assert h.shape[2:] == (150, 3)
        h = gen.res_blocks(h)
        assert h.shape[2:] == (150, 3)
        h = gen.decoder(h)
        assert h.shape[2:] == (150, 3)


class TestDiscriminator:
    def test_patch_and_label_shapes(self, disc):
        x = torch.randn(2, 1, 150, 3)
        patch, probs = disc(x)
        assert patch.shape == (2, 1, 150, 3)
        assert probs.shape == (2, 8)
        assert torch.allclose(probs.sum(dim=1), torch.ones(2), atol=1e-6)

    def test_softmax_bound_for_extreme_inputs(self, disc):
        x = torch.full((1, 1, 150, 3), -1e4)
        _, probs = disc(x)
        assert torch.isfinite(probs).all()
        assert float(probs.min()) >= 0.0 and float(probs.max()) <= 1.0

    def test_receptive_field_support(self, disc):
        # a single-pixel perturbation may only move patch outputs in rows
        # r-5..r (six rows; five stacked height-2 kernels padded at the
        # bottom) and any of the 3 columns
        torch.manual_seed(0)
        x0 = torch.randn(1, 1, 150, 3)
        with torch.no_grad():
            p0 = disc(x0)[0][0, 0]
        for r, c in [(0, 0), (5, 1), (75, 1), (120, 0), (149, 2)]:
            x1 = x0.clone()
            x1[0, 0, r, c] += 0.7
            with torch.no_grad():
                p1 = disc(x1)[0][0, 0]
            delta = (p1 - p0).abs().numpy()
            outside = np.ones((150, 3), dtype=bool)
            outside[max(0, r - 5) : r + 1, :] = False
            assert delta[outside].max() == 0.0
            assert delta[~outside].max() > 0.0

    def test_hidden_feature_width(self, disc):
        out = disc.forward_full(torch.randn(1, 1, 150, 3))
        assert out.features.shape == (1, 128, 150, 3)  # 512 * 0.25 channels
        assert out.features.flatten(1).shape[1] == 150 * 3 * 128

    def test_patch_head_is_1x1(self, disc):
        assert disc.patch_head.kernel_size == (1, 1)


class TestBaseline:
    def test_softmax_output(self):
        net = mz.build_baseline_classifier(0.25, seed=4)
        probs = net(torch.randn(3, 1, 150, 3))
        assert probs.shape == (3, 8)
        assert torch.allclose(probs.sum(dim=1), torch.ones(3), atol=1e-6)

    def test_untrained_accuracy_near_chance(self):
        # over 3 seeds, argmax of an untrained net on balanced random data
        # stays well below a trained regime and around 1/8
        rng = np.random.default_rng(0)
        images = rng.uniform(-1, 1, (200, 150, 3)).astype(np.float32)
        labels = np.arange(200) % 8
        accs = []
        for seed in range(3):
            net = mz.build_baseline_classifier(0.125, seed=seed)
            with torch.no_grad():
                probs = net(mz.images_to_tensor(images))
            accs.append(float((probs.argmax(1).numpy() == labels).mean()))
        assert 0.0 <= np.mean(accs) < 0.3  # chance is 0.125


class TestInit:
    def test_weight_standard_deviation(self):
        g = mz.build_generator(1.0, seed=3)
        for name, p in g.named_parameters():
            if p.dim() >= 2 and p.numel() >= 10_000:
                sd = float(p.detach().std())
                assert 0.018 <= sd <= 0.022, (name, sd)

    def test_biases_zero(self):
        d = mz.build_discriminator(0.5, seed=5)
        for name, p in d.named_parameters():
            if p.dim() == 1:
                assert float(p.abs().max()) == 0.0, name

    def test_same_seed_identical(self):
        a = mz.build_generator(0.25, seed=9).state_dict()
        b = mz.build_generator(0.25, seed=9).state_dict()
        assert all(torch.equal(a[k], b[k]) for k in a)

    def test_different_seed_differs(self):
        a = mz.build_generator(0.25, seed=9).state_dict()
        b = mz.build_generator(0.25, seed=10).state_dict()
        assert any(not torch.equal(a[k], b[k]) for k in a)

    def test_invalid_width_rejected(self):
        with pytest.raises(ValueError):
            mz.Generator(width_mult=0.0)
        with pytest.raises(ValueError):
            mz.Discriminator(width_mult=1.5)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path, disc, gen):
        nets = {"g_st": gen, "g_ts": mz.build_generator(0.25, seed=2), "d_s": disc, "d_t": mz.build_discriminator(0.25, seed=3)}
        path = mz.save_checkpoint(
            tmp_path / "ck.pt",
            kind="accyclegan",
            epoch=7,
            arch={"width_mult": 0.25, "n_res_blocks": 9, "label_tap": "image"},
            nets=nets,
        )
        ckpt = mz.load_checkpoint(path)
        assert ckpt["epoch"] == 7
        rebuilt = mz.rebuild_networks(ckpt)
        x = torch.randn(1, 1, 150, 3)
        t = one_hot(4)
        for name in ("g_st", "g_ts"):
            nets[name].eval()
            a = nets[name](x, t)
            b = rebuilt[name](x, t)
            assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])
        for name in ("d_s", "d_t"):
            nets[name].eval()
            a = nets[name](x)
            b = rebuilt[name](x)
            assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])

    def test_missing_checkpoint_errors(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            mz.load_checkpoint(tmp_path / "nope.pt")

    def test_describe_reports_layers(self, disc):
        info = mz.describe(disc)
        assert info["role"] == "discriminator"
        assert info["parameter_count"] > 0
        assert any("patch_head" in name for name in info["layers"])
