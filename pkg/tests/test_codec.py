import threading

import numpy as np
import pytest
import torch

from discernible.codec import (
    CodecArch,
    CodecModel,
    LatentCode,
    SurrogateBinarizer,
    binarize,
    compress_image,
    decode,
    decompress_image,
    encode,
    pad_image,
    padded_size,
    tile,
    untile,
)
from discernible.errors import ConfigError, FormatError, NumericError, ShapeError


@pytest.fixture(scope="module")
def model():
    return CodecModel(CodecArch(widths=(8, 16), latent_channels=32, max_steps=2, seed=3)).eval()


@pytest.fixture
def patch():
    return np.random.default_rng(0).random((32, 32, 3)).astype(np.float32)


class TestBinarize:
    def test_infer_sign(self):
        out = binarize(torch.tensor([0.7, 0.0, -0.2, -1.0, 1.0]), "infer")
        assert out.tolist() == [1.0, 1.0, -1.0, -1.0, 1.0]

    def test_train_frequency(self):
        gen = torch.Generator().manual_seed(0)
        out = binarize(torch.full((10_000,), 0.7), "train", gen)
        assert set(out.unique().tolist()) == {-1.0, 1.0}
        assert abs(float((out > 0).float().mean()) - 0.85) <= 0.02

    def test_out_of_range(self):
        with pytest.raises(NumericError):
            binarize(torch.tensor([1.01]), "infer")
        with pytest.raises(NumericError):
            binarize(torch.tensor([float("nan")]), "train")
        binarize(torch.tensor([1.0 + 5e-7]), "infer")  # within tolerance

    def test_unknown_mode(self):
        with pytest.raises(ConfigError):
            binarize(torch.zeros(2), "round")

    def test_straight_through_identity_jacobian(self):
        """d loss / d activations through the STE equals d loss / d bits at the sampled bits."""
        torch.manual_seed(0)
        a = (torch.rand(20, dtype=torch.float64) * 2 - 1).requires_grad_()
        w = torch.randn(20, dtype=torch.float64)
        loss_fn = lambda z: (torch.sin(z * w) ** 2).sum() + (z**3 * w).sum()  # noqa: E731
        b = binarize(a, "train", torch.Generator().manual_seed(1))
        (g,) = torch.autograd.grad(loss_fn(b), a)
        # finite differences of the surrogate path z -> loss(z) around the sampled bits
        z0 = b.detach()
        h = 1e-6
        fd = torch.stack([
            (loss_fn(z0 + h * e) - loss_fn(z0 - h * e)) / (2 * h) for e in torch.eye(20, dtype=torch.float64)
        ])
        np.testing.assert_allclose(g.numpy(), fd.numpy(), rtol=1e-4)


class TestEncodeDecode:
    def test_bit_counts(self, model, patch):
        c1 = encode(model, patch, steps=1)
        c2 = encode(model, patch, steps=2)
        assert c1.n_bits == 512 and c1.n_bits / (32 * 32) == 0.5
        assert c2.n_bits == 1024 and c2.n_bits / (32 * 32) == 1.0
        assert set(np.unique(c1.bits)) <= {-1, 1}
        assert (c1.grid_h, c1.grid_w, c1.channels_per_step, c1.steps) == (4, 4, 32, 1)

    def test_deterministic(self, model):
        z = np.zeros((32, 32, 3), np.float32)
        assert encode(model, z) == encode(model, z)

    def test_errors(self, model, patch):
        with pytest.raises(ShapeError):
            encode(model, np.zeros((16, 32, 3)))
        with pytest.raises(ConfigError):
            encode(model, patch, steps=3)
        with pytest.raises(ConfigError):
            encode(model, patch, steps=0)
        bad = LatentCode(np.ones(4 * 4 * 8), 4, 4, 8, 1)
        with pytest.raises(FormatError):
            decode(model, bad)

    def test_roundtrip_shape_and_range(self, model, patch):
        for k in (1, 2):
            y = decode(model, encode(model, patch, k))
            assert y.shape == patch.shape
            assert y.min() >= 0 and y.max() <= 1

    def test_random_code_in_range(self, model):
        rng = np.random.default_rng(1)
        code = LatentCode(rng.choice([-1, 1], 1024), 4, 4, 32, 2)
        y = decode(model, code)
        assert y.min() >= 0.0 and y.max() <= 1.0

    def test_two_step_is_clamped_sum(self, model, patch):
        code = encode(model, patch, 2)
        with torch.no_grad():
            parts = model.decode_steps(code.tensor().unsqueeze(0))
            manual = (parts[0] + parts[1]).clamp(0, 1)[0].permute(1, 2, 0).numpy()
        np.testing.assert_array_equal(decode(model, code), manual)

    def test_forward_matches_encode_then_decode(self, model, patch):
        x = torch.from_numpy(patch).permute(2, 0, 1).unsqueeze(0)
        with torch.no_grad():
            y, codes = model(x, 2)
        code = encode(model, patch, 2)
        np.testing.assert_array_equal(codes[0].numpy().astype(np.int8).ravel(), code.bits)
        np.testing.assert_allclose(y[0].permute(1, 2, 0).numpy(), decode(model, code), atol=1e-5)


class TestTiling:
    def test_tile_untile(self):
        img = np.random.default_rng(0).random((96, 64, 3))
        t = tile(img)
        assert t.shape == (6, 32, 32, 3)
        np.testing.assert_array_equal(t[1], img[0:32, 32:64])
        np.testing.assert_array_equal(t[2], img[32:64, 0:32])
        np.testing.assert_array_equal(untile(t, 96, 64), img)

    def test_pad(self):
        img = np.random.default_rng(0).random((40, 70, 3))
        p = pad_image(img)
        assert p.shape == (64, 96, 3)
        np.testing.assert_array_equal(p[:40, :70], img)
        np.testing.assert_array_equal(p[40, :70], img[38, :])  # reflect excludes the edge row
        assert padded_size(32, 33) == (32, 64)

    def test_compress_counts(self, model):
        rng = np.random.default_rng(2)
        assert len(compress_image(model, rng.random((64, 64, 3)))) == 4
        one = rng.random((32, 32, 3)).astype(np.float32)
        assert compress_image(model, one) == [encode(model, one)]
        with pytest.raises(ShapeError):
            compress_image(model, np.zeros((0, 32, 3)))

    def test_tile_placement_roundtrip(self, model):
        img = np.random.default_rng(3).random((96, 64, 3)).astype(np.float32)
        codes = compress_image(model, img)
        assert len(codes) == 6
        out = decompress_image(model, codes, 96, 64)
        for r in range(3):
            for c in range(2):
                tile_rc = img[32 * r:32 * r + 32, 32 * c:32 * c + 32]
                np.testing.assert_allclose(out[32 * r:32 * r + 32, 32 * c:32 * c + 32],
                                           decode(model, encode(model, tile_rc)), atol=1e-5)

    def test_non_multiple_size_crops_back(self, model):
        img = np.random.default_rng(4).random((45, 70, 3)).astype(np.float32)
        codes = compress_image(model, img)
        assert len(codes) == 2 * 3
        assert decompress_image(model, codes, 45, 70).shape == (45, 70, 3)

    def test_inference_determinism(self, model):
        img = np.random.default_rng(5).random((64, 96, 3)).astype(np.float32)
        a, b = compress_image(model, img, 2), compress_image(model, img, 2)
        assert a == b
        np.testing.assert_array_equal(decompress_image(model, a, 64, 96), decompress_image(model, b, 64, 96))

    def test_concurrent_inference(self, model):
        imgs = [np.random.default_rng(i).random((64, 64, 3)).astype(np.float32) for i in range(6)]
        expected = [decompress_image(model, compress_image(model, im), 64, 64) for im in imgs]
        results = [None] * len(imgs)

        def work(i):
            results[i] = decompress_image(model, compress_image(model, imgs[i]), 64, 64)

        threads = [threading.Thread(target=work, args=(i,)) for i in range(len(imgs))]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        for e, r in zip(expected, results):
            np.testing.assert_array_equal(e, r)


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, model, tmp_path):
        path = tmp_path / "codec.npz"
        model.save(path)
        loaded = CodecModel.load(path)
        assert loaded.arch == model.arch
        for (k1, v1), (k2, v2) in zip(model.state_dict().items(), loaded.state_dict().items()):
            assert k1 == k2
            assert torch.equal(v1, v2)

    def test_params_finite_and_descriptor_determines_shapes(self):
        a = CodecArch((4, 8), 16, 3, seed=9)
        m1, m2 = CodecModel(a), CodecModel(CodecArch.from_dict(a.to_dict()))
        assert all(torch.isfinite(p).all() for p in m1.parameters())
        assert [p.shape for p in m1.parameters()] == [p.shape for p in m2.parameters()]
        assert all(torch.equal(p, q) for p, q in zip(m1.parameters(), m2.parameters()))

    def test_bad_file(self, tmp_path):
        p = tmp_path / "junk.npz"
        p.write_bytes(b"not a zip")
        with pytest.raises(FormatError):
            CodecModel.load(p)


class TestSurrogate:
    def test_replays_recorded_forward(self, model, patch):
        x = torch.from_numpy(patch).permute(2, 0, 1).unsqueeze(0)
        q = SurrogateBinarizer(torch.Generator().manual_seed(0))
        with torch.no_grad():
            y1, c1 = model(x, 2, quantizer=q)
            y2, c2 = model(x, 2, quantizer=q.freeze())
        assert torch.allclose(c1, c2, atol=1e-6)
        assert torch.allclose(y1, y2, atol=1e-6)
