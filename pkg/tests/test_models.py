import itertools
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from weakseg.autodiff import ShapeError, Tensor, backward, sum_all
from weakseg.gradcheck import MODEL_TOL, segmenter_check
from weakseg.models import (ChecksumError, FORMAT_VERSION, ModelConfig, ModelFormatError, TruncatedStreamError,
                            VersionMismatchError, build_classifier, build_segmenter, deserialize_model, load_model,
                            save_model, serialize_model, spatial_mean)

SMALL = dict(c=2, num_classes=3, input_size=(16, 16))


def _stage(prefix):
    return [f"{prefix}.conv.weight", f"{prefix}.conv.bias", f"{prefix}.bn.gamma", f"{prefix}.bn.beta"]


class TestDepthLaw:
    @pytest.mark.parametrize("d,n,N", list(itertools.product((1, 2, 3), repeat=3)))
    def test_classifier_conv_count(self, d, n, N):
        m = build_classifier(ModelConfig(d=d, n=n, N=N, **SMALL))
        assert m.conv_count() == d * n * N + 1 == m.config.depth

    @pytest.mark.parametrize("d,n,N,expected", [(3, 2, 2, 13), (1, 1, 1, 2)])
    def test_examples(self, d, n, N, expected):
        assert build_classifier(ModelConfig(d=d, n=n, N=N, **SMALL)).conv_count() == expected

    @pytest.mark.parametrize("d,n,N", [(1, 1, 1), (2, 1, 2), (3, 2, 1)])
    def test_segmenter_conv_count(self, d, n, N):
        # two path convs per residual stage plus the stem and the 1-channel head
        assert build_segmenter(ModelConfig(d=d, n=n, N=N, **SMALL)).conv_count() == 2 * d * n * N + 2


class TestConfig:
    def test_rejects_zero(self):
        with pytest.raises(ValueError):
            ModelConfig(c=0)

    def test_indivisible_input(self):
        with pytest.raises(ShapeError):
            build_classifier(ModelConfig(d=3, input_size=(20, 16)))

    def test_forward_checks_input_size(self):
        m = build_classifier(ModelConfig(d=2, **SMALL))
        with pytest.raises(ShapeError):
            m(Tensor(np.zeros((1, 1, 18, 16))))


class TestForward:
    def test_classifier_probabilities(self, rng):
        m = build_classifier(ModelConfig(c=3, d=2, num_classes=8, input_size=(64, 64)))
        out = m(Tensor(rng.uniform(size=(2, 1, 64, 64))))
        assert out.shape == (2, 8)
        np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-9)

    @pytest.mark.parametrize("d", [1, 2])
    def test_segmenter_shape_and_range(self, rng, d):
        m = build_segmenter(ModelConfig(d=d, **SMALL))
        out = m(Tensor(rng.uniform(size=(3, 1, 16, 16))), training=True)
        assert out.shape == (3, 1, 16, 16)
        assert np.all(out.data > 0) and np.all(out.data < 1)

    @settings(max_examples=10, deadline=None)
    @given(st.floats(-1e6, 1e6), st.integers(0, 2**31))
    def test_segmenter_range_arbitrary_inputs(self, scale, seed):
        m = build_segmenter(ModelConfig(d=1, **SMALL), seed=seed % 5)
        x = np.random.default_rng(seed).standard_normal((2, 1, 16, 16)) * scale
        out = m(Tensor(x)).data
        assert np.all(out > 0) and np.all(out < 1)

    def test_fresh_segmenter_near_half(self, rng):
        m = build_segmenter(ModelConfig(c=8, d=2, input_size=(32, 32)))
        out = m(Tensor(rng.uniform(size=(4, 1, 32, 32))), training=True).data
        assert abs(out.mean() - 0.5) < 0.05

    def test_float32_path(self, rng):
        m = build_segmenter(ModelConfig(d=1, **SMALL), dtype=np.float32)
        out = m(Tensor(rng.uniform(size=(2, 1, 16, 16)).astype(np.float32)), training=True)
        assert out.dtype == np.float32


class TestStructure:
    def test_segmenter_parameter_names_d1(self):
        m = build_segmenter(ModelConfig(d=1, n=1, N=1, **SMALL))
        expected = (_stage("stem") + _stage("down0.block0.stage0") + _stage("up0.block0.stage0")
                    + ["head.weight", "head.bias"])
        assert [n for n, _ in m.named_parameters()] == expected

    def test_classifier_parameter_names_d1(self):
        m = build_classifier(ModelConfig(d=1, n=2, N=1, **SMALL))
        expected = (_stage("stem") + _stage("down0.block0.stage0") + _stage("down0.block0.stage1")
                    + ["fc.weight", "fc.bias"])
        assert [n for n, _ in m.named_parameters()] == expected

    def test_parameter_count_closed_form(self):
        c, k = 4, 5
        cfg = ModelConfig(c=c, d=2, n=1, N=2, num_classes=k, input_size=(16, 16))
        stage = c * c * 9 + c + 2 * c
        stem = c * 9 + c + 2 * c
        assert build_classifier(cfg).parameter_count() == stem + 4 * stage + c * k + k
        assert build_segmenter(cfg).parameter_count() == stem + 8 * stage + c * 9 + 1

    def test_same_seed_same_parameters(self):
        cfg = ModelConfig(d=2, **SMALL)
        a, b = build_segmenter(cfg, seed=3), build_segmenter(cfg, seed=3)
        for (_, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
            assert np.array_equal(p.data, q.data)
        c = build_segmenter(cfg, seed=4)
        assert not np.array_equal(a.parameters()[0].data, c.parameters()[0].data)

    def test_init_statistics(self):
        m = build_classifier(ModelConfig(c=16, d=1, num_classes=3, input_size=(16, 16)))
        params = dict(m.named_parameters())
        w = params["down0.block0.stage0.conv.weight"].data
        assert w.std() == pytest.approx(np.sqrt(2 / (16 * 9)), rel=0.1)
        assert not params["down0.block0.stage0.conv.bias"].data.any()
        assert np.all(params["stem.bn.gamma"].data == 1) and not params["stem.bn.beta"].data.any()


class TestSpatialMean:
    def test_constant(self):
        assert spatial_mean(Tensor(np.full((1, 1, 4, 4), 0.5))).data.tolist() == [0.5]

    def test_half_and_half(self):
        m = np.zeros((1, 1, 4, 4)); m[..., :2, :] = 1
        assert spatial_mean(Tensor(m)).data.tolist() == [0.5]

    def test_summation_oracle(self, rng):
        m = rng.uniform(size=(3, 1, 5, 7))
        want = [sum(m[b, 0].ravel()) / 35 for b in range(3)]
        np.testing.assert_allclose(spatial_mean(Tensor(m)).data, want, rtol=0, atol=1e-12)

    def test_channel_check(self):
        with pytest.raises(ShapeError):
            spatial_mean(Tensor(np.zeros((1, 2, 4, 4))))


class TestEndToEndGradient:
    @pytest.mark.parametrize("training", [False, True])
    def test_segmenter_gradcheck(self, training):
        assert segmenter_check(seed=0, training=training) < MODEL_TOL

    def test_pre_bn_bias_gradient_is_zero_in_train_mode(self, rng):
        m = build_segmenter(ModelConfig(d=1, **SMALL))
        backward(sum_all(spatial_mean(m(Tensor(rng.uniform(size=(2, 1, 16, 16))), training=True))))
        g = dict(m.named_parameters())["down0.block0.stage0.conv.bias"].grad
        assert np.abs(g).max() < 1e-12


def _mutate(model, rng):
    for p in model.parameters():
        p.data = rng.standard_normal(p.shape).astype(p.dtype)
    for _, b in model.named_buffers():
        b[:] = rng.uniform(0.1, 2, b.shape)


class TestSerialization:
    @pytest.mark.parametrize("kind", ["classifier", "segmenter"])
    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_round_trip(self, rng, kind, dtype):
        build = build_classifier if kind == "classifier" else build_segmenter
        m = build(ModelConfig(d=1, n=2, **SMALL), seed=1, dtype=dtype)
        _mutate(m, rng)
        r = deserialize_model(serialize_model(m))
        assert r.kind == kind and r.config == m.config and r.dtype == m.dtype
        for (na, a), (nb, b) in zip(m.named_parameters(), r.named_parameters()):
            assert na == nb and a.data.tobytes() == b.data.tobytes()
        for (_, a), (_, b) in zip(m.named_buffers(), r.named_buffers()):
            assert a.tobytes() == b.tobytes()
        assert serialize_model(r) == serialize_model(m)

    def test_file_round_trip(self, tmp_path):
        m = build_segmenter(ModelConfig(d=1, **SMALL))
        save_model(m, tmp_path / "m.wsm")
        assert serialize_model(load_model(tmp_path / "m.wsm")) == serialize_model(m)

    @pytest.mark.parametrize("cut", [0, 5, 30, -1, -40])
    def test_truncated(self, cut):
        blob = serialize_model(build_classifier(ModelConfig(d=1, **SMALL)))
        with pytest.raises(TruncatedStreamError):
            deserialize_model(blob[:cut])

    def test_version_mismatch(self):
        blob = bytearray(serialize_model(build_classifier(ModelConfig(d=1, **SMALL))))
        struct.pack_into("<I", blob, 8, FORMAT_VERSION + 1)
        with pytest.raises(VersionMismatchError):
            deserialize_model(bytes(blob))

    def test_checksum(self):
        blob = bytearray(serialize_model(build_classifier(ModelConfig(d=1, **SMALL))))
        blob[-40] ^= 0x01
        with pytest.raises(ChecksumError):
            deserialize_model(bytes(blob))

    def test_bad_magic(self):
        blob = b"NOTMODEL" + serialize_model(build_classifier(ModelConfig(d=1, **SMALL)))[8:]
        with pytest.raises(ModelFormatError):
            deserialize_model(blob)

    def test_trailing_bytes(self):
        blob = serialize_model(build_classifier(ModelConfig(d=1, **SMALL)))
        with pytest.raises(ModelFormatError):
            deserialize_model(blob + b"\0")
