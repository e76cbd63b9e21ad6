import numpy as np
import pytest

from polsarseg.blocks import (ParamSet, basic_block_forward, deconv_block_forward,
                              init_basic_block, init_deconv_block, init_stem, stem_forward)
from polsarseg.engine import Tensor, backward, tensor_sum
from polsarseg.errors import ConfigError


class TestParamSet:
    def test_duplicate_name_rejected(self):
        p = ParamSet()
        p.add("a", Tensor(np.zeros(2)))
        with pytest.raises(ConfigError, match="duplicate"):
            p.add("a", Tensor(np.zeros(2)))

    def test_trainable_excludes_running_stats(self):
        p = ParamSet()
        init_stem(p, 4, 8, seed=0, dtype=np.float32)
        names = [n for n, _ in p.trainable()]
        assert "stem.conv.weight" in names
        assert "stem.bn.gamma" in names
        assert all("running" not in n for n in names)
        assert any("running_mean" in n for n in p.names())


class TestStem:
    def test_output_shape_quarter_resolution(self):
        p = ParamSet()
        init_stem(p, 4, 16, seed=0, dtype=np.float32)
        x = Tensor(np.random.default_rng(0).normal(size=(2, 4, 64, 64)).astype(np.float32))
        out = stem_forward(x, p)
        assert out.shape == (2, 16, 16, 16)

    def test_param_count(self):
        p = ParamSet()
        init_stem(p, 4, 64, seed=0, dtype=np.float32)
        assert p.trainable_size() == 7 * 7 * 4 * 64 + 2 * 64

    def test_rejects_indivisible_extents(self):
        p = ParamSet()
        init_stem(p, 4, 8, seed=0, dtype=np.float32)
        x = Tensor(np.zeros((1, 4, 60, 64), dtype=np.float32))
        with pytest.raises(ConfigError, match="divisible by 32"):
            stem_forward(x, p)

    def test_seed_determinism(self):
        a, b = ParamSet(), ParamSet()
        init_stem(a, 4, 16, seed=7, dtype=np.float32)
        init_stem(b, 4, 16, seed=7, dtype=np.float32)
        assert np.array_equal(a["stem.conv.weight"].data, b["stem.conv.weight"].data)
        c = ParamSet()
        init_stem(c, 4, 16, seed=8, dtype=np.float32)
        assert not np.array_equal(a["stem.conv.weight"].data, c["stem.conv.weight"].data)


class TestBasicBlock:
    def test_no_projection_when_shape_preserved(self):
        p = ParamSet()
        init_basic_block(p, "b", 16, 16, 1, seed=0, dtype=np.float32)
        assert "b.down.weight" not in p

    def test_projection_on_stride(self):
        p = ParamSet()
        init_basic_block(p, "b", 16, 16, 2, seed=0, dtype=np.float32)
        assert "b.down.weight" in p
        assert p["b.down.weight"].shape == (16, 16, 1, 1)

    def test_projection_on_channel_change(self):
        p = ParamSet()
        init_basic_block(p, "b", 16, 32, 1, seed=0, dtype=np.float32)
        assert "b.down.weight" in p

    def test_param_counts(self):
        p = ParamSet()
        init_basic_block(p, "b", 64, 64, 1, seed=0, dtype=np.float32)
        assert p.trainable_size() == 2 * (3 * 3 * 64 * 64) + 2 * (2 * 64)
        q = ParamSet()
        init_basic_block(q, "b", 64, 128, 2, seed=0, dtype=np.float32)
        expected = (3 * 3 * 64 * 128 + 3 * 3 * 128 * 128 + 64 * 128) + 3 * (2 * 128)
        assert q.trainable_size() == expected

    def test_zero_residual_is_identity_on_nonnegative_input(self):
        p = ParamSet()
        init_basic_block(p, "b", 8, 8, 1, seed=0, dtype=np.float32)
        p["b.conv1.weight"].data[:] = 0
        p["b.conv2.weight"].data[:] = 0
        x = np.abs(np.random.default_rng(1).normal(size=(1, 8, 16, 16))).astype(np.float32)
        out = basic_block_forward(Tensor(x), p, "b", 1, mode="eval")
        np.testing.assert_array_equal(out.data, x)

    def test_stride_halves_resolution(self):
        p = ParamSet()
        init_basic_block(p, "b", 8, 16, 2, seed=0, dtype=np.float32)
        x = Tensor(np.random.default_rng(2).normal(size=(1, 8, 16, 16)).astype(np.float32))
        out = basic_block_forward(x, p, "b", 2, mode="eval")
        assert out.shape == (1, 16, 8, 8)

    def test_gradients_reach_all_parameters(self):
        p = ParamSet()
        init_basic_block(p, "b", 4, 8, 2, seed=3, dtype=np.float64)
        x = Tensor(np.random.default_rng(3).normal(size=(2, 4, 8, 8)), requires_grad=True)
        out = basic_block_forward(x, p, "b", 2, mode="train")
        backward(tensor_sum(out))
        for name, t in p.trainable():
            assert t.grad is not None, name
            assert np.all(np.isfinite(t.grad)), name
        assert x.grad is not None

    def test_dilation_preserves_resolution(self):
        p = ParamSet()
        init_basic_block(p, "b", 8, 8, 1, seed=0, dtype=np.float32, dilation=4)
        x = Tensor(np.random.default_rng(4).normal(size=(1, 8, 16, 16)).astype(np.float32))
        out = basic_block_forward(x, p, "b", 1, mode="eval", dilation=4)
        assert out.shape == (1, 8, 16, 16)


class TestDeconvBlock:
    def test_doubles_resolution_and_maps_channels(self):
        p = ParamSet()
        init_deconv_block(p, "d", 32, 16, seed=0, dtype=np.float32)
        x = Tensor(np.random.default_rng(5).normal(size=(2, 32, 7, 9)).astype(np.float32))
        out = deconv_block_forward(x, p, "d")
        assert out.shape == (2, 16, 14, 18)

    def test_param_count(self):
        p = ParamSet()
        init_deconv_block(p, "d", 64, 32, seed=0, dtype=np.float32)
        conv = 64 * 16 + 3 * 3 * 16 * 16 + 16 * 32
        bn = 2 * 16 + 2 * 16 + 2 * 32
        assert p.trainable_size() == conv + bn

    def test_bottleneck_width_is_quarter(self):
        p = ParamSet()
        init_deconv_block(p, "d", 64, 32, seed=0, dtype=np.float32)
        assert p["d.reduce.weight"].shape == (16, 64, 1, 1)
        assert p["d.up.weight"].shape == (16, 16, 3, 3)
        assert p["d.expand.weight"].shape == (32, 16, 1, 1)

    def test_rejects_width_not_divisible_by_four(self):
        p = ParamSet()
        with pytest.raises(ConfigError, match="divisible by 4"):
            init_deconv_block(p, "d", 30, 16, seed=0, dtype=np.float32)

    def test_gradients_reach_all_parameters(self):
        p = ParamSet()
        init_deconv_block(p, "d", 8, 8, seed=1, dtype=np.float64)
        x = Tensor(np.random.default_rng(6).normal(size=(2, 8, 4, 4)), requires_grad=True)
        out = deconv_block_forward(x, p, "d", mode="train")
        backward(tensor_sum(out))
        for name, t in p.trainable():
            assert t.grad is not None, name
        assert x.grad is not None
