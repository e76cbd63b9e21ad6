import numpy as np
import pytest

from polsarseg.engine import Tensor, no_grad
from polsarseg.errors import (BadMagicError, ConfigError, ExtentOverflowError,
                              FileFormatError, ShapeError, TruncatedPayloadError)
from polsarseg.models import (ModelConfig, branch_stage_widths, build_fcn_baseline,
                              build_mp_resnet, forward_segment, load_checkpoint, logits_for,
                              save_checkpoint, snap4)

TINY = ModelConfig(stem_width=8, stage_blocks=(1, 1, 1, 1), branch_widths=(16, 16, 16),
                   branch_width_multiplier=1.0, decoder_width=8)


def tiny_mp(seed=0):
    return build_mp_resnet(TINY, seed=seed)


def tiny_fcn(seed=0):
    return build_fcn_baseline(TINY, seed=seed)


def rand_input(n=1, c=4, h=64, w=64, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(0.0, 1.0, size=(n, c, h, w)).astype(np.float32)


class TestConfig:
    def test_defaults_validate(self):
        ModelConfig().validate()

    def test_rejects_bad_variant(self):
        with pytest.raises(ConfigError, match="variant"):
            ModelConfig(variant="unet").validate()

    def test_rejects_bad_branch_widths(self):
        with pytest.raises(ConfigError, match="branch_widths"):
            ModelConfig(branch_widths=(30, 64, 64)).validate()
        with pytest.raises(ConfigError, match="branch_widths"):
            ModelConfig(branch_widths=(64, 64)).validate()

    def test_rejects_bad_scales(self):
        with pytest.raises(ConfigError, match="branch_scales"):
            ModelConfig(branch_scales=(4, 8, 16)).validate()

    def test_kv_round_trip(self):
        cfg = ModelConfig(variant="fcn_baseline", stem_width=32,
                          branch_width_multiplier=0.8125, head="progressive")
        assert ModelConfig.from_kv(cfg.to_kv()) == cfg

    def test_kv_rejects_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown config key"):
            ModelConfig.from_kv("mystery = 3\n")

    def test_kv_rejects_malformed_line(self):
        with pytest.raises(ConfigError, match="key = value"):
            ModelConfig.from_kv("stem_width 64\n")

    def test_snap4(self):
        assert snap4(240.0) == 240
        assert snap4(241.9) == 240
        assert snap4(2.0) == 4
        assert snap4(126.0) == 128

    def test_branch_stage_widths_default(self):
        widths = branch_stage_widths(ModelConfig())
        assert widths == [(240, 480), (240, 480), (240, 480)]


class TestForward:
    def test_mp_output_shape(self):
        model = tiny_mp()
        out = forward_segment(model, Tensor(rand_input()))
        assert out.shape == (1, 6, 64, 64)

    def test_fcn_output_shape(self):
        model = tiny_fcn()
        out = forward_segment(model, Tensor(rand_input(n=2)))
        assert out.shape == (2, 6, 64, 64)

    def test_branch_features_at_three_scales(self):
        model = tiny_mp()
        _, feats = forward_segment(model, Tensor(rand_input()), return_branches=True)
        assert feats["branch0"].shape == (1, 16, 8, 8)
        assert feats["branch1"].shape == (1, 16, 4, 4)
        assert feats["branch2"].shape == (1, 16, 2, 2)

    def test_progressive_head_matches_shape(self):
        cfg = ModelConfig(stem_width=8, stage_blocks=(1, 1, 1, 1), branch_widths=(16, 16, 16),
                          branch_width_multiplier=1.0, decoder_width=8, head="progressive")
        out = forward_segment(build_mp_resnet(cfg), Tensor(rand_input()))
        assert out.shape == (1, 6, 64, 64)

    def test_rejects_indivisible_extents(self):
        with pytest.raises(ConfigError, match="divisible by 32"):
            forward_segment(tiny_mp(), Tensor(np.zeros((1, 4, 48, 64), dtype=np.float32)))

    def test_rejects_wrong_channel_count(self):
        with pytest.raises(ShapeError, match="expected"):
            forward_segment(tiny_mp(), Tensor(np.zeros((1, 3, 64, 64), dtype=np.float32)))

    def test_same_seed_same_logits(self):
        x = rand_input(seed=3)
        a = logits_for(tiny_mp(seed=5), x)
        b = logits_for(tiny_mp(seed=5), x)
        assert np.array_equal(a, b)
        c = logits_for(tiny_mp(seed=6), x)
        assert not np.array_equal(a, c)

    def test_eval_forward_is_idempotent(self):
        model = tiny_mp()
        x = rand_input(seed=4)
        first = logits_for(model, x)
        second = logits_for(model, x)
        assert np.array_equal(first, second)

    def test_train_forward_updates_running_stats(self):
        model = tiny_mp().train()
        before = model.params["stem.bn.running_mean"].data.copy()
        with no_grad():
            forward_segment(model, Tensor(rand_input(n=2, seed=5)))
        after = model.params["stem.bn.running_mean"].data
        assert not np.array_equal(before, after)

    def test_batch_permutation_equivariance(self):
        model = tiny_fcn()
        x = rand_input(n=3, seed=6)
        out = logits_for(model, x)
        flipped = logits_for(model, x[::-1].copy())
        np.testing.assert_array_equal(flipped, out[::-1])


class TestVariantRelationship:
    def test_trunk_names_shared(self):
        mp, fcn = tiny_mp(), tiny_fcn()
        trunk = [n for n in fcn.params.names()
                 if n.startswith(("stem.", "stage1.", "stage2."))]
        assert trunk
        for name in trunk:
            assert name in mp.params

    def test_trunk_values_bit_identical_across_variants(self):
        mp, fcn = tiny_mp(seed=11), tiny_fcn(seed=11)
        for name in fcn.params.names():
            if name.startswith(("stem.", "stage1.", "stage2.")):
                assert np.array_equal(mp.params[name].data, fcn.params[name].data), name

    def test_equal_block_depth_per_path(self):
        mp, fcn = tiny_mp(), tiny_fcn()

        def block_count(params, prefixes):
            return len({n.split(".conv1.")[0] for n in params.names()
                        if ".conv1." in n and n.startswith(prefixes)})

        fcn_depth = block_count(fcn.params, ("stem", "stage1", "stage2", "stage3", "stage4"))
        for b in range(3):
            mp_depth = block_count(
                mp.params, ("stem", "stage1", "stage2", f"branch{b}.stage3", f"branch{b}.stage4"))
            assert mp_depth == fcn_depth


class TestCheckpoint:
    def checkpoint_path(self, tmp_path, model):
        path = str(tmp_path / "model.ckpt")
        save_checkpoint(model, path)
        return path

    def test_round_trip_bitwise(self, tmp_path):
        model = tiny_mp(seed=2).train()
        with no_grad():
            forward_segment(model, Tensor(rand_input(n=2, seed=9)))
        path = self.checkpoint_path(tmp_path, model)
        loaded = load_checkpoint(path)
        assert loaded.mode == "eval"
        assert loaded.config == model.config
        assert loaded.params.names() == model.params.names()
        for name, t in model.params.items():
            assert np.array_equal(t.data, loaded.params[name].data), name
        x = rand_input(seed=10)
        np.testing.assert_array_equal(logits_for(model.eval(), x), logits_for(loaded, x))

    def test_bad_magic(self, tmp_path):
        path = str(tmp_path / "junk.ckpt")
        with open(path, "wb") as f:
            f.write(b"NOTMAGIC" + b"\x00" * 64)
        with pytest.raises(BadMagicError):
            load_checkpoint(path)

    def test_truncated_payload(self, tmp_path):
        model = tiny_fcn()
        path = self.checkpoint_path(tmp_path, model)
        blob = open(path, "rb").read()
        with open(path, "wb") as f:
            f.write(blob[: len(blob) // 2])
        with pytest.raises(TruncatedPayloadError):
            load_checkpoint(path)

    def test_extent_overflow(self, tmp_path):
        model = tiny_fcn()
        path = self.checkpoint_path(tmp_path, model)
        blob = bytearray(open(path, "rb").read())
        doc_len = int.from_bytes(blob[8:12], "little")
        name_len_off = 12 + doc_len
        name_len = int.from_bytes(blob[name_len_off:name_len_off + 2], "little")
        extent_off = name_len_off + 2 + name_len + 2
        blob[extent_off:extent_off + 4] = (1 << 21).to_bytes(4, "little")
        with open(path, "wb") as f:
            f.write(bytes(blob))
        with pytest.raises(ExtentOverflowError):
            load_checkpoint(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        model = tiny_fcn()
        path = self.checkpoint_path(tmp_path, model)
        with open(path, "ab") as f:
            f.write(b"\x00")
        with pytest.raises(FileFormatError, match="trailing"):
            load_checkpoint(path)

    def test_error_types_are_distinct(self):
        assert issubclass(BadMagicError, FileFormatError)
        assert issubclass(TruncatedPayloadError, FileFormatError)
        assert issubclass(ExtentOverflowError, FileFormatError)
        assert not issubclass(BadMagicError, TruncatedPayloadError)
        assert not issubclass(TruncatedPayloadError, ExtentOverflowError)
