import numpy as np
import pytest

from gerseg import dihedral as dh
from gerseg import glayers as gl
from gerseg.errors import CheckpointError, ConfigError, ShapeError
from gerseg.net import (NetConfig, Network, build, config_from_text,
                        load_checkpoint, save_checkpoint)

INV_SQRT8 = 1.0 / np.sqrt(8.0)


class TestConfig:
    def test_validation(self):
        with pytest.raises(ConfigError):
            NetConfig(base_width=0)
        with pytest.raises(ConfigError):
            NetConfig(skip_mode="multiply")
        with pytest.raises(ConfigError):
            NetConfig(group_mode="hexagonal")
        with pytest.raises(ConfigError):
            NetConfig(width_scale=0.0)

    def test_width_derivation(self):
        cfg = NetConfig(base_width=8, stages=4, width_scale=INV_SQRT8)
        assert [cfg.stage_width(s) for s in range(4)] == [3, 6, 11, 23]
        tiny = NetConfig(base_width=1, stages=2, width_scale=0.1)
        assert tiny.stage_width(0) == 1  # floor at 1

    def test_text_roundtrip(self):
        cfg = NetConfig(base_width=6, stages=3, width_scale=INV_SQRT8, skip_mode="concat")
        assert config_from_text(cfg.to_text()) == cfg

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            config_from_text("base_width = 4\nflux_capacitor = 1\n")


class TestBuild:
    def test_degenerate_config_layer_list(self):
        net = build(NetConfig(stages=1, blocks_per_stage=1, base_width=4), seed=0)
        rows = net.describe()
        assert [r["name"] for r in rows] == ["input_conv", "mid.block0", "head", "output_pool"]
        assert [r["kind"] for r in rows] == [
            "group_input_conv", "res_block", "group_hidden_conv", "group_output_pool",
        ]

    def test_default_desk_config_forward_shapes(self):
        net = build(NetConfig(base_width=8, stages=4, blocks_per_stage=2,
                              width_scale=INV_SQRT8), seed=0)
        x = np.random.default_rng(0).normal(size=(1, 1, 64, 64))
        logits = net.forward(x, train=True)
        assert logits.shape == (1, 2, 64, 64)

    def test_regular_twin_builds_same_topology(self):
        g = build(NetConfig(base_width=4, stages=2), seed=0)
        r = build(NetConfig(base_width=4, stages=2, group_mode="regular"), seed=0)
        assert [row["name"] for row in g.describe()] == [row["name"] for row in r.describe()]

    def test_indivisible_input_rejected(self):
        net = build(NetConfig(base_width=4, stages=3), seed=0)
        with pytest.raises(ShapeError):
            net.forward(np.zeros((1, 1, 18, 18)))

    def test_wrong_dtype_rejected(self):
        net = build(NetConfig(stages=1), seed=0, dtype=np.float64)
        with pytest.raises(ShapeError):
            net.forward(np.zeros((1, 1, 8, 8), dtype=np.float32))


class TestParamCount:
    def test_single_input_conv_arithmetic(self):
        conv = gl.GroupInputConv(3, 8, 3, 1, 1)
        assert sum(a.size for _, a in conv.param_items()) == 3 * 8 * 9 + 8

    def test_count_matches_descriptors(self):
        net = build(NetConfig(base_width=4, stages=2), seed=0)
        assert net.param_count() == sum(r["params"] for r in net.describe())

    @pytest.mark.parametrize("base_width,stages,blocks", [(8, 4, 2), (8, 3, 1), (16, 2, 2)])
    def test_width_scaled_group_matches_regular_within_10pct(self, base_width, stages, blocks):
        g = build(NetConfig(base_width=base_width, stages=stages, blocks_per_stage=blocks,
                            width_scale=INV_SQRT8), seed=0)
        r = build(NetConfig(base_width=base_width, stages=stages, blocks_per_stage=blocks,
                            width_scale=1.0, group_mode="regular"), seed=0)
        ratio = g.param_count() / r.param_count()
        assert 0.9 <= ratio <= 1.1


class TestForwardBehaviour:
    def test_zero_weight_network_constant_logits(self):
        net = Network(NetConfig(base_width=4, stages=2), rng=None)  # zero weights
        net.head.bias[:] = [0.3, -0.2]
        x = np.random.default_rng(1).normal(size=(2, 1, 16, 16))
        logits = net.forward(x, train=True)
        for c, v in enumerate((0.3, -0.2)):
            assert np.allclose(logits[:, c], v, atol=1e-12)

    def test_batch_slice_consistency_eval_mode(self):
        net = build(NetConfig(base_width=4, stages=2), seed=3)
        rng = np.random.default_rng(4)
        x = rng.normal(size=(2, 1, 16, 16))
        net.forward(x, train=True)  # populate bn statistics
        both = net.forward(x, train=False)
        one = net.forward(x[:1], train=False)
        assert np.array_equal(both[:1], one)

    def test_end_to_end_equivariance_group(self):
        net = build(NetConfig(base_width=4, stages=3, blocks_per_stage=1), seed=5)
        x = np.random.default_rng(6).normal(size=(1, 1, 16, 16))
        base = net.forward(x, train=True)
        for g in dh.ELEMENTS:
            lhs = net.forward(dh.act_on_plane(g, x), train=True)
            rhs = dh.act_on_plane(g, base)
            assert np.max(np.abs(lhs - rhs)) <= 1e-12

    def test_regular_twin_breaks_equivariance(self):
        net = build(NetConfig(base_width=4, stages=3, blocks_per_stage=1,
                              group_mode="regular"), seed=5)
        x = np.random.default_rng(6).normal(size=(1, 1, 16, 16))
        base = net.forward(x, train=True)
        worst = 0.0
        for g in dh.ELEMENTS:
            lhs = net.forward(dh.act_on_plane(g, x), train=True)
            rhs = dh.act_on_plane(g, base)
            worst = max(worst, np.max(np.abs(lhs - rhs)) / np.max(np.abs(rhs)))
        assert worst >= 0.01

    def test_argmax_mask_stability_under_rotation(self):
        net = build(NetConfig(base_width=4, stages=2), seed=7)
        x = np.random.default_rng(8).normal(size=(1, 1, 16, 16))
        base = net.forward(x, train=True)
        for g in dh.ELEMENTS:
            lhs = net.forward(dh.act_on_plane(g, x), train=True)
            rhs = dh.act_on_plane(g, base)
            margin = np.abs(rhs[:, 0] - rhs[:, 1])
            decided = margin > 10 * 1e-10
            assert np.array_equal(lhs.argmax(axis=1)[decided], rhs.argmax(axis=1)[decided])


class TestCheckpoint:
    def _net(self, dtype=np.float32):
        net = build(NetConfig(base_width=4, stages=2), seed=9, dtype=dtype)
        x = np.random.default_rng(10).normal(size=(2, 1, 8, 8)).astype(dtype)
        net.forward(x, train=True)  # give bn buffers non-trivial values
        return net

    def test_roundtrip_bit_exact(self, tmp_path):
        net = self._net()
        path = tmp_path / "net.ckpt"
        save_checkpoint(net, path)
        loaded, state = load_checkpoint(path, dtype=np.float32)
        assert state is None
        for k, v in net.params().items():
            assert loaded.params()[k].tobytes() == v.tobytes()
        for k, v in net.buffers().items():
            assert loaded.buffers()[k].tobytes() == v.tobytes()

    def test_training_state_roundtrip(self, tmp_path):
        net = self._net()
        path = tmp_path / "net.ckpt"
        tensors = {"input_conv.weight.m": np.ones_like(net.input_conv.weight)}
        save_checkpoint(net, path, training_state={
            "epoch": 3, "step": 17, "seed": 1, "lr": 1e-4, "best_val_dice": 0.5,
            "best_epoch": 2, "since_improve": 1, "adam_step": 17, "tensors": tensors,
        })
        _, state = load_checkpoint(path)
        assert state["epoch"] == 3 and state["adam_step"] == 17
        assert np.all(state["tensors"]["input_conv.weight.m"] == 1.0)

    def test_truncated_rejected(self, tmp_path):
        net = self._net()
        path = tmp_path / "net.ckpt"
        save_checkpoint(net, path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bogus.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_version_mismatch_rejected(self, tmp_path):
        net = self._net()
        path = tmp_path / "net.ckpt"
        save_checkpoint(net, path)
        blob = bytearray(path.read_bytes())
        blob[4:8] = (99).to_bytes(4, "little")
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_cross_config_load_rejected(self, tmp_path):
        net = self._net()
        path = tmp_path / "net.ckpt"
        save_checkpoint(net, path)
        other = NetConfig(base_width=6, stages=2)
        with pytest.raises(CheckpointError):
            load_checkpoint(path, expect_config=other)

    def test_float64_net_saved_as_f32(self, tmp_path):
        net = self._net(dtype=np.float64)
        path = tmp_path / "net.ckpt"
        save_checkpoint(net, path)
        loaded, _ = load_checkpoint(path, dtype=np.float64)
        for k, v in net.params().items():
            assert np.array_equal(loaded.params()[k], v.astype(np.float32).astype(np.float64))
