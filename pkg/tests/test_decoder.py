import numpy as np
import pytest

from oracles import central_diff, rel_error
from treenerv.autodiff import ShapeError, Tape, Tensor, mse_loss
from treenerv.decoder import Decoder, DecoderConfig, NervBlock, enerv_bottleneck, param_count
from treenerv.tree import TreeGrid


def _embedding(shape, seed=0, dtype=np.float32):
    return Tensor(np.random.default_rng(seed).normal(size=shape), dtype=dtype)


class TestBuild:
    def test_default_shapes(self):
        dec = Decoder.build(DecoderConfig(input_shape=(4, 8, 16), strides=(2, 2, 2), output_channels=3))
        out = dec.forward(_embedding((4, 8, 16)))
        assert out.shape == (3, 32, 64)
        assert [b.kind for b in dec.blocks] == ["enerv", "standard", "standard"]

    def test_unit_stride(self):
        cfg = DecoderConfig(input_shape=(5, 7, 8), strides=(1,), channel_schedule=(8,), output_channels=1)
        assert Decoder.build(cfg).forward(_embedding((5, 7, 8))).shape == (1, 5, 7)

    def test_same_seed_identical(self):
        a = Decoder.build(DecoderConfig(), seed=3)
        b = Decoder.build(DecoderConfig(), seed=3)
        for p, q in zip(a.parameters(), b.parameters()):
            assert p.data.tobytes() == q.data.tobytes()
        c = Decoder.build(DecoderConfig(), seed=4)
        assert a.parameters()[0].data.tobytes() != c.parameters()[0].data.tobytes()

    def test_target_mismatch_rejected(self):
        with pytest.raises(ValueError, match="target frame size"):
            DecoderConfig(input_shape=(4, 8, 16), strides=(2, 2), frame_size=(32, 64))
        DecoderConfig(input_shape=(4, 8, 16), strides=(2, 2, 2), frame_size=(32, 64))

    def test_channel_schedule_extension(self):
        cfg = DecoderConfig(channel_schedule=(32, 16), min_channels=8, strides=(2, 2, 2, 1))
        assert cfg.block_channels == (32, 16, 8, 8)

    def test_config_roundtrip(self):
        cfg = DecoderConfig(input_shape=(2, 3, 4), strides=(3, 2), channel_schedule=(12, 6), min_channels=4,
                            output_channels=1)
        assert DecoderConfig.from_dict(cfg.to_dict()) == cfg


class TestForward:
    def test_outputs_in_unit_interval(self):
        dec = Decoder.build(DecoderConfig())
        out = dec.forward(_embedding((4, 8, 16), seed=1)).data
        assert np.all(out > 0) and np.all(out < 1)

    def test_zero_weights_give_half(self):
        dec = Decoder.build(DecoderConfig())
        for p in dec.parameters():
            p.data[...] = 0
        np.testing.assert_array_equal(dec.forward(_embedding((4, 8, 16))).data, 0.5)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            Decoder.build(DecoderConfig()).forward(_embedding((16, 4, 8)))

    def test_tape_presence_does_not_change_values(self):
        dec = Decoder.build(DecoderConfig(), seed=2)
        emb = _embedding((4, 8, 16), seed=3)
        plain = dec.forward(emb).data
        with Tape():
            taped = dec.forward(Tensor(emb.data, requires_grad=True)).data
        assert plain.tobytes() == taped.tobytes()


class TestGradients:
    def _check(self, cfg, seed, entries=6):
        rng = np.random.default_rng(seed)
        dec = Decoder.build(cfg, seed=seed).astype(np.float64)
        emb = Tensor(rng.normal(size=cfg.input_shape), requires_grad=True, dtype=np.float64)
        h, w = cfg.output_size
        target = rng.uniform(size=(cfg.output_channels, h, w))
        params = dec.parameters() + [emb]
        with Tape() as tape:
            loss = mse_loss(dec.forward(emb), target)
        tape.backward(loss)
        worst = 0.0
        for p in params:
            idx = rng.choice(p.size, size=min(entries, p.size), replace=False)
            num = central_diff(lambda: mse_loss(dec.forward(emb), target).data, p.data, idx)
            worst = max(worst, rel_error(p.grad.ravel()[idx], num))
        return worst

    def test_two_blocks_fd(self):
        cfg = DecoderConfig(input_shape=(4, 8, 8), strides=(2, 2), channel_schedule=(8, 4), min_channels=4)
        assert self._check(cfg, 0) < 1e-3

    def test_embedding_to_loss_chain_through_tree(self):
        cfg = DecoderConfig(input_shape=(4, 8, 8), strides=(2, 2), channel_schedule=(8, 4), min_channels=4)
        dec = Decoder.build(cfg, seed=1).astype(np.float64)
        grid = TreeGrid.from_uniform(9, 3, cfg.input_shape, seed=1, dtype=np.float64,
                                     value_init=lambda r, s: r.normal(size=s))
        target = np.random.default_rng(1).uniform(size=(3, 16, 32))
        t = 2.75
        with Tape() as tape:
            loss = mse_loss(dec.forward(grid.time_embedding(t)), target)
        tape.backward(loss)
        rng = np.random.default_rng(2)
        for node in grid.nodes():
            v = node.value
            idx = rng.choice(v.size, 8, replace=False)
            num = central_diff(lambda: mse_loss(dec.forward(grid.time_embedding(t)), target).data, v.data, idx)
            if v.grad is None:
                assert np.allclose(num, 0.0)
            else:
                assert rel_error(v.grad.ravel()[idx], num) < 1e-3

    def test_random_decoders_fd(self):
        rng = np.random.default_rng(5)
        for trial in range(10):
            s = tuple(int(x) for x in rng.integers(1, 3, size=2))
            cfg = DecoderConfig(input_shape=(2, 3, int(rng.integers(4, 9))), strides=s,
                                channel_schedule=(8, 4), min_channels=4, output_channels=int(rng.choice([1, 3])))
            assert self._check(cfg, 100 + trial, entries=4) < 1e-3


def _direct_weight_count(block: NervBlock) -> int:
    return sum(w.size for w in block.weights)


class TestParamCount:
    def test_standard_block(self):
        block = NervBlock.create("standard", 16, 16, 2, np.random.default_rng(0))
        assert param_count(block)[0] == 9 * 16 * 16 * 4 == 9216
        assert _direct_weight_count(block) == 9216

    def test_enerv_block(self):
        block = NervBlock.create("enerv", 16, 16, 2, np.random.default_rng(0))
        assert block.bottleneck == 4
        assert param_count(block)[0] == 2880 == 9 * 16 * 16 + 9 * 4 * 16
        assert _direct_weight_count(block) == 2880

    def test_reduction_ratio(self):
        std = NervBlock.create("standard", 16, 16, 2, np.random.default_rng(0))
        en = NervBlock.create("enerv", 16, 16, 2, np.random.default_rng(0))
        assert 1 - param_count(en)[0] / param_count(std)[0] == pytest.approx(0.6875)

    def test_randomized_against_allocation(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            d, o = (int(x) for x in rng.integers(1, 40, size=2))
            s = int(rng.integers(1, 6))
            for kind in ("standard", "enerv"):
                block = NervBlock.create(kind, d, o, s, rng)
                w, wb = param_count(block)
                assert w == _direct_weight_count(block)
                assert wb == w + sum(b.size for b in block.biases)
                if kind == "enerv":
                    dp = enerv_bottleneck(d, o)
                    assert w == 9 * dp * (d * s * s + o)

    def test_enerv_smaller_for_wide_channels(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            d, o = (int(x) for x in rng.integers(4, 200, size=2))
            s = int(rng.integers(1, 6))
            dp = enerv_bottleneck(d, o)
            assert 9 * dp * (d * s * s + o) < 9 * d * o * s * s

    def test_decoder_total(self):
        dec = Decoder.build(DecoderConfig())
        w, wb = param_count(dec)
        assert w == sum(p.size for p in dec.weight_tensors())
        assert wb == sum(p.size for p in dec.parameters())
