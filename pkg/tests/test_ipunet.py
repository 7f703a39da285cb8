import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from idsr import checkpoint as ckpt
from idsr import ipunet
from idsr.ipunet import IPUNetConfig, analytic_parameter_count, build, load_checkpoint, save_checkpoint
from idsr.tensorcore import Tensor, gradcheck

TOY = (8, 16, 32, 32, 32, 32, 32)


def _hand_count_default():
    # written out layer by layer for in=3, schedule 32,64,128,256,256,256,256 and 4x4 kernels
    down = [
        3 * 32 * 16 + 32,                      # D1, no BN
        32 * 64 * 16 + 64 + 2 * 64,
        64 * 128 * 16 + 128 + 2 * 128,
        128 * 256 * 16 + 256 + 2 * 256,
        256 * 256 * 16 + 256 + 2 * 256,
        256 * 256 * 16 + 256 + 2 * 256,
        256 * 256 * 16 + 256,                  # D7, no BN
    ]
    up = [
        256 * 256 * 16 + 256 + 2 * 256,        # U1 from the bottleneck
        512 * 256 * 16 + 256 + 2 * 256,        # U2..U4 see 256 + 256 skip channels
        512 * 256 * 16 + 256 + 2 * 256,
        512 * 128 * 16 + 128 + 2 * 128,
        256 * 64 * 16 + 64 + 2 * 64,
        128 * 32 * 16 + 32 + 2 * 32,
        64 * 3 * 16 + 3,                       # U7, sigmoid output, no BN
    ]
    return sum(down) + sum(up)


def _rand(shape, seed=0):
    return np.random.default_rng(seed).random(shape).astype(np.float32)


def _to_float64(net, weight_std=0.5):
    """64-bit copy of the weights, redrawn at ``weight_std``.

    With the 0.02 init the deep weight gradients are ~1e-7 against an
    output near 0.5, which central differences cannot resolve.
    """
    rng = np.random.default_rng(123)
    for _, block in net._named_blocks():
        block.weight.data = rng.normal(0, weight_std, block.weight.shape)
        block.bias.data = rng.normal(0, 0.1, block.bias.shape)
        if block.bn is not None:
            for p in (block.bn.gamma, block.bn.beta):
                p.data = p.data.astype(np.float64)
            block.bn.running_mean = block.bn.running_mean.astype(np.float64)
            block.bn.running_var = block.bn.running_var.astype(np.float64) + 0.5
    return net


class TestParameterCount:
    def test_default_matches_hand_computation(self):
        cfg = IPUNetConfig()
        assert _hand_count_default() == 10_463_747
        assert analytic_parameter_count(cfg) == _hand_count_default()
        assert build(cfg).num_parameters() == _hand_count_default()

    def test_toy_count(self):
        assert build(channel_schedule=TOY).num_parameters() == analytic_parameter_count(IPUNetConfig(channel_schedule=TOY))

    def test_skip_ablation_difference(self):
        """Dropping the concatenation removes exactly s[d-1-i] * s_out * k^2 weights per merging block."""
        cfg = IPUNetConfig(channel_schedule=TOY)
        no_skip = IPUNetConfig(channel_schedule=TOY, skip_connections=False)
        s, d = TOY, len(TOY)
        outs = [s[d - 2 - i] for i in range(d - 1)] + [3]
        predicted = sum(s[d - 1 - i] * outs[i] * 16 for i in range(1, d))
        assert build(cfg).num_parameters() - build(no_skip).num_parameters() == predicted


class TestForward:
    def test_shape_range_and_bottleneck(self):
        net = build(channel_schedule=TOY)
        x = _rand((2, 3, 128, 128))
        acts = net.encode(x)
        assert [a.shape[2] for a in acts] == [64, 32, 16, 8, 4, 2, 1]
        assert acts[-1].shape == (2, 32, 1, 1)
        y = net.decode(acts)
        assert y.shape == (2, 3, 128, 128)
        assert y.data.min() > 0 and y.data.max() < 1

    def test_default_config_runs(self):
        y = build(IPUNetConfig()).eval()(_rand((1, 3, 128, 128)))
        assert y.shape == (1, 3, 128, 128)

    def test_all_ones_schedule(self):
        net = build(channel_schedule=(1,) * 7, in_channels=1)
        assert net(_rand((2, 1, 128, 128))).shape == (2, 1, 128, 128)

    @settings(max_examples=20, deadline=None)
    @given(
        st.lists(st.integers(1, 6), min_size=7, max_size=7),
        st.sampled_from([1, 3]),
        st.booleans(),
        st.integers(0, 2**16),
    )
    def test_random_configs_preserve_shape(self, schedule, channels, skips, seed):
        cfg = IPUNetConfig(in_channels=channels, channel_schedule=tuple(schedule), skip_connections=skips, seed=seed)
        net = build(cfg)
        acts = net.encode(_rand((2, channels, 128, 128), seed))
        assert acts[-1].shape[2:] == (1, 1)
        assert net.decode(acts).shape == (2, channels, 128, 128)
        assert net.num_parameters() == analytic_parameter_count(cfg)

    def test_seed_determinism(self):
        a, b = build(channel_schedule=TOY, seed=3), build(channel_schedule=TOY, seed=3)
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb
            np.testing.assert_array_equal(pa.data, pb.data)
        c = build(channel_schedule=TOY, seed=4)
        assert not np.array_equal(a.parameters()[0].data, c.parameters()[0].data)

    def test_eval_is_pure(self):
        net = build(channel_schedule=TOY).eval()
        x = _rand((2, 3, 128, 128))
        np.testing.assert_array_equal(net(x).data, net(x).data)

    def test_train_differs_from_eval(self):
        net = build(channel_schedule=TOY)
        x = _rand((2, 3, 128, 128))
        y_train = net.train()(x).data
        y_eval = net.eval()(x).data
        assert np.abs(y_train - y_eval).max() > 1e-3

    def test_skip_sensitivity(self):
        net = build(channel_schedule=TOY).eval()
        acts = net.encode(_rand((1, 3, 128, 128)))
        base = net.decode(acts).data
        for k in range(len(acts) - 1):
            changed = list(acts)
            changed[k] = Tensor(np.zeros_like(acts[k].data))
            assert np.abs(net.decode(changed).data - base).max() > 0, f"encoder block {k + 1} not wired"

    @pytest.mark.parametrize(
        "shape,match",
        [((3, 128, 128), "NCHW"), ((2, 1, 128, 128), "channels"), ((2, 3, 64, 64), "128x128"), ((1, 3, 128, 128), "batch")],
    )
    def test_bad_input(self, shape, match):
        with pytest.raises(ValueError, match=match):
            build(channel_schedule=TOY).train()(np.zeros(shape, np.float32))

    @pytest.mark.parametrize("kw", [dict(channel_schedule=()), dict(channel_schedule=(0, 1)), dict(dropout_p=1.0),
                                    dict(in_channels=0), dict(final_activation="tanh")])
    def test_bad_config(self, kw):
        with pytest.raises(ValueError):
            IPUNetConfig(**kw)


def test_tiny_end_to_end_gradcheck():
    """Depth-4, width-2 variant on a 1x1x16x16 input with eval-mode norm layers."""
    net = _to_float64(build(in_channels=1, channel_schedule=(2, 2, 2, 2), seed=5)).eval()
    x = np.random.default_rng(1).random((1, 1, 16, 16))
    block = net.down[1]
    w0 = block.weight

    def fn(x, w):
        block.weight = w
        try:
            return net(x)
        finally:
            block.weight = w0

    report = gradcheck(fn, [x, w0.data], tolerance=1e-3, names=["input", "down2.weight"])
    assert report.passed, str(report)


class TestCheckpoint:
    def _trained_state_net(self):
        net = build(channel_schedule=TOY, seed=2)
        net.train()(_rand((2, 3, 128, 128)))  # moves running statistics off their init
        return net

    def test_round_trip_bit_exact(self, tmp_path):
        net = self._trained_state_net()
        save_checkpoint(net, tmp_path / "n.ckpt")
        back = load_checkpoint(tmp_path / "n.ckpt")
        assert back.config == net.config and back.dropout_calls == net.dropout_calls
        for (na, a), (nb, b) in zip(net.state_arrays(), back.state_arrays()):
            assert na == nb and a.dtype == b.dtype
            np.testing.assert_array_equal(a, b)
        x = _rand((2, 3, 128, 128), 9)
        np.testing.assert_array_equal(net.eval()(x).data, back.eval()(x).data)

    def test_tampered_magic(self, tmp_path):
        save_checkpoint(build(channel_schedule=TOY), tmp_path / "n.ckpt")
        raw = bytearray((tmp_path / "n.ckpt").read_bytes())
        raw[0:4] = b"XXXX"
        (tmp_path / "n.ckpt").write_bytes(raw)
        with pytest.raises(ckpt.CheckpointFormatError):
            load_checkpoint(tmp_path / "n.ckpt")

    def test_future_version(self, tmp_path):
        save_checkpoint(build(channel_schedule=TOY), tmp_path / "n.ckpt")
        raw = bytearray((tmp_path / "n.ckpt").read_bytes())
        raw[4:6] = struct.pack("<H", 99)
        (tmp_path / "n.ckpt").write_bytes(raw)
        with pytest.raises(ckpt.CheckpointVersionError):
            load_checkpoint(tmp_path / "n.ckpt")

    def test_truncated(self, tmp_path):
        save_checkpoint(build(channel_schedule=TOY), tmp_path / "n.ckpt")
        raw = (tmp_path / "n.ckpt").read_bytes()
        (tmp_path / "n.ckpt").write_bytes(raw[:-10])
        with pytest.raises(ckpt.CheckpointTruncatedError):
            load_checkpoint(tmp_path / "n.ckpt")

    def test_wrong_tensor_count(self, tmp_path):
        save_checkpoint(build(channel_schedule=TOY), tmp_path / "n.ckpt")
        raw = (tmp_path / "n.ckpt").read_bytes()
        magic, version, mlen = struct.unpack_from("<4sHI", raw)
        head = struct.calcsize("<4sHI")
        manifest = raw[head : head + mlen].decode()
        count = int(manifest.split("tensor_count=")[1].split("\n")[0])
        bad = manifest.replace(f"tensor_count={count}", f"tensor_count={count + 5}").encode()
        (tmp_path / "n.ckpt").write_bytes(struct.pack("<4sHI", magic, version, len(bad)) + bad + raw[head + mlen :])
        with pytest.raises(ckpt.CheckpointManifestError, match=f"{count + 5}.*{count}|{count}.*{count + 5}"):
            load_checkpoint(tmp_path / "n.ckpt")

    def test_config_mismatch(self, tmp_path):
        net = build(channel_schedule=TOY)
        tensors = [(f"net.{n}", a) for n, a in net.state_arrays()][:-1]
        ckpt.write_checkpoint(tmp_path / "n.ckpt", ipunet.MAGIC, net.config.to_meta(), tensors)
        with pytest.raises(ckpt.CheckpointManifestError, match="missing"):
            load_checkpoint(tmp_path / "n.ckpt")
