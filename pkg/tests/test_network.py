import numpy as np
import pytest

from surroflow.checkpoint import load_checkpoint, save_checkpoint
from surroflow.errors import ArchitectureError, GeometryError
from surroflow.gradcheck import numerical_gradient, probe_loss, random_probe, relative_error
from surroflow.network import (
    NetworkConfig,
    SurrogateNet,
    build_network,
    dense_block_channels,
)

FULL_STAGE_TABLE = [
    ("initial_conv", 48, (25, 25)),
    ("dense_block_1", 144, (25, 25)),
    ("encoding_1", 72, (13, 13)),
    ("time_concat", 73, (13, 13)),
    ("dense_block_2", 289, (13, 13)),
    ("decoding_1", 144, (25, 25)),
    ("dense_block_3", 240, (25, 25)),
    ("decoding_2", 3, (50, 50)),
]


def tiny_config(**overrides):
    base = dict(
        height=8,
        width=8,
        initial_features=8,
        growth_rate=4,
        block_layers=(1, 1, 1),
        seed=3,
    )
    base.update(overrides)
    return NetworkConfig(**base)


class TestArchitecture:
    def test_dense_block_channel_rule(self):
        assert dense_block_channels(48, 24, 4) == 144
        assert dense_block_channels(73, 24, 9) == 289
        assert dense_block_channels(144, 24, 4) == 240

    def test_full_size_stage_table(self):
        net = build_network(NetworkConfig(height=50, width=50))
        assert net.stage_table == FULL_STAGE_TABLE

    def test_full_size_parameter_count(self):
        net = build_network(NetworkConfig(height=50, width=50))
        assert net.param_count() == 885_980

    def test_tiny_stage_table(self):
        net = build_network(tiny_config())
        assert net.stage_table == [
            ("initial_conv", 8, (4, 4)),
            ("dense_block_1", 12, (4, 4)),
            ("encoding_1", 6, (2, 2)),
            ("time_concat", 7, (2, 2)),
            ("dense_block_2", 11, (2, 2)),
            ("decoding_1", 5, (4, 4)),
            ("dense_block_3", 9, (4, 4)),
            ("decoding_2", 3, (8, 8)),
        ]

    def test_odd_sizes_roundtrip(self):
        net = build_network(
            NetworkConfig(height=25, width=25, initial_features=8, growth_rate=4,
                          block_layers=(1, 1, 1))
        )
        x = np.zeros((1, 1, 25, 25), dtype=np.float32)
        assert net.forward(x, np.zeros(1)).shape == (1, 3, 25, 25)

    def test_rejects_bad_configs(self):
        with pytest.raises(ArchitectureError):
            NetworkConfig(height=32, width=32, block_layers=(2, 2))
        with pytest.raises(ArchitectureError):
            NetworkConfig(height=32, width=32, out_channels=4)
        with pytest.raises(ArchitectureError):
            NetworkConfig(height=32, width=32, growth_rate=0)
        with pytest.raises(ArchitectureError):
            build_network(
                NetworkConfig(height=8, width=8, initial_features=4, growth_rate=2,
                              block_layers=(1, 1, 1, 1, 1))
            )


class TestForward:
    def test_output_shape_range_dtype(self, rng):
        net = build_network(tiny_config())
        x = rng.standard_normal((3, 1, 8, 8)).astype(np.float32)
        t = np.array([0.2, 0.5, 1.0], dtype=np.float32)
        y = net.forward(x, t, train=True)
        assert y.shape == (3, 3, 8, 8)
        assert y.dtype == np.float32
        assert y.min() > 0.0 and y.max() < 1.0

    def test_build_deterministic(self, rng):
        x = rng.standard_normal((2, 1, 8, 8)).astype(np.float32)
        t = np.array([0.3, 0.7], dtype=np.float32)
        y1 = build_network(tiny_config()).forward(x, t, train=False)
        y2 = build_network(tiny_config()).forward(x, t, train=False)
        np.testing.assert_array_equal(y1, y2)

    def test_time_enters_as_constant_latent_channel(self, rng):
        net = build_network(tiny_config())
        x = rng.standard_normal((1, 1, 8, 8)).astype(np.float32)
        _, lat_a = net.forward(x, np.array([0.25]), train=False, return_latent=True)
        _, lat_b = net.forward(x, np.array([0.75]), train=False, return_latent=True)
        np.testing.assert_array_equal(lat_a[:, :-1], lat_b[:, :-1])
        np.testing.assert_allclose(lat_a[:, -1], 0.25)
        np.testing.assert_allclose(lat_b[:, -1], 0.75)

    def test_different_times_change_output(self, rng):
        net = build_network(tiny_config())
        x = rng.standard_normal((1, 1, 8, 8)).astype(np.float32)
        y1 = net.forward(x, np.array([0.2]), train=False)
        y2 = net.forward(x, np.array([1.0]), train=False)
        assert np.abs(y1 - y2).max() > 0

    def test_input_validation(self, rng):
        net = build_network(tiny_config())
        with pytest.raises(GeometryError):
            net.forward(np.zeros((2, 1, 9, 8), dtype=np.float32), np.zeros(2))
        with pytest.raises(GeometryError):
            net.forward(np.zeros((2, 1, 8, 8), dtype=np.float32), np.zeros(3))
        with pytest.raises(GeometryError):
            net.forward(np.zeros((2, 1, 8, 8), dtype=np.float32), np.array([0.1, np.nan]))


class TestBackward:
    def test_gradient_shapes(self, rng):
        net = build_network(tiny_config())
        x = rng.standard_normal((2, 1, 8, 8)).astype(np.float32)
        t = np.array([0.4, 0.9], dtype=np.float32)
        y = net.forward(x, t, train=True)
        gx, gt = net.backward(np.ones_like(y))
        assert gx.shape == x.shape
        assert gt.shape == (2,)
        assert np.isfinite(gx).all() and np.isfinite(gt).all()
        assert np.abs(gt).max() > 0

    def test_input_and_time_gradients_numerically(self, rng):
        net = build_network(tiny_config(dtype="float64"))
        x = rng.standard_normal((2, 1, 8, 8))
        t = np.array([0.4, 0.9])
        probe = random_probe((2, 3, 8, 8), rng)

        def loss():
            return probe_loss(net.forward(x, t, train=True), probe)

        net.forward(x, t, train=True)
        gx, gt = net.backward(probe.copy())
        num_x = numerical_gradient(loss, x)
        assert relative_error(gx, num_x) < 1e-6
        num_t = numerical_gradient(loss, t)
        assert relative_error(gt, num_t) < 1e-6


class TestState:
    def test_checkpoint_roundtrip_reproduces_outputs(self, tmp_path, rng):
        net_a = build_network(tiny_config(seed=1))
        net_b = build_network(tiny_config(seed=2))
        x = rng.standard_normal((2, 1, 8, 8)).astype(np.float32)
        t = np.array([0.5, 0.8], dtype=np.float32)
        # make running stats non-trivial before saving
        net_a.forward(x, t, train=True)
        path = tmp_path / "net.ckpt"
        save_checkpoint(path, net_a.state_tensors(), {"cfg": "tiny"})
        tensors, _ = load_checkpoint(path)
        net_b.load_state_tensors(tensors)
        np.testing.assert_array_equal(
            net_a.forward(x, t, train=False), net_b.forward(x, t, train=False)
        )

    def test_load_rejects_mismatched_names(self):
        net = build_network(tiny_config())
        state = net.state_tensors()
        state.pop(sorted(state)[0])
        with pytest.raises(GeometryError):
            net.load_state_tensors(state)

    def test_parameter_names_unique_and_dotted(self):
        net = build_network(tiny_config())
        names = list(net.named_parameters())
        assert len(names) == len(set(names))
        assert all("." in n for n in names)
        assert any(n.startswith("init_conv") for n in names)
        assert any(n.startswith("latent") for n in names)
        assert any(n.startswith("head") for n in names)
