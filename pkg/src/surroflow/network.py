"""Dense convolutional encoder-decoder surrogate with scalar time conditioning.

The network maps a log-permeability image and a normalised time to three
output maps: rescaled pressure, injected saturation and plume-membership
probability, all squashed through a sigmoid. A strided initial convolution is
followed by alternating dense blocks and resizing transitions; the time enters
as one constant feature map concatenated onto the coarsest representation.

Dense blocks grow the channel count linearly: every layer applies
norm-activation-convolution to everything produced so far and appends
``growth_rate`` new maps. Transitions halve the channel count with a 1x1
convolution and then resize with a strided convolution (down) or transposed
convolution (up). All convolutions are bias-free; the final transition feeds
the sigmoid and therefore uses the variance-preserving rather than the
ReLU-specific weight initialisation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArchitectureError, GeometryError
from .layers import (
    BatchNorm2d,
    Conv2d,
    ConvTranspose2d,
    Layer,
    ReLU,
    Sigmoid,
    concat_channels,
    conv_output_size,
)

MIN_LATENT_SIZE = 2


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture hyperparameters; ``block_layers`` must have odd length."""

    height: int
    width: int
    in_channels: int = 1
    out_channels: int = 3
    initial_features: int = 48
    growth_rate: int = 24
    block_layers: tuple[int, ...] = (4, 9, 4)
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "block_layers", tuple(int(l) for l in self.block_layers))
        if self.height < 1 or self.width < 1:
            raise ArchitectureError(f"invalid input size {self.height}x{self.width}")
        if self.in_channels < 1:
            raise ArchitectureError("at least one input channel required")
        if self.out_channels != 3:
            raise ArchitectureError(
                f"network emits pressure, saturation and membership; "
                f"out_channels must be 3, got {self.out_channels}"
            )
        if len(self.block_layers) % 2 == 0 or not self.block_layers:
            raise ArchitectureError(
                f"block_layers needs an odd count (encoder, latent, decoder), "
                f"got {self.block_layers}"
            )
        if any(l < 1 for l in self.block_layers):
            raise ArchitectureError(f"every block needs at least one layer: {self.block_layers}")
        if self.growth_rate < 1 or self.initial_features < 1:
            raise ArchitectureError("growth rate and initial features must be positive")

    @property
    def encoder_blocks(self) -> int:
        return (len(self.block_layers) - 1) // 2

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


def dense_block_channels(c_in: int, growth_rate: int, layers: int) -> int:
    """Channel count after a dense block: input plus one growth per layer."""
    return c_in + growth_rate * layers


def _halved(channels: int) -> int:
    out = channels // 2
    if out < 1:
        raise ArchitectureError(f"cannot halve {channels} channels")
    return out


def _upsample_kernel(size_in: int, size_target: int) -> int:
    """Kernel for a stride-2, padding-1 transposed conv hitting ``size_target``."""
    if size_target == 2 * size_in:
        return 4
    if size_target == 2 * size_in - 1:
        return 3
    raise ArchitectureError(
        f"no stride-2 transposed conv maps size {size_in} to {size_target}"
    )


class DenseLayer(Layer):
    """norm -> ReLU -> 3x3 conv producing ``growth_rate`` new feature maps."""

    def __init__(self, in_channels, growth_rate, rng, dtype):
        self.bn = BatchNorm2d(in_channels, dtype=dtype)
        self.relu = ReLU()
        self.conv = Conv2d(in_channels, growth_rate, 3, 1, 1, rng=rng, dtype=dtype)

    def sublayers(self):
        return [("bn", self.bn), ("relu", self.relu), ("conv", self.conv)]

    def forward(self, x, train=True):
        return self.conv.forward(self.relu.forward(self.bn.forward(x, train)))

    def backward(self, grad):
        return self.bn.backward(self.relu.backward(self.conv.backward(grad)))


class DenseBlock(Layer):
    """Stack of dense layers with cumulative channel concatenation."""

    def __init__(self, in_channels, growth_rate, n_layers, rng, dtype):
        self.in_channels = in_channels
        self.growth_rate = growth_rate
        self.widths = [in_channels + i * growth_rate for i in range(n_layers)]
        self.layers = [DenseLayer(w, growth_rate, rng, dtype) for w in self.widths]
        self.out_channels = dense_block_channels(in_channels, growth_rate, n_layers)

    def sublayers(self):
        return [(f"layer{i + 1}", l) for i, l in enumerate(self.layers)]

    def forward(self, x, train=True):
        feats = x
        for layer in self.layers:
            feats = concat_channels([feats, layer.forward(feats, train)])
        return feats

    def backward(self, grad):
        for layer, width in zip(reversed(self.layers), reversed(self.widths)):
            g_prev = grad[:, :width]
            g_new = np.ascontiguousarray(grad[:, width:])
            grad = g_prev + layer.backward(g_new)
        return grad


class TransitionDown(Layer):
    """Channel-halving 1x1 conv then stride-2 3x3 conv, both pre-activated."""

    def __init__(self, in_channels, rng, dtype):
        mid = _halved(in_channels)
        self.out_channels = mid
        self.bn1 = BatchNorm2d(in_channels, dtype=dtype)
        self.relu1 = ReLU()
        self.conv1 = Conv2d(in_channels, mid, 1, 1, 0, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm2d(mid, dtype=dtype)
        self.relu2 = ReLU()
        self.conv2 = Conv2d(mid, mid, 3, 2, 1, rng=rng, dtype=dtype)

    def sublayers(self):
        return [
            ("bn1", self.bn1),
            ("relu1", self.relu1),
            ("conv1", self.conv1),
            ("bn2", self.bn2),
            ("relu2", self.relu2),
            ("conv2", self.conv2),
        ]

    def output_size(self, size: int) -> int:
        return conv_output_size(size, 3, 2, 1)

    def forward(self, x, train=True):
        h = self.conv1.forward(self.relu1.forward(self.bn1.forward(x, train)))
        return self.conv2.forward(self.relu2.forward(self.bn2.forward(h, train)))

    def backward(self, grad):
        g = self.bn2.backward(self.relu2.backward(self.conv2.backward(grad)))
        return self.bn1.backward(self.relu1.backward(self.conv1.backward(g)))


class TransitionUp(Layer):
    """Channel-halving 1x1 conv then stride-2 transposed conv, pre-activated."""

    def __init__(self, in_channels, out_channels, kernel, rng, dtype, init="he"):
        mid = _halved(in_channels)
        self.out_channels = out_channels
        self.bn1 = BatchNorm2d(in_channels, dtype=dtype)
        self.relu1 = ReLU()
        self.conv1 = Conv2d(in_channels, mid, 1, 1, 0, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm2d(mid, dtype=dtype)
        self.relu2 = ReLU()
        self.tconv = ConvTranspose2d(mid, out_channels, kernel, 2, 1, rng=rng, init=init, dtype=dtype)

    def sublayers(self):
        return [
            ("bn1", self.bn1),
            ("relu1", self.relu1),
            ("conv1", self.conv1),
            ("bn2", self.bn2),
            ("relu2", self.relu2),
            ("tconv", self.tconv),
        ]

    def forward(self, x, train=True):
        h = self.conv1.forward(self.relu1.forward(self.bn1.forward(x, train)))
        return self.tconv.forward(self.relu2.forward(self.bn2.forward(h, train)))

    def backward(self, grad):
        g = self.bn2.backward(self.relu2.backward(self.tconv.backward(grad)))
        return self.bn1.backward(self.relu1.backward(self.conv1.backward(g)))


class SurrogateNet(Layer):
    """Full image-plus-time to three-field surrogate."""

    def __init__(self, config: NetworkConfig):
        self.config = config
        dtype = config.np_dtype
        rng = np.random.default_rng(np.random.SeedSequence((config.seed, 29)))
        n_blocks = len(config.block_layers)
        n_enc = config.encoder_blocks

        self.init_conv = Conv2d(
            config.in_channels, config.initial_features, 7, 2, 3, rng=rng, dtype=dtype
        )
        h = conv_output_size(config.height, 7, 2, 3)
        w = conv_output_size(config.width, 7, 2, 3)
        sizes = [(h, w)]
        stages = [("initial_conv", config.initial_features, (h, w))]

        channels = config.initial_features
        self.encoder = []
        for i in range(n_enc):
            block = DenseBlock(channels, config.growth_rate, config.block_layers[i], rng, dtype)
            channels = block.out_channels
            stages.append((f"dense_block_{i + 1}", channels, (h, w)))
            down = TransitionDown(channels, rng, dtype)
            channels = down.out_channels
            h, w = down.output_size(h), down.output_size(w)
            if min(h, w) < MIN_LATENT_SIZE:
                raise ArchitectureError(
                    f"encoder stage {i + 1} collapses the grid to {h}x{w}; "
                    f"need at least {MIN_LATENT_SIZE}"
                )
            sizes.append((h, w))
            stages.append((f"encoding_{i + 1}", channels, (h, w)))
            self.encoder.append((block, down))

        self.latent_in_channels = channels + 1
        stages.append(("time_concat", self.latent_in_channels, (h, w)))
        self.latent = DenseBlock(
            self.latent_in_channels, config.growth_rate, config.block_layers[n_enc], rng, dtype
        )
        channels = self.latent.out_channels
        stages.append((f"dense_block_{n_enc + 1}", channels, (h, w)))

        self.decoder = []
        for i in range(n_enc):
            target = sizes[n_enc - 1 - i]
            kernel = _upsample_kernel(h, target[0])
            if _upsample_kernel(w, target[1]) != kernel:
                raise ArchitectureError(
                    f"anisotropic upsampling {h}x{w} -> {target} is not supported"
                )
            up = TransitionUp(channels, _halved(channels), kernel, rng, dtype)
            channels = up.out_channels
            h, w = target
            stages.append((f"decoding_{i + 1}", channels, (h, w)))
            block = DenseBlock(
                channels, config.growth_rate, config.block_layers[n_enc + 1 + i], rng, dtype
            )
            channels = block.out_channels
            stages.append((f"dense_block_{n_enc + 2 + i}", channels, (h, w)))
            self.decoder.append((up, block))

        target = (config.height, config.width)
        kernel = _upsample_kernel(h, target[0])
        if _upsample_kernel(w, target[1]) != kernel:
            raise ArchitectureError(
                f"anisotropic upsampling {h}x{w} -> {target} is not supported"
            )
        self.head = TransitionUp(
            channels, config.out_channels, kernel, rng, dtype, init="xavier"
        )
        stages.append((f"decoding_{n_enc + 1}", config.out_channels, target))
        self.stage_table = stages
        self._latent_size = next(size for name, _, size in stages if name == "time_concat")
        self.out_act = Sigmoid()

    def sublayers(self):
        out = [("init_conv", self.init_conv)]
        for i, (block, down) in enumerate(self.encoder):
            out.append((f"enc{i + 1}.block", block))
            out.append((f"enc{i + 1}.down", down))
        out.append(("latent", self.latent))
        for i, (up, block) in enumerate(self.decoder):
            out.append((f"dec{i + 1}.up", up))
            out.append((f"dec{i + 1}.block", block))
        out.append(("head", self.head))
        return out

    def param_count(self) -> int:
        return sum(p.value.size for p in self.named_parameters().values())

    def forward(self, x, t, train=True, return_latent=False):
        """Map inputs ``x`` [n, c, h, w] and times ``t`` [n] to three output maps."""
        cfg = self.config
        x = np.asarray(x)
        t = np.asarray(t)
        if x.ndim != 4 or x.shape[1:] != (cfg.in_channels, cfg.height, cfg.width):
            raise GeometryError(
                f"expected input [n, {cfg.in_channels}, {cfg.height}, {cfg.width}], "
                f"got {x.shape}"
            )
        if t.shape != (x.shape[0],):
            raise GeometryError(f"expected one time per sample, got {t.shape}")
        if not np.isfinite(t).all():
            raise GeometryError("times must be finite")
        if x.dtype != cfg.np_dtype:
            x = x.astype(cfg.np_dtype)

        h = self.init_conv.forward(x, train)
        for block, down in self.encoder:
            h = down.forward(block.forward(h, train), train)
        lh, lw = self._latent_size
        tmap = np.broadcast_to(
            t.astype(cfg.np_dtype).reshape(-1, 1, 1, 1), (x.shape[0], 1, lh, lw)
        ).copy()
        h = concat_channels([h, tmap])
        latent_input = h if return_latent else None
        h = self.latent.forward(h, train)
        for up, block in self.decoder:
            h = block.forward(up.forward(h, train), train)
        h = self.head.forward(h, train)
        y = self.out_act.forward(h, train)
        if return_latent:
            return y, latent_input
        return y

    def backward(self, grad):
        """Propagate an output gradient; returns ``(grad_x, grad_t)``."""
        g = self.out_act.backward(grad)
        g = self.head.backward(g)
        for up, block in reversed(self.decoder):
            g = up.backward(block.backward(g))
        g = self.latent.backward(g)
        n_feature = self.latent_in_channels - 1
        g_time_map = g[:, n_feature:]
        grad_t = g_time_map.sum(axis=(1, 2, 3)).astype(np.float64)
        g = np.ascontiguousarray(g[:, :n_feature])
        for block, down in reversed(self.encoder):
            g = block.backward(down.backward(g))
        g = self.init_conv.backward(g)
        return g, grad_t

    def state_tensors(self) -> dict[str, np.ndarray]:
        """Parameters and running statistics, keyed by dotted path."""
        out = {k: p.value for k, p in self.named_parameters().items()}
        out.update(self.named_buffers())
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        own = {k: p.value for k, p in self.named_parameters().items()}
        own.update(self.named_buffers())
        missing = sorted(set(own) - set(tensors))
        extra = sorted(set(tensors) - set(own))
        if missing or extra:
            raise GeometryError(
                f"state mismatch: missing {missing[:3]}..., unexpected {extra[:3]}..."
                if len(missing) + len(extra) > 6
                else f"state mismatch: missing {missing}, unexpected {extra}"
            )
        for key, arr in own.items():
            incoming = np.asarray(tensors[key], dtype=arr.dtype)
            if incoming.shape != arr.shape:
                raise GeometryError(
                    f"shape mismatch for {key}: {incoming.shape} vs {arr.shape}"
                )
            arr[...] = incoming


def build_network(config: NetworkConfig) -> SurrogateNet:
    """Construct the surrogate for a given configuration."""
    return SurrogateNet(config)
