"""Neural components: segmentation encoder/decoder (the single-frame
"oracle" backbone), the noise-conditioned feature-to-feature generator,
and the patch-level feature discriminator.

Networks operate on batched raw arrays (N, C, H, W); thin wrappers at the
bottom expose the single-sample dataclass contracts (FeatureMap in/out).
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .core import FeatureMap, LogitVolume, SampleSet, SegMap, one_hot


@dataclass
class ModelConfig:
    feature_channels: int = 64
    feature_downsample: int = 8
    noise_channels: int = 32      # matches the published architecture
    k_samples: int = 8
    f2f_layers: int = 5
    f2f_width: int = 64
    f2f_dilations: tuple = (1, 2, 4)
    deformable: bool = False      # reserved; only standard dilated convs exist
    disc_dropout: float = 0.5
    disc_width: int = 64
    disc_layers: int = 3
    n_classes: int = 6

    def __post_init__(self):
        if not (0.5 <= self.disc_dropout <= 0.65):
            raise ValueError("disc_dropout must lie in [0.5, 0.65]")
        if self.deformable:
            raise NotImplementedError("deformable convolutions are not implemented")
        d = self.feature_downsample
        if d < 1 or (d & (d - 1)) != 0:
            raise ValueError("feature_downsample must be a power of two")

    def to_dict(self):
        d = self.__dict__.copy()
        d["f2f_dilations"] = list(self.f2f_dilations)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["f2f_dilations"] = tuple(d.get("f2f_dilations", (1, 2, 4)))
        return cls(**d)


class _PoolUp(nn.Layer):
    """AvgPool then nearest upsample by the same factor, clamped to the
    grid size so small feature maps stay valid."""

    def __init__(self, factor):
        super().__init__()
        self.factor = factor

    def _eff(self, h, w):
        f = min(self.factor, h, w)
        while f > 1 and (h % f or w % f):
            f -= 1
        return f

    def forward(self, x, train=False):
        f = self._eff(x.shape[2], x.shape[3])
        self._f = f
        if f == 1:
            return x
        n, c, h, w = x.shape
        y = x.reshape(n, c, h // f, f, w // f, f).mean(axis=(3, 5))
        return np.repeat(np.repeat(y, f, axis=2), f, axis=3)

    def backward(self, dy):
        f = self._f
        if f == 1:
            return dy
        n, c, h, w = dy.shape
        g = dy.reshape(n, c, h // f, f, w // f, f).sum(axis=(3, 5))
        return np.repeat(np.repeat(g, f, axis=2), f, axis=3) / (f * f)


class SPP(nn.Layer):
    """Average-pool pyramid with per-scale channel projection."""

    def __init__(self, channels, scales=(1, 2, 4), rng=None):
        super().__init__()
        self.scales = scales
        proj_c = max(channels // len(scales), 4)
        self.branches = []
        for f in scales:
            layers = []
            if f > 1:
                layers.append(_PoolUp(f))
            layers += [nn.Conv2d(channels, proj_c, k=1, rng=rng), nn.ReLU()]
            self.branches.append(nn.Sequential(layers))
        self.out = nn.Conv2d(proj_c * len(scales), channels, k=1, rng=rng)
        self._splits = proj_c

    def forward(self, x, train=False):
        ys = [b.forward(x, train=train) for b in self.branches]
        return self.out.forward(np.concatenate(ys, axis=1), train=train)

    def backward(self, dy):
        dcat = self.out.backward(dy)
        dx = None
        p = self._splits
        for i, b in enumerate(self.branches):
            d = b.backward(dcat[:, i * p:(i + 1) * p])
            dx = d if dx is None else dx + d
        return dx

    def zero_grad(self):
        for b in self.branches:
            b.zero_grad()
        self.out.zero_grad()

    def named_params(self, prefix=""):
        out = {}
        for i, b in enumerate(self.branches):
            out.update(b.named_params(f"{prefix}spp{i}."))
        for k, v in self.out.params.items():
            out[f"{prefix}sppout.{k}"] = v
        return out

    def named_grads(self, prefix=""):
        out = {}
        for i, b in enumerate(self.branches):
            out.update(b.named_grads(f"{prefix}spp{i}."))
        for k, v in self.out.grads.items():
            out[f"{prefix}sppout.{k}"] = v
        return out


def _down_channels(cfg):
    n_down = int(math.log2(cfg.feature_downsample))
    return [max(8, cfg.feature_channels >> (n_down - 1 - i)) for i in range(n_down)]


class Encoder:
    """Stride-2 conv stack followed by an SPP block; input is a one-hot
    rendered frame, output the abstract feature grid."""

    def __init__(self, cfg: ModelConfig, seed=0):
        rng = np.random.default_rng(seed)
        chans = _down_channels(cfg)
        chans[-1] = cfg.feature_channels
        layers = []
        prev = cfg.n_classes
        for c in chans:
            layers += [nn.Conv2d(prev, c, k=3, stride=2, pad=1, rng=rng), nn.ReLU()]
            prev = c
        self.trunk = nn.Sequential(layers)
        self.spp = SPP(cfg.feature_channels, rng=rng)
        self.cfg = cfg
        self.activations = None

    def forward(self, x, train=False, record=False):
        if x.shape[2] % self.cfg.feature_downsample or x.shape[3] % self.cfg.feature_downsample:
            raise ValueError(
                f"input spatial shape {x.shape[2:]} not divisible by "
                f"feature_downsample={self.cfg.feature_downsample}")
        acts = []
        for l in self.trunk.layers:
            x = l.forward(x, train=train)
            if record and isinstance(l, nn.ReLU):
                acts.append(x)
        self.activations = acts if record else None
        return self.spp.forward(x, train=train)

    def backward(self, dy):
        return self.trunk.backward(self.spp.backward(dy))

    def zero_grad(self):
        self.trunk.zero_grad()
        self.spp.zero_grad()

    def named_params(self):
        p = self.trunk.named_params("enc.")
        p.update(self.spp.named_params("enc."))
        return p

    def named_grads(self):
        g = self.trunk.named_grads("enc.")
        g.update(self.spp.named_grads("enc."))
        return g


class Decoder:
    """Upsampling branch: features back to full-resolution class logits."""

    def __init__(self, cfg: ModelConfig, seed=1):
        rng = np.random.default_rng(seed)
        chans = list(reversed(_down_channels(cfg)))[1:] + [16]
        layers = []
        prev = cfg.feature_channels
        for c in chans:
            layers += [nn.UpsampleNearest(2), nn.Conv2d(prev, c, k=3, pad=1, rng=rng), nn.ReLU()]
            prev = c
        layers.append(nn.Conv2d(prev, cfg.n_classes, k=1, rng=rng))
        self.net = nn.Sequential(layers)
        self.cfg = cfg

    def forward(self, x, train=False):
        return self.net.forward(x, train=train)

    def backward(self, dy):
        return self.net.backward(dy)

    def zero_grad(self):
        self.net.zero_grad()

    def named_params(self):
        return self.net.named_params("dec.")

    def named_grads(self):
        return self.net.named_grads("dec.")


class F2FGenerator:
    """Dilated conv stack mapping (3 past feature maps ++ noise) to the
    future feature map. Noise is concatenated channel-wise at the input."""

    def __init__(self, cfg: ModelConfig, seed=2):
        rng = np.random.default_rng(seed)
        cin = 3 * cfg.feature_channels + cfg.noise_channels
        layers = []
        prev = cin
        for i in range(cfg.f2f_layers - 1):
            d = cfg.f2f_dilations[i % len(cfg.f2f_dilations)]
            layers += [nn.Conv2d(prev, cfg.f2f_width, k=3, dilation=d, rng=rng), nn.ReLU()]
            prev = cfg.f2f_width
        layers.append(nn.Conv2d(prev, cfg.feature_channels, k=1, rng=rng))
        self.net = nn.Sequential(layers)
        self.cfg = cfg

    def forward(self, past, z, train=False):
        """past: (N, 3*C_f, H, W); z: (N, noise_channels, H, W)."""
        if past.shape[2:] != z.shape[2:]:
            raise ValueError("noise spatial shape must match past features")
        return self.net.forward(np.concatenate([past, z], axis=1), train=train)

    def backward(self, dy):
        dx = self.net.backward(dy)
        return dx[:, :3 * self.cfg.feature_channels]

    def zero_grad(self):
        self.net.zero_grad()

    def named_params(self):
        return self.net.named_params("gen.")

    def named_grads(self):
        return self.net.named_grads("gen.")


class PatchDiscriminator:
    """Patch-level real/fake scorer on (candidate ++ past) features.
    Dropout on the first conv layer keeps it from dominating training."""

    def __init__(self, cfg: ModelConfig, seed=3):
        rng = np.random.default_rng(seed)
        cin = 4 * cfg.feature_channels
        w = cfg.disc_width
        layers = [nn.Dropout(cfg.disc_dropout),
                  nn.Conv2d(cin, w, k=3, pad=1, rng=rng), nn.LeakyReLU()]
        for _ in range(cfg.disc_layers - 2):
            layers += [nn.Conv2d(w, w, k=3, stride=2, pad=1, rng=rng), nn.LeakyReLU()]
        layers += [nn.Conv2d(w, 1, k=3, pad=1, rng=rng), nn.Sigmoid()]
        self.net = nn.Sequential(layers)
        self.cfg = cfg

    def seed_dropout(self, seed):
        for l in self.net.layers:
            if isinstance(l, nn.Dropout):
                l.seed_rng(seed)

    def forward(self, candidate, condition, train=False):
        """candidate: (N, C_f, H, W); condition: (N, 3*C_f, H, W).
        Returns the patch score grid (N, 1, hp, wp), each score in (0, 1)."""
        if candidate.shape[2:] != condition.shape[2:]:
            raise ValueError("candidate and condition must be spatially aligned")
        return self.net.forward(np.concatenate([candidate, condition], axis=1), train=train)

    def backward(self, dy):
        dx = self.net.backward(dy)
        return dx[:, :self.cfg.feature_channels], dx[:, self.cfg.feature_channels:]

    def zero_grad(self):
        self.net.zero_grad()

    def named_params(self):
        return self.net.named_params("disc.")

    def named_grads(self):
        return self.net.named_grads("disc.")


def sample_noise(k, spatial, seed, channels=32):
    """k i.i.d. standard-normal tensors (channels, H, W); per-sample seeds
    are derived from `seed` and returned for exact replay."""
    if k < 1:
        raise ValueError("k must be >= 1")
    seeds = np.random.default_rng(seed).integers(0, 2 ** 62, size=k)
    h, w = spatial
    zs = [np.random.default_rng(int(s)).standard_normal((channels, h, w)) for s in seeds]
    return zs, [int(s) for s in seeds]


def noise_from_seed(noise_seed, spatial, channels=32):
    h, w = spatial
    return np.random.default_rng(int(noise_seed)).standard_normal((channels, h, w))


@dataclass
class ForecastModel:
    """Bundle of the four networks sharing one ModelConfig."""
    cfg: ModelConfig
    encoder: Encoder = None
    decoder: Decoder = None
    generator: F2FGenerator = None
    discriminator: PatchDiscriminator = None
    init_seed: int = 0

    def __post_init__(self):
        base = self.init_seed * 4
        if self.encoder is None:
            self.encoder = Encoder(self.cfg, seed=base)
        if self.decoder is None:
            self.decoder = Decoder(self.cfg, seed=base + 1)
        if self.generator is None:
            self.generator = F2FGenerator(self.cfg, seed=base + 2)
        if self.discriminator is None:
            self.discriminator = PatchDiscriminator(self.cfg, seed=base + 3)

    # single-sample convenience API over the dataclass types ---------------

    def encode(self, seg: SegMap) -> FeatureMap:
        x = one_hot(seg)[None]
        return FeatureMap(self.encoder.forward(x)[0])

    def decode(self, feature: FeatureMap, table) -> LogitVolume:
        y = self.decoder.forward(feature.data[None])[0]
        return LogitVolume(y, table)

    def forecast(self, past, z) -> FeatureMap:
        """past: list of 3 FeatureMap (t-9, t-6, t-3); z: (noise_c, H, W)."""
        if len(past) != 3:
            raise ValueError("expected exactly 3 past feature maps")
        shapes = {p.shape for p in past}
        if len(shapes) != 1:
            raise ValueError("past feature maps must share one shape")
        stacked = np.concatenate([p.data for p in past], axis=0)[None]
        y = self.generator.forward(stacked, np.asarray(z, dtype=np.float64)[None])
        return FeatureMap(y[0])

    def forward_k(self, past, k, seed, table) -> SampleSet:
        """K forecasts from K noise draws, each decoded to a LogitVolume."""
        spatial = past[0].shape[1:]
        zs, seeds = sample_noise(k, spatial, seed, self.cfg.noise_channels)
        samples = []
        for z in zs:
            f = self.forecast(past, z)
            samples.append(self.decode(f, table))
        return SampleSet(samples=tuple(samples), noise_seeds=tuple(seeds))

    def discriminate(self, candidate: FeatureMap, past):
        """Patch scores for one candidate future conditioned on 3 past maps;
        returns (score_grid, scalar mean over patches)."""
        cond = np.concatenate([p.data for p in past], axis=0)[None]
        grid = self.discriminator.forward(candidate.data[None], cond)[0, 0]
        return grid, float(grid.mean())
