"""Generators with tapped encoders, projection heads, negative generators and
patch discriminators.

Tap indices count the individual encoder layers in execution order, starting
at 1. With two downsampling stages the encoder is::

    1 pad, 2 conv7, 3 norm, 4 relu,
    5 conv, 6 norm, 7 relu, 8 conv, 9 norm, 10 relu,    (downsampling)
    11 .. 10 + n_blocks                                 (residual blocks)

so the default taps (1, 5, 9, 13, 17) land on the padded input, the first
downsampling conv, the second downsampling norm and residual blocks 3 and 7.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import nn


@dataclass(frozen=True)
class GeneratorSpec:
    ngf: int = 64
    n_blocks: int = 9
    n_down: int = 2
    taps: tuple = (1, 5, 9, 13, 17)

    def __post_init__(self):
        object.__setattr__(self, "taps", tuple(int(t) for t in self.taps))
        if self.n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")
        if self.ngf < 1 or self.n_down < 0:
            raise ValueError("ngf must be positive and n_down nonnegative")
        if not self.taps:
            raise ValueError("at least one tap layer is required")
        if any(b <= a for a, b in zip(self.taps, self.taps[1:])):
            raise ValueError(f"tap indices must be strictly increasing: {self.taps}")
        if self.taps[0] < 1 or self.taps[-1] > self.encoder_depth:
            raise ValueError(
                f"tap indices must lie in [1, {self.encoder_depth}], got {self.taps}")

    @property
    def encoder_depth(self) -> int:
        return 4 + 3 * self.n_down + self.n_blocks

    @property
    def factor(self) -> int:
        return 2 ** self.n_down

    def layer_channels(self, index: int) -> int:
        """Output channel count of 1-based encoder layer ``index``."""
        if index == 1:
            return 3
        if index <= 4:
            return self.ngf
        stage = min((index - 5) // 3 + 1, self.n_down)
        return self.ngf * 2 ** stage

    def tap_channels(self) -> list[int]:
        return [self.layer_channels(t) for t in self.taps]


@dataclass(frozen=True)
class NetworkSpec:
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    ndf: int = 64
    embed_dim: int = 256
    noise_dim: int = 16

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class ResnetBlock(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1), nn.Conv2d(dim, dim, 3, bias=False), nn.InstanceNorm2d(dim),
            nn.ReLU(True),
            nn.ReflectionPad2d(1), nn.Conv2d(dim, dim, 3, bias=False), nn.InstanceNorm2d(dim),
        )

    def forward(self, x):
        return x + self.body(x)


class ResnetGenerator(nn.Module):
    """Encoder/decoder translation network. ``forward`` returns the output image
    and the list of tapped encoder activations."""

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        ngf = spec.ngf
        layers = [nn.ReflectionPad2d(3), nn.Conv2d(3, ngf, 7, bias=False),
                  nn.InstanceNorm2d(ngf), nn.ReLU(True)]
        ch = ngf
        for _ in range(spec.n_down):
            layers += [nn.Conv2d(ch, ch * 2, 3, stride=2, padding=1, padding_mode="reflect",
                                 bias=False),
                       nn.InstanceNorm2d(ch * 2), nn.ReLU(True)]
            ch *= 2
        layers += [ResnetBlock(ch) for _ in range(spec.n_blocks)]
        self.encoder = nn.ModuleList(layers)

        dec = []
        for _ in range(spec.n_down):
            dec += [nn.ConvTranspose2d(ch, ch // 2, 3, stride=2, padding=1, output_padding=1,
                                       bias=False),
                    nn.InstanceNorm2d(ch // 2), nn.ReLU(True)]
            ch //= 2
        dec += [nn.ReflectionPad2d(3), nn.Conv2d(ch, 3, 7), nn.Tanh()]
        self.decoder = nn.Sequential(*dec)

    def check_input(self, x):
        if x.dim() != 4 or x.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) input, got {tuple(x.shape)}")
        f = self.spec.factor
        if x.shape[2] % f or x.shape[3] % f:
            raise ValueError(
                f"spatial size {tuple(x.shape[2:])} must be divisible by {f}")

    def encode(self, x, taps=None):
        """Run the encoder; return the latent and the tapped activations."""
        self.check_input(x)
        taps = self.spec.taps if taps is None else taps
        wanted = set(taps)
        feats = []
        for i, layer in enumerate(self.encoder, start=1):
            x = layer(x)
            if i in wanted:
                feats.append(x)
        return x, feats

    def forward(self, x):
        h, feats = self.encode(x)
        return self.decoder(h), feats


def _mlp(n_in, n_hidden, n_out):
    return nn.Sequential(nn.Linear(n_in, n_hidden), nn.ReLU(True), nn.Linear(n_hidden, n_out))


def sample_locations(feats, num_patches: int, generator=None):
    """One index set per tap, shared across the batch. Taps with fewer than
    ``num_patches`` positions use all of them."""
    locs = []
    for f in feats:
        n = f.shape[2] * f.shape[3]
        perm = torch.randperm(n, generator=generator)
        locs.append(perm[:min(num_patches, n)])
    return locs


class ProjectionHeads(nn.Module):
    """Per-tap two-layer MLP followed by L2 normalization."""

    def __init__(self, in_channels, dim=256):
        super().__init__()
        self.mlps = nn.ModuleList(_mlp(c, dim, dim) for c in in_channels)

    def forward(self, feats, locations):
        if len(feats) != len(self.mlps) or len(locations) != len(self.mlps):
            raise ValueError("feature stack and locations must have one entry per tap")
        out = []
        for mlp, f, loc in zip(self.mlps, feats, locations):
            flat = f.flatten(2)  # B, C, HW
            if loc.numel() and (loc.min() < 0 or loc.max() >= flat.shape[2]):
                raise IndexError("sampled location out of range for tap feature map")
            picked = flat[:, :, loc].transpose(1, 2)  # B, Q, C
            out.append(F.normalize(mlp(picked), dim=-1))
        return out


class NegativeGenerators(nn.Module):
    """Per-tap MLP mapping ``[mean_feat ; z]`` to a unit-norm embedding.

    ``forward(mean_feats, noise)`` takes a list of ``(B, d)`` averaged
    embeddings and noise of shape ``(B, N, noise_dim)`` or ``(N, noise_dim)``
    and returns one ``(B, N, d)`` bank per tap.
    """

    def __init__(self, n_taps, dim=256, noise_dim=16):
        super().__init__()
        self.dim = dim
        self.noise_dim = noise_dim
        self.mlps = nn.ModuleList(_mlp(dim + noise_dim, dim, dim) for _ in range(n_taps))

    def forward(self, mean_feats, noise):
        if noise.shape[-1] != self.noise_dim:
            raise ValueError(f"noise dimension {noise.shape[-1]} != {self.noise_dim}")
        if len(mean_feats) != len(self.mlps):
            raise ValueError("need one mean feature per tap")
        bank = []
        for mlp, m in zip(self.mlps, mean_feats):
            if m.shape[-1] != self.dim:
                raise ValueError(f"mean feature dimension {m.shape[-1]} != {self.dim}")
            b = m.shape[0]
            z = noise if noise.dim() == 3 else noise.unsqueeze(0).expand(b, -1, -1)
            inp = torch.cat([m.unsqueeze(1).expand(-1, z.shape[1], -1), z], dim=-1)
            bank.append(F.normalize(mlp(inp), dim=-1))
        return bank


class PatchDiscriminator(nn.Module):
    """Three strided stages plus two stride-1 convs: 70x70 receptive field,
    total stride 8. ``norm=False`` drops instance normalization, whose global
    statistics make the scores depend on the whole image."""

    def __init__(self, ndf=64, n_layers=3, norm=True):
        super().__init__()

        def norm_layer(ch):
            return nn.InstanceNorm2d(ch) if norm else nn.Identity()

        seq = [nn.Conv2d(3, ndf, 4, stride=2, padding=1), nn.LeakyReLU(0.2, True)]
        mult = 1
        for n in range(1, n_layers):
            prev, mult = mult, min(2 ** n, 8)
            seq += [nn.Conv2d(ndf * prev, ndf * mult, 4, stride=2, padding=1, bias=not norm),
                    norm_layer(ndf * mult), nn.LeakyReLU(0.2, True)]
        prev, mult = mult, min(2 ** n_layers, 8)
        seq += [nn.Conv2d(ndf * prev, ndf * mult, 4, stride=1, padding=1, bias=not norm),
                norm_layer(ndf * mult), nn.LeakyReLU(0.2, True),
                nn.Conv2d(ndf * mult, 1, 4, stride=1, padding=1)]
        self.model = nn.Sequential(*seq)

    def forward(self, x):
        return self.model(x)


class CDDNetworks(nn.Module):
    """Every network of the framework. ``representation_parameters`` and
    ``negative_parameters`` partition the parameter set."""

    R_PARTS = ("G", "F", "D_G", "D_F", "heads_G", "heads_F")
    N_PARTS = ("neg_G", "neg_F")

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        g = spec.generator
        self.G = ResnetGenerator(g)   # hazy -> clean
        self.F = ResnetGenerator(g)   # clean -> hazy
        self.D_G = PatchDiscriminator(spec.ndf)  # judges clean-domain images
        self.D_F = PatchDiscriminator(spec.ndf)  # judges hazy-domain images
        self.heads_G = ProjectionHeads(g.tap_channels(), spec.embed_dim)
        self.heads_F = ProjectionHeads(g.tap_channels(), spec.embed_dim)
        self.neg_G = NegativeGenerators(len(g.taps), spec.embed_dim, spec.noise_dim)
        self.neg_F = NegativeGenerators(len(g.taps), spec.embed_dim, spec.noise_dim)

    def parts(self, names):
        return [getattr(self, n) for n in names]

    def generator_parameters(self):
        return [p for m in self.parts(("G", "F", "heads_G", "heads_F")) for p in m.parameters()]

    def discriminator_parameters(self):
        return [p for m in self.parts(("D_G", "D_F")) for p in m.parameters()]

    def representation_parameters(self):
        return [p for m in self.parts(self.R_PARTS) for p in m.parameters()]

    def negative_parameters(self):
        return [p for m in self.parts(self.N_PARTS) for p in m.parameters()]


def init_parameters(module: nn.Module, seed: int, gain: float = 0.02) -> nn.Module:
    """Normal(0, gain) weights and zero biases for conv/linear layers, drawn from
    a private generator so global RNG state is untouched."""
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen, dtype=m.weight.dtype)
                               * gain)
                if m.bias is not None:
                    m.bias.zero_()
    return module


def build_networks(spec: NetworkSpec, seed: int = 0, dtype=torch.float32) -> CDDNetworks:
    nets = CDDNetworks(spec).to(dtype)
    return init_parameters(nets, seed)
