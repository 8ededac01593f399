"""Network definitions: ResNet generator, patch discriminator, baseline CNN.

All convolutions use kernel (2, 3), stride (1, 1) and same padding, so every
feature map keeps the 150x3 spatial extent. The discriminator's real/fake
"patch" output therefore is itself a 150x3 map whose entries each see a
6-row x 3-column input window (five stacked height-2 kernels after the
first). ``width_mult`` scales every filter count for desk-scale runs;
``width_mult=1`` reproduces the reference filter counts (64..512).
"""

from __future__ import annotations

from collections import namedtuple
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import N_BINS, N_CLASSES, N_SENSORS

CHECKPOINT_FORMAT_VERSION = 1
N_PIXELS = N_BINS * N_SENSORS

GenOut = namedtuple("GenOut", ["image", "label_probs", "label_logits", "pre_tanh"])
DiscOut = namedtuple("DiscOut", ["patch", "label_logits", "label_probs", "features"])


def _ch(filters: int, width_mult: float) -> int:
    return max(1, int(round(filters * width_mult)))


class SameConv(nn.Module):
    """Conv2d, kernel (2,3), stride 1, output size equal to input size.

    The even kernel height needs asymmetric padding; we pad one extra row at
    the bottom (and one column each side), so output pixel (i, j) sees input
    rows {i, i+1}.
    """

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, (2, 3), stride=1, padding=0)

    def forward(self, x):
        return self.conv(F.pad(x, (1, 1, 0, 1)))


class SameConvTranspose(nn.Module):
    """Transposed conv, kernel (2,3), stride 1, size-preserving (crop bottom)."""

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv = nn.ConvTranspose2d(c_in, c_out, (2, 3), stride=1, padding=(0, 1))

    def forward(self, x):
        return self.conv(x)[:, :, : x.shape[2], :]


class ChannelNorm(nn.Module):
    """Standardize each pixel's channel vector (no affine, no spatial stats).

    Used in the discriminator/baseline trunks instead of instance norm:
    instance statistics span the whole 150x3 map, which would couple every
    patch output to every input pixel and destroy the 6x3 patch locality.
    Per-position channel normalization keeps the patch map strictly local.
    """

    def __init__(self, eps: float = 1e-5):
        super().__init__()
        self.eps = eps

    def forward(self, x):
        mu = x.mean(dim=1, keepdim=True)
        var = x.var(dim=1, unbiased=False, keepdim=True)
        return (x - mu) / torch.sqrt(var + self.eps)


def _make_norm(kind: str | None, channels: int) -> nn.Module | None:
    if kind is None:
        return None
    if kind == "instance":
        return nn.InstanceNorm2d(channels)
    if kind == "channel":
        return ChannelNorm()
    raise ValueError(f"unknown norm kind {kind!r}")


class ConvNormLeaky(nn.Module):
    def __init__(self, c_in: int, c_out: int, transposed: bool = False, norm: str | None = "instance"):
        super().__init__()
        conv_cls = SameConvTranspose if transposed else SameConv
        self.conv = conv_cls(c_in, c_out)
        self.norm = _make_norm(norm, c_out)
        self.act = nn.LeakyReLU(0.2)

    def forward(self, x):
        h = self.conv(x)
        if self.norm is not None:
            h = self.norm(h)
        return self.act(h)


class ResidualBlock(nn.Module):
    """conv-IN-LeakyReLU-conv-IN with an additive skip."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = SameConv(channels, channels)
        self.norm1 = nn.InstanceNorm2d(channels)
        self.conv2 = SameConv(channels, channels)
        self.norm2 = nn.InstanceNorm2d(channels)

    def forward(self, x):
        h = F.leaky_relu(self.norm1(self.conv1(x)), 0.2)
        return x + self.norm2(self.conv2(h))


class Generator(nn.Module):
    """Encoder/residual/decoder generator over (image, label) pairs.

    The one-hot label is embedded to 50 dims, expanded through a fully
    connected layer to a 150x3x8 tensor and concatenated with the image to a
    9-channel input. Outputs a tanh-bounded image and a softmax label.
    ``label_tap`` selects where the label head reads from: the pre-tanh
    image features (default) or the residual bottleneck.
    """

    role = "generator"

    def __init__(self, width_mult: float = 1.0, n_res_blocks: int = 9, label_tap: str = "image"):
        super().__init__()
        if not 0.0 < width_mult <= 1.0:
            raise ValueError(f"width_mult must be in (0, 1], got {width_mult}")
        if label_tap not in ("image", "bottleneck"):
            raise ValueError(f"label_tap must be 'image' or 'bottleneck', got {label_tap!r}")
        self.width_mult = width_mult
        self.label_tap = label_tap
        self.n_res_blocks = n_res_blocks

        self.label_embed = nn.Linear(N_CLASSES, 50, bias=False)
        self.label_fc = nn.Linear(50, N_PIXELS * N_CLASSES)

        widths = [_ch(f, width_mult) for f in (64, 128, 256, 512)]
        enc = []
        c_in = 1 + N_CLASSES
        for c_out in widths:
            enc.append(ConvNormLeaky(c_in, c_out))
            c_in = c_out
        self.encoder = nn.Sequential(*enc)
        self.res_blocks = nn.Sequential(*[ResidualBlock(c_in) for _ in range(n_res_blocks)])
        dec = []
        for c_out in [_ch(f, width_mult) for f in (256, 128, 64)]:
            dec.append(ConvNormLeaky(c_in, c_out, transposed=True))
            c_in = c_out
        self.decoder = nn.Sequential(*dec)
        self.image_conv = SameConv(c_in, 1)
        self.image_norm = nn.InstanceNorm2d(1)
        if label_tap == "image":
            self.label_head = nn.Linear(N_PIXELS, N_CLASSES)
        else:
            self.label_head = nn.Linear(_ch(512, width_mult) * N_PIXELS, N_CLASSES)

    def label_plane(self, label: torch.Tensor) -> torch.Tensor:
        """(B, 8) label -> (B, 8, 150, 3) tensor for channel concatenation."""
        h = self.label_fc(self.label_embed(label))
        return h.view(-1, N_CLASSES, N_BINS, N_SENSORS)

    def forward_full(self, image: torch.Tensor, label: torch.Tensor) -> GenOut:
        x = torch.cat([image, self.label_plane(label)], dim=1)
        bottleneck = self.res_blocks(self.encoder(x))
        pre_tanh = self.image_norm(self.image_conv(self.decoder(bottleneck)))
        out_image = torch.tanh(pre_tanh)
        if self.label_tap == "image":
            logits = self.label_head(pre_tanh.flatten(1))
        else:
            logits = self.label_head(bottleneck.flatten(1))
        return GenOut(out_image, F.softmax(logits, dim=-1), logits, pre_tanh)

    def forward(self, image: torch.Tensor, label: torch.Tensor):
        out = self.forward_full(image, label)
        return out.image, out.label_probs


class Discriminator(nn.Module):
    """PatchGAN-style discriminator with an auxiliary octant classifier.

    Returns an unbounded 150x3 real/fake patch map (1x1 conv head) and an
    8-way softmax read off the flattened final 512-channel feature map; that
    feature map is the "hidden layer" feeding both heads.
    """

    role = "discriminator"

    def __init__(self, width_mult: float = 1.0):
        super().__init__()
        if not 0.0 < width_mult <= 1.0:
            raise ValueError(f"width_mult must be in (0, 1], got {width_mult}")
        self.width_mult = width_mult
        self.stage0 = ConvNormLeaky(1, _ch(64, width_mult), norm=None)
        stages = []
        c_in = _ch(64, width_mult)
        for f in (128, 256, 512, 512):
            stages.append(ConvNormLeaky(c_in, _ch(f, width_mult), norm="channel"))
            c_in = _ch(f, width_mult)
        self.stages = nn.ModuleList(stages)
        self.feature_channels = c_in
        self.patch_head = nn.Conv2d(c_in, 1, kernel_size=1)
        self.label_head = nn.Linear(c_in * N_PIXELS, N_CLASSES)

    def trunk_states(self, image: torch.Tensor) -> list[torch.Tensor]:
        """Activations after each conv stage (index -1 feeds both heads)."""
        states = [self.stage0(image)]
        for stage in self.stages:
            states.append(stage(states[-1]))
        return states

    def forward_full(self, image: torch.Tensor) -> DiscOut:
        features = self.trunk_states(image)[-1]
        patch = self.patch_head(features)
        logits = self.label_head(features.flatten(1))
        return DiscOut(patch, logits, F.softmax(logits, dim=-1), features)

    def forward(self, image: torch.Tensor):
        out = self.forward_full(image)
        return out.patch, out.label_probs


class BaselineClassifier(nn.Module):
    """The discriminator trunk without the patch head: plain 8-way CNN."""

    role = "baseline"

    def __init__(self, width_mult: float = 1.0):
        super().__init__()
        if not 0.0 < width_mult <= 1.0:
            raise ValueError(f"width_mult must be in (0, 1], got {width_mult}")
        self.width_mult = width_mult
        self.stage0 = ConvNormLeaky(1, _ch(64, width_mult), norm=None)
        stages = []
        c_in = _ch(64, width_mult)
        for f in (128, 256, 512, 512):
            stages.append(ConvNormLeaky(c_in, _ch(f, width_mult), norm="channel"))
            c_in = _ch(f, width_mult)
        self.stages = nn.ModuleList(stages)
        self.feature_channels = c_in
        self.label_head = nn.Linear(c_in * N_PIXELS, N_CLASSES)

    def trunk_states(self, image: torch.Tensor) -> list[torch.Tensor]:
        states = [self.stage0(image)]
        for stage in self.stages:
            states.append(stage(states[-1]))
        return states

    def forward_logits(self, image: torch.Tensor) -> torch.Tensor:
        return self.label_head(self.trunk_states(image)[-1].flatten(1))

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        return F.softmax(self.forward_logits(image), dim=-1)


def init_weights(net: nn.Module, seed: int) -> nn.Module:
    """Normal(0, 0.02) for every weight matrix/kernel, zeros for biases.

    Deterministic given the seed; overrides whatever construction-time
    initialization torch applied.
    """
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for _, param in sorted(net.named_parameters(), key=lambda kv: kv[0]):
            if param.dim() >= 2:
                param.copy_(torch.randn(param.shape, generator=gen) * 0.02)
            else:
                param.zero_()
    return net


def build_generator(width_mult: float = 1.0, seed: int = 0, label_tap: str = "image") -> Generator:
    return init_weights(Generator(width_mult=width_mult, label_tap=label_tap), seed)


def build_discriminator(width_mult: float = 1.0, seed: int = 0) -> Discriminator:
    return init_weights(Discriminator(width_mult=width_mult), seed)


def build_baseline_classifier(width_mult: float = 1.0, seed: int = 0) -> BaselineClassifier:
    return init_weights(BaselineClassifier(width_mult=width_mult), seed)


def describe(net: nn.Module) -> dict:
    return {
        "role": getattr(net, "role", "unknown"),
        "width_mult": getattr(net, "width_mult", None),
        "parameter_count": sum(p.numel() for p in net.parameters()),
        "layers": [name for name, _ in net.named_modules() if name],
    }


def images_to_tensor(values, dtype=torch.float32) -> torch.Tensor:
    """(N, 150, 3) or (150, 3) array -> (N, 1, 150, 3) float tensor."""
    t = torch.as_tensor(values, dtype=dtype)
    if t.dim() == 2:
        t = t.unsqueeze(0)
    return t.unsqueeze(1)


def save_checkpoint(
    path,
    *,
    kind: str,
    epoch: int,
    arch: dict,
    nets: dict,
    optimizers: dict | None = None,
    rng_states: dict | None = None,
    train_config: dict | None = None,
) -> Path:
    """Single-file checkpoint that round-trips parameters bit-exactly."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "kind": kind,
        "epoch": int(epoch),
        "arch": dict(arch),
        "nets": {name: net.state_dict() for name, net in nets.items()},
        "optimizers": {name: opt.state_dict() for name, opt in (optimizers or {}).items()},
        "rng_states": rng_states or {},
        "train_config": train_config or {},
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format in {path}")
    return ckpt


def rebuild_networks(ckpt: dict) -> dict:
    """Reconstruct the networks stored in a checkpoint payload."""
    arch = ckpt["arch"]
    width = arch["width_mult"]
    if ckpt["kind"] == "accyclegan":
        nets = {
            "g_st": Generator(width, arch.get("n_res_blocks", 9), arch.get("label_tap", "image")),
            "g_ts": Generator(width, arch.get("n_res_blocks", 9), arch.get("label_tap", "image")),
            "d_s": Discriminator(width),
            "d_t": Discriminator(width),
        }
    elif ckpt["kind"] == "baseline":
        nets = {"net": BaselineClassifier(width)}
    else:
        raise ValueError(f"unknown checkpoint kind {ckpt['kind']!r}")
    for name, net in nets.items():
        net.load_state_dict(ckpt["nets"][name])
        net.eval()
    return nets
