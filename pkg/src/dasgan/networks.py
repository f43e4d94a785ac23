"""Network definitions: mask-conditioned generators and dual-head discriminators.

The translation model is a resnet encoder/decoder generator pair plus two
discriminators that share a conv trunk between a patch-level realism head
and a pixelwise segmentation head. Spectral normalization wraps every conv
weight; one self-attention block sits in each generator decoder and each
discriminator trunk.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .attention import SelfAttention2d
from .data import ClassPosterior, Domain, ImagePatch, LabelMask, NUM_CLASSES, encode_one_hot
from .errors import ConfigurationError, InvalidInputError
from .spectral import spectral_conv


@dataclass(frozen=True)
class GeneratorSpec:
    """Shape of a translation generator (image + one-hot mask in, image out)."""

    input_channels: int = 3 + NUM_CLASSES
    base_filters: int = 24
    num_resnet_blocks: int = 4
    num_downsample: int = 2
    stem_kernel: int = 7
    use_self_attention: bool = True
    attention_reduction: int = 4
    use_spectral_norm: bool = True


@dataclass(frozen=True)
class DiscriminatorSpec:
    """Shape of a dual-head discriminator.

    The first ``shared_conv_layers`` stride-2 convs feed both heads; the
    segmentation head runs ``num_resnet_blocks`` resnet blocks and
    ``num_deconv_layers`` deconvs back to input resolution.
    """

    in_channels: int = 3
    base_filters: int = 24
    shared_conv_layers: int = 3
    num_resnet_blocks: int = 3
    num_deconv_layers: int = 3
    channel_growth: int = 2
    num_classes: int = NUM_CLASSES
    use_self_attention: bool = True
    attention_reduction: int = 4
    use_spectral_norm: bool = True
    include_source_head: bool = True

    def __post_init__(self):
        if self.num_deconv_layers != self.shared_conv_layers:
            raise ConfigurationError(
                "num_deconv_layers must equal shared_conv_layers so the posterior "
                "returns to input resolution"
            )


class ResnetBlock(nn.Module):
    def __init__(self, channels: int, use_spectral_norm: bool = True):
        super().__init__()
        def conv():
            return spectral_conv(
                nn.Conv2d(channels, channels, 3, padding=1, padding_mode="reflect"),
                use_spectral_norm,
            )

        self.block = nn.Sequential(
            conv(), nn.InstanceNorm2d(channels), nn.ReLU(inplace=True),
            conv(), nn.InstanceNorm2d(channels),
        )

    def forward(self, x):
        return x + self.block(x)


class MaskConditionedGenerator(nn.Module):
    """Translate an image conditioned on its one-hot class mask.

    Output activation is tanh rescaled to [0, 1] to match stored image range.
    """

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        sn = spec.use_spectral_norm
        ch = spec.base_filters

        layers = [
            spectral_conv(
                nn.Conv2d(spec.input_channels, ch, spec.stem_kernel,
                          padding=spec.stem_kernel // 2, padding_mode="reflect"), sn),
            nn.InstanceNorm2d(ch), nn.ReLU(inplace=True),
        ]
        for _ in range(spec.num_downsample):
            layers += [
                spectral_conv(nn.Conv2d(ch, ch * 2, 3, stride=2, padding=1), sn),
                nn.InstanceNorm2d(ch * 2), nn.ReLU(inplace=True),
            ]
            ch *= 2
        for _ in range(spec.num_resnet_blocks):
            layers.append(ResnetBlock(ch, sn))
        # Attention at the decoder entry: the coarsest scale (32x32 for the
        # reference 128px patch, scale-relative elsewhere).
        if spec.use_self_attention:
            layers.append(SelfAttention2d(ch, spec.attention_reduction, sn))
        for _ in range(spec.num_downsample):
            layers += [
                spectral_conv(nn.ConvTranspose2d(ch, ch // 2, 4, stride=2, padding=1), sn),
                nn.InstanceNorm2d(ch // 2), nn.ReLU(inplace=True),
            ]
            ch //= 2
        layers.append(spectral_conv(
            nn.Conv2d(ch, 3, spec.stem_kernel,
                      padding=spec.stem_kernel // 2, padding_mode="reflect"), sn))
        self.net = nn.Sequential(*layers)

    def forward(self, images: torch.Tensor, mask_onehot: torch.Tensor) -> torch.Tensor:
        if images.shape[-2:] != mask_onehot.shape[-2:] or images.shape[0] != mask_onehot.shape[0]:
            raise InvalidInputError(
                f"image batch {tuple(images.shape)} does not match mask batch "
                f"{tuple(mask_onehot.shape)}"
            )
        x = torch.cat([images, mask_onehot], dim=1)
        if x.shape[1] != self.spec.input_channels:
            raise InvalidInputError(
                f"expected {self.spec.input_channels} input channels, got {x.shape[1]}"
            )
        return (torch.tanh(self.net(x)) + 1.0) / 2.0


class DualHeadDiscriminator(nn.Module):
    """Shared conv trunk feeding a patch realism head and a segmentation head.

    ``forward`` returns ``(source_scores, posterior)``; source scores are
    sigmoid patch probabilities on a smaller grid, the posterior is a
    per-pixel softmax at input resolution. Built with
    ``include_source_head=False`` this is the plain segmentation network the
    baseline training modes use.
    """

    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        self.spec = spec
        sn = spec.use_spectral_norm
        ch = spec.base_filters

        trunk = [
            spectral_conv(nn.Conv2d(spec.in_channels, ch, 4, stride=2, padding=1), sn),
            nn.LeakyReLU(0.2, inplace=True),
        ]
        for layer in range(spec.shared_conv_layers - 1):
            trunk += [
                spectral_conv(
                    nn.Conv2d(ch, ch * spec.channel_growth, 4, stride=2, padding=1), sn),
                nn.InstanceNorm2d(ch * spec.channel_growth),
                nn.LeakyReLU(0.2, inplace=True),
            ]
            ch *= spec.channel_growth
            # Attention after the second shared conv (32x32 for a 128px
            # patch, scale-relative elsewhere).
            if layer == 0 and spec.use_self_attention:
                trunk.append(SelfAttention2d(ch, spec.attention_reduction, sn))
        self.trunk = nn.Sequential(*trunk)

        if spec.include_source_head:
            self.source_head = nn.Sequential(
                spectral_conv(nn.Conv2d(ch, ch, 4, padding=1), sn),
                nn.InstanceNorm2d(ch),
                nn.LeakyReLU(0.2, inplace=True),
                spectral_conv(nn.Conv2d(ch, 1, 4, padding=1), sn),
            )
        else:
            self.source_head = None

        seg = [ResnetBlock(ch, sn) for _ in range(spec.num_resnet_blocks)]
        for _ in range(spec.num_deconv_layers):
            out_ch = max(ch // spec.channel_growth, spec.base_filters)
            seg += [
                spectral_conv(nn.ConvTranspose2d(ch, out_ch, 4, stride=2, padding=1), sn),
                nn.InstanceNorm2d(out_ch), nn.ReLU(inplace=True),
            ]
            ch = out_ch
        seg.append(spectral_conv(nn.Conv2d(ch, spec.num_classes, 1), sn))
        self.seg_head = nn.Sequential(*seg)

    def features(self, images: torch.Tensor) -> torch.Tensor:
        return self.trunk(images)

    def source_from(self, feats: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.source_head(feats))

    def posterior_from(self, feats: torch.Tensor) -> torch.Tensor:
        return F.softmax(self.seg_head(feats), dim=1)

    def forward(self, images: torch.Tensor):
        feats = self.trunk(images)
        source = self.source_from(feats) if self.source_head else None
        return source, self.posterior_from(feats)

    def source_scores(self, images: torch.Tensor) -> torch.Tensor:
        """Realism head only (cheaper when the posterior is not needed)."""
        return self.source_from(self.trunk(images))

    def segment(self, images: torch.Tensor) -> torch.Tensor:
        """Posterior only; used at prediction time and by baseline training."""
        return self.posterior_from(self.trunk(images))


class NetworkBundle(nn.Module):
    """The four networks of the joint model."""

    def __init__(self, gen_spec: GeneratorSpec, disc_spec: DiscriminatorSpec):
        super().__init__()
        self.gen_spec = gen_spec
        self.disc_spec = disc_spec
        self.g_ab = MaskConditionedGenerator(gen_spec)
        self.g_ba = MaskConditionedGenerator(gen_spec)
        self.d_a = DualHeadDiscriminator(disc_spec)
        self.d_b = DualHeadDiscriminator(disc_spec)

    def networks(self) -> dict:
        return {"g_ab": self.g_ab, "g_ba": self.g_ba, "d_a": self.d_a, "d_b": self.d_b}

    def generator_parameters(self):
        yield from self.g_ab.parameters()
        yield from self.g_ba.parameters()

    def discriminator_parameters(self):
        yield from self.d_a.parameters()
        yield from self.d_b.parameters()

    def parameter_registry(self) -> dict:
        """Parameter shapes keyed by network and layer path."""
        return {
            net_name: {name: tuple(p.shape) for name, p in net.named_parameters()}
            for net_name, net in self.networks().items()
        }


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# ---------------------------------------------------------------------------
# Tensor conversion between datamodel values and torch batches.
# ---------------------------------------------------------------------------

def to_image_tensor(patches, dtype=torch.float32) -> torch.Tensor:
    """Stack patches (or one patch) into an N x 3 x H x W tensor."""
    if isinstance(patches, ImagePatch):
        patches = [patches]
    arr = np.stack([p.pixels for p in patches]).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)


def to_onehot_tensor(masks, num_classes: int = NUM_CLASSES, dtype=torch.float32) -> torch.Tensor:
    """Stack label masks into an N x C x H x W one-hot tensor (ignore rows zero)."""
    if isinstance(masks, LabelMask):
        masks = [masks]
    arr = np.stack([encode_one_hot(m, num_classes) for m in masks]).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)


def to_label_tensor(masks) -> torch.Tensor:
    if isinstance(masks, LabelMask):
        masks = [masks]
    return torch.from_numpy(np.stack([m.labels for m in masks]).astype(np.int64))


def generator_forward(gen: MaskConditionedGenerator, image, mask):
    """Translate one patch (or an order-aligned batch) to the other domain."""
    single = isinstance(image, ImagePatch)
    patches = [image] if single else list(image)
    masks = [mask] if single else list(mask)
    for p, m in zip(patches, masks):
        if p.shape != m.shape:
            raise InvalidInputError(f"patch {p.shape} and mask {m.shape} shapes differ")
    flipped = {Domain.A: Domain.B, Domain.B: Domain.A}
    with torch.no_grad():
        out = gen(to_image_tensor(patches), to_onehot_tensor(masks))
    arrays = out.permute(0, 2, 3, 1).numpy()
    results = [
        ImagePatch(pixels=np.clip(arrays[i], 0.0, 1.0), domain=flipped[patches[i].domain],
                   id=f"{patches[i].id}~translated")
        for i in range(len(patches))
    ]
    return results[0] if single else results


def discriminator_forward(disc: DualHeadDiscriminator, image: ImagePatch):
    """Run the dual heads on one patch: (source score map, class posterior)."""
    with torch.no_grad():
        source, posterior = disc(to_image_tensor(image))
    post = ClassPosterior(probs=posterior[0].permute(1, 2, 0).numpy().astype(np.float64))
    source_map = source[0, 0].numpy() if source is not None else None
    return source_map, post


# ---------------------------------------------------------------------------
# Checkpoints: one parameter archive per network plus a JSON manifest.
# ---------------------------------------------------------------------------

MANIFEST_FORMAT_VERSION = 1


def save_checkpoint(directory, nets: dict, iteration: int, config_hash: str,
                    metrics: dict | None = None) -> Path:
    """Write each network's state dict and a manifest describing them."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    specs = {}
    for name, net in nets.items():
        torch.save(net.state_dict(), directory / f"{name}.pt")
        spec = net.spec
        specs[name] = {"kind": type(spec).__name__, "fields": asdict(spec)}
    manifest = {
        "format_version": MANIFEST_FORMAT_VERSION,
        "iteration": iteration,
        "config_hash": config_hash,
        "metrics": metrics or {},
        "networks": specs,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory


def load_checkpoint(directory) -> tuple[dict, dict]:
    """Rebuild networks from a checkpoint directory: (nets, manifest)."""
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    spec_types = {"GeneratorSpec": GeneratorSpec, "DiscriminatorSpec": DiscriminatorSpec}
    nets = {}
    for name, info in manifest["networks"].items():
        spec = spec_types[info["kind"]](**info["fields"])
        net = (MaskConditionedGenerator(spec) if info["kind"] == "GeneratorSpec"
               else DualHeadDiscriminator(spec))
        net.load_state_dict(torch.load(directory / f"{name}.pt", weights_only=True))
        net.eval()
        nets[name] = net
    return nets, manifest


def load_segmentation_model(directory) -> DualHeadDiscriminator:
    """The network used at prediction time: the domain-A discriminator."""
    nets, _ = load_checkpoint(directory)
    if "d_a" not in nets:
        raise InvalidInputError(f"checkpoint {directory} has no d_a network")
    return nets["d_a"]
