"""The VGG-16 convolutional stack and its weight sources.

The layer table mirrors the published architecture: 3x3 stride-1 pad-1
convolutions in five blocks (64, 128, 256, 512, 512 channels) with 2x2
pooling between blocks. Two deliberate deviations from the stock
network, both forced by the consumer: pooling is exported as average
pooling because the weight format has no max-pool kind, and the fully
connected head is absent because feature matching never reaches it.

Weights come from one of two sources. "torchvision" copies the
pretrained ImageNet convolution weights and is only available where
those checkpoints can be loaded. "seeded" draws He-scaled weights from
a per-layer generator; layer k gets the same values no matter which
chain it is exported in, so sub-chains stay byte-compatible with
prefixes of bigger exports.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ContractViolation, ModelError
from .formats import Conv, Pool, Relu

KERNEL = 3
POOL = 2


@dataclass(frozen=True)
class ArchEntry:
    name: str
    kind: str  # "conv" | "relu" | "pool"
    in_channels: int = 0
    out_channels: int = 0
    torchvision_index: Optional[int] = None  # position in vgg16().features


def _block(index: int, convs, in_channels: int, out_channels: int, tv_start: int):
    entries = []
    tv = tv_start
    for ci in range(convs):
        cin = in_channels if ci == 0 else out_channels
        entries.append(ArchEntry(f"conv{index}_{ci + 1}", "conv", cin, out_channels, tv))
        entries.append(ArchEntry(f"relu{index}_{ci + 1}", "relu", out_channels, out_channels))
        tv += 2
    entries.append(ArchEntry(f"pool{index}", "pool", out_channels, out_channels))
    return entries, tv + 1


def _build_table():
    table = []
    tv = 0
    for index, (convs, cin, cout) in enumerate(
        [(2, 3, 64), (2, 64, 128), (3, 128, 256), (3, 256, 512), (3, 512, 512)], start=1
    ):
        entries, tv = _block(index, convs, cin, cout, tv)
        table.extend(entries)
    return tuple(table)


ARCHITECTURE = _build_table()
LAYER_NAMES = tuple(e.name for e in ARCHITECTURE)
_BY_NAME = {e.name: (i, e) for i, e in enumerate(ARCHITECTURE)}

# Ships everything feature matching actually uses; the deeper blocks
# stay available by name for callers that want them.
DEFAULT_LAYERS = LAYER_NAMES[: LAYER_NAMES.index("relu3_3") + 1]
DEFAULT_TAPS = ("relu1_2", "relu2_2", "relu3_3")


def resolve_chain(layer_names) -> list:
    """Names -> ArchEntry list in the given order, validated as a chain
    the downstream extractor will accept: known names, no duplicates,
    and convolution channels that line up starting from an RGB image."""
    names = list(layer_names)
    if not names:
        raise ContractViolation("layer list is empty")
    seen = set()
    entries = []
    channels = 3
    for name in names:
        if name not in _BY_NAME:
            raise ContractViolation(f"unknown layer name: {name}")
        if name in seen:
            raise ContractViolation(f"duplicate layer name: {name}")
        seen.add(name)
        entry = _BY_NAME[name][1]
        if entry.kind == "conv" and entry.in_channels != channels:
            raise ContractViolation(
                f"{name} expects {entry.in_channels} input channels but the chain carries {channels}"
            )
        if entry.kind == "conv":
            channels = entry.out_channels
        entries.append(entry)
    return entries


def seeded_conv(entry: ArchEntry, seed: int):
    """He-scaled stand-in weights for one conv layer. The generator is
    keyed on (seed, layer position) so the draw is independent of which
    chain the layer appears in."""
    rng = np.random.default_rng((seed, _BY_NAME[entry.name][0]))
    fan_in = entry.in_channels * KERNEL * KERNEL
    w = rng.standard_normal((entry.out_channels, entry.in_channels, KERNEL, KERNEL))
    w = (w * np.sqrt(2.0 / fan_in)).astype(np.float32)
    b = (rng.standard_normal(entry.out_channels) * 0.05).astype(np.float32)
    return w, b


def torchvision_convs(entries) -> dict:
    """Pretrained ImageNet weights for the conv layers of a chain.

    Needs torch, torchvision, and a reachable checkpoint; anything short
    of that is a model load failure, never a silent substitution.
    """
    try:
        import torchvision
    except ImportError as exc:
        raise ModelError(f"model load failure: {exc}")
    try:
        model = torchvision.models.vgg16(weights=torchvision.models.VGG16_Weights.IMAGENET1K_V1)
    except Exception as exc:
        raise ModelError(f"model load failure: could not obtain pretrained weights ({exc})")
    features = model.features
    out = {}
    for entry in entries:
        if entry.kind != "conv":
            continue
        mod = features[entry.torchvision_index]
        out[entry.name] = (
            mod.weight.detach().numpy().astype(np.float32),
            mod.bias.detach().numpy().astype(np.float32),
        )
    return out


def build_layers(entries, source: str, seed: int):
    """ArchEntry chain -> serializable layers plus a source identifier."""
    if source == "seeded":
        convs = {e.name: seeded_conv(e, seed) for e in entries if e.kind == "conv"}
        source_id = f"seeded:vgg16:{seed}"
    elif source == "torchvision":
        convs = torchvision_convs(entries)
        source_id = "torchvision:vgg16:IMAGENET1K_V1"
    else:
        raise ContractViolation(f"unknown weight source: {source}")
    layers = []
    for entry in entries:
        if entry.kind == "conv":
            w, b = convs[entry.name]
            layers.append(Conv(w, b, stride=1, pad=1))
        elif entry.kind == "relu":
            layers.append(Relu())
        else:
            layers.append(Pool(POOL))
    return layers, source_id


__all__ = [
    "ArchEntry",
    "ARCHITECTURE",
    "LAYER_NAMES",
    "DEFAULT_LAYERS",
    "DEFAULT_TAPS",
    "resolve_chain",
    "seeded_conv",
    "torchvision_convs",
    "build_layers",
]
