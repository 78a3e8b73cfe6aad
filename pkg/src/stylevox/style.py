"""Feature extraction and nearest-neighbor feature matching losses.

The extractor is a fixed conv/relu/avgpool chain evaluated in float64
with an exact input adjoint; weights are frozen assets, so no weight
gradients exist anywhere here. Feature maps are row-major with channel
minor. Weight files (S2FW) and feature dumps (S2FM) are little-endian
binary; layout details sit next to the readers below.
"""

import struct
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image

from .errors import CheckpointError, ContractViolation
from .loss import LossReport, LossWeights

WEIGHTS_MAGIC = b"S2FW"
FEATURES_MAGIC = b"S2FM"
FORMAT_VERSION = 1

_KIND_CONV = 0
_KIND_RELU = 1
_KIND_POOL = 2

STYLE_MAX_SIDE = 512


@dataclass
class FeatureMap:
    """Activations of one tap layer for one image."""

    values: np.ndarray  # (H,W,C) float32
    extractor_id: str
    layer: str

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        if self.values.ndim != 3:
            raise ContractViolation(f"feature map must be (H,W,C), got {self.values.shape}")

    @property
    def shape(self):
        return self.values.shape


@dataclass
class ConvLayer:
    weight: np.ndarray  # (out,in,kh,kw) float32
    bias: np.ndarray  # (out,) float32
    stride: int = 1
    pad: int = 0

    def __post_init__(self):
        self.weight = np.ascontiguousarray(self.weight, dtype=np.float32)
        self.bias = np.ascontiguousarray(self.bias, dtype=np.float32)
        if self.weight.ndim != 4 or self.bias.shape != (self.weight.shape[0],):
            raise ContractViolation("conv weight must be (out,in,kh,kw) with matching bias")
        if self.stride < 1 or self.pad < 0:
            raise ContractViolation("conv stride must be >= 1 and pad >= 0")


@dataclass
class ReluLayer:
    pass


@dataclass
class PoolLayer:
    size: int = 2

    def __post_init__(self):
        if self.size < 1:
            raise ContractViolation("pool size must be >= 1")


Layer = Union[ConvLayer, ReluLayer, PoolLayer]


def _layer_name(layer: Layer, index: int) -> str:
    prefix = {ConvLayer: "conv", ReluLayer: "relu", PoolLayer: "pool"}[type(layer)]
    return f"{prefix}{index}"


@dataclass
class FeatureExtractor:
    """Ordered conv/relu/avgpool chain with named tap layers."""

    layers: list
    taps: list
    extractor_id: str = "extractor"

    def __post_init__(self):
        if not self.layers:
            raise ContractViolation("extractor needs at least one layer")
        names = [_layer_name(l, i) for i, l in enumerate(self.layers)]
        taps = []
        for t in self.taps:
            name = names[t] if isinstance(t, int) else str(t)
            if name not in names:
                raise ContractViolation(f"tap {name!r} is not a layer of this extractor")
            taps.append(name)
        if not taps:
            raise ContractViolation("extractor needs at least one tap")
        self.taps = taps
        self.layer_names = names

    def tap_indices(self):
        return [self.layer_names.index(t) for t in self.taps]


# ---------------------------------------------------------------------------
# forward / backward


def _conv_forward(x, layer: ConvLayer):
    kh, kw = layer.weight.shape[2], layer.weight.shape[3]
    if x.shape[2] != layer.weight.shape[1]:
        raise ContractViolation(
            f"conv expects {layer.weight.shape[1]} input channels, got {x.shape[2]}"
        )
    p = layer.pad
    xp = np.pad(x, ((p, p), (p, p), (0, 0))) if p else x
    if xp.shape[0] < kh or xp.shape[1] < kw:
        raise ContractViolation("image too small for this conv kernel")
    win = sliding_window_view(xp, (kh, kw), axis=(0, 1))[:: layer.stride, :: layer.stride]
    ho, wo = win.shape[0], win.shape[1]
    cols = win.reshape(ho * wo, -1)  # (N, C*kh*kw), channel major
    wmat = layer.weight.reshape(layer.weight.shape[0], -1).astype(np.float64)
    out = cols @ wmat.T + layer.bias.astype(np.float64)
    return out.reshape(ho, wo, -1)


def _conv_backward(d_out, in_shape, layer: ConvLayer):
    kh, kw = layer.weight.shape[2], layer.weight.shape[3]
    p, s = layer.pad, layer.stride
    ho, wo = d_out.shape[0], d_out.shape[1]
    wmat = layer.weight.reshape(layer.weight.shape[0], -1).astype(np.float64)
    d_cols = d_out.reshape(ho * wo, -1) @ wmat  # (N, C*kh*kw)
    d_patch = d_cols.reshape(ho, wo, in_shape[2], kh, kw)
    d_xp = np.zeros((in_shape[0] + 2 * p, in_shape[1] + 2 * p, in_shape[2]))
    for ki in range(kh):
        for kj in range(kw):
            d_xp[ki : ki + ho * s : s, kj : kj + wo * s : s] += d_patch[:, :, :, ki, kj]
    return d_xp[p : p + in_shape[0], p : p + in_shape[1]] if p else d_xp


def _pool_forward(x, layer: PoolLayer):
    k = layer.size
    ho, wo = x.shape[0] // k, x.shape[1] // k
    if ho == 0 or wo == 0:
        raise ContractViolation("image too small for this pooling window")
    t = x[: ho * k, : wo * k].reshape(ho, k, wo, k, -1)
    return t.mean(axis=(1, 3))


def _pool_backward(d_out, in_shape, layer: PoolLayer):
    k = layer.size
    ho, wo = d_out.shape[0], d_out.shape[1]
    d_x = np.zeros(in_shape)
    spread = np.repeat(np.repeat(d_out / (k * k), k, axis=0), k, axis=1)
    d_x[: ho * k, : wo * k] = spread
    return d_x


def _run_forward(extractor: FeatureExtractor, image, depth):
    """Forward through layers[:depth+1]; returns (per-layer outputs cache)."""
    x = np.asarray(image, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != 3:
        raise ContractViolation(f"extractor input must be (H,W,3), got {x.shape}")
    cache = []
    for layer in extractor.layers[: depth + 1]:
        in_shape = x.shape
        if isinstance(layer, ConvLayer):
            x = _conv_forward(x, layer)
            cache.append(("conv", in_shape, None))
        elif isinstance(layer, ReluLayer):
            mask = x > 0.0
            x = np.where(mask, x, 0.0)
            cache.append(("relu", in_shape, mask))
        else:
            x = _pool_forward(x, layer)
            cache.append(("pool", in_shape, None))
        cache[-1] = cache[-1] + (x,)
    return cache


def extract_features(extractor: FeatureExtractor, image):
    """Feature maps at every tap, in tap order."""
    maps, _ = extract_features_with_cache(extractor, image)
    return maps


def extract_features_with_cache(extractor: FeatureExtractor, image):
    idx = extractor.tap_indices()
    cache = _run_forward(extractor, image, max(idx))
    maps = [
        FeatureMap(cache[i][3].astype(np.float32), extractor.extractor_id, extractor.taps[k])
        for k, i in enumerate(idx)
    ]
    return maps, (cache, np.asarray(image).shape)


def features_backward(extractor: FeatureExtractor, cache_token, d_maps):
    """Exact adjoint: gradients at the taps back to the input image.

    d_maps pairs with the extractor's taps (None allowed for taps that
    received no gradient). Returns d_image (H,W,3) float64.
    """
    cache, image_shape = cache_token
    idx = extractor.tap_indices()
    if len(d_maps) != len(idx):
        raise ContractViolation(f"expected {len(idx)} tap gradients, got {len(d_maps)}")
    by_layer = {}
    for i, d in zip(idx, d_maps):
        if d is None:
            continue
        d = np.asarray(d, dtype=np.float64)
        if d.shape != cache[i][3].shape:
            raise ContractViolation(
                f"tap gradient shape {d.shape} does not match features {cache[i][3].shape}"
            )
        by_layer[i] = by_layer.get(i, 0.0) + d
    depth = len(cache) - 1
    d_x = np.zeros_like(cache[depth][3])
    for i in range(depth, -1, -1):
        kind, in_shape, aux, _out = cache[i]
        if i in by_layer:
            d_x = d_x + by_layer[i]
        layer = extractor.layers[i]
        if kind == "conv":
            d_x = _conv_backward(d_x, in_shape, layer)
        elif kind == "relu":
            d_x = np.where(aux, d_x, 0.0)
        else:
            d_x = _pool_backward(d_x, in_shape, layer)
    if d_x.shape != image_shape:
        raise AssertionError("adjoint shape drifted from the input image")
    return d_x


def make_test_extractor(seed: int = 0) -> FeatureExtractor:
    """Small seeded two-conv extractor used by tests and the built-in
    stylization checks; needs no external weight files."""
    rng = np.random.default_rng(seed)

    def he(out_c, in_c, k):
        w = rng.standard_normal((out_c, in_c, k, k)) * np.sqrt(2.0 / (in_c * k * k))
        return w.astype(np.float32)

    layers = [
        ConvLayer(he(8, 3, 3), np.full(8, 0.01, dtype=np.float32), 1, 1),
        ReluLayer(),
        ConvLayer(he(16, 8, 3), np.full(16, 0.01, dtype=np.float32), 1, 1),
        ReluLayer(),
    ]
    return FeatureExtractor(layers, ["relu1", "relu3"], f"test-extractor-{seed}")


# ---------------------------------------------------------------------------
# weight / feature files
#
# S2FW: "S2FW", u32 version, u32 n_layers, then per layer a u8 kind and
#   kind 0 (conv): u32 out,in,kh,kw,stride,pad; f32 weights (OIHW), f32 biases
#   kind 1 (relu): nothing
#   kind 2 (avgpool): u32 window size
# S2FM: "S2FM", u32 version, u32 h, u32 w, u32 c, f32 values row-major
#   channel-minor.


def save_weights(extractor: FeatureExtractor, path):
    with open(path, "wb") as f:
        f.write(WEIGHTS_MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(extractor.layers)))
        for layer in extractor.layers:
            if isinstance(layer, ConvLayer):
                o, i, kh, kw = layer.weight.shape
                f.write(struct.pack("<BIIIIII", _KIND_CONV, o, i, kh, kw, layer.stride, layer.pad))
                f.write(layer.weight.astype("<f4").tobytes())
                f.write(layer.bias.astype("<f4").tobytes())
            elif isinstance(layer, ReluLayer):
                f.write(struct.pack("<B", _KIND_RELU))
            else:
                f.write(struct.pack("<BI", _KIND_POOL, layer.size))


def _read_exact(f, n, what):
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointError(f"weight file truncated while reading {what}")
    return buf


def load_weights(path, taps=None, extractor_id: Optional[str] = None) -> FeatureExtractor:
    """Read an S2FW chain. taps defaults to the last relu in the chain."""
    layers = []
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != WEIGHTS_MAGIC:
            raise CheckpointError("bad magic, not a weight file")
        version, n_layers = struct.unpack("<II", _read_exact(f, 8, "header"))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported weight file version {version}")
        for li in range(n_layers):
            (kind,) = struct.unpack("<B", _read_exact(f, 1, f"layer {li} kind"))
            if kind == _KIND_CONV:
                o, i, kh, kw, stride, pad = struct.unpack(
                    "<IIIIII", _read_exact(f, 24, f"layer {li} conv shape")
                )
                w = np.frombuffer(
                    _read_exact(f, 4 * o * i * kh * kw, f"layer {li} weights"), dtype="<f4"
                ).reshape(o, i, kh, kw)
                b = np.frombuffer(_read_exact(f, 4 * o, f"layer {li} biases"), dtype="<f4")
                layers.append(ConvLayer(w.copy(), b.copy(), int(stride), int(pad)))
            elif kind == _KIND_RELU:
                layers.append(ReluLayer())
            elif kind == _KIND_POOL:
                (size,) = struct.unpack("<I", _read_exact(f, 4, f"layer {li} pool size"))
                layers.append(PoolLayer(int(size)))
            else:
                raise CheckpointError(f"unknown layer kind {kind} at layer {li}")
        if f.read(1):
            raise CheckpointError("trailing bytes after weight payload")
    if taps is None:
        relus = [i for i, l in enumerate(layers) if isinstance(l, ReluLayer)]
        if not relus:
            raise CheckpointError("weight chain has no relu to tap")
        taps = [relus[-1]]
    if extractor_id is None:
        extractor_id = f"s2fw:{path}"
    return FeatureExtractor(layers, list(taps), extractor_id)


def save_features(fmap: FeatureMap, path):
    h, w, c = fmap.values.shape
    with open(path, "wb") as f:
        f.write(FEATURES_MAGIC)
        f.write(struct.pack("<IIII", FORMAT_VERSION, h, w, c))
        f.write(fmap.values.astype("<f4").tobytes())


def load_features(path, extractor_id="", layer="") -> FeatureMap:
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != FEATURES_MAGIC:
            raise CheckpointError("bad magic, not a feature file")
        version, h, w, c = struct.unpack("<IIII", _read_exact(f, 16, "header"))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported feature file version {version}")
        vals = np.frombuffer(_read_exact(f, 4 * h * w * c, "values"), dtype="<f4")
        if f.read(1):
            raise CheckpointError("trailing bytes after feature payload")
    return FeatureMap(vals.reshape(h, w, c).copy(), extractor_id, layer)


# ---------------------------------------------------------------------------
# nearest-neighbor feature matching


def _flatten_unit(values):
    """(H,W,C) -> row-normalized (N,C) float64; zero rows stay zero."""
    flat = values.reshape(-1, values.shape[2]).astype(np.float64)
    norms = np.linalg.norm(flat, axis=1)
    safe = np.where(norms > 0.0, norms, 1.0)
    return flat / safe[:, None], norms


def nnfm_matches(f_r: FeatureMap, f_s: FeatureMap):
    """Per-position cosine distance to the nearest style feature.

    Returns (dists (N,), argmin (N,)) over rendered positions in row-major
    order; ties resolve to the smallest style linear index. Zero-length
    vectors on either side yield distance 1.
    """
    if f_r.values.shape[2] != f_s.values.shape[2]:
        raise ContractViolation("feature maps must share their channel count")
    a_hat, _ = _flatten_unit(f_r.values)
    b_hat, _ = _flatten_unit(f_s.values)
    sim = a_hat @ b_hat.T
    best = np.argmax(sim, axis=1)  # first max = smallest linear index
    dists = 1.0 - sim[np.arange(sim.shape[0]), best]
    return dists, best


def _nnfm_grad_rows(a_flat, a_norms, b_hat_rows, sim_best, scale):
    """d(cos distance)/d(a) for matched pairs, times scale. Zero-norm
    rendered vectors get zero gradient."""
    safe = np.where(a_norms > 0.0, a_norms, 1.0)
    a_hat = a_flat / safe[:, None]
    g = -(b_hat_rows - sim_best[:, None] * a_hat) / safe[:, None]
    g[a_norms == 0.0] = 0.0
    return g * scale


def nnfm_loss(f_r: FeatureMap, f_s: FeatureMap):
    """Mean nearest-neighbor cosine distance over all rendered positions.

    Returns (loss, d_values) with d_values shaped like f_r.values; the
    gradient treats each argmin as fixed.
    """
    h, w, c = f_r.values.shape
    a_flat = f_r.values.reshape(-1, c).astype(np.float64)
    a_norms = np.linalg.norm(a_flat, axis=1)
    b_hat, _ = _flatten_unit(f_s.values)
    dists, best = nnfm_matches(f_r, f_s)
    n = a_flat.shape[0]
    loss = float(dists.sum() / n)
    sim_best = 1.0 - dists
    grad = _nnfm_grad_rows(a_flat, a_norms, b_hat[best], sim_best, 1.0 / n)
    return loss, grad.reshape(h, w, c)


@dataclass
class StyleTarget:
    """Precomputed style features for one object, one map per tap."""

    object_id: str
    features: dict  # layer name -> FeatureMap
    style_path: str = ""

    def for_layer(self, layer: str) -> FeatureMap:
        if layer not in self.features:
            raise ContractViolation(
                f"style target {self.object_id!r} has no features for layer {layer!r}"
            )
        return self.features[layer]


def masked_nnfm_loss(f_r: FeatureMap, targets, masks, normalize: bool = False):
    """Per-object masked matching loss, averaged over objects.

    Each object's score is the unnormalized sum of nearest-neighbor
    distances over its masked positions against its own style features
    (tap chosen by f_r.layer); positions under several masks contribute
    to each. masks maps object_id to a bool (H,W) at feature resolution;
    objects with no mask entry or an empty mask contribute zero and get
    no gradient. normalize divides each object's score by its masked
    position count (off by default; the sum form is canonical).
    Returns (loss, d_values, per_object).
    """
    targets = list(targets)
    if not targets:
        raise ContractViolation("masked matching needs at least one style target")
    h, w, c = f_r.values.shape
    a_flat = f_r.values.reshape(-1, c).astype(np.float64)
    a_norms = np.linalg.norm(a_flat, axis=1)
    safe = np.where(a_norms > 0.0, a_norms, 1.0)
    a_hat = a_flat / safe[:, None]

    grad = np.zeros((h * w, c), dtype=np.float64)
    per_object = {}
    n_obj = len(targets)
    for target in targets:
        mask = masks.get(target.object_id)
        if mask is None:
            per_object[target.object_id] = 0.0
            continue
        mask = np.asarray(mask)
        if mask.shape != (h, w):
            raise ContractViolation(
                f"mask for {target.object_id!r} is {mask.shape}, features are {(h, w)}"
            )
        sel = np.flatnonzero(mask.reshape(-1))
        if sel.size == 0:
            per_object[target.object_id] = 0.0
            continue
        f_s = target.for_layer(f_r.layer)
        if f_s.values.shape[2] != c:
            raise ContractViolation("style features must share the rendered channel count")
        b_hat, _ = _flatten_unit(f_s.values)
        sim = a_hat[sel] @ b_hat.T
        best = np.argmax(sim, axis=1)
        sim_best = sim[np.arange(sel.size), best]
        inv_count = 1.0 / sel.size if normalize else 1.0
        rho = float(np.sum(1.0 - sim_best)) * inv_count
        per_object[target.object_id] = rho
        grad[sel] += _nnfm_grad_rows(
            a_flat[sel], a_norms[sel], b_hat[best], sim_best, inv_count / n_obj
        )
    loss = sum(per_object.values()) / n_obj
    return loss, grad.reshape(h, w, c), per_object


def downsample_mask(mask, target_shape):
    """Block-coverage downsampling: an output cell is True when at least
    half of its source block is masked."""
    mask = np.asarray(mask).astype(bool)
    h, w = mask.shape
    th, tw = int(target_shape[0]), int(target_shape[1])
    if th <= 0 or tw <= 0 or th > h or tw > w:
        raise ContractViolation(
            f"target {target_shape} must be positive and no larger than source {(h, w)}"
        )
    r_edges = (np.arange(th + 1) * h) // th
    c_edges = (np.arange(tw + 1) * w) // tw
    csum = np.zeros((h + 1, w + 1), dtype=np.int64)
    csum[1:, 1:] = np.cumsum(np.cumsum(mask, axis=0), axis=1)
    blk = (
        csum[r_edges[1:, None], c_edges[None, 1:]]
        - csum[r_edges[:-1, None], c_edges[None, 1:]]
        - csum[r_edges[1:, None], c_edges[None, :-1]]
        + csum[r_edges[:-1, None], c_edges[None, :-1]]
    )
    area = (r_edges[1:, None] - r_edges[:-1, None]) * (c_edges[None, 1:] - c_edges[None, :-1])
    return blk * 2 >= area


def total_style_loss(report: LossReport, masked_style: float, weights: LossWeights) -> float:
    """Reconstruction total plus the weighted masked matching term."""
    return report.total + weights.style_weight * masked_style


def load_style_image(path) -> np.ndarray:
    """Style exemplar as float RGB, longest side capped at 512."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        longest = max(im.size)
        if longest > STYLE_MAX_SIDE:
            scale = STYLE_MAX_SIDE / longest
            im = im.resize(
                (max(1, round(im.size[0] * scale)), max(1, round(im.size[1] * scale))),
                Image.BILINEAR,
            )
        arr = np.asarray(im, dtype=np.float64)
    return arr / 255.0


def prepare_style_target(
    extractor: FeatureExtractor, object_id: str, style_image, style_path: str = ""
) -> StyleTarget:
    """Extract and bundle style features for every tap."""
    maps = extract_features(extractor, style_image)
    return StyleTarget(
        object_id=object_id,
        features={m.layer: m for m in maps},
        style_path=style_path,
    )


__all__ = [
    "FeatureMap",
    "ConvLayer",
    "ReluLayer",
    "PoolLayer",
    "FeatureExtractor",
    "extract_features",
    "extract_features_with_cache",
    "features_backward",
    "make_test_extractor",
    "save_weights",
    "load_weights",
    "save_features",
    "load_features",
    "nnfm_matches",
    "nnfm_loss",
    "StyleTarget",
    "masked_nnfm_loss",
    "downsample_mask",
    "total_style_loss",
    "load_style_image",
    "prepare_style_target",
    "STYLE_MAX_SIDE",
]
