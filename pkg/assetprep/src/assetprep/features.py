"""Reference forward pass for exported weight chains.

This is the oracle half of the cross-implementation parity contract:
the consumer evaluates the same chain with its own code, and the
acceptance test compares activations. Keep this implementation
independent, not merely copied: convolution here accumulates one
kernel offset at a time over strided views, pooling averages by offset
sums, and everything runs in float64 before the f32 file quantization.
"""

import numpy as np

from .errors import ContractViolation
from .formats import Conv, Pool, Relu


def conv_forward(x: np.ndarray, layer: Conv) -> np.ndarray:
    o, c, kh, kw = layer.weight.shape
    if x.shape[2] != c:
        raise ContractViolation(f"conv expects {c} input channels, got {x.shape[2]}")
    p, s = layer.pad, layer.stride
    xp = np.pad(x, ((p, p), (p, p), (0, 0))) if p else x
    if xp.shape[0] < kh or xp.shape[1] < kw:
        raise ContractViolation("image too small for this conv kernel")
    ho = (xp.shape[0] - kh) // s + 1
    wo = (xp.shape[1] - kw) // s + 1
    w64 = layer.weight.astype(np.float64)
    out = np.broadcast_to(layer.bias.astype(np.float64), (ho, wo, o)).copy()
    for ki in range(kh):
        for kj in range(kw):
            sl = xp[ki : ki + (ho - 1) * s + 1 : s, kj : kj + (wo - 1) * s + 1 : s, :]
            out += sl @ w64[:, :, ki, kj].T
    return out


def pool_forward(x: np.ndarray, layer: Pool) -> np.ndarray:
    k = layer.size
    ho, wo = x.shape[0] // k, x.shape[1] // k
    if ho == 0 or wo == 0:
        raise ContractViolation("image too small for this pooling window")
    out = np.zeros((ho, wo, x.shape[2]))
    for di in range(k):
        for dj in range(k):
            out += x[di : ho * k : k, dj : wo * k : k, :]
    return out / (k * k)


def run_chain(layers, image: np.ndarray, taps) -> dict:
    """Evaluate layers on an (H,W,3) image in [0,1]; returns
    {layer index: (H',W',C') float64 activations} for each tap index."""
    x = np.asarray(image, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != 3:
        raise ContractViolation(f"chain input must be (H,W,3), got {x.shape}")
    taps = sorted(set(int(t) for t in taps))
    if not taps:
        raise ContractViolation("no tap layers requested")
    if taps[0] < 0 or taps[-1] >= len(layers):
        raise ContractViolation(f"tap index out of range for a {len(layers)}-layer chain")
    grabbed = {}
    for idx, layer in enumerate(layers[: taps[-1] + 1]):
        if isinstance(layer, Conv):
            x = conv_forward(x, layer)
        elif isinstance(layer, Relu):
            x = np.maximum(x, 0.0)
        else:
            x = pool_forward(x, layer)
        if idx in taps:
            grabbed[idx] = x
    return grabbed


def last_relu_index(layers) -> int:
    """Default tap: the deepest relu, matching the consumer's default."""
    relus = [i for i, l in enumerate(layers) if isinstance(l, Relu)]
    if not relus:
        raise ContractViolation("weight chain has no relu to tap")
    return relus[-1]


__all__ = ["conv_forward", "pool_forward", "run_chain", "last_relu_index"]
