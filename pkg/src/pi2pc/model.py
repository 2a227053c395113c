"""Layer/model descriptions, the plaintext fixed-point reference path, and
the offline-material census.

A model is an ordered list of layers over one ring config.  Weights are kept
in encoded (ring-word) form so the secure engine and the plaintext reference
consume identical integers; convolution weights are stored already lowered to
im2col matrix layout (C*kh*kw, OC).

JSON layout (weights referenced as FXT1 files next to the document):

    {"ring_bits": 32, "frac_bits": 16, "input_shape": [1, 8, 8],
     "layers": [{"kind": "conv", "out_channels": 8, "kernel": [3, 3],
                 "stride": [1, 1], "padding": [1, 1],
                 "weights": "layer0_w.fxt", "bias": "layer0_b.fxt"},
                {"kind": "x2act", "w1": 0.0001, "w2": 1.0, "b": 0.0,
                 "c": 1.0, "n_x": 9},
                {"kind": "maxpool", "kernel": [2, 2], "stride": [2, 2]},
                {"kind": "fc", "out_features": 3,
                 "weights": "layer3_w.fxt", "bias": "layer3_b.fxt"}]}
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .ring import FixedTensor, RingConfig, encode, from_signed, ring_add, ring_matmul, ring_mul, to_signed

LINEAR_KINDS = ("conv", "fc")
ACT_KINDS = ("relu", "x2act")
POOL_KINDS = ("maxpool", "avgpool")
ALL_KINDS = LINEAR_KINDS + ACT_KINDS + POOL_KINDS


@dataclass
class LayerSpec:
    kind: str
    out_channels: int | None = None  # conv
    out_features: int | None = None  # fc
    kernel: tuple[int, int] = (1, 1)
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    weights: np.ndarray | None = None  # ring words, (K, OC) / (in, out)
    bias: np.ndarray | None = None  # ring words, (OC,)
    # x2act coefficients (floats; encoded lazily against the model config)
    w1: float = 0.0
    w2: float = 1.0
    b: float = 0.0
    c: float = 1.0
    n_x: int = 1

    def __post_init__(self):
        if self.kind not in ALL_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        self.kernel = tuple(self.kernel)
        self.stride = tuple(self.stride)
        self.padding = tuple(self.padding)
        if self.kind == "x2act" and self.n_x <= 0:
            raise ValueError("x2act needs n_x > 0")


@dataclass
class ModelSpec:
    layers: list[LayerSpec]
    config: RingConfig
    input_shape: tuple[int, int, int]  # (C, H, W)

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        layer_shapes(self)  # validates the chain

    # -- serialization ------------------------------------------------------

    def save(self, path: str) -> None:
        """Write m.json plus one FXT1 file per weight tensor, same directory."""
        path = os.fspath(path)
        base = os.path.dirname(path) or "."
        os.makedirs(base, exist_ok=True)
        doc = {
            "ring_bits": self.config.ring_bits,
            "frac_bits": self.config.frac_bits,
            "input_shape": list(self.input_shape),
            "layers": [],
        }
        for i, l in enumerate(self.layers):
            entry: dict = {"kind": l.kind}
            if l.kind == "conv":
                entry.update(
                    out_channels=l.out_channels,
                    kernel=list(l.kernel),
                    stride=list(l.stride),
                    padding=list(l.padding),
                )
            if l.kind == "fc":
                entry.update(out_features=l.out_features)
            if l.kind in POOL_KINDS:
                entry.update(kernel=list(l.kernel), stride=list(l.stride))
            if l.kind == "x2act":
                entry.update(w1=l.w1, w2=l.w2, b=l.b, c=l.c, n_x=l.n_x)
            if l.weights is not None:
                wname = f"layer{i}_w.fxt"
                FixedTensor.from_ring(l.weights, self.config).save(os.path.join(base, wname))
                entry["weights"] = wname
            if l.bias is not None:
                bname = f"layer{i}_b.fxt"
                FixedTensor.from_ring(l.bias, self.config).save(os.path.join(base, bname))
                entry["bias"] = bname
            doc["layers"].append(entry)
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path: str) -> "ModelSpec":
        path = os.fspath(path)
        base = os.path.dirname(path) or "."
        with open(path) as fh:
            doc = json.load(fh)
        cfg = RingConfig(doc["ring_bits"], doc["frac_bits"])
        layers = []
        for entry in doc["layers"]:
            kw = dict(entry)
            for key in ("weights", "bias"):
                if key in kw:
                    t = FixedTensor.load(os.path.join(base, kw[key]))
                    if t.config != cfg:
                        raise ValueError(f"{kw[key]}: ring config mismatch")
                    kw[key] = t.array()
            layers.append(LayerSpec(**kw))
        return cls(layers, cfg, tuple(doc["input_shape"]))


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------


def conv_out_hw(h: int, w: int, kernel, stride, padding) -> tuple[int, int]:
    kh, kw = kernel
    sh, sw = stride
    ph, pw = padding
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    if oh <= 0 or ow <= 0:
        raise ValueError(f"empty output for geometry h={h} w={w} k={kernel} s={stride} p={padding}")
    return oh, ow


def layer_shapes(model: ModelSpec) -> list[tuple[tuple, tuple]]:
    """(input_shape, output_shape) per layer; raises on an inconsistent chain."""
    shapes = []
    cur = tuple(model.input_shape)
    for l in model.layers:
        if l.kind == "conv":
            c, h, w = cur
            k = c * l.kernel[0] * l.kernel[1]
            if l.weights is None or l.weights.shape != (k, l.out_channels):
                raise ValueError(
                    f"conv weights must be ({k}, {l.out_channels}), got "
                    f"{None if l.weights is None else l.weights.shape}"
                )
            oh, ow = conv_out_hw(h, w, l.kernel, l.stride, l.padding)
            nxt = (l.out_channels, oh, ow)
        elif l.kind == "fc":
            n_in = int(np.prod(cur))
            if l.weights is None or l.weights.shape != (n_in, l.out_features):
                raise ValueError(
                    f"fc weights must be ({n_in}, {l.out_features}), got "
                    f"{None if l.weights is None else l.weights.shape}"
                )
            nxt = (l.out_features,)
        elif l.kind in POOL_KINDS:
            c, h, w = cur
            oh, ow = conv_out_hw(h, w, l.kernel, l.stride, (0, 0))
            nxt = (c, oh, ow)
        else:  # activations keep the shape
            nxt = cur
        shapes.append((cur, nxt))
        cur = nxt
    return shapes


def im2col(x: np.ndarray, kernel, stride, padding) -> tuple[np.ndarray, tuple[int, int]]:
    """Lower (C, H, W) into conv patches (OH*OW, C*kh*kw); dtype-preserving."""
    c, h, w = x.shape
    kh, kw = kernel
    sh, sw = stride
    ph, pw = padding
    if ph or pw:
        xp = np.zeros((c, h + 2 * ph, w + 2 * pw), dtype=x.dtype)
        xp[:, ph : ph + h, pw : pw + w] = x
    else:
        xp = x
    oh, ow = conv_out_hw(h, w, kernel, stride, padding)
    cols = np.empty((c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, i : i + sh * oh : sh, j : j + sw * ow : sw]
    return cols.reshape(c * kh * kw, oh * ow).T.copy(), (oh, ow)


def pool_windows(x: np.ndarray, kernel, stride) -> tuple[np.ndarray, tuple[int, int]]:
    """Lower (C, H, W) into per-channel pooling windows (C*OH*OW, kh*kw)."""
    c, h, w = x.shape
    kh, kw = kernel
    sh, sw = stride
    oh, ow = conv_out_hw(h, w, kernel, stride, (0, 0))
    cols = np.empty((c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = x[:, i : i + sh * oh : sh, j : j + sw * ow : sw]
    return cols.transpose(0, 3, 4, 1, 2).reshape(c * oh * ow, kh * kw).copy(), (oh, ow)


# ---------------------------------------------------------------------------
# x2act coefficient handling
# ---------------------------------------------------------------------------


def x2act_quad_coeff(layer: LayerSpec) -> float:
    """The quadratic term's effective coefficient (c / sqrt(n_x)) * w1."""
    return layer.c / math.sqrt(layer.n_x) * layer.w1


def x2act_eval(layer: LayerSpec, x: np.ndarray) -> np.ndarray:
    """Float evaluation of the trainable quadratic activation."""
    return x2act_quad_coeff(layer) * x * x + layer.w2 * x + layer.b


def x2act_min_bound(layer: LayerSpec) -> float:
    """Algebraic lower bound of the activation for w1 > 0:
    b - w2^2 * sqrt(n_x) / (4 * c * w1)."""
    if layer.w1 <= 0 or layer.c <= 0:
        raise ValueError("lower bound defined for w1 > 0, c > 0")
    return layer.b - layer.w2**2 * math.sqrt(layer.n_x) / (4.0 * layer.c * layer.w1)


# ---------------------------------------------------------------------------
# plaintext fixed-point reference (the oracle the secure engine is tested
# against; identical integers, deterministic floor truncation)
# ---------------------------------------------------------------------------


def trunc_exact(words: np.ndarray, cfg: RingConfig, f: int | None = None) -> np.ndarray:
    """Deterministic rescale: floor(signed / 2^f) mod 2^k."""
    f = cfg.frac_bits if f is None else f
    return from_signed(to_signed(words, cfg) >> np.int64(f), cfg)


def _plain_linear(x: np.ndarray, layer: LayerSpec, cfg: RingConfig, shape_in) -> np.ndarray:
    if layer.kind == "conv":
        patches, (oh, ow) = im2col(x.reshape(shape_in), layer.kernel, layer.stride, layer.padding)
        acc = ring_matmul(patches, layer.weights, cfg)
    else:
        acc = ring_matmul(x.reshape(1, -1), layer.weights, cfg)
    if layer.bias is not None:
        lifted = ring_mul(layer.bias, np.uint64(cfg.scale), cfg)
        acc = ring_add(acc, lifted, cfg)
    out = trunc_exact(acc, cfg)
    if layer.kind == "conv":
        return out.T.reshape(layer.out_channels, oh, ow)
    return out.reshape(-1)


def run_plain_layer(x: np.ndarray, layer: LayerSpec, cfg: RingConfig, shape_in) -> np.ndarray:
    """One layer of the fixed-point reference; x and result are ring words."""
    if layer.kind in LINEAR_KINDS:
        return _plain_linear(x, layer, cfg, shape_in)
    if layer.kind == "relu":
        bit = (to_signed(x, cfg) >= 0).astype(np.uint64)
        return ring_mul(x, bit, cfg)
    if layer.kind == "x2act":
        sq = trunc_exact(ring_mul(x, x, cfg), cfg)
        q = encode(x2act_quad_coeff(layer), cfg)
        w2e = encode(layer.w2, cfg)
        be = encode(layer.b, cfg)
        acc = ring_add(ring_mul(np.uint64(q), sq, cfg), ring_mul(np.uint64(w2e), x, cfg), cfg)
        acc = ring_add(acc, ring_mul(np.uint64(be), np.uint64(cfg.scale), cfg), cfg)
        return trunc_exact(acc, cfg)
    if layer.kind == "maxpool":
        win, (oh, ow) = pool_windows(x.reshape(shape_in), layer.kernel, layer.stride)
        signed = to_signed(win, cfg)
        best = from_signed(signed.max(axis=1), cfg)
        return best.reshape(shape_in[0], oh, ow)
    if layer.kind == "avgpool":
        win, (oh, ow) = pool_windows(x.reshape(shape_in), layer.kernel, layer.stride)
        total = win.sum(axis=1, dtype=np.uint64) & np.uint64(cfg.mask)
        recip = encode(1.0 / (layer.kernel[0] * layer.kernel[1]), cfg)
        out = trunc_exact(ring_mul(total, np.uint64(recip), cfg), cfg)
        return out.reshape(shape_in[0], oh, ow)
    raise ValueError(f"unknown layer kind {layer.kind!r}")


def run_plain(model: ModelSpec, x: FixedTensor) -> FixedTensor:
    """Fixed-point reference inference over ring words; returns logits."""
    if tuple(x.shape) != tuple(model.input_shape):
        raise ValueError(f"input shape {x.shape} != model input {model.input_shape}")
    if x.config != model.config:
        raise ValueError("input ring config != model ring config")
    cur = x.array()
    for (shape_in, shape_out), layer in zip(layer_shapes(model), model.layers):
        cur = run_plain_layer(cur.reshape(shape_in) if layer.kind != "fc" else cur, layer, model.config, shape_in)
    return FixedTensor.from_ring(cur, model.config)


# ---------------------------------------------------------------------------
# offline-material census
# ---------------------------------------------------------------------------


def material_plan(model: ModelSpec, weights_mode: str = "public") -> list[tuple]:
    """Exact list of triples/pairs one inference consumes, in request order.

    Matches the secure operators' requests: conv/fc need one matmul triple
    only in shared-weights mode; relu one elementwise triple; maxpool one
    elementwise triple per tournament step; x2act one pair.
    """
    plan: list[tuple] = []
    for (shape_in, shape_out), layer in zip(layer_shapes(model), model.layers):
        if layer.kind == "conv":
            if weights_mode == "shared":
                c, h, w = shape_in
                oh, ow = conv_out_hw(h, w, layer.kernel, layer.stride, layer.padding)
                k = c * layer.kernel[0] * layer.kernel[1]
                plan.append(("matmul", (oh * ow, k), (k, layer.out_channels)))
        elif layer.kind == "fc":
            if weights_mode == "shared":
                n_in = int(np.prod(shape_in))
                plan.append(("matmul", (1, n_in), (n_in, layer.out_features)))
        elif layer.kind == "relu":
            plan.append(("mul", (int(np.prod(shape_in)),)))
        elif layer.kind == "x2act":
            plan.append(("pair", (int(np.prod(shape_in)),)))
        elif layer.kind == "maxpool":
            c, h, w = shape_in
            oh, ow = conv_out_hw(h, w, layer.kernel, layer.stride, (0, 0))
            n_win = c * oh * ow
            steps = layer.kernel[0] * layer.kernel[1] - 1
            plan.extend(("mul", (n_win,)) for _ in range(steps))
        # avgpool: local only
    return plan
