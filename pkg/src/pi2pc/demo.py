"""Deterministic generator for the bundled demo assets.

Produces, under a target directory:

    hw.toml           default hardware profile (4 lanes @ 200 MHz, 1 GB/s link)
    cnn_poly/m.json   2-conv CNN with polynomial activations + average pooling
    cnn_relu/m.json   the same weights with ReLU + max pooling
    inputs/x{0..3}.fxt  sample 8x8 inputs
    supernet_toy.json   the toy search space description

Everything is seeded, so regeneration is byte-stable.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .latency import DEFAULT_PROFILE
from .model import LayerSpec, ModelSpec
from .ring import FixedTensor, RingConfig

DEMO_SEED = 20260810
DEMO_RING = RingConfig(64, 16)


def _weights(rng: np.random.Generator):
    def enc(a):
        return FixedTensor.from_real(a, DEMO_RING).array()

    w0 = enc(rng.normal(0, 0.45, (1 * 3 * 3, 4)))
    b0 = enc(rng.normal(0, 0.05, 4))
    w1 = enc(rng.normal(0, 0.25, (4 * 3 * 3, 8)))
    b1 = enc(rng.normal(0, 0.05, 8))
    w2 = enc(rng.normal(0, 0.3, (8 * 2 * 2, 3)))
    b2 = enc(rng.normal(0, 0.05, 3))
    return w0, b0, w1, b1, w2, b2


def build_demo_models() -> tuple[ModelSpec, ModelSpec]:
    """(polynomial variant, relu/maxpool baseline) sharing linear weights."""
    rng = np.random.default_rng(DEMO_SEED)
    w0, b0, w1, b1, w2, b2 = _weights(rng)

    def conv1():
        return LayerSpec("conv", out_channels=4, kernel=(3, 3), stride=(1, 1),
                         padding=(1, 1), weights=w0.copy(), bias=b0.copy())

    def conv2():
        return LayerSpec("conv", out_channels=8, kernel=(3, 3), stride=(1, 1),
                         padding=(1, 1), weights=w1.copy(), bias=b1.copy())

    def head():
        return LayerSpec("fc", out_features=3, weights=w2.copy(), bias=b2.copy())

    poly = ModelSpec(
        [
            conv1(),
            LayerSpec("x2act", w1=0.08, w2=1.0, b=0.02, c=1.0, n_x=9),
            LayerSpec("avgpool", kernel=(2, 2), stride=(2, 2)),
            conv2(),
            LayerSpec("x2act", w1=0.05, w2=1.0, b=0.0, c=1.0, n_x=36),
            LayerSpec("avgpool", kernel=(2, 2), stride=(2, 2)),
            head(),
        ],
        DEMO_RING,
        (1, 8, 8),
    )
    relu = ModelSpec(
        [
            conv1(),
            LayerSpec("relu"),
            LayerSpec("maxpool", kernel=(2, 2), stride=(2, 2)),
            conv2(),
            LayerSpec("relu"),
            LayerSpec("maxpool", kernel=(2, 2), stride=(2, 2)),
            head(),
        ],
        DEMO_RING,
        (1, 8, 8),
    )
    return poly, relu


def demo_inputs(count: int = 4):
    rng = np.random.default_rng(DEMO_SEED + 1)
    return [FixedTensor.from_real(rng.normal(0, 1.0, (1, 8, 8)), DEMO_RING) for _ in range(count)]


SUPERNET_DOC = {
    "backbone": "toy",
    "input_shape": [1, 8, 8],
    "blocks": [
        {
            "conv": {"out_channels": 8, "kernel": [3, 3], "padding": [1, 1]},
            "candidates": [
                ["relu", "maxpool"],
                ["relu", "avgpool"],
                ["x2act", "maxpool"],
                ["x2act", "avgpool"],
            ],
        },
        {
            "conv": {"out_channels": 16, "kernel": [3, 3], "padding": [1, 1]},
            "candidates": [["relu"], ["x2act"]],
        },
    ],
    "head": {"pool": "gap", "fc_out": 3},
}


def write_demo(out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "hw.toml"), "w") as fh:
        fh.write(DEFAULT_PROFILE.to_toml())
    poly, relu = build_demo_models()
    poly.save(os.path.join(out_dir, "cnn_poly", "m.json"))
    relu.save(os.path.join(out_dir, "cnn_relu", "m.json"))
    inp_dir = os.path.join(out_dir, "inputs")
    os.makedirs(inp_dir, exist_ok=True)
    for i, x in enumerate(demo_inputs()):
        x.save(os.path.join(inp_dir, f"x{i}.fxt"))
    with open(os.path.join(out_dir, "supernet_toy.json"), "w") as fh:
        json.dump(SUPERNET_DOC, fh, indent=2)
        fh.write("\n")
