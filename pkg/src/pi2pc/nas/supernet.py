"""Gated supernets: backbone conv blocks with softmax-mixed candidate
operators, straight-through polynomial activation init, and export of a
derived architecture to a secure-engine ModelSpec.

A block is Conv -> gated{activation [+ pooling]}: the first toy layer mixes
the four ReLU/X2act x MaxPool/AvgPool combinations, later layers mix the two
activations.  Conv parameters are shared across a block's candidates by
default; `shared=False` gives every candidate its own copy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..latency import LatencyTable, OpGeometry
from ..model import LayerSpec, ModelSpec
from ..ring import FixedTensor, RingConfig
from .autodiff import Tensor, avg_pool2d, conv2d, max_pool2d, param, stack_weighted

ACT_POOL_CANDS = (("relu", "maxpool"), ("relu", "avgpool"), ("x2act", "maxpool"), ("x2act", "avgpool"))
ACT_CANDS = (("relu",), ("x2act",))


@dataclass
class X2ActParams:
    w1: Tensor
    w2: Tensor
    b: Tensor
    c: float
    n_x: int

    def params(self) -> list[Tensor]:
        return [self.w1, self.w2, self.b]

    def apply(self, x: Tensor) -> Tensor:
        scale = self.c / math.sqrt(self.n_x)
        return (x.square() * self.w1) * scale + x * self.w2 + self.b


def straight_through_init(rng: np.random.Generator, c: float = 1.0, n_x: int = 1) -> X2ActParams:
    """Straight-through init: w1, b near zero, w2 = 1, so delta(x) ~ x."""
    return X2ActParams(
        w1=param(1e-4 * rng.standard_normal()),
        w2=param(1.0),
        b=param(1e-4 * rng.standard_normal()),
        c=c,
        n_x=n_x,
    )


@dataclass
class GatedBlock:
    in_ch: int
    out_ch: int
    candidates: tuple[tuple[str, ...], ...]
    conv_w: list[Tensor]  # one entry if shared, else one per candidate
    conv_b: list[Tensor]
    x2act: list[X2ActParams]
    kernel: tuple[int, int] = (3, 3)
    padding: tuple[int, int] = (1, 1)
    pool_kernel: tuple[int, int] = (2, 2)

    @property
    def shared(self) -> bool:
        return len(self.conv_w) == 1

    def params(self) -> list[Tensor]:
        out = [*self.conv_w, *self.conv_b]
        for x2 in self.x2act:
            out.extend(x2.params())
        return out

    def _candidate(self, x: Tensor, ci: int) -> Tensor:
        wi = 0 if self.shared else ci
        h = conv2d(x, self.conv_w[wi], self.conv_b[wi], stride=(1, 1), padding=self.padding)
        for stage in self.candidates[ci]:
            if stage == "relu":
                h = h.relu()
            elif stage == "x2act":
                h = self.x2act[wi].apply(h)
            elif stage == "maxpool":
                h = max_pool2d(h, self.pool_kernel)
            elif stage == "avgpool":
                h = avg_pool2d(h, self.pool_kernel)
            else:
                raise ValueError(f"unknown stage {stage!r}")
        return h

    def forward(self, x: Tensor, theta: Tensor) -> Tensor:
        outs = [self._candidate(x, ci) for ci in range(len(self.candidates))]
        return stack_weighted(outs, theta)

    def forward_fixed(self, x: Tensor, ci: int) -> Tensor:
        return self._candidate(x, ci)


class Supernet:
    """Backbone of gated blocks plus a GAP + linear head."""

    def __init__(self, blocks: list[GatedBlock], head_w: Tensor, head_b: Tensor, input_shape):
        self.blocks = blocks
        self.head_w = head_w
        self.head_b = head_b
        self.input_shape = tuple(input_shape)

    def weight_params(self) -> list[Tensor]:
        out = []
        for b in self.blocks:
            out.extend(b.params())
        out.extend([self.head_w, self.head_b])
        return out

    def new_arch_params(self) -> list[Tensor]:
        return [param(np.zeros(len(b.candidates))) for b in self.blocks]

    def _head(self, h: Tensor) -> Tensor:
        n, c = h.data.shape[0], h.data.shape[1]
        pooled = avg_pool2d(h, (h.data.shape[2], h.data.shape[3]))
        flat = pooled.reshape(n, c)
        return flat @ self.head_w + self.head_b

    def forward(self, x: np.ndarray, thetas: list[Tensor]) -> Tensor:
        h = Tensor(x)
        for block, th in zip(self.blocks, thetas):
            h = block.forward(h, th)
        return self._head(h)

    def forward_fixed(self, x: np.ndarray, choices: list[int]) -> Tensor:
        h = Tensor(x)
        for block, ci in zip(self.blocks, choices):
            h = block.forward_fixed(h, ci)
        return self._head(h)

    # -- latency-table coupling --------------------------------------------

    def candidate_chains(self) -> list[list[list[tuple[str, OpGeometry]]]]:
        """Per block, per candidate: the (kind, geometry) stages whose
        latencies sum; feeds `build_latency_table`."""
        chains = []
        c, h, w = self.input_shape
        fi = float(np.sqrt(h * w))
        for block in self.blocks:
            g_conv = OpGeometry(fi=fi, ic=block.in_ch, oc=block.out_ch,
                                kernel=block.kernel, padding=block.padding)
            g_act = OpGeometry(fi=fi, ic=block.out_ch)
            layer = []
            for cand in block.candidates:
                stages = [("conv", g_conv)]
                for stage in cand:
                    stages.append((stage, g_act))
                layer.append(stages)
            chains.append(layer)
            if any("pool" in s for cand in block.candidates for s in cand):
                fi /= block.pool_kernel[0]
        return chains


def make_backbone(name: str, n_classes: int = 3, seed: int = 0, shared: bool = True,
                  input_shape=(1, 8, 8)) -> Supernet:
    rng = np.random.default_rng(seed)

    def conv_init(cin, cout, k=3):
        std = math.sqrt(2.0 / (cin * k * k))
        return param(rng.normal(0, std, (cout, cin, k, k))), param(np.zeros(cout))

    def block(cin, cout, cands):
        n_sets = 1 if shared else len(cands)
        ws, bs, x2s = [], [], []
        for _ in range(n_sets):
            w, b = conv_init(cin, cout)
            ws.append(w)
            bs.append(b)
            x2s.append(straight_through_init(rng, c=1.0, n_x=cin * 9))
        return GatedBlock(cin, cout, tuple(cands), ws, bs, x2s)

    c_in = input_shape[0]
    if name == "toy":
        widths = [8, 16]
        blocks = [block(c_in, widths[0], ACT_POOL_CANDS), block(widths[0], widths[1], ACT_CANDS)]
    elif name == "mini-vgg":
        widths = [16, 32, 32]
        blocks = [
            block(c_in, widths[0], ACT_POOL_CANDS),
            block(widths[0], widths[1], ACT_POOL_CANDS),
            block(widths[1], widths[2], ACT_CANDS),
        ]
    else:
        raise ValueError(f"unknown backbone {name!r} (expected 'toy' or 'mini-vgg')")
    std = math.sqrt(1.0 / widths[-1])
    head_w = param(rng.normal(0, std, (widths[-1], n_classes)))
    head_b = param(np.zeros(n_classes))
    return Supernet(blocks, head_w, head_b, input_shape)


# ---------------------------------------------------------------------------
# derivation: alpha -> concrete secure-engine model
# ---------------------------------------------------------------------------


def select_candidates(alphas: list[Tensor], table: LatencyTable | None = None) -> list[int]:
    """Per-layer argmax of theta; exact ties break toward lower latency."""
    choices = []
    for li, a in enumerate(alphas):
        th = np.exp(a.data - a.data.max())
        th = th / th.sum()
        best = th.max()
        tied = np.flatnonzero(th == best)
        if len(tied) > 1 and table is not None:
            costs = [(table.get(li, int(j)), int(j)) for j in tied]
            choices.append(min(costs)[1])
        else:
            choices.append(int(tied[0]))
    return choices


def derive_arch(
    sn: Supernet,
    alphas: list[Tensor],
    table: LatencyTable | None = None,
    cfg: RingConfig = RingConfig(64, 16),
) -> ModelSpec:
    """Freeze the argmax architecture into an encoded ModelSpec."""
    choices = select_candidates(alphas, table)
    return export_fixed(sn, choices, cfg)


def export_fixed(sn: Supernet, choices: list[int], cfg: RingConfig = RingConfig(64, 16)) -> ModelSpec:
    def enc(a):
        return FixedTensor.from_real(np.asarray(a, dtype=np.float64), cfg).array()

    layers: list[LayerSpec] = []
    spatial = sn.input_shape[1]
    for block, ci in zip(sn.blocks, choices):
        wi = 0 if block.shared else ci
        w = block.conv_w[wi].data  # (OC, C, kh, kw) -> (C*kh*kw, OC)
        oc = w.shape[0]
        wmat = w.reshape(oc, -1).T
        layers.append(
            LayerSpec(
                "conv",
                out_channels=oc,
                kernel=block.kernel,
                stride=(1, 1),
                padding=block.padding,
                weights=enc(wmat),
                bias=enc(block.conv_b[wi].data),
            )
        )
        for stage in block.candidates[ci]:
            if stage == "relu":
                layers.append(LayerSpec("relu"))
            elif stage == "x2act":
                x2 = block.x2act[wi]
                layers.append(
                    LayerSpec(
                        "x2act",
                        w1=float(x2.w1.data),
                        w2=float(x2.w2.data),
                        b=float(x2.b.data),
                        c=x2.c,
                        n_x=x2.n_x,
                    )
                )
            else:
                layers.append(LayerSpec(stage, kernel=block.pool_kernel, stride=block.pool_kernel))
                spatial //= block.pool_kernel[0]
    # GAP + classifier head
    layers.append(LayerSpec("avgpool", kernel=(spatial, spatial), stride=(spatial, spatial)))
    layers.append(
        LayerSpec(
            "fc",
            out_features=sn.head_w.data.shape[1],
            weights=enc(sn.head_w.data),
            bias=enc(sn.head_b.data),
        )
    )
    return ModelSpec(layers, cfg, sn.input_shape)
