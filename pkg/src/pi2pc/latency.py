"""Closed-form latency model of every secure operator.

Compute terms are cycles / (PP * freq); communication terms are
T_bc + payload_bits / Rt_bw with all payloads expressed in bits and Rt_bw
converted to bits/second.  Word width is the protocol's 32-bit datatype.

Per-element comparison-flow terms (FI^2 * IC elements):

    CMP_2  = 32*17      * FI^2*IC / (PP*freq)
    COMM_2 = T_bc + 32*16   * FI^2*IC / Rt_bw
    CMP_3  = 32*(17+64) * FI^2*IC / (PP*freq)
    COMM_3 = T_bc + 32*4*16 * FI^2*IC / Rt_bw
    CMP_4  = (32*64+1)  * FI^2*IC / (PP*freq)
    COMM_4 = T_bc + 32      * FI^2*IC / Rt_bw
    COMM_1 = T_bc + 32 / Rt_bw

Operator totals:

    relu    = sum(CMP_2..4) + sum(COMM_1..4)
    maxpool = relu + 3*T_bc
    x2act   = CMP_sq + 2*COMM_sq          (square-protocol E exchange)
    avgpool = 2 * FI^2*IC / (PP*freq)     (local only)
    conv/fc = CMP_mac + 2*COMM_mac        (Beaver E/F exchange)

CMP_sq counts 3 MACs per element (square plus two public scalings); CMP_mac
counts the full MAC volume of the layer; the conv/x2act communication
payloads are read off the sharing protocols (E and F tensors, 32-bit words).
"""

from __future__ import annotations

import sys
from dataclasses import dataclass

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib as _toml
else:  # pragma: no cover - version specific
    import tomli as _toml

WORD_BITS = 32


@dataclass(frozen=True)
class HwProfile:
    """Hardware profile: parallel lanes, clock, link bandwidth, base latency."""

    pp: int = 4
    freq: float = 200e6
    rt_bw: float = 1e9  # bytes per second
    t_bc: float = 50e-6  # seconds per message

    def __post_init__(self):
        if self.pp <= 0 or self.freq <= 0 or self.rt_bw <= 0 or self.t_bc < 0:
            raise ValueError("hardware profile fields must be positive (t_bc >= 0)")

    @property
    def rt_bw_bits(self) -> float:
        return 8.0 * self.rt_bw

    @classmethod
    def from_toml(cls, path) -> "HwProfile":
        with open(path, "rb") as fh:
            doc = _toml.load(fh)
        return cls(
            pp=int(doc.get("pp", 4)),
            freq=float(doc.get("freq_hz", 200e6)),
            rt_bw=float(doc.get("rt_bw_bytes_per_s", 1e9)),
            t_bc=float(doc.get("t_bc_s", 50e-6)),
        )

    def to_toml(self) -> str:
        return (
            f"pp = {self.pp}\n"
            f"freq_hz = {self.freq:g}\n"
            f"rt_bw_bytes_per_s = {self.rt_bw:g}\n"
            f"t_bc_s = {self.t_bc:g}\n"
        )


DEFAULT_PROFILE = HwProfile()


@dataclass(frozen=True)
class OpGeometry:
    """FI: input feature spatial size; IC: input channels; conv extras."""

    fi: float
    ic: int
    oc: int | None = None
    kernel: tuple[int, int] = (1, 1)
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)

    def __post_init__(self):
        if self.fi <= 0 or self.ic <= 0:
            raise ValueError("geometry extents must be positive")

    @property
    def elems(self) -> float:
        return self.fi * self.fi * self.ic


def ot_flow_costs(g: OpGeometry, h: HwProfile) -> dict[str, float]:
    """All CMP_i / COMM_j terms of the comparison flow for one tensor."""
    n = g.elems
    cyc = h.pp * h.freq
    bw = h.rt_bw_bits
    return {
        "CMP_2": 32 * 17 * n / cyc,
        "COMM_2": h.t_bc + 32 * 16 * n / bw,
        "CMP_3": 32 * (17 + 64) * n / cyc,
        "COMM_3": h.t_bc + 32 * 64 * n / bw,
        "CMP_4": (32 * 64 + 1) * n / cyc,
        "COMM_4": h.t_bc + 32 * n / bw,
        "COMM_1": h.t_bc + 32 / bw,
    }


def lat_relu(g: OpGeometry, h: HwProfile) -> float:
    c = ot_flow_costs(g, h)
    return (
        c["CMP_2"] + c["CMP_3"] + c["CMP_4"]
        + c["COMM_1"] + c["COMM_2"] + c["COMM_3"] + c["COMM_4"]
    )


def lat_maxpool(g: OpGeometry, h: HwProfile) -> float:
    return lat_relu(g, h) + 3 * h.t_bc


def lat_x2act(g: OpGeometry, h: HwProfile) -> float:
    n = g.elems
    cmp_sq = 3 * n / (h.pp * h.freq)  # square + two public scalings
    comm_sq = h.t_bc + WORD_BITS * n / h.rt_bw_bits  # one E direction
    return cmp_sq + 2 * comm_sq


def lat_avgpool(g: OpGeometry, h: HwProfile) -> float:
    return 2 * g.elems / (h.pp * h.freq)


def _conv_derived(g: OpGeometry) -> tuple[float, float, float]:
    if g.oc is None:
        raise ValueError("conv geometry needs oc")
    kh, kw = g.kernel
    oh = (g.fi + 2 * g.padding[0] - kh) // g.stride[0] + 1
    ow = (g.fi + 2 * g.padding[1] - kw) // g.stride[1] + 1
    macs = oh * ow * g.oc * g.ic * kh * kw
    e_words = oh * ow * g.ic * kh * kw  # patches tensor
    f_words = g.ic * kh * kw * g.oc  # weights tensor
    return macs, e_words, f_words


def lat_conv(g: OpGeometry, h: HwProfile) -> float:
    macs, e_words, f_words = _conv_derived(g)
    cmp_mac = macs / (h.pp * h.freq)
    comm = h.t_bc + WORD_BITS * (e_words + f_words) / h.rt_bw_bits
    return cmp_mac + 2 * comm


def lat_fc(n_in: int, n_out: int, h: HwProfile) -> float:
    macs = n_in * n_out
    cmp_mac = macs / (h.pp * h.freq)
    comm = h.t_bc + WORD_BITS * (n_in + n_in * n_out) / h.rt_bw_bits
    return cmp_mac + 2 * comm


def op_latency(kind: str, g: OpGeometry, h: HwProfile) -> float:
    if kind == "relu":
        return lat_relu(g, h)
    if kind == "maxpool":
        return lat_maxpool(g, h)
    if kind == "x2act":
        return lat_x2act(g, h)
    if kind == "avgpool":
        return lat_avgpool(g, h)
    if kind == "conv":
        return lat_conv(g, h)
    raise ValueError(f"unknown op kind {kind!r}")


# ---------------------------------------------------------------------------
# latency table and architecture aggregation
# ---------------------------------------------------------------------------


class LatencyTable:
    """(layer, candidate) -> seconds, with an instrumented read counter."""

    def __init__(self):
        self._entries: dict[tuple[int, int], float] = {}
        self.reads = 0

    def put(self, layer: int, cand: int, seconds: float) -> None:
        self._entries[(layer, cand)] = seconds

    def get(self, layer: int, cand: int) -> float:
        self.reads += 1
        return self._entries[(layer, cand)]

    def layer_costs(self, layer: int) -> np.ndarray:
        cands = sorted(c for (l, c) in self._entries if l == layer)
        self.reads += len(cands)
        return np.array([self._entries[(layer, c)] for c in cands])

    def __len__(self):
        return len(self._entries)

    def layers(self) -> list[int]:
        return sorted({l for (l, _) in self._entries})


def build_latency_table(candidate_ops, h: HwProfile) -> LatencyTable:
    """candidate_ops: per layer, a list of candidates, each a list of
    (kind, OpGeometry) stages whose latencies sum."""
    table = LatencyTable()
    for li, cands in enumerate(candidate_ops):
        if not cands:
            raise ValueError(f"layer {li} has no candidates")
        for ci, stages in enumerate(cands):
            table.put(li, ci, sum(op_latency(kind, g, h) for kind, g in stages))
    return table


def arch_latency(table: LatencyTable, theta: list[np.ndarray]) -> float:
    """Lat(alpha) = sum_l sum_j theta_{l,j} * Lat(OP_{l,j})."""
    layers = table.layers()
    if len(theta) != len(layers):
        raise ValueError(f"theta has {len(theta)} layers, table has {len(layers)}")
    total = 0.0
    for li, th in zip(layers, theta):
        costs = table.layer_costs(li)
        th = np.asarray(th, dtype=float)
        if th.shape != costs.shape:
            raise ValueError(f"layer {li}: {th.shape} weights vs {costs.shape} candidates")
        total += float(th @ costs)
    return total


# ---------------------------------------------------------------------------
# whole-model prediction (for `pi predict` and speedup comparisons)
# ---------------------------------------------------------------------------


def model_layer_latencies(model, h: HwProfile) -> list[tuple[str, float]]:
    """Per-layer predicted seconds for a concrete ModelSpec."""
    from .model import layer_shapes  # local import to keep modules decoupled

    out = []
    for (shape_in, _), layer in zip(layer_shapes(model), model.layers):
        if layer.kind == "fc":
            n_in = int(np.prod(shape_in))
            out.append((layer.kind, lat_fc(n_in, layer.out_features, h)))
            continue
        c, hh, ww = shape_in
        g = OpGeometry(
            fi=float(np.sqrt(hh * ww)),
            ic=c,
            oc=layer.out_channels,
            kernel=layer.kernel,
            stride=layer.stride,
            padding=layer.padding,
        )
        out.append((layer.kind, op_latency(layer.kind, g, h)))
    return out


def model_latency(model, h: HwProfile) -> float:
    return sum(s for _, s in model_layer_latencies(model, h))
