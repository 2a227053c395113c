"""Secure DNN operators composed from the sharing and comparison protocols.

Linear layers run locally when weights are public to both servers (the
default outsourced-inference setting) and through one Beaver matmul when
weights are secret-shared.  ReLU/MaxPool go through the OT comparison flow;
X^2act through one Beaver square; AvgPool is purely local.

`run_model` evaluates a whole ModelSpec on a shared input and reports
per-layer wall time, payload bytes and rounds.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .model import LayerSpec, ModelSpec, im2col, layer_shapes, pool_windows, x2act_quad_coeff
from .otcompare import CompareContext, drelu, secure_cmp
from .ring import FixedTensor, encode, ring_add, ring_matmul, ring_mul, unpack_words, pack_words
from .sharing import (
    MATMUL,
    MUL,
    Share,
    TripleStore,
    add_public,
    beaver_mul,
    beaver_square,
    shr,
    sub_shares,
    truncate,
)
from .transport import Channel


@dataclass
class SessionDeps:
    """Everything one party needs to run secure operators."""

    party: int
    supply: TripleStore
    compare: CompareContext
    rng: np.random.Generator
    session: str = "s"


def _flat(x: Share) -> Share:
    return x.reshape((x.tensor.size,))


# ---------------------------------------------------------------------------
# linear layers
# ---------------------------------------------------------------------------


def _linear2pc(
    x: Share,
    layer: LayerSpec,
    deps: SessionDeps,
    ch: Channel,
    shape_in,
    w_share: Share | None = None,
) -> Share:
    cfg = x.config
    if layer.kind == "conv":
        patches_words, (oh, ow) = im2col(
            x.words().reshape(shape_in), layer.kernel, layer.stride, layer.padding
        )
    else:
        patches_words = x.words().reshape(1, -1)

    if w_share is None:  # weights public to both servers
        acc = ring_matmul(patches_words, layer.weights, cfg)
    else:
        p_share = Share(x.party, FixedTensor.from_ring(patches_words, cfg), x.session)
        t = deps.supply.take_triple(MATMUL, patches_words.shape, layer.weights.shape)
        acc_share = beaver_mul(p_share, w_share, t, ch)
        acc = acc_share.words().reshape(patches_words.shape[0], -1)

    if layer.bias is not None and x.party == 0:
        # bias is public; party 0 absorbs it so rec() sees it exactly once
        lifted = ring_mul(layer.bias, np.uint64(cfg.scale), cfg)
        acc = ring_add(acc, lifted, cfg)

    out = Share(x.party, FixedTensor.from_ring(acc, cfg), x.session)
    out = truncate(out)
    if layer.kind == "conv":
        return Share(
            x.party,
            FixedTensor.from_ring(out.words().reshape(-1, layer.out_channels).T.reshape(layer.out_channels, oh, ow), cfg),
            x.session,
        )
    return out.reshape((layer.out_features,))


def conv2pc(x: Share, layer: LayerSpec, deps: SessionDeps, ch: Channel, shape_in, w_share=None) -> Share:
    """im2col-lowered secure convolution, then rescale by 2^-f."""
    return _linear2pc(x, layer, deps, ch, shape_in, w_share)


def fc2pc(x: Share, layer: LayerSpec, deps: SessionDeps, ch: Channel, w_share=None) -> Share:
    return _linear2pc(x, layer, deps, ch, None, w_share)


# ---------------------------------------------------------------------------
# non-linear layers
# ---------------------------------------------------------------------------


def relu2pc(x: Share, deps: SessionDeps, ch: Channel) -> Share:
    """x * DReLU(x): one comparison flow plus one elementwise Beaver product."""
    xf = _flat(x)
    bit = drelu(xf, deps.compare, ch)
    t = deps.supply.take_triple(MUL, xf.shape)
    out = beaver_mul(xf, bit, t, ch)
    return out.reshape(x.shape)


def maxpool2pc(x: Share, layer: LayerSpec, deps: SessionDeps, ch: Channel, shape_in) -> Share:
    """Row-major tournament of secure comparisons with b*(x-y)+y multiplexing."""
    cfg = x.config
    win_words, (oh, ow) = pool_windows(x.words().reshape(shape_in), layer.kernel, layer.stride)
    n_win, w = win_words.shape

    def col(j: int) -> Share:
        return Share(x.party, FixedTensor.from_ring(win_words[:, j].copy(), cfg), x.session)

    acc = col(0)
    for j in range(1, w):
        nxt = col(j)
        b = secure_cmp(acc, nxt, deps.compare, ch)  # 1{acc > nxt}
        diff = sub_shares(acc, nxt)
        t = deps.supply.take_triple(MUL, (n_win,))
        picked = beaver_mul(b, diff, t, ch)
        acc = Share(
            x.party,
            FixedTensor.from_ring(ring_add(picked.words(), nxt.words(), cfg), cfg),
            x.session,
        )
    return acc.reshape((shape_in[0], oh, ow))


def avgpool2pc(x: Share, layer: LayerSpec, shape_in) -> Share:
    """Window sum times the public reciprocal; zero communication."""
    cfg = x.config
    win_words, (oh, ow) = pool_windows(x.words().reshape(shape_in), layer.kernel, layer.stride)
    total = win_words.sum(axis=1, dtype=np.uint64) & np.uint64(cfg.mask)
    recip = encode(1.0 / (layer.kernel[0] * layer.kernel[1]), cfg)
    out = Share(x.party, FixedTensor.from_ring(ring_mul(total, np.uint64(recip), cfg), cfg), x.session)
    return truncate(out).reshape((shape_in[0], oh, ow))


def x2act2pc(x: Share, layer: LayerSpec, deps: SessionDeps, ch: Channel) -> Share:
    """delta(x) = (c/sqrt(n_x)) w1 x^2 + w2 x + b via one Beaver square."""
    cfg = x.config
    xf = _flat(x)
    pair = deps.supply.take_pair(xf.shape)
    sq = truncate(beaver_square(xf, pair, ch))
    q = encode(x2act_quad_coeff(layer), cfg)
    w2e = encode(layer.w2, cfg)
    b_lifted = ring_mul(encode(layer.b, cfg), np.uint64(cfg.scale), cfg)  # scale 2f pre-truncation
    acc = ring_add(
        ring_mul(np.uint64(q), sq.words(), cfg),
        ring_mul(np.uint64(w2e), xf.words(), cfg),
        cfg,
    )
    out = Share(x.party, FixedTensor.from_ring(acc, cfg), x.session)
    out = add_public(out, np.full(xf.tensor.size, b_lifted, dtype=np.uint64))
    return truncate(out).reshape(x.shape)


# ---------------------------------------------------------------------------
# whole-model evaluation
# ---------------------------------------------------------------------------


@dataclass
class LayerReport:
    index: int
    kind: str
    wall_s: float
    payload_bytes: int
    rounds: int


def share_weights(model: ModelSpec, deps: SessionDeps, ch: Channel) -> list[Share | None]:
    """Secret-share the model weights from party 0 to party 1 (one round)."""
    cfg = model.config
    shares: list[Share | None] = []
    ch.round_barrier()
    if deps.party == 0:
        blobs = []
        for l in model.layers:
            if l.weights is None:
                shares.append(None)
                continue
            w = FixedTensor.from_ring(l.weights, cfg)
            s0, s1 = shr(w, deps.rng, session=deps.session)
            shares.append(s0)
            blobs.append(pack_words(s1.words(), cfg.word_bytes))
        ch.send(b"".join(blobs))
    else:
        blob = ch.recv()
        off = 0
        for l in model.layers:
            if l.weights is None:
                shares.append(None)
                continue
            n = int(np.prod(l.weights.shape))
            words = unpack_words(blob[off : off + n * cfg.word_bytes], n, cfg.word_bytes)
            off += n * cfg.word_bytes
            shares.append(Share(1, FixedTensor(words, l.weights.shape, cfg), deps.session))
    return shares


def run_model(
    model: ModelSpec,
    x: Share,
    deps: SessionDeps,
    ch: Channel,
    weights_mode: str = "public",
) -> tuple[Share, list[LayerReport]]:
    """Sequential secure evaluation of every layer; returns logits share and
    a per-layer transcript/wall-clock report."""
    if weights_mode not in ("public", "shared"):
        raise ValueError("weights_mode must be 'public' or 'shared'")
    if tuple(x.shape) != tuple(model.input_shape):
        raise ValueError(f"input shape {x.shape} != model input {model.input_shape}")
    deps.compare.ensure_setup(ch)
    w_shares = share_weights(model, deps, ch) if weights_mode == "shared" else [None] * len(model.layers)

    reports: list[LayerReport] = []
    cur = x
    for i, ((shape_in, shape_out), layer) in enumerate(zip(layer_shapes(model), model.layers)):
        t0 = time.monotonic()
        n_entries = len(ch.transcript.entries)
        r0 = ch.round_index
        if layer.kind == "conv":
            cur = conv2pc(cur, layer, deps, ch, shape_in, w_shares[i])
        elif layer.kind == "fc":
            cur = fc2pc(cur, layer, deps, ch, w_shares[i])
        elif layer.kind == "relu":
            cur = relu2pc(cur, deps, ch)
        elif layer.kind == "x2act":
            cur = x2act2pc(cur, layer, deps, ch)
        elif layer.kind == "maxpool":
            cur = maxpool2pc(cur, layer, deps, ch, shape_in)
        elif layer.kind == "avgpool":
            cur = avgpool2pc(cur, layer, shape_in)
        payload = sum(e.payload_bytes for e in ch.transcript.entries[n_entries:])
        reports.append(
            LayerReport(i, layer.kind, time.monotonic() - t0, payload, ch.round_index - r0)
        )
    return cur, reports
