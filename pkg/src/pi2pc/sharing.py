"""Additive secret sharing and the Beaver multiplication/square protocols.

A value x in Z_{2^k} is split as (r, x - r) with r uniform; either share alone
is uniform.  Linear maps are evaluated locally on shares; products consume
dealer-issued correlated randomness (Beaver triples / pairs) and cost exactly
one round of E/F recovery.

The offline phase is a trusted dealer: it issues single-use triples
(A, B, Z = A o B) and pairs (A, Z = A * A) to both parties, either in memory
or as per-party "BVT1" batch files:

    magic "BVT1" | u8 ring_bits | u8 frac_bits | u8 party | u32 n_items
    then per item: u8 type (0 matmul-triple, 1 elementwise-triple, 2 pair)
    | u8 ndim + u32 extents[] per operand | raw words (a [, b], z)

Truncation (rescale by 2^-f after a fixed-point product) is local and
probabilistic: party 0 arithmetic-shifts its share, party 1 negates, shifts
and negates.  The result is within 1 ULP of the true quotient except for a
wrap failure of probability about |x| / 2^{k-1}.
"""

from __future__ import annotations

import itertools
import struct
import threading
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .ring import (
    FixedTensor,
    RingConfig,
    pack_words,
    rand_ring,
    ring_add,
    ring_matmul,
    ring_mul,
    ring_sub,
    to_signed,
    from_signed,
    unpack_words,
)
from .transport import Channel

BVT_MAGIC = b"BVT1"

MATMUL = "matmul"
MUL = "mul"  # elementwise


class SupplyExhaustedError(RuntimeError):
    """The issued batch of triples/pairs ran out."""


class TripleReuseError(RuntimeError):
    """A single-use triple or pair was consumed twice."""


@dataclass
class Share:
    """One party's additive share of a FixedTensor."""

    party: int
    tensor: FixedTensor
    session: str = "local"

    @property
    def shape(self):
        return self.tensor.shape

    @property
    def config(self):
        return self.tensor.config

    def words(self) -> np.ndarray:
        return self.tensor.data

    def reshape(self, shape) -> "Share":
        return Share(self.party, self.tensor.reshape(shape), self.session)


_triple_ids = itertools.count()


@dataclass
class BeaverTriple:
    """One party's half of (A, B, Z = A o B); single use."""

    party: int
    kind: str  # MATMUL or MUL
    a: FixedTensor
    b: FixedTensor
    z: FixedTensor
    triple_id: int = field(default_factory=lambda: next(_triple_ids))
    used: bool = False

    def consume(self):
        if self.used:
            raise TripleReuseError(f"triple {self.triple_id} already used")
        self.used = True


@dataclass
class BeaverPair:
    """One party's half of (A, Z = A * A elementwise); single use."""

    party: int
    a: FixedTensor
    z: FixedTensor
    pair_id: int = field(default_factory=lambda: next(_triple_ids))
    used: bool = False

    def consume(self):
        if self.used:
            raise TripleReuseError(f"pair {self.pair_id} already used")
        self.used = True


# ---------------------------------------------------------------------------
# share generation / recovery / linear ops
# ---------------------------------------------------------------------------


def shr(x: FixedTensor, rng: np.random.Generator, session: str = "local") -> tuple[Share, Share]:
    """Split x into (r, x - r) with r uniform over Z_{2^k}."""
    r = rand_ring(rng, x.size, x.config)
    s0 = FixedTensor(r, x.shape, x.config)
    s1 = FixedTensor(ring_sub(x.data, r, x.config), x.shape, x.config)
    return Share(0, s0, session), Share(1, s1, session)


def rec(s0: Share, s1: Share) -> FixedTensor:
    """Recover x = x_S0 + x_S1."""
    if s0.shape != s1.shape:
        raise ValueError(f"share shape mismatch: {s0.shape} vs {s1.shape}")
    if s0.session != s1.session:
        raise ValueError(f"share session mismatch: {s0.session} vs {s1.session}")
    if {s0.party, s1.party} != {0, 1}:
        raise ValueError("rec needs one share from each party")
    cfg = s0.config
    return FixedTensor(ring_add(s0.words(), s1.words(), cfg), s0.shape, cfg)


def add_scale(a: int, x: Share, y: Share) -> Share:
    """Local evaluation of a*X + Y for a public ring scalar a; zero messages."""
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    if x.party != y.party:
        raise ValueError("add_scale operands belong to different parties")
    cfg = x.config
    words = ring_add(ring_mul(np.uint64(a & cfg.mask), x.words(), cfg), y.words(), cfg)
    return Share(x.party, FixedTensor(words, x.shape, cfg), x.session)


def add_public(x: Share, value: np.ndarray) -> Share:
    """Add a public ring tensor to a shared one (party 0 absorbs it)."""
    cfg = x.config
    if x.party == 0:
        words = ring_add(x.words(), np.asarray(value, np.uint64).reshape(-1), cfg)
        return Share(0, FixedTensor(words, x.shape, cfg), x.session)
    return x


def mul_public(x: Share, value) -> Share:
    """Multiply a share elementwise by a public ring tensor/scalar."""
    cfg = x.config
    v = np.asarray(value, np.uint64)
    words = ring_mul(x.words(), v.reshape(-1) if v.ndim else v, cfg)
    return Share(x.party, FixedTensor(words, x.shape, cfg), x.session)


def sub_shares(x: Share, y: Share) -> Share:
    if x.shape != y.shape or x.party != y.party:
        raise ValueError("sub_shares needs same-party, same-shape operands")
    cfg = x.config
    return Share(x.party, FixedTensor(ring_sub(x.words(), y.words(), cfg), x.shape, cfg), x.session)


# ---------------------------------------------------------------------------
# interactive protocols
# ---------------------------------------------------------------------------


def _send_tensors(ch: Channel, cfg: RingConfig, *arrays: np.ndarray) -> bytes:
    payload = b"".join(pack_words(a, cfg.word_bytes) for a in arrays)
    return ch.exchange(payload)


def beaver_mul(x: Share, y: Share, triple: BeaverTriple, ch: Channel) -> Share:
    """One secure product X o Y (matmul or elementwise by triple kind).

    Each party derives E_i = X_i - A_i, F_i = Y_i - B_i; (E, F) are jointly
    recovered in one round; party i returns
    -i * E o F + X_i o F + E o Y_i + Z_i.
    """
    cfg = x.config
    triple.consume()
    if triple.party != x.party:
        raise ValueError("triple issued to a different party")
    if triple.kind == MATMUL:
        if x.shape[-1] != y.shape[0] or triple.a.shape != x.shape or triple.b.shape != y.shape:
            raise ValueError(
                f"matmul triple shape mismatch: X{x.shape} Y{y.shape} "
                f"A{triple.a.shape} B{triple.b.shape}"
            )
    else:
        if not (x.shape == y.shape == triple.a.shape == triple.b.shape):
            raise ValueError(
                f"elementwise triple shape mismatch: X{x.shape} Y{y.shape} A{triple.a.shape}"
            )

    e_i = ring_sub(x.words(), triple.a.data, cfg)
    f_i = ring_sub(y.words(), triple.b.data, cfg)

    ch.round_barrier()
    other = _send_tensors(ch, cfg, e_i, f_i)
    n_e = e_i.size
    e_j = unpack_words(other[: n_e * cfg.word_bytes], n_e, cfg.word_bytes)
    f_j = unpack_words(other[n_e * cfg.word_bytes :], f_i.size, cfg.word_bytes)
    e = ring_add(e_i, e_j, cfg)
    f = ring_add(f_i, f_j, cfg)

    if triple.kind == MATMUL:
        em = e.reshape(x.shape)
        fm = f.reshape(y.shape)
        xm = x.words().reshape(x.shape)
        ym = y.words().reshape(y.shape)
        r = ring_add(ring_matmul(xm, fm, cfg), ring_matmul(em, ym, cfg), cfg)
        if x.party == 1:
            r = ring_sub(r, ring_matmul(em, fm, cfg), cfg)
        r = ring_add(r, triple.z.data.reshape(r.shape), cfg)
        out_shape = r.shape
    else:
        r = ring_add(ring_mul(x.words(), f, cfg), ring_mul(e, y.words(), cfg), cfg)
        if x.party == 1:
            r = ring_sub(r, ring_mul(e, f, cfg), cfg)
        r = ring_add(r, triple.z.data, cfg)
        out_shape = x.shape
    return Share(x.party, FixedTensor(r, out_shape, cfg), x.session)


def beaver_square(x: Share, pair: BeaverPair, ch: Channel) -> Share:
    """Elementwise X * X using one Beaver pair; one round recovering E."""
    cfg = x.config
    pair.consume()
    if pair.party != x.party:
        raise ValueError("pair issued to a different party")
    if pair.a.shape != x.shape:
        raise ValueError(f"pair shape mismatch: X{x.shape} A{pair.a.shape}")

    e_i = ring_sub(x.words(), pair.a.data, cfg)
    ch.round_barrier()
    other = _send_tensors(ch, cfg, e_i)
    e_j = unpack_words(other, e_i.size, cfg.word_bytes)
    e = ring_add(e_i, e_j, cfg)

    r = ring_add(pair.z.data, ring_mul(np.uint64(2), ring_mul(e, pair.a.data, cfg), cfg), cfg)
    if x.party == 0:  # the E*E term is added by exactly one party
        r = ring_add(r, ring_mul(e, e, cfg), cfg)
    return Share(x.party, FixedTensor(r, x.shape, cfg), x.session)


def truncate(x: Share, f: int | None = None) -> Share:
    """Local probabilistic rescale of shares by 2^-f.

    Party 0 arithmetic-shifts its signed share right by f; party 1 negates,
    shifts, negates.  Error <= 1 ULP except for the wrap failure case.
    """
    cfg = x.config
    if f is None:
        f = cfg.frac_bits
    s = to_signed(x.words(), cfg)
    if x.party == 0:
        t = s >> np.int64(f)
    else:
        t = -((-s) >> np.int64(f))
    return Share(x.party, FixedTensor(from_signed(t, cfg), x.shape, cfg), x.session)


def reveal(x: Share, ch: Channel) -> FixedTensor:
    """Open a shared tensor to both parties (one round)."""
    cfg = x.config
    ch.round_barrier()
    other = _send_tensors(ch, cfg, x.words())
    w = unpack_words(other, x.tensor.size, cfg.word_bytes)
    return FixedTensor(ring_add(x.words(), w, cfg), x.shape, cfg)


# ---------------------------------------------------------------------------
# trusted dealer (offline phase)
# ---------------------------------------------------------------------------

_ITEM_CODES = {MATMUL: 0, MUL: 1, "pair": 2}
_ITEM_KINDS = {v: k for k, v in _ITEM_CODES.items()}


def _store_key(kind: str, shape_x, shape_y=None):
    return (kind, tuple(shape_x), tuple(shape_y) if shape_y is not None else None)


class Dealer:
    """Trusted third party issuing correlated randomness for both parties."""

    def __init__(self, cfg: RingConfig, seed: int | np.random.Generator = 0):
        self.cfg = cfg
        self.rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    def _share_pair(self, words: np.ndarray, shape) -> tuple[FixedTensor, FixedTensor]:
        r = rand_ring(self.rng, words.size, self.cfg)
        return (
            FixedTensor(r, shape, self.cfg),
            FixedTensor(ring_sub(words, r, self.cfg), shape, self.cfg),
        )

    def triple(self, kind: str, shape_x, shape_y) -> tuple[BeaverTriple, BeaverTriple]:
        cfg = self.cfg
        shape_x, shape_y = tuple(shape_x), tuple(shape_y)
        a = rand_ring(self.rng, int(np.prod(shape_x)), cfg)
        b = rand_ring(self.rng, int(np.prod(shape_y)), cfg)
        if kind == MATMUL:
            z = ring_matmul(a.reshape(shape_x), b.reshape(shape_y), cfg)
            shape_z = z.shape
        elif kind == MUL:
            if shape_x != shape_y:
                raise ValueError("elementwise triple needs equal shapes")
            z = ring_mul(a, b, cfg)
            shape_z = shape_x
        else:
            raise ValueError(f"unknown triple kind {kind!r}")
        a0, a1 = self._share_pair(a, shape_x)
        b0, b1 = self._share_pair(b, shape_y)
        z0, z1 = self._share_pair(z.reshape(-1), shape_z)
        # dealer self-check: shares of Z recombine to A o B exactly
        assert np.array_equal(ring_add(z0.data, z1.data, cfg), z.reshape(-1))
        t0 = BeaverTriple(0, kind, a0, b0, z0)
        t1 = BeaverTriple(1, kind, a1, b1, z1, triple_id=t0.triple_id)
        return t0, t1

    def pair(self, shape) -> tuple[BeaverPair, BeaverPair]:
        cfg = self.cfg
        shape = tuple(shape)
        a = rand_ring(self.rng, int(np.prod(shape)), cfg)
        z = ring_mul(a, a, cfg)
        a0, a1 = self._share_pair(a, shape)
        z0, z1 = self._share_pair(z, shape)
        p0 = BeaverPair(0, a0, z0)
        p1 = BeaverPair(1, a1, z1, pair_id=p0.pair_id)
        return p0, p1

    def issue(self, plan) -> tuple["TripleStore", "TripleStore"]:
        """Issue a batch: plan is a list of ("matmul", sx, sy) / ("mul", s) /
        ("pair", s) entries.  Returns one store per party."""
        s0, s1 = TripleStore(0, self.cfg), TripleStore(1, self.cfg)
        for entry in plan:
            kind = entry[0]
            if kind == MATMUL:
                t0, t1 = self.triple(MATMUL, entry[1], entry[2])
            elif kind == MUL:
                t0, t1 = self.triple(MUL, entry[1], entry[1])
            elif kind == "pair":
                t0, t1 = self.pair(entry[1])
            else:
                raise ValueError(f"unknown plan entry {entry!r}")
            s0.put(t0)
            s1.put(t1)
        return s0, s1


class TripleStore:
    """One party's supply of issued correlated randomness."""

    def __init__(self, party: int, cfg: RingConfig):
        self.party = party
        self.cfg = cfg
        self._queues: dict[tuple, deque] = {}

    def put(self, item) -> None:
        if isinstance(item, BeaverTriple):
            key = _store_key(item.kind, item.a.shape, item.b.shape)
        else:
            key = _store_key("pair", item.a.shape)
        self._queues.setdefault(key, deque()).append(item)

    def _take(self, key):
        q = self._queues.get(key)
        if not q:
            raise SupplyExhaustedError(f"no issued material for {key}")
        return q.popleft()

    def take_triple(self, kind: str, shape_x, shape_y=None) -> BeaverTriple:
        if kind == MUL:
            shape_y = shape_x
        return self._take(_store_key(kind, shape_x, shape_y))

    def take_pair(self, shape) -> BeaverPair:
        return self._take(_store_key("pair", shape))

    def remaining(self) -> int:
        return sum(len(q) for q in self._queues.values())

    # -- BVT1 files ---------------------------------------------------------

    def to_bytes(self) -> bytes:
        items = [it for q in self._queues.values() for it in q]
        out = [
            BVT_MAGIC,
            struct.pack(
                "<BBBI", self.cfg.ring_bits, self.cfg.frac_bits, self.party, len(items)
            ),
        ]
        wb = self.cfg.word_bytes

        def shape_blob(shape):
            return struct.pack("<B", len(shape)) + struct.pack(f"<{len(shape)}I", *shape)

        for it in items:
            if isinstance(it, BeaverTriple):
                out.append(struct.pack("<B", _ITEM_CODES[it.kind]))
                out.append(shape_blob(it.a.shape))
                out.append(shape_blob(it.b.shape))
                out.append(pack_words(it.a.data, wb))
                out.append(pack_words(it.b.data, wb))
                out.append(pack_words(it.z.data, wb))
            else:
                out.append(struct.pack("<B", _ITEM_CODES["pair"]))
                out.append(shape_blob(it.a.shape))
                out.append(pack_words(it.a.data, wb))
                out.append(pack_words(it.z.data, wb))
        return b"".join(out)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def from_bytes(cls, blob: bytes) -> "TripleStore":
        if blob[:4] != BVT_MAGIC:
            raise ValueError("not a BVT1 dealer file (bad magic)")
        k, f, party, n_items = struct.unpack_from("<BBBI", blob, 4)
        cfg = RingConfig(k, f)
        store = cls(party, cfg)
        off = 4 + 7
        wb = cfg.word_bytes

        def read_shape(off):
            (ndim,) = struct.unpack_from("<B", blob, off)
            extents = struct.unpack_from(f"<{ndim}I", blob, off + 1)
            return tuple(extents), off + 1 + 4 * ndim

        def read_words(off, n):
            arr = unpack_words(blob[off : off + n * wb], n, wb)
            return arr, off + n * wb

        for _ in range(n_items):
            (code,) = struct.unpack_from("<B", blob, off)
            off += 1
            kind = _ITEM_KINDS[code]
            shape_a, off = read_shape(off)
            if kind == "pair":
                n = int(np.prod(shape_a))
                a, off = read_words(off, n)
                z, off = read_words(off, n)
                store.put(
                    BeaverPair(party, FixedTensor(a, shape_a, cfg), FixedTensor(z, shape_a, cfg))
                )
            else:
                shape_b, off = read_shape(off)
                na, nb = int(np.prod(shape_a)), int(np.prod(shape_b))
                shape_z = (
                    (shape_a[0], shape_b[1]) if kind == MATMUL and len(shape_a) == 2 else shape_a
                )
                nz = int(np.prod(shape_z))
                a, off = read_words(off, na)
                b, off = read_words(off, nb)
                z, off = read_words(off, nz)
                store.put(
                    BeaverTriple(
                        party,
                        kind,
                        FixedTensor(a, shape_a, cfg),
                        FixedTensor(b, shape_b, cfg),
                        FixedTensor(z, shape_z, cfg),
                    )
                )
        return store

    @classmethod
    def load(cls, path) -> "TripleStore":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


class LiveSupply(TripleStore):
    """Store backed by an in-process dealer; issues on demand.

    Both parties' supplies share one dealer and a memo of issued halves so the
    two protocol threads stay aligned.  Intended for tests and the in-process
    CLI transport; file-based batches are the faithful offline phase.
    """

    def __init__(self, party, cfg, shared):
        super().__init__(party, cfg)
        self._shared = shared

    @classmethod
    def make_pair(cls, dealer: Dealer) -> tuple["LiveSupply", "LiveSupply"]:
        shared = {"dealer": dealer, "lock": threading.Lock(), "memo": {}, "next": [{}, {}]}
        return cls(0, dealer.cfg, shared), cls(1, dealer.cfg, shared)

    def _take(self, key):
        sh = self._shared
        with sh["lock"]:
            idx = sh["next"][self.party].get(key, 0)
            sh["next"][self.party][key] = idx + 1
            issued = sh["memo"].setdefault(key, [])
            while len(issued) <= idx:
                kind, shape_x, shape_y = key
                if kind == "pair":
                    issued.append(sh["dealer"].pair(shape_x))
                else:
                    issued.append(sh["dealer"].triple(kind, shape_x, shape_y))
            return issued[idx][self.party]
