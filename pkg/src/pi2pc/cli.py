"""The `pi` command line: dealer, run, predict, bench, search, demo.

Exit codes: 0 ok, 2 config error, 3 protocol error, 4 io/file error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import struct
import sys
import time

import numpy as np

from .demo import write_demo
from .latency import DEFAULT_PROFILE, HwProfile, OpGeometry, model_layer_latencies, op_latency
from .model import LayerSpec, ModelSpec, material_plan, run_plain
from .ops import SessionDeps, avgpool2pc, conv2pc, maxpool2pc, relu2pc, run_model, x2act2pc
from .otcompare import CompareContext
from .ring import FixedTensor, RingConfig
from .sharing import (
    Dealer,
    LiveSupply,
    Share,
    SupplyExhaustedError,
    TripleReuseError,
    TripleStore,
    reveal,
    shr,
)
from .transport import (
    Channel,
    ChannelError,
    DelayModel,
    RoundDesyncError,
    run_pair,
    tcp_connect,
    tcp_listen,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PROTOCOL = 3
EXIT_IO = 4


class ConfigError(Exception):
    pass


class HandshakeError(ConfigError):
    pass


# ---------------------------------------------------------------------------
# session plumbing
# ---------------------------------------------------------------------------


def _model_digest(path: str) -> bytes:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).digest()[:16]


def handshake(ch: Channel, cfg: RingConfig, digest: bytes, weights_mode: str) -> None:
    """Both parties compare ring config, model digest and weights mode."""
    mode_code = 0 if weights_mode == "public" else 1
    blob = b"PIHS" + struct.pack("<BBB", cfg.ring_bits, cfg.frac_bits, mode_code) + digest
    ch.round_barrier()
    other = ch.exchange(blob)
    if other[:4] != b"PIHS":
        raise HandshakeError("peer sent a malformed handshake")
    k, f, mode = struct.unpack_from("<BBB", other, 4)
    if (k, f) != (cfg.ring_bits, cfg.frac_bits):
        raise HandshakeError(
            f"ring config mismatch: local k={cfg.ring_bits} f={cfg.frac_bits}, peer k={k} f={f}"
        )
    if mode != mode_code:
        raise HandshakeError("weights-mode mismatch between parties")
    if other[7:] != digest:
        raise HandshakeError("model digest mismatch between parties")


def distribute_input(
    ch: Channel, party: int, model: ModelSpec, x: FixedTensor | None, rng: np.random.Generator
) -> Share:
    """Party 0 holds the plaintext input and hands party 1 its share."""
    cfg = model.config
    n = int(np.prod(model.input_shape))
    ch.round_barrier()
    if party == 0:
        if x is None:
            raise ConfigError("party 0 needs --input")
        s0, s1 = shr(x, rng, session="run")
        from .ring import pack_words

        ch.send(pack_words(s1.words(), cfg.word_bytes))
        return s0
    blob = ch.recv()
    from .ring import unpack_words

    words = unpack_words(blob, n, cfg.word_bytes)
    return Share(1, FixedTensor(words, model.input_shape, cfg), "run")


def secure_session(
    ch: Channel,
    party: int,
    model: ModelSpec,
    supply: TripleStore,
    x: FixedTensor | None,
    seed: int,
    weights_mode: str,
    digest: bytes,
):
    """Full party session: handshake, input distribution, inference, reveal."""
    handshake(ch, model.config, digest, weights_mode)
    rng = np.random.default_rng(seed + 10 + party)
    deps = SessionDeps(
        party=party,
        supply=supply,
        compare=CompareContext(party, np.random.default_rng(seed + 20 + party)),
        rng=rng,
        session="run",
    )
    x_share = distribute_input(ch, party, model, x, np.random.default_rng(seed + 3))
    logits_share, reports = run_model(model, x_share, deps, ch, weights_mode)
    logits = reveal(logits_share, ch)
    return logits, reports


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _parse_shape_item(item: str):
    """'mul:64', 'pair:4x4' or 'matmul:3x8,8x2' -> a dealer plan entry."""
    kind, _, dims = item.partition(":")
    if not dims:
        raise ConfigError(f"bad shape item {item!r} (expected kind:dims)")

    def shape(s):
        return tuple(int(d) for d in s.split("x"))

    if kind == "matmul":
        try:
            sx, sy = dims.split(",")
        except ValueError:
            raise ConfigError(f"matmul shapes need 'MxK,KxN', got {dims!r}") from None
        return ("matmul", shape(sx), shape(sy))
    if kind in ("mul", "pair"):
        return (kind, shape(dims))
    raise ConfigError(f"unknown material kind {kind!r}")


def cmd_dealer(args) -> int:
    if bool(args.model) == bool(args.shapes):
        raise ConfigError("dealer needs exactly one of --model or --shapes")
    if args.model:
        model = ModelSpec.load(args.model)
        cfg = model.config
        plan = material_plan(model, args.weights_mode)
    else:
        cfg = RingConfig(args.ring_bits, args.frac_bits)
        plan = [_parse_shape_item(item) for item in args.shapes]
    plan = plan * args.count
    dealer = Dealer(cfg, args.seed)
    s0, s1 = dealer.issue(plan)
    os.makedirs(args.out_dir, exist_ok=True)
    p0 = os.path.join(args.out_dir, "party0.bvt")
    p1 = os.path.join(args.out_dir, "party1.bvt")
    s0.save(p0)
    s1.save(p1)
    print(f"issued {len(plan)} items per party -> {p0}, {p1}")
    return EXIT_OK


def cmd_run(args) -> int:
    model = ModelSpec.load(args.model)
    digest = _model_digest(args.model)
    x = FixedTensor.load(args.input) if args.input else None
    if x is not None and x.config != model.config:
        raise ConfigError("input ring config != model ring config")

    delay = DelayModel(enabled=True) if args.delay else None

    if args.plaintext:
        if x is None:
            raise ConfigError("--plaintext needs --input")
        logits = run_plain(model, x)
        _emit_logits(logits, args)
        return EXIT_OK

    if args.transport == "inproc":
        if x is None:
            raise ConfigError("inproc run needs --input")
        if args.dealer:
            if not args.dealer1:
                raise ConfigError("inproc with --dealer also needs --dealer1")
            s0 = TripleStore.load(args.dealer)
            s1 = TripleStore.load(args.dealer1)
            if (s0.party, s1.party) != (0, 1):
                raise ConfigError(
                    f"dealer files are for parties {s0.party}/{s1.party}, expected 0/1"
                )
        else:
            dealer = Dealer(model.config, args.seed)
            s0, s1 = dealer.issue(material_plan(model, args.weights_mode))

        def party(role, supply):
            return lambda ch: secure_session(
                ch, role, model, supply, x if role == 0 else None, args.seed, args.weights_mode, digest
            )

        results, (ch0, ch1) = run_pair(party(0, s0), party(1, s1), delay)
        logits = results[0][0]
        _emit_logits(logits, args)
        _emit_transcripts(args, ch0, ch1)
        return EXIT_OK

    # tcp: one process per role
    role = args.role
    if role not in (0, 1):
        raise ConfigError("tcp transport needs --role 0 or --role 1")
    if not args.dealer:
        raise ConfigError("tcp transport needs --dealer (issued with `pi dealer`)")
    supply = TripleStore.load(args.dealer)
    if supply.party != role:
        raise ConfigError(f"dealer file is for party {supply.party}, not {role}")
    bind = args.bind or os.environ.get("PI_BIND_ADDR", "127.0.0.1:29500")
    if role == 0:
        ch = tcp_listen(bind, role=0, delay=delay)
    else:
        if not args.peer:
            raise ConfigError("party 1 needs --peer host:port")
        ch = tcp_connect(args.peer, role=1, delay=delay)
    try:
        logits, _ = secure_session(
            ch, role, model, supply, x if role == 0 else None, args.seed, args.weights_mode, digest
        )
        _emit_logits(logits, args)
        if args.transcript:
            ch.transcript.save_csv(args.transcript)
    finally:
        ch.close()
    return EXIT_OK


def _emit_logits(logits: FixedTensor, args) -> None:
    vals = logits.to_real()
    print("logits:", np.array2string(vals, precision=6))
    print("argmax:", int(np.argmax(vals)))
    if args.out:
        logits.save(args.out)


def _emit_transcripts(args, ch0, ch1) -> None:
    if args.transcript:
        base, ext = os.path.splitext(args.transcript)
        ch0.transcript.save_csv(f"{base}.party0{ext or '.csv'}")
        ch1.transcript.save_csv(f"{base}.party1{ext or '.csv'}")


def cmd_predict(args) -> int:
    model = ModelSpec.load(args.model)
    hw = HwProfile.from_toml(args.hw) if args.hw else DEFAULT_PROFILE
    rows = model_layer_latencies(model, hw)
    total = sum(s for _, s in rows)
    if args.format == "json":
        doc = {
            "total_s": total,
            "layers": [{"index": i, "kind": k, "seconds": s} for i, (k, s) in enumerate(rows)],
        }
        print(json.dumps(doc, indent=2))
    elif args.format == "csv":
        print("index,kind,seconds")
        for i, (kind, s) in enumerate(rows):
            print(f"{i},{kind},{s:.12g}")
        print(f"total,,{total:.12g}")
    else:
        if args.per_layer:
            for i, (kind, s) in enumerate(rows):
                print(f"layer {i:2d} {kind:8s} {s:.9f} s")
        print(f"total {total:.9f} s")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = RingConfig(args.ring_bits, args.frac_bits)
    hw = HwProfile.from_toml(args.hw) if args.hw else DEFAULT_PROFILE
    rng = np.random.default_rng(args.seed)
    shape = (args.ic, args.fi, args.fi)
    x = FixedTensor.from_real(rng.normal(0, 1, shape), cfg)
    x0, x1 = shr(x, np.random.default_rng(args.seed + 1), session="bench")
    dealer = Dealer(cfg, args.seed + 2)
    s0, s1 = LiveSupply.make_pair(dealer)

    g = OpGeometry(fi=float(args.fi), ic=args.ic, oc=args.oc, kernel=(3, 3), padding=(1, 1))
    layer = _bench_layer(args, cfg, rng)

    def party(role, supply, xs):
        def fn(ch):
            deps = SessionDeps(
                party=role,
                supply=supply,
                compare=CompareContext(role, np.random.default_rng(args.seed + 30 + role)),
                rng=np.random.default_rng(args.seed + 40 + role),
                session="bench",
            )
            deps.compare.ensure_setup(ch)
            mark = len(ch.transcript.entries)
            t0 = time.monotonic()
            if args.op == "relu":
                out = relu2pc(xs, deps, ch)
            elif args.op == "maxpool":
                out = maxpool2pc(xs, layer, deps, ch, shape)
            elif args.op == "avgpool":
                out = avgpool2pc(xs, layer, shape)
            elif args.op == "x2act":
                out = x2act2pc(xs, layer, deps, ch)
            elif args.op == "conv":
                out = conv2pc(xs, layer, deps, ch, shape)
            else:
                raise ConfigError(f"unknown op {args.op}")
            wall = time.monotonic() - t0
            payload = sum(e.payload_bytes for e in ch.transcript.entries[mark:])
            rounds = len({e.round for e in ch.transcript.entries[mark:]})
            return {"wall_s": wall, "payload_bytes": payload, "rounds": rounds, "out_shape": out.shape}

        return fn

    results, _ = run_pair(party(0, s0, x0), party(1, s1, x1))
    report = {
        "op": args.op,
        "fi": args.fi,
        "ic": args.ic,
        "measured": results[0],
        "modeled_latency_s": op_latency(args.op, g, hw),
    }
    print(json.dumps(report, indent=2, default=str))
    return EXIT_OK


def _bench_layer(args, cfg, rng) -> LayerSpec:
    if args.op == "conv":
        k = args.ic * 9
        return LayerSpec(
            "conv",
            out_channels=args.oc,
            kernel=(3, 3),
            stride=(1, 1),
            padding=(1, 1),
            weights=FixedTensor.from_real(rng.normal(0, 0.3, (k, args.oc)), cfg).array(),
            bias=FixedTensor.from_real(np.zeros(args.oc), cfg).array(),
        )
    if args.op in ("maxpool", "avgpool"):
        return LayerSpec(args.op, kernel=(2, 2), stride=(2, 2))
    if args.op == "x2act":
        return LayerSpec("x2act", w1=0.05, w2=1.0, b=0.0, c=1.0, n_x=args.ic * 9)
    return LayerSpec("relu")


def cmd_search(args) -> int:
    from .nas.search import SearchConfig, run_search

    hw = HwProfile.from_toml(args.hw) if args.hw else DEFAULT_PROFILE
    cfg = SearchConfig(
        backbone=args.backbone,
        lambda_lat=args.lambda_lat,
        epochs=args.epochs,
        seed=args.seed,
        data_n=args.data_n,
        hw=hw,
        shared_conv=not args.separate_conv,
    )
    res = run_search(cfg)
    print(f"selected candidates per layer: {res.choices}")
    print(f"Lat(alpha*) = {res.final_latency:.6g} s over {len(res.log_rows)} iterations")
    if args.out:
        res.model.save(args.out)
        print(f"wrote searched model to {args.out}")
    if args.log:
        with open(args.log, "w") as fh:
            fh.write(res.log_csv())
        print(f"wrote search log to {args.log}")
    return EXIT_OK


def cmd_demo(args) -> int:
    write_demo(args.out_dir)
    print(f"wrote demo assets to {args.out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing and dispatch
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pi", description=__doc__)
    sub = p.add_subparsers(dest="cmd", required=True)

    d = sub.add_parser("dealer", help="issue Beaver triples/pairs to BVT1 files")
    d.add_argument("--model", help="provision exactly what one inference of this model needs")
    d.add_argument("--shapes", nargs="+",
                   help="raw material items, e.g. mul:64 pair:4x4 matmul:3x8,8x2")
    d.add_argument("--count", type=int, default=1, help="how many repetitions of the plan")
    d.add_argument("--weights-mode", choices=["public", "shared"], default="public")
    d.add_argument("--ring-bits", type=int, default=32)
    d.add_argument("--frac-bits", type=int, default=16)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out-dir", required=True)
    d.set_defaults(fn=cmd_dealer)

    r = sub.add_parser("run", help="secure (or plaintext reference) inference")
    r.add_argument("--model", required=True)
    r.add_argument("--input")
    r.add_argument("--transport", choices=["inproc", "tcp"], default="inproc")
    r.add_argument("--role", type=int, choices=[0, 1])
    r.add_argument("--peer", help="host:port of party 0 (tcp, role 1)")
    r.add_argument("--bind", help="listen address for party 0 (or PI_BIND_ADDR)")
    r.add_argument("--dealer", help="this party's BVT1 file")
    r.add_argument("--dealer1", help="party 1 BVT1 file (inproc with pre-issued material)")
    r.add_argument("--weights-mode", choices=["public", "shared"], default="public")
    r.add_argument("--plaintext", action="store_true", help="run the fixed-point reference instead")
    r.add_argument("--delay", action="store_true", help="enable the link delay model")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", help="write logits FXT1 here")
    r.add_argument("--transcript", help="write transcript CSV here")
    r.set_defaults(fn=cmd_run)

    q = sub.add_parser("predict", help="analytic latency of a model")
    q.add_argument("--model", required=True)
    q.add_argument("--hw", help="hardware profile TOML")
    q.add_argument("--per-layer", action="store_true")
    q.add_argument("--format", choices=["text", "json", "csv"], default="text")
    q.add_argument("--json", dest="format", action="store_const", const="json",
                   help="shorthand for --format json")
    q.set_defaults(fn=cmd_predict)

    b = sub.add_parser("bench", help="microbenchmark one secure operator")
    b.add_argument("--op", required=True, choices=["relu", "maxpool", "avgpool", "x2act", "conv"])
    b.add_argument("--fi", type=int, default=8)
    b.add_argument("--ic", type=int, default=4)
    b.add_argument("--oc", type=int, default=8)
    b.add_argument("--ring-bits", type=int, default=32)
    b.add_argument("--frac-bits", type=int, default=16)
    b.add_argument("--hw")
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(fn=cmd_bench)

    s = sub.add_parser("search", help="latency-aware architecture search")
    s.add_argument("--backbone", choices=["toy", "mini-vgg"], default="toy")
    s.add_argument("--lambda", dest="lambda_lat", type=float, default=0.0)
    s.add_argument("--epochs", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--data-n", type=int, default=480)
    s.add_argument("--hw")
    s.add_argument("--separate-conv", action="store_true", help="per-candidate conv weights")
    s.add_argument("--out", help="write the derived model (m.json path)")
    s.add_argument("--log", help="write the per-iteration search log CSV")
    s.set_defaults(fn=cmd_search)

    g = sub.add_parser("demo", help="generate the bundled demo assets")
    g.add_argument("--out-dir", default="demo")
    g.set_defaults(fn=cmd_demo)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, HandshakeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ChannelError, RoundDesyncError, SupplyExhaustedError, TripleReuseError) as exc:
        print(f"protocol error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except (OSError, ValueError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
