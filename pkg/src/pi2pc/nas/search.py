"""Differentiable latency-aware architecture search (bilevel, DARTS-style).

One iteration updates the architecture weights alpha on the validation split
through the second-order approximation

    omega' = omega - xi * d_omega zeta_trn(omega, alpha)
    omega_pm = omega +/- eps * d_omega' zeta_val(omega', alpha)
    d_alpha = d_alpha zeta_val(omega', alpha)
              - xi * (d_alpha zeta_trn(omega+, alpha) - d_alpha zeta_trn(omega-, alpha)) / (2 eps)

(5 forward and 6 backward passes per iteration including the plain SGD update
of omega), with eps = 1e-2 / ||d_omega' zeta_val||.  The loss is
cross-entropy plus lambda * Lat(alpha), Lat(alpha) the theta-weighted sum of
candidate latencies; with lambda = 0 the latency table is never consulted in
the gradient path.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from ..latency import DEFAULT_PROFILE, HwProfile, LatencyTable, build_latency_table
from ..model import ModelSpec
from ..ring import RingConfig
from .autodiff import Tensor, cross_entropy, softmax
from .data import batches, blobs, split
from .optim import SGD, Adam
from .supernet import Supernet, derive_arch, make_backbone


@dataclass
class PassCounter:
    forwards: int = 0
    backwards: int = 0


class SupernetProblem:
    """Bilevel objective over a gated supernet and its alpha parameters."""

    def __init__(self, sn: Supernet, alphas: list[Tensor], lam: float, table: LatencyTable | None):
        self.sn = sn
        self.alphas = alphas
        self.lam = lam
        self.table = table
        self.weights = sn.weight_params()
        self.arch = alphas
        self.counter = PassCounter()

    def thetas(self) -> list[Tensor]:
        return [softmax(a) for a in self.arch]

    def latency_term(self, thetas: list[Tensor]) -> Tensor:
        total = None
        for li, th in enumerate(thetas):
            costs = self.table.layer_costs(li)
            part = (th * costs).sum()
            total = part if total is None else total + part
        return total

    def loss(self, split_name: str, batch) -> Tensor:
        del split_name  # the split only determines which batch the caller hands in
        x, y = batch
        thetas = self.thetas()
        self.counter.forwards += 1
        out = cross_entropy(self.sn.forward(x, thetas), y)
        if self.lam > 0:
            out = out + self.lam * self.latency_term(thetas)
        return out

    def backward(self, loss: Tensor) -> None:
        self.counter.backwards += 1
        loss.backward()


def _grad_list(params: list[Tensor]) -> list[np.ndarray]:
    return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]


def darts_step(
    problem,
    w_opt: SGD,
    a_opt: Adam,
    batch_trn,
    batch_val,
    xi: float,
    eps_base: float = 1e-2,
) -> dict:
    """One bilevel iteration; returns diagnostics for logging/tests."""
    w, a = problem.weights, problem.arch

    # d_omega zeta_trn(omega, alpha)
    loss_trn = problem.loss("trn", batch_trn)
    problem.backward(loss_trn)
    dw = _grad_list(w)

    # virtual step to omega'
    w_saved = [p.data.copy() for p in w]
    for p, g in zip(w, dw):
        p.data = p.data - xi * g

    # zeta_val(omega', alpha): two backward paths (alpha then omega')
    loss_val = problem.loss("val", batch_val)
    problem.backward(loss_val)
    da_prime = _grad_list(a)
    problem.backward(loss_val)
    dwp = _grad_list(w)

    for p, s in zip(w, w_saved):
        p.data = s

    norm = float(np.sqrt(sum(float((g * g).sum()) for g in dwp)))
    eps = eps_base / max(norm, 1e-12)

    # finite-difference hessian-vector term around the original omega
    for p, s, g in zip(w, w_saved, dwp):
        p.data = s + eps * g
    loss_p = problem.loss("trn", batch_trn)
    problem.backward(loss_p)
    da_plus = _grad_list(a)

    for p, s, g in zip(w, w_saved, dwp):
        p.data = s - eps * g
    loss_m = problem.loss("trn", batch_trn)
    problem.backward(loss_m)
    da_minus = _grad_list(a)

    for p, s in zip(w, w_saved):
        p.data = s

    da_hess = [(ap - am) / (2.0 * eps) for ap, am in zip(da_plus, da_minus)]
    da = [p - xi * h for p, h in zip(da_prime, da_hess)]
    a_opt.step(grads=da)

    # standard omega step on the training loss
    loss_w = problem.loss("trn", batch_trn)
    problem.backward(loss_w)
    w_opt.step(grads=_grad_list(w))

    return {
        "zeta_trn": float(loss_trn.data),
        "zeta_val": float(loss_val.data),
        "da": da,
        "da_prime": da_prime,
        "da_hess": da_hess,
        "eps": eps,
        "dw_prime": dwp,
    }


def theta_entropy(alphas: list[Tensor]) -> float:
    """Mean normalized entropy of the per-layer selection distributions."""
    hs = []
    for a in alphas:
        z = np.exp(a.data - a.data.max())
        th = z / z.sum()
        h = -(th * np.log(np.maximum(th, 1e-12))).sum() / np.log(len(th))
        hs.append(h)
    return float(np.mean(hs))


# ---------------------------------------------------------------------------
# search driver
# ---------------------------------------------------------------------------


@dataclass
class SearchConfig:
    backbone: str = "toy"
    lambda_lat: float = 0.0
    epochs: int = 8
    batch: int = 32
    seed: int = 0
    data_n: int = 480
    n_classes: int = 3
    hw: HwProfile = field(default_factory=lambda: DEFAULT_PROFILE)
    lr_w: float = 0.05
    momentum: float = 0.9
    lr_a: float = 3e-4
    xi: float | None = None  # defaults to lr_w
    eps_base: float = 1e-2
    entropy_stop: float = 0.05
    shared_conv: bool = True
    ring: RingConfig = field(default_factory=lambda: RingConfig(64, 16))


@dataclass
class SearchResult:
    sn: Supernet
    alphas: list[Tensor]
    table: LatencyTable
    model: ModelSpec
    choices: list[int]
    log_rows: list[dict]
    counter: PassCounter
    final_latency: float

    def log_csv(self) -> str:
        buf = io.StringIO()
        buf.write("iter,zeta_trn,zeta_val,lat_alpha,theta\n")
        for r in self.log_rows:
            theta = "|".join(
                ";".join(f"{v:.6f}" for v in layer) for layer in r["theta"]
            )
            buf.write(f"{r['iter']},{r['zeta_trn']:.6f},{r['zeta_val']:.6f},{r['lat_alpha']:.9g},{theta}\n")
        return buf.getvalue()


def _report_latency(alphas: list[Tensor], table: LatencyTable) -> float:
    """Lat(alpha) for logging; bypasses the instrumented read counter."""
    saved = table.reads
    total = 0.0
    for li, a in enumerate(alphas):
        z = np.exp(a.data - a.data.max())
        th = z / z.sum()
        total += float(th @ table.layer_costs(li))
    table.reads = saved
    return total


def run_search(cfg: SearchConfig) -> SearchResult:
    x, y = blobs(cfg.data_n, seed=cfg.seed, classes=cfg.n_classes)
    (xt, yt), (xv, yv) = split(x, y, 0.5, seed=cfg.seed)

    sn = make_backbone(cfg.backbone, cfg.n_classes, seed=cfg.seed, shared=cfg.shared_conv)
    alphas = sn.new_arch_params()
    table = build_latency_table(sn.candidate_chains(), cfg.hw)
    problem = SupernetProblem(sn, alphas, cfg.lambda_lat, table)

    w_opt = SGD(problem.weights, lr=cfg.lr_w, momentum=cfg.momentum)
    a_opt = Adam(alphas, lr=cfg.lr_a)
    xi = cfg.lr_w if cfg.xi is None else cfg.xi
    rng = np.random.default_rng(cfg.seed + 1)

    log_rows: list[dict] = []
    it = 0
    for epoch in range(cfg.epochs):
        val_stream = batches(xv, yv, cfg.batch, rng)
        for bt in batches(xt, yt, cfg.batch, rng):
            try:
                bv = next(val_stream)
            except StopIteration:
                val_stream = batches(xv, yv, cfg.batch, rng)
                bv = next(val_stream)
            diag = darts_step(problem, w_opt, a_opt, bt, bv, xi, cfg.eps_base)
            thetas = []
            for aa in alphas:
                z = np.exp(aa.data - aa.data.max())
                thetas.append(z / z.sum())
            log_rows.append(
                {
                    "iter": it,
                    "zeta_trn": diag["zeta_trn"],
                    "zeta_val": diag["zeta_val"],
                    "lat_alpha": _report_latency(alphas, table),
                    "theta": thetas,
                }
            )
            it += 1
        if theta_entropy(alphas) < cfg.entropy_stop:
            break

    model = derive_arch(sn, alphas, table, cfg.ring)
    choices = [int(np.argmax(a.data)) for a in alphas]
    return SearchResult(
        sn=sn,
        alphas=alphas,
        table=table,
        model=model,
        choices=choices,
        log_rows=log_rows,
        counter=problem.counter,
        final_latency=_report_latency(alphas, table),
    )


# ---------------------------------------------------------------------------
# fixed-architecture training (baselines and retraining a derived arch)
# ---------------------------------------------------------------------------


def accuracy_fixed(sn: Supernet, choices: list[int], x: np.ndarray, y: np.ndarray) -> float:
    logits = sn.forward_fixed(x, choices)
    return float((logits.data.argmax(axis=1) == y).mean())


def train_fixed(
    sn: Supernet,
    choices: list[int],
    data_trn,
    data_val,
    epochs: int = 8,
    batch: int = 32,
    lr: float = 0.05,
    momentum: float = 0.9,
    seed: int = 0,
) -> float:
    """Plain SGD + cross-entropy on one architecture; returns val accuracy."""
    xt, yt = data_trn
    xv, yv = data_val
    opt = SGD(sn.weight_params(), lr=lr, momentum=momentum)
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        for bx, by in batches(xt, yt, batch, rng):
            loss = cross_entropy(sn.forward_fixed(bx, choices), by)
            loss.backward()
            opt.step()
            opt.zero_grad()
    return accuracy_fixed(sn, choices, xv, yv)
