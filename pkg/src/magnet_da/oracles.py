"""Independent reference implementations and the self-check suites built on them.

The references are deliberately naive: scalar Python loops, no shared code
with the vectorised losses beyond the input arrays.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import GradCheckReport, Tensor
from .losses import KernelSpec, entropy, median_bandwidth, mmd_biased, nll_source, total_loss
from .network import MagnetModel, NetworkConfig, magnet_forward

MMD_TOL = 1e-10
MODEL_TOL = 1e-4
LOSS_TOL = 1e-5


# ---------------------------------------------------------------- scalar references


def _sqdist(a, b) -> float:
    s = 0.0
    for u, v in zip(a, b):
        s += (u - v) * (u - v)
    return s


def median_bandwidth_reference(zs, zt) -> float:
    """Brute-force median heuristic: sort every i<j squared distance."""
    pts = [list(map(float, row)) for row in np.concatenate([zs, zt]).reshape(len(zs) + len(zt), -1)]
    dists = sorted(_sqdist(pts[i], pts[j]) for i in range(len(pts)) for j in range(i + 1, len(pts)))
    n = len(dists)
    med = dists[n // 2] if n % 2 else 0.5 * (dists[n // 2 - 1] + dists[n // 2])
    return math.sqrt(med) if med > 0 else 1.0


def mmd_reference(zs, zt, sigma: float) -> float:
    """Biased squared MMD by explicit loops over pairs and coordinates."""
    xs = [list(map(float, r)) for r in np.asarray(zs).reshape(len(zs), -1)]
    xt = [list(map(float, r)) for r in np.asarray(zt).reshape(len(zt), -1)]
    c = 1.0 / (2.0 * sigma * sigma)

    def mean_k(a, b):
        s = 0.0
        for u in a:
            for v in b:
                s += math.exp(-_sqdist(u, v) * c)
        return s / (len(a) * len(b))

    return mean_k(xs, xs) + mean_k(xt, xt) - 2.0 * mean_k(xs, xt)


def entropy_reference(probs) -> float:
    rows = np.asarray(probs, dtype=np.float64).tolist()
    total = 0.0
    for row in rows:
        total -= sum(p * math.log(max(p, 1e-12)) for p in row)
    return total / len(rows)


def nll_reference(logits, labels) -> float:
    rows = np.asarray(logits, dtype=np.float64).tolist()
    total = 0.0
    for row, y in zip(rows, labels):
        top = max(row)
        lse = top + math.log(sum(math.exp(v - top) for v in row))
        total += lse - row[int(y)]
    return total / len(rows)


# ---------------------------------------------------------------- mmd check


@dataclass
class MMDCheckResult:
    instances: int
    max_dev: float
    max_bandwidth_dev: float
    tol: float = MMD_TOL

    @property
    def passed(self) -> bool:
        return self.max_dev < self.tol and self.max_bandwidth_dev < self.tol

    def summary(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        op = "<" if self.passed else ">="
        return f"max_dev={self.max_dev:.3e} {op} {self.tol:g} {verdict}"


def random_mmd_instance(rng: np.random.Generator, max_n: int = 64, max_d: int = 16):
    """Two samples of random size/dimension with a random location shift and scale."""
    ns = int(rng.integers(1, max_n + 1))
    nt = int(rng.integers(1, max_n + 1))
    d = int(rng.integers(1, max_d + 1))
    scale = float(np.exp(rng.uniform(-1.0, 1.0)))
    zs = rng.normal(0.0, scale, size=(ns, d))
    zt = rng.normal(rng.uniform(-1.0, 1.0), scale, size=(nt, d))
    return zs, zt


def run_mmdcheck(instances: int = 100, max_n: int = 64, max_d: int = 16, seed: int = 0) -> MMDCheckResult:
    """Vectorised median-bandwidth MMD against the loop references on random instances."""
    rng = np.random.default_rng(seed)
    max_dev = 0.0
    max_bw = 0.0
    for _ in range(instances):
        zs, zt = random_mmd_instance(rng, max_n, max_d)
        sigma_ref = median_bandwidth_reference(zs, zt)
        fast = mmd_biased(Tensor(zs), Tensor(zt), KernelSpec.median()).item()
        max_dev = max(max_dev, abs(fast - mmd_reference(zs, zt, sigma_ref)))
        max_bw = max(max_bw, abs(median_bandwidth(zs, zt) - sigma_ref))
    return MMDCheckResult(instances, max_dev, max_bw)


# ---------------------------------------------------------------- gradient check


def corrupt_gradient(x: Tensor, factor: float = 1.01) -> Tensor:
    """Identity forward whose backward scales the gradient; used to prove the checker bites."""
    return ad._make(x.data.copy(), (x,), lambda g: (g * factor,), "corrupt")


@dataclass
class GradCase:
    f: Callable[[], Tensor]
    params: list
    names: list[str]
    tol: float
    step: float = 1e-5
    floor: float | str = 1e-8


def _probe(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.normal(size=shape)


def _away_from_zero(rng: np.random.Generator, shape, margin: float = 0.05) -> np.ndarray:
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)


def _case_linear(rng, wrap):
    x = Tensor(_probe(rng, (5, 7)), requires_grad=True)
    w = Tensor(_probe(rng, (3, 7)), requires_grad=True)
    b = Tensor(_probe(rng, (3,)), requires_grad=True)
    r = _probe(rng, (5, 3))
    return GradCase(lambda: (wrap(ad.linear(x, w, b)) * r).sum(), [x, w, b], ["x", "weight", "bias"], MODEL_TOL)


def _case_conv(rng, wrap):
    x = Tensor(_probe(rng, (2, 3, 6, 6)), requires_grad=True)
    w3 = Tensor(_probe(rng, (4, 3, 3, 3)), requires_grad=True)
    w1 = Tensor(_probe(rng, (2, 4, 1, 1)), requires_grad=True)
    ws = Tensor(_probe(rng, (2, 3, 3, 3)), requires_grad=True)
    r1 = _probe(rng, (2, 2, 6, 6))
    r2 = _probe(rng, (2, 2, 3, 3))

    def f():
        h = ad.conv2d(x, w3, padding=1)
        out = (wrap(ad.conv2d(h, w1)) * r1).sum()
        return out + (ad.conv2d(x, ws, stride=2, padding=1) * r2).sum()

    return GradCase(f, [x, w3, w1, ws], ["x", "weight3x3", "weight1x1", "weight_strided"], MODEL_TOL)


def _case_bn(rng, wrap):
    x = Tensor(_probe(rng, (4, 3, 3, 3)) * 2.0 + 0.5, requires_grad=True)
    gamma = Tensor(_probe(rng, (3,)), requires_grad=True)
    beta = Tensor(_probe(rng, (3,)), requires_grad=True)
    r = _probe(rng, (4, 3, 3, 3))
    state = ad.BatchNormState.fresh(3)
    return GradCase(
        lambda: (wrap(ad.batchnorm2d(x, gamma, beta, state, "train")) * r).sum(),
        [x, gamma, beta],
        ["x", "gamma", "beta"],
        MODEL_TOL,
    )


def _case_relu(rng, wrap):
    x = Tensor(_away_from_zero(rng, (4, 6)), requires_grad=True)
    r = _probe(rng, (4, 6))
    return GradCase(lambda: (wrap(ad.relu(x)) * r).sum(), [x], ["x"], MODEL_TOL)


def _case_pool(rng, wrap):
    x = Tensor(_probe(rng, (2, 3, 6, 6)), requires_grad=True)
    r1 = _probe(rng, (2, 3, 3, 3))
    r2 = _probe(rng, (2, 3, 2, 2))
    r3 = _probe(rng, (2, 3))

    def f():
        tiled = (wrap(ad.avg_pool2d(x, 2)) * r1).sum()
        sliding = (ad.avg_pool2d(x, 3, stride=2) * r2).sum()
        return tiled + sliding + (ad.global_avg_pool(x) * r3).sum()

    return GradCase(f, [x], ["x"], MODEL_TOL)


def _case_concat(rng, wrap):
    a = Tensor(_probe(rng, (2, 2, 3, 3)), requires_grad=True)
    b = Tensor(_probe(rng, (2, 3, 3, 3)), requires_grad=True)
    r = _probe(rng, (2, 5, 3, 3))
    return GradCase(lambda: (wrap(ad.concat_channels([a, b])) * r).sum(), [a, b], ["a", "b"], MODEL_TOL)


def _case_mmd(rng, wrap):
    zs = Tensor(_probe(rng, (6, 4)), requires_grad=True)
    zt = Tensor(_probe(rng, (5, 4)) + 0.7, requires_grad=True)
    kernel = KernelSpec.fixed(median_bandwidth(zs.data, zt.data))
    ladder = KernelSpec(bandwidths=(0.5, 1.5, 3.0), weights=(0.2, 0.3, 0.5))
    return GradCase(
        lambda: wrap(mmd_biased(zs, zt, kernel)) + mmd_biased(zs, zt, ladder),
        [zs, zt],
        ["source", "target"],
        LOSS_TOL,
    )


def _case_entropy(rng, wrap):
    logits = Tensor(_probe(rng, (5, 4)), requires_grad=True)
    return GradCase(lambda: entropy(wrap(ad.softmax(logits))), [logits], ["logits"], LOSS_TOL)


def _case_nll(rng, wrap):
    logits = Tensor(_probe(rng, (6, 5)) * 2.0, requires_grad=True)
    labels = rng.integers(0, 5, size=6)
    return GradCase(lambda: nll_source(wrap(logits), labels), [logits], ["logits"], LOSS_TOL)


def _case_total(rng, wrap):
    fs = Tensor(_probe(rng, (4, 3)), requires_grad=True)
    ft = Tensor(_probe(rng, (4, 3)), requires_grad=True)
    taps = [Tensor(_probe(rng, (8, 5)), requires_grad=True), Tensor(_probe(rng, (8, 3)), requires_grad=True)]
    labels = rng.integers(0, 3, size=4)
    kernels = [KernelSpec.fixed(median_bandwidth(t.data[:4], t.data[4:])) for t in taps]

    def f():
        pairs = [(wrap(t)[:4], t[4:]) for t in taps]
        loss, _ = total_loss(fs, labels, ad.softmax(ft), pairs, kernel=kernels, lambda_mmd=0.7, gamma_entropy=1.3)
        return loss

    return GradCase(f, [fs, ft, *taps], ["source_logits", "target_logits", "tap0", "tap1"], LOSS_TOL)


def micro_model(transition_type: str = "B", seed: int = 0) -> MagnetModel:
    """One dense block on 8×8 inputs with growth rate 4; Δf randomised so every path carries gradient."""
    cfg = NetworkConfig(
        input_size=8,
        num_classes=3,
        num_blocks=1,
        layers_per_block=2,
        growth_rate=4,
        stem_channels=4,
        transition_type=transition_type,
        tap_fc_dim=6,
    )
    model = MagnetModel(cfg, seed=seed)
    rng = np.random.default_rng(seed + 1)
    w = model["residual.fc2.weight"]
    w.data[...] = rng.normal(0.0, 0.5, size=w.shape)
    for p in model.parameters():
        if p.name.endswith((".beta", ".bias")):
            p.data[...] = rng.normal(0.0, 0.1, size=p.shape)
    return model


def _model_case(transition_type: str):
    def build(rng, wrap):
        model = micro_model(transition_type)
        xs = rng.uniform(size=(4, 1, 8, 8))
        xt = rng.uniform(size=(4, 1, 8, 8)) * 0.8 + 0.1
        ys = rng.integers(0, 3, size=4)
        batch = np.concatenate([xs, xt])
        first = magnet_forward(model, batch, mode="train")
        # freeze the data-dependent constants of the graph: gate masks and bandwidths
        masks = first.gate_masks or None
        kernels = [KernelSpec.fixed(median_bandwidth(t.data[:4], t.data[4:])) for t in first.taps]

        def f():
            out = magnet_forward(model, batch, mode="train", gate_masks=masks)
            taps = [(wrap(t)[:4], t[4:]) for t in out.taps]
            loss, _ = total_loss(out.fs_logits[:4], ys, out.ft_probs[4:], taps, kernel=kernels)
            return loss

        params = model.parameters()
        # many ReLUs sit near their kink; a smaller step keeps the stencil on one side.
        # Tap biases of type A cancel inside every MMD term, so their true gradient is
        # exactly zero and only rounding noise can be compared.
        floor = "auto" if transition_type == "A" else 1e-8
        return GradCase(f, params, [p.name for p in params], MODEL_TOL, step=1e-6, floor=floor)

    return build


COMPONENTS: dict[str, Callable] = {
    "linear": _case_linear,
    "conv": _case_conv,
    "bn": _case_bn,
    "relu": _case_relu,
    "pool": _case_pool,
    "concat": _case_concat,
    "mmd": _case_mmd,
    "entropy": _case_entropy,
    "nll": _case_nll,
    "total": _case_total,
    "model": _model_case("B"),
    "model-a": _model_case("A"),
}


@dataclass
class GradCheckSuite:
    reports: dict[str, GradCheckReport] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.reports.values())

    def lines(self) -> list[str]:
        out = []
        for name, rep in self.reports.items():
            verdict = "PASS" if rep.passed else "FAIL"
            out.append(f"{name:<8} max_rel_err={rep.worst:.3e} tol={rep.tol:g} {verdict}")
        return out


def run_gradcheck(components=None, seed: int = 0, corrupt: str | None = None, max_coords: int = 24) -> GradCheckSuite:
    """Finite-difference check of every layer, loss and the full micro-model objective.

    ``corrupt`` names a component whose analytic gradient is deliberately
    skewed by 1%; that component must then fail.
    """
    names = list(COMPONENTS) if not components else list(components)
    unknown = [n for n in names if n not in COMPONENTS]
    if unknown:
        raise KeyError(f"unknown gradcheck component(s): {', '.join(unknown)}")
    suite = GradCheckSuite()
    for name in names:
        rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
        wrap = corrupt_gradient if name == corrupt else (lambda t: t)
        case = COMPONENTS[name](rng, wrap)
        suite.reports[name] = ad.grad_check(
            case.f, case.params, step=case.step, tol=case.tol, floor=case.floor, max_coords=max_coords, seed=seed, names=case.names
        )
    return suite
