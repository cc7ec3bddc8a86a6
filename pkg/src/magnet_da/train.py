"""Optimisation loop, evaluation and multi-seed experiment runner."""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Parameter, Tensor
from .data import Dataset, DomainPair, generate_shapes, split_dataset
from .losses import KernelSpec, LossReport, total_loss
from .network import MagnetModel, NetworkConfig, magnet_forward, predict

log = logging.getLogger(__name__)

TAP_MODES = ("all", "final")


@dataclass
class TrainConfig:
    base_lr: float = 0.003
    momentum: float = 0.9
    anneal_alpha: float = 10.0
    anneal_beta: float = 0.75
    iterations: int = 2000
    batch_size: int = 32
    lambda_mmd: float = 1.0
    gamma_entropy: float = 1.0
    seed: int = 0
    repetitions: int = 5
    kernel: KernelSpec = field(default_factory=KernelSpec.median)
    weight_decay: float = 5e-4
    mmd_taps: str = "all"
    log_every: int = 1
    # > 0 ramps λ and γ from 0 up to their values as 2/(1+exp(-r·p)) - 1
    weight_ramp: float = 0.0

    def __post_init__(self):
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.weight_ramp < 0:
            raise ValueError("weight_ramp must be non-negative")
        if self.mmd_taps not in TAP_MODES:
            raise ValueError(f"mmd_taps must be one of {TAP_MODES}")

    def snapshot(self) -> dict:
        out = dataclasses.asdict(self)
        out["kernel"] = self.kernel.describe()
        return out


def lr_schedule(base_lr: float, progress: float, alpha: float = 10.0, beta: float = 0.75) -> float:
    """Annealed rate base_lr / (1 + alpha·p)^beta for training progress p in [0, 1]."""
    if not 0.0 <= progress <= 1.0:
        raise ValueError(f"progress must lie in [0, 1], got {progress}")
    return base_lr / (1.0 + alpha * progress) ** beta


def nesterov_step(
    params: Sequence[Parameter],
    velocity: dict[str, np.ndarray],
    lr: float,
    momentum: float,
    weight_decay: float = 0.0,
) -> None:
    """In-place Nesterov momentum update.

    With d = g + wd·p and per-parameter rate η = lr·lr_multiplier:
        v ← m·v − η·d
        p ← p + m·v − η·d
    """
    for p in params:
        if p.grad is None:
            raise ContractError(f"parameter {p.name} has no gradient")
        rate = lr * p.lr_multiplier
        d = p.grad + weight_decay * p.data if weight_decay else p.grad
        v = velocity.get(p.name)
        v = -rate * d if v is None else momentum * v - rate * d
        velocity[p.name] = v
        p.tensor.data = p.data + momentum * v - rate * d


class _EpochSampler:
    """Draws batches by walking reshuffled epochs of the index range."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self.order = rng.permutation(n)
        self.pos = 0

    def next(self, k: int) -> np.ndarray:
        out = []
        while k > 0:
            if self.pos == self.n:
                self.order = self.rng.permutation(self.n)
                self.pos = 0
            take = min(k, self.n - self.pos)
            out.append(self.order[self.pos : self.pos + take])
            self.pos += take
            k -= take
        return np.concatenate(out)


@dataclass
class RunResult:
    reports: list[LossReport]
    lrs: list[float]
    iterations_logged: list[int]
    final_target_acc: float | None
    best_target_acc: float | None
    source_acc: float
    seed: int
    wall_time: float
    config: dict

    def mmd_trace(self) -> np.ndarray:
        return np.array([sum(r.mmd_per_tap) for r in self.reports])


def adaptation_scale(cfg: TrainConfig, progress: float) -> float:
    """Multiplier applied to λ and γ at training progress p ∈ [0, 1]."""
    if cfg.weight_ramp == 0:
        return 1.0
    return 2.0 / (1.0 + math.exp(-cfg.weight_ramp * progress)) - 1.0


def train_step(
    model: MagnetModel, xs: np.ndarray, ys: np.ndarray, xt: np.ndarray, cfg: TrainConfig, scale: float = 1.0
) -> tuple[Tensor, LossReport]:
    """Forward the joint batch, build the objective and backpropagate (no update)."""
    ns = len(xs)
    out = magnet_forward(model, np.concatenate([xs, xt]), mode="train")
    taps = [(t[:ns], t[ns:]) for t in out.taps]
    if cfg.mmd_taps == "final":
        taps = taps[-1:]
    loss, report = total_loss(
        out.fs_logits[:ns],
        ys,
        out.ft_probs[ns:],
        taps,
        kernel=cfg.kernel,
        lambda_mmd=cfg.lambda_mmd * scale,
        gamma_entropy=cfg.gamma_entropy * scale,
    )
    model.zero_grads()
    ad.backward(loss)
    # heads cut off by a zero-weighted term (e.g. Δf when γ = λ = 0) get an explicit zero gradient
    for p in model.parameters():
        if p.grad is None:
            p.tensor.grad = np.zeros(p.shape)
    return loss, report


def train(
    model: MagnetModel,
    pair: DomainPair,
    cfg: TrainConfig,
    eval_every: int = 0,
    progress: Callable[[int, LossReport], None] | None = None,
) -> RunResult:
    """Minimise the joint objective with annealed Nesterov momentum.

    Deterministic for a given (model initialisation, data, cfg). Target labels
    are only touched through ``pair.target_for_evaluation`` when ``eval_every``
    is positive or for the final accuracy.
    """
    source, target = pair.source, pair.target
    cfg_net = model.config
    if source.num_classes != cfg_net.num_classes:
        raise ValueError(f"model has {cfg_net.num_classes} classes, data has {source.num_classes}")
    rng = np.random.default_rng(cfg.seed)
    s_sampler = _EpochSampler(len(source), rng)
    t_sampler = _EpochSampler(len(target), rng)
    velocity: dict[str, np.ndarray] = {}
    params = model.parameters()
    reports: list[LossReport] = []
    lrs: list[float] = []
    logged: list[int] = []
    best = None
    start = time.perf_counter()
    for it in range(cfg.iterations):
        si = s_sampler.next(cfg.batch_size)
        ti = t_sampler.next(cfg.batch_size)
        progress_p = it / cfg.iterations
        scale = adaptation_scale(cfg, progress_p)
        _, report = train_step(model, source.images[si], source.labels[si], target.images[ti], cfg, scale)
        lr = lr_schedule(cfg.base_lr, progress_p, cfg.anneal_alpha, cfg.anneal_beta)
        nesterov_step(params, velocity, lr, cfg.momentum, cfg.weight_decay)
        if it % cfg.log_every == 0 or it == cfg.iterations - 1:
            reports.append(report)
            lrs.append(lr)
            logged.append(it)
            if progress is not None:
                progress(it, report)
        if eval_every and (it + 1) % eval_every == 0:
            acc = evaluate(model, pair.target_for_evaluation())
            best = acc if best is None else max(best, acc)
    wall = time.perf_counter() - start
    evaluation_target = pair.target_for_evaluation()
    final = evaluate(model, evaluation_target) if evaluation_target.labels is not None else None
    if final is not None:
        best = final if best is None else max(best, final)
    return RunResult(
        reports=reports,
        lrs=lrs,
        iterations_logged=logged,
        final_target_acc=final,
        best_target_acc=best,
        source_acc=evaluate(model, source),
        seed=cfg.seed,
        wall_time=wall,
        config=cfg.snapshot(),
    )


def evaluate(model: MagnetModel, ds: Dataset) -> float:
    """Fraction of samples whose f_t argmax (lowest index on ties) equals the label."""
    if ds.labels is None:
        raise ContractError("evaluation needs a labelled dataset")
    probs = predict(model, ds.images)
    return float(np.mean(np.argmax(probs, axis=1) == ds.labels))


def mean_prediction_entropy(model: MagnetModel, images: np.ndarray) -> float:
    p = np.clip(predict(model, images), 1e-12, None)
    return float(np.mean(-(p * np.log(p)).sum(axis=1)))


# ---------------------------------------------------------------- experiments

METHODS: dict[str, dict] = {
    "magnet": {},
    "source-only": {"lambda_mmd": 0.0, "gamma_entropy": 0.0},
    "no-entropy": {"gamma_entropy": 0.0},
    "no-mmd": {"lambda_mmd": 0.0},
    "single-tap": {"mmd_taps": "final"},
}


@dataclass(frozen=True)
class TaskSpec:
    """A source→target transfer problem built from the synthetic generator."""

    name: str
    source_domain: str
    target_domain: str
    classes: int = 6
    n_source: int = 1200
    n_target: int = 1200
    image_size: int = 32
    data_seed: int = 0
    split_fraction: float = 0.7

    def build(self) -> DomainPair:
        if self.source_domain == self.target_domain:
            # real→real: one pool split 70/30 per class
            pool = generate_shapes(self.source_domain, self.classes, self.n_source + self.n_target, self.image_size, self.data_seed)
            a, b = split_dataset(pool, self.split_fraction, self.data_seed)
            return DomainPair(a, b)
        src = generate_shapes(self.source_domain, self.classes, self.n_source, self.image_size, self.data_seed)
        tgt = generate_shapes(self.target_domain, self.classes, self.n_target, self.image_size, self.data_seed + 1)
        return DomainPair(src, tgt)


TASKS = {
    "photo70-photo30": TaskSpec("photo70-photo30", "photo", "photo", n_source=840, n_target=360),
    "cad-photo": TaskSpec("cad-photo", "cad", "photo"),
    "sketch-photo": TaskSpec("sketch-photo", "sketch", "photo"),
}


@dataclass
class RunRow:
    task: str
    method: str
    seed: int
    source_acc: float
    target_acc: float
    wall_s: float
    entropy_first: float
    entropy_last: float
    mmd_first: float
    mmd_last: float


@dataclass
class Aggregate:
    task: str
    method: str
    mean: float
    std: float
    n: int


@dataclass
class ExperimentResult:
    rows: list[RunRow]
    runs: dict[tuple[str, str, int], RunResult] = field(default_factory=dict)

    def target_accs(self, task: str, method: str) -> list[float]:
        return [r.target_acc for r in self.rows if r.task == task and r.method == method]

    def aggregates(self) -> list[Aggregate]:
        out = []
        keys = list(dict.fromkeys((r.task, r.method) for r in self.rows))
        for task, method in keys:
            accs = self.target_accs(task, method)
            std = float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0
            out.append(Aggregate(task, method, float(np.mean(accs)), std, len(accs)))
        return out


def _window_mean(values: np.ndarray, frac: float, head: bool) -> float:
    k = max(1, int(math.ceil(frac * len(values))))
    return float(values[:k].mean() if head else values[-k:].mean())


def run_experiment(
    tasks: Sequence[TaskSpec],
    cfg: TrainConfig,
    net: NetworkConfig,
    repetitions: int | None = None,
    methods: Sequence[str] = tuple(METHODS),
    on_run: Callable[[RunRow], None] | None = None,
) -> ExperimentResult:
    """Train and evaluate every (task, method, seed) combination.

    Seeds run from ``cfg.seed`` to ``cfg.seed + repetitions - 1``; the seed
    drives both weight initialisation and batch sampling.
    """
    reps = cfg.repetitions if repetitions is None else repetitions
    if reps < 1:
        raise ValueError("repetitions must be >= 1")
    unknown = set(methods) - set(METHODS)
    if unknown:
        raise ValueError(f"unknown methods {sorted(unknown)}; choose from {sorted(METHODS)}")
    result = ExperimentResult(rows=[])
    for task in tasks:
        pair = task.build()
        task_net = dataclasses.replace(
            net, num_classes=task.classes, input_size=task.image_size, input_channels=pair.source.images.shape[1]
        )
        for method in methods:
            for seed in range(cfg.seed, cfg.seed + reps):
                run_cfg = dataclasses.replace(cfg, seed=seed, **METHODS[method])
                model = MagnetModel(task_net, seed=seed)
                run = train(model, pair, run_cfg)
                ent = np.array([r.target_entropy for r in run.reports])
                mmd = run.mmd_trace()
                row = RunRow(
                    task=task.name,
                    method=method,
                    seed=seed,
                    source_acc=run.source_acc,
                    target_acc=run.final_target_acc,
                    wall_s=run.wall_time,
                    entropy_first=float(ent[0]),
                    entropy_last=float(ent[-1]),
                    mmd_first=_window_mean(mmd, 0.1, head=True),
                    mmd_last=_window_mean(mmd, 0.1, head=False),
                )
                log.debug("%s %s seed=%d target_acc=%.4f (%.1fs)", task.name, method, seed, row.target_acc, row.wall_s)
                result.rows.append(row)
                result.runs[(task.name, method, seed)] = run
                if on_run is not None:
                    on_run(row)
    return result
