"""Loss terms of the adaptation objective: Gaussian-kernel MMD, target entropy,
source negative log-likelihood, and their weighted sum."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DimensionError, Tensor

LOG_FLOOR = 1e-12
LADDER = (0.25, 0.5, 1.0, 2.0, 4.0)


class KernelError(ValueError):
    """Invalid kernel parameters."""


@dataclass(frozen=True)
class KernelSpec:
    """Gaussian kernel (mixture) used by the MMD terms.

    With ``bandwidths`` empty, the bandwidth is chosen per call by the median
    heuristic and multiplied by each entry of ``scales``. Explicit bandwidths
    ignore ``scales``. ``weights`` default to uniform.
    """

    bandwidths: tuple[float, ...] = ()
    scales: tuple[float, ...] = (1.0,)
    weights: tuple[float, ...] = ()

    def __post_init__(self):
        n = len(self.bandwidths) or len(self.scales)
        if n == 0:
            raise KernelError("kernel needs at least one bandwidth")
        if any(b <= 0 for b in self.bandwidths) or any(s <= 0 for s in self.scales):
            raise KernelError("bandwidths must be positive")
        if self.weights:
            if len(self.weights) != n:
                raise KernelError(f"{len(self.weights)} weights for {n} bandwidths")
            if any(w <= 0 for w in self.weights) or abs(sum(self.weights) - 1.0) > 1e-9:
                raise KernelError("weights must be positive and sum to 1")

    @classmethod
    def median(cls) -> KernelSpec:
        return cls()

    @classmethod
    def median_ladder(cls) -> KernelSpec:
        return cls(scales=LADDER)

    @classmethod
    def fixed(cls, *sigmas: float) -> KernelSpec:
        return cls(bandwidths=tuple(float(s) for s in sigmas))

    @property
    def uses_median(self) -> bool:
        return not self.bandwidths

    def resolve(self, zs: np.ndarray, zt: np.ndarray) -> list[tuple[float, float]]:
        """(sigma, weight) pairs for this source/target sample."""
        if self.bandwidths:
            sigmas = list(self.bandwidths)
        else:
            base = median_bandwidth(zs, zt)
            sigmas = [base * s for s in self.scales]
        weights = self.weights or tuple(1.0 / len(sigmas) for _ in sigmas)
        return list(zip(sigmas, weights))

    def describe(self) -> str:
        if self.bandwidths:
            return ",".join(repr(b) for b in self.bandwidths)
        return "median" if self.scales == (1.0,) else "median-ladder"

    @classmethod
    def parse(cls, text: str) -> KernelSpec:
        text = text.strip()
        if text == "median":
            return cls.median()
        if text == "median-ladder":
            return cls.median_ladder()
        try:
            return cls.fixed(*(float(t) for t in text.split(",")))
        except ValueError as exc:
            raise KernelError(f"unrecognised kernel spec {text!r}") from exc


def gaussian_kernel(x, y, sigma: float) -> float:
    """exp(-‖x-y‖² / 2σ²) for two vectors."""
    if sigma <= 0:
        raise KernelError(f"sigma must be positive, got {sigma}")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionError(f"kernel arguments differ in shape: {x.shape} vs {y.shape}")
    d = x - y
    return math.exp(-float(np.sum(d * d)) / (2.0 * sigma * sigma))


def median_bandwidth(zs, zt) -> float:
    """Median-heuristic bandwidth of the pooled sample.

    σ² is the median squared Euclidean distance over all distinct pairs; falls
    back to 1.0 when that median is zero.
    """
    pooled = np.concatenate([np.asarray(zs, dtype=np.float64), np.asarray(zt, dtype=np.float64)])
    pooled = pooled.reshape(len(pooled), -1)
    n = len(pooled)
    if n < 2:
        raise ContractError("median bandwidth needs at least two points")
    i, j = np.triu_indices(n, k=1)
    diff = pooled[i] - pooled[j]
    dists = np.einsum("ij,ij->i", diff, diff)
    med = float(np.median(dists))
    return math.sqrt(med) if med > 0 else 1.0


def _as_matrix(z: Tensor) -> Tensor:
    return z if z.ndim == 2 else ad.reshape(z, (z.shape[0], -1))


def mmd_biased(zs: Tensor, zt: Tensor, kernel: KernelSpec | None = None) -> Tensor:
    """Biased (V-statistic) squared MMD between two samples, diagonal terms included.

    The bandwidth is a constant of the graph: no gradient flows through the
    median heuristic.
    """
    kernel = kernel or KernelSpec.median()
    zs, zt = _as_matrix(zs), _as_matrix(zt)
    if zs.shape[0] < 1 or zt.shape[0] < 1:
        raise ContractError("MMD needs non-empty samples")
    if zs.shape[1] != zt.shape[1]:
        raise DimensionError(f"MMD feature dimension mismatch: {zs.shape} vs {zt.shape}")
    d_ss = ad.sq_distances(zs, zs)
    d_tt = ad.sq_distances(zt, zt)
    d_st = ad.sq_distances(zs, zt)
    total = None
    for sigma, weight in kernel.resolve(zs.data, zt.data):
        scale = -1.0 / (2.0 * sigma * sigma)
        k_ss = ad.exp(d_ss * scale).mean()
        k_tt = ad.exp(d_tt * scale).mean()
        k_st = ad.exp(d_st * scale).mean()
        term = (k_ss + k_tt - k_st * 2.0) * weight
        total = term if total is None else total + term
    return total


def softmax(logits: Tensor) -> Tensor:
    return ad.softmax(logits)


def entropy(probs: Tensor, check: bool = True) -> Tensor:
    """Batch mean of the Shannon entropy (nats) of each row of ``probs``."""
    if probs.ndim != 2:
        raise DimensionError(f"entropy expects an n×c matrix, got {probs.shape}")
    if check:
        rows = probs.data.sum(axis=1)
        if np.any(np.abs(rows - 1.0) > 1e-6) or np.any(probs.data < 0):
            raise ContractError("entropy input rows must be probability vectors")
    plogp = probs * ad.log(ad.clamp_min(probs, LOG_FLOOR))
    return -(plogp.sum(axis=1).mean())


def nll_source(logits: Tensor, labels) -> Tensor:
    """Mean negative log softmax-likelihood of the true labels."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"{labels.shape[0]} labels for {n} logits rows")
    if np.any(labels < 0) or np.any(labels >= c):
        raise ContractError(f"labels must lie in [0, {c})")
    picked = ad.getitem(logits, (np.arange(n), labels))
    return (ad.logsumexp(logits) - picked).mean()


@dataclass
class LossReport:
    source_nll: float
    target_entropy: float
    mmd_per_tap: list[float] = field(default_factory=list)
    total: float = 0.0
    lambda_mmd: float = 1.0
    gamma_entropy: float = 1.0

    def recombined(self) -> float:
        return self.source_nll + self.gamma_entropy * self.target_entropy + self.lambda_mmd * sum(self.mmd_per_tap)


def total_loss(
    source_logits: Tensor,
    source_labels,
    target_probs: Tensor,
    tap_features: Sequence[tuple[Tensor, Tensor]],
    kernel: KernelSpec | Sequence[KernelSpec] | None = None,
    lambda_mmd: float = 1.0,
    gamma_entropy: float = 1.0,
) -> tuple[Tensor, LossReport]:
    """Source NLL + γ·target entropy + λ·Σ per-tap MMD.

    ``kernel`` is either shared by all taps or given per tap.
    """
    if not tap_features:
        raise ContractError("total_loss needs at least one MMD tap")
    kernel = kernel or KernelSpec.median()
    kernels = [kernel] * len(tap_features) if isinstance(kernel, KernelSpec) else list(kernel)
    if len(kernels) != len(tap_features):
        raise ContractError(f"{len(kernels)} kernels for {len(tap_features)} taps")
    # a zero-weighted term is evaluated for the report but kept off the graph
    if gamma_entropy == 0:
        target_probs = target_probs.detach()
    if lambda_mmd == 0:
        tap_features = [(zs.detach(), zt.detach()) for zs, zt in tap_features]
    nll = nll_source(source_logits, source_labels)
    ent = entropy(target_probs)
    mmds = [mmd_biased(zs, zt, k) for (zs, zt), k in zip(tap_features, kernels)]
    mmd_sum = mmds[0]
    for m in mmds[1:]:
        mmd_sum = mmd_sum + m
    loss = nll + ent * gamma_entropy + mmd_sum * lambda_mmd
    report = LossReport(
        source_nll=nll.item(),
        target_entropy=ent.item(),
        mmd_per_tap=[m.item() for m in mmds],
        total=loss.item(),
        lambda_mmd=lambda_mmd,
        gamma_entropy=gamma_entropy,
    )
    return loss, report
