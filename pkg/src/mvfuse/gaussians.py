"""Diagonal Gaussian algebra.

Densities, the canonical-form constant, KL to the standard normal,
product-of-experts fusion and reparameterized sampling. Everything is
float64 and parameterized by log-variance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 10.0

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class DiagGaussian:
    """Multivariate normal with diagonal covariance.

    ``log_var`` must lie in ``[LOG_VAR_MIN, LOG_VAR_MAX]``; use
    :meth:`clamped` for values produced internally (network outputs,
    fusion results) that may stray outside.
    """

    mean: np.ndarray
    log_var: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=np.float64).reshape(-1)
        log_var = np.array(self.log_var, dtype=np.float64).reshape(-1)
        if mean.size < 1:
            raise ValueError("DiagGaussian needs dimension >= 1")
        if mean.shape != log_var.shape:
            raise ValueError(
                f"mean has length {mean.size} but log_var has length {log_var.size}"
            )
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(log_var))):
            raise ValueError("DiagGaussian parameters must be finite")
        if np.any(log_var < LOG_VAR_MIN) or np.any(log_var > LOG_VAR_MAX):
            raise ValueError(
                f"log_var outside [{LOG_VAR_MIN}, {LOG_VAR_MAX}]: "
                f"min={log_var.min():.4g}, max={log_var.max():.4g}"
            )
        mean.setflags(write=False)
        log_var.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "log_var", log_var)

    @classmethod
    def clamped(cls, mean, log_var) -> "DiagGaussian":
        return cls(mean, np.clip(np.asarray(log_var, dtype=np.float64), LOG_VAR_MIN, LOG_VAR_MAX))

    @classmethod
    def standard(cls, dim: int) -> "DiagGaussian":
        return cls(np.zeros(dim), np.zeros(dim))

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def var(self) -> np.ndarray:
        return np.exp(self.log_var)

    @property
    def precision(self) -> np.ndarray:
        return np.exp(-self.log_var)

    def __eq__(self, other):
        if not isinstance(other, DiagGaussian):
            return NotImplemented
        return np.array_equal(self.mean, other.mean) and np.array_equal(self.log_var, other.log_var)

    __hash__ = None


def _check_point(g: DiagGaussian, z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    if z.size != g.dim:
        raise ValueError(f"point has length {z.size}, Gaussian has dimension {g.dim}")
    return z


def log_density(g: DiagGaussian, z) -> float:
    z = _check_point(g, z)
    sq = (z - g.mean) ** 2 * g.precision
    return float(-0.5 * g.dim * _LOG_2PI - 0.5 * np.sum(g.log_var + sq))


def log_partition(g: DiagGaussian) -> float:
    """z-independent constant of the canonical (precision) form.

    ``log_density(g, z) == -0.5 z'Tz + mu'Tz + log_partition(g)`` with
    ``T = diag(1/var)``.
    """
    t = g.precision
    return float(
        -0.5 * np.sum(g.mean * t * g.mean)
        - 0.5 * g.dim * _LOG_2PI
        + 0.5 * np.sum(-g.log_var)
    )


def kl_to_standard_normal(g: DiagGaussian) -> float:
    return float(0.5 * np.sum(g.mean**2 + g.var - g.log_var - 1.0))


def poe_fuse(experts: Sequence[DiagGaussian], include_prior_expert: bool = False) -> DiagGaussian:
    """Product of Gaussian experts.

    Precisions add and the fused mean is the precision-weighted average
    of the expert means. A single expert is returned as-is. The uniform
    1/M factor on the product only affects the normalizer, so it has no
    bearing on the fused parameters.
    """
    experts = list(experts)
    if not experts:
        raise ValueError("poe_fuse needs at least one expert")
    dim = experts[0].dim
    if any(e.dim != dim for e in experts):
        raise ValueError("all experts must share the same dimension")
    if include_prior_expert:
        experts.append(DiagGaussian.standard(dim))
    if len(experts) == 1:
        return experts[0]
    means = np.stack([e.mean for e in experts])
    log_vars = np.stack([e.log_var for e in experts])
    mean, log_var = fuse_arrays(means, log_vars)
    return DiagGaussian.clamped(mean, log_var)


def fuse_arrays(means: np.ndarray, log_vars: np.ndarray, mask: np.ndarray | None = None):
    """Vectorized fusion over the leading (expert) axis.

    ``means`` and ``log_vars`` are shaped ``(M, ...)``; ``mask`` (shape
    ``(M, ...)`` broadcastable, boolean) excludes experts. Returns the
    fused mean and log-variance. Log-variances are combined through a
    log-sum-exp of negative log-variances so large precisions do not
    overflow.
    """
    neg = -log_vars
    if mask is not None:
        neg = np.where(mask, neg, -np.inf)
    top = np.max(neg, axis=0)
    w = np.exp(neg - top)
    total = np.sum(w, axis=0)
    w = w / total
    log_prec = top + np.log(total)
    mean = np.sum(w * np.where(w > 0, means, 0.0), axis=0)
    return mean, -log_prec


def reparameterized_sample(g: DiagGaussian, eps) -> np.ndarray:
    eps = _check_point(g, eps)
    return g.mean + np.exp(0.5 * g.log_var) * eps
