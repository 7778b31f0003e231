"""Agent-pair covariance mathematics.

A pair's joint position (x1, y1, x2, y2) at one future step is modeled
as a 4-D Gaussian whose covariance is parameterized through a unit
lower-triangular factor and a positive diagonal:

    Sigma = L D L^T,
    L = [[1,0,0,0],[a,1,0,0],[b,c,1,0],[d,e,f,1]],
    D = diag(s_x1^2, s_y1^2, s_x2^2, s_y2^2),   s_i > 0.

Any real (a..f) and positive diagonal yield a symmetric positive-definite
Sigma, so the constraint is structural rather than learned. The negative
log likelihood never forms Sigma or its inverse: with r = x - mu and
L z = r solved by forward substitution,

    nll = (k/2) ln(2 pi) + sum_i ln s_i + 1/2 sum_i (z_i / s_i)^2,

which equals ln sqrt((2 pi)^k det Sigma) + r^T Sigma^{-1} r / 2 because
det Sigma = prod s_i^2 and r^T Sigma^{-1} r = z^T D^{-1} z.

Two implementations live here: plain-array functions for evaluation and
analysis, and a tensor version of the nll (``mgnll_tensor``) used inside
the training loss, differentiable w.r.t. all ten parameters and mu.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .diffcore import Tensor, add, const, div, log, mul, slice_axis, sub, tsum
from .errors import NumericError, ValidationError

K_DIM = 4
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class CovParams:
    """The ten head outputs for one pair at one step.

    ``sigma_hat``: the four constrained diagonal scales (already softplus
    + bias shifted, hence strictly positive); ``lower``: the six free
    entries (a, b, c, d, e, f) of L read row by row.
    """
    sigma_hat: np.ndarray
    lower: np.ndarray

    def __post_init__(self):
        self.sigma_hat = np.asarray(self.sigma_hat, dtype=np.float64)
        self.lower = np.asarray(self.lower, dtype=np.float64)
        if self.sigma_hat.shape != (4,) or self.lower.shape != (6,):
            raise ValidationError(
                f"CovParams expects 4 scales and 6 lower entries, got "
                f"{self.sigma_hat.shape} and {self.lower.shape}")
        if not (np.all(np.isfinite(self.sigma_hat)) and np.all(np.isfinite(self.lower))):
            raise NumericError("CovParams: non-finite parameter")
        if np.any(self.sigma_hat <= 0.0):
            raise ValidationError("CovParams: sigma_hat entries must be strictly positive")

    @classmethod
    def from_vector(cls, ten: np.ndarray) -> "CovParams":
        ten = np.asarray(ten, dtype=np.float64)
        return cls(ten[0:4], ten[4:10])

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.sigma_hat, self.lower])


@dataclass
class PairCovariance:
    """A symmetric positive-definite 4x4 covariance matrix."""
    sigma: np.ndarray
    k: int = K_DIM


def unit_lower(lower: np.ndarray) -> np.ndarray:
    """The unit lower-triangular factor from the six free entries."""
    a, b, c, d, e, f = np.asarray(lower, dtype=np.float64)
    return np.array([
        [1.0, 0.0, 0.0, 0.0],
        [a, 1.0, 0.0, 0.0],
        [b, c, 1.0, 0.0],
        [d, e, f, 1.0],
    ])


def build_sigma(p: CovParams) -> PairCovariance:
    """Assemble Sigma = L D L^T; symmetric positive-definite by construction."""
    L = unit_lower(p.lower)
    sig2 = p.sigma_hat ** 2
    s = (L * sig2[None, :]) @ L.T
    return PairCovariance(0.5 * (s + s.T))


def _forward_substitute(lower: np.ndarray, r: np.ndarray) -> np.ndarray:
    a, b, c, d, e, f = lower
    z1 = r[0]
    z2 = r[1] - a * z1
    z3 = r[2] - b * z1 - c * z2
    z4 = r[3] - d * z1 - e * z2 - f * z3
    return np.array([z1, z2, z3, z4])


def mgnll(p: CovParams, mu: np.ndarray, x: np.ndarray) -> float:
    """Negative log likelihood of ``x`` under N(mu, Sigma(p))."""
    mu = np.asarray(mu, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    z = _forward_substitute(p.lower, x - mu)
    return float(
        0.5 * K_DIM * LOG_2PI
        + np.sum(np.log(p.sigma_hat))
        + 0.5 * np.sum((z / p.sigma_hat) ** 2)
    )


def density(p: CovParams, mu: np.ndarray, x: np.ndarray) -> float:
    """Gaussian density exp(-nll); integrates to one over R^4."""
    return math.exp(-mgnll(p, mu, x))


def marginal_blocks(c: PairCovariance):
    """(ego 2x2 block, other 2x2 block, upper cross 2x2 block) of Sigma."""
    s = c.sigma
    return s[0:2, 0:2].copy(), s[2:4, 2:4].copy(), s[0:2, 2:4].copy()


def sample(p: CovParams, mu: np.ndarray, rng: np.random.Generator, n: int = 1) -> np.ndarray:
    """Draw x = mu + L D^{1/2} z with z standard normal; shape [n, 4]."""
    mu = np.asarray(mu, dtype=np.float64)
    z = rng.standard_normal((4, n))
    L = unit_lower(p.lower)
    draws = mu[None, :] + (L @ (p.sigma_hat[:, None] * z)).T
    return draws


class GaussianMixture:
    """Mode-weighted combination of pair Gaussians into one density."""

    def __init__(self, modes):
        self.modes = [(float(w), np.asarray(mu, dtype=np.float64), p) for w, mu, p in modes]

    def density(self, x: np.ndarray) -> float:
        return sum(w * density(p, mu, x) for w, mu, p in self.modes)


def mixture_combine(modes) -> GaussianMixture:
    """Build a mixture density from (weight, mu, CovParams) triples.

    Weights must be non-negative and sum to one within 1e-9.
    """
    modes = list(modes)
    weights = np.array([w for w, _, _ in modes], dtype=np.float64)
    if np.any(weights < 0.0):
        raise ValidationError("mixture_combine: negative mode weight")
    if abs(weights.sum() - 1.0) > 1e-9:
        raise ValidationError(f"mixture_combine: weights sum to {weights.sum()!r}, not 1")
    return GaussianMixture(modes)


# ---------------------------------------------------------------------------
# differentiable loss path


def mgnll_tensor(cov: Tensor, mu: Tensor, x: Tensor) -> Tensor:
    """Elementwise negative log likelihood over an arbitrary batch.

    ``cov``: [..., 10] constrained parameters (4 scales then a..f);
    ``mu``: [..., 4] predicted pair positions; ``x``: [..., 4] targets.
    Returns the per-element nll of shape [..., 1]. The quadratic term is
    evaluated through forward substitution, so no matrix is ever built.
    """
    s = [slice_axis(cov, -1, i, i + 1) for i in range(4)]
    a, b, c, d, e, f = (slice_axis(cov, -1, i, i + 1) for i in range(4, 10))
    r = [slice_axis(sub(x, mu), -1, i, i + 1) for i in range(4)]

    z1 = r[0]
    z2 = sub(r[1], mul(a, z1))
    z3 = sub(r[2], add(mul(b, z1), mul(c, z2)))
    z4 = sub(r[3], add(add(mul(d, z1), mul(e, z2)), mul(f, z3)))

    log_det_half = add(add(log(s[0]), log(s[1])), add(log(s[2]), log(s[3])))
    quad = const(0.0)
    for z_i, s_i in zip((z1, z2, z3, z4), s):
        u = div(z_i, s_i)
        quad = add(quad, mul(u, u))
    return add(add(const(0.5 * K_DIM * LOG_2PI), log_det_half), mul(const(0.5), quad))


def mgnll_tensor_sum(cov: Tensor, mu: Tensor, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Masked sum of per-element nll terms; ``mask`` broadcasts as [..., 1]."""
    per = mgnll_tensor(cov, mu, x)
    if mask is not None:
        m = np.asarray(mask, dtype=np.float64).reshape(per.shape)
        per = mul(per, const(m))
    return tsum(per)
