"""Reparameterisable latent distributions.

All distributions are batched: parameters carry arbitrary leading batch
dimensions followed by the latent dimension. ``rsample(rng, sample_shape)``
returns ``sample_shape + batch_shape + (z,)`` and is differentiable with
respect to every parameter tensor.

Every non-mixture family exposes a lower-triangular ``scale_tril`` so that
log-densities and closed-form KL share one Cholesky-based route.
"""

from __future__ import annotations

import math
from typing import Sequence, Union

import numpy as np

from .autodiff import Tensor, ops
from .autodiff.tensor import ShapeError, as_tensor, make_result

LOG_2PI = math.log(2.0 * math.pi)


def build_cholesky(raw) -> Tensor:
    """Map an unconstrained square matrix to a Cholesky factor.

    Upper triangle is zeroed, the diagonal is exponentiated, the strictly lower
    triangle passes through unchanged.
    """
    raw = as_tensor(raw)
    if raw.ndim < 2 or raw.shape[-1] != raw.shape[-2]:
        raise ShapeError(f"build_cholesky: expected square matrices, got {raw.shape}")
    n = raw.shape[-1]
    strict_lower = np.tril(np.ones((n, n)), -1)
    return ops.mul(raw, strict_lower) + ops.diag_embed(ops.exp(ops.diagonal(raw)))


def _eye_like(n: int) -> np.ndarray:
    return np.eye(n)


class Gaussian:
    """Common interface of the single-Gaussian families."""

    mu: Tensor

    @property
    def dim(self) -> int:
        return self.mu.shape[-1]

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return self.mu.shape[:-1]

    @property
    def scale_tril(self) -> Tensor:
        raise NotImplementedError

    def _std_normal(self, rng: np.random.Generator, sample_shape) -> np.ndarray:
        return rng.standard_normal(tuple(sample_shape) + self.batch_shape + (self.dim,))

    def rsample(self, rng: np.random.Generator, sample_shape: Sequence[int] = ()) -> Tensor:
        eps = self._std_normal(rng, sample_shape)
        return self.rsample_from(eps)

    def rsample_from(self, eps: np.ndarray) -> Tensor:
        L = self.scale_tril
        return self.mu + ops.reshape(ops.matmul(L, eps[..., None]), eps.shape)

    def log_prob(self, z) -> Tensor:
        z = as_tensor(z)
        if z.shape[-1] != self.dim:
            raise ShapeError(f"log_prob: point has dimension {z.shape[-1]}, distribution {self.dim}")
        L = self.scale_tril
        diff = z - self.mu
        u = ops.solve_tril(L, ops.reshape(diff, diff.shape + (1,)))
        maha = ops.sum(ops.square(u), axis=(-2, -1))
        half_logdet = ops.sum(ops.log(ops.diagonal(L)), axis=-1)
        return maha * -0.5 - half_logdet - 0.5 * self.dim * LOG_2PI

    def mean(self) -> np.ndarray:
        return self.mu.data.copy()

    def covariance(self) -> np.ndarray:
        L = self.scale_tril.data
        return L @ np.swapaxes(L, -1, -2)


class DiagGaussian(Gaussian):
    """Axis-aligned Gaussian parameterised by mean and log standard deviation."""

    def __init__(self, mu, log_sigma):
        self.mu, self.log_sigma = as_tensor(mu), as_tensor(log_sigma)
        if self.mu.shape != self.log_sigma.shape:
            raise ShapeError(f"DiagGaussian: mu {self.mu.shape} vs log_sigma {self.log_sigma.shape}")
        self._sigma: Tensor | None = None

    @property
    def sigma(self) -> Tensor:
        if self._sigma is None:
            self._sigma = ops.exp(self.log_sigma)
        return self._sigma

    @property
    def scale_tril(self) -> Tensor:
        return ops.diag_embed(self.sigma)

    def rsample_from(self, eps: np.ndarray) -> Tensor:
        return self.mu + self.sigma * eps

    def log_prob(self, z) -> Tensor:
        z = as_tensor(z)
        if z.shape[-1] != self.dim:
            raise ShapeError(f"log_prob: point has dimension {z.shape[-1]}, distribution {self.dim}")
        u = (z - self.mu) / self.sigma
        return ops.sum(ops.square(u) * -0.5 - self.log_sigma, axis=-1) - 0.5 * self.dim * LOG_2PI

    def covariance(self) -> np.ndarray:
        s = np.exp(self.log_sigma.data)
        return s[..., :, None] * np.eye(self.dim) * s[..., None, :]


class FullCovGaussian(Gaussian):
    """Gaussian with covariance ``L Lᵀ``; ``L`` lower triangular with positive diagonal."""

    def __init__(self, mu, L):
        self.mu, self.L = as_tensor(mu), as_tensor(L)
        z = self.mu.shape[-1]
        if self.L.shape[-2:] != (z, z):
            raise ShapeError(f"FullCovGaussian: L {self.L.shape} does not match dim {z}")
        if np.any(np.triu(self.L.data, 1) != 0):
            raise ValueError("FullCovGaussian: L must be lower triangular")
        if np.any(np.einsum("...ii->...i", self.L.data) <= 0):
            raise ValueError("FullCovGaussian: diagonal of L must be positive")

    @classmethod
    def from_raw(cls, mu, raw) -> "FullCovGaussian":
        return cls(mu, build_cholesky(raw))

    @property
    def scale_tril(self) -> Tensor:
        return self.L


class LowRankGaussian(Gaussian):
    """Gaussian with covariance ``P Pᵀ + diag(D)``; sampled through its dense Cholesky factor."""

    def __init__(self, mu, P, D):
        self.mu, self.P, self.D = as_tensor(mu), as_tensor(P), as_tensor(D)
        z = self.mu.shape[-1]
        if self.P.shape[-2] != z or self.D.shape[-1] != z:
            raise ShapeError(f"LowRankGaussian: P {self.P.shape}, D {self.D.shape} vs dim {z}")
        if np.any(self.D.data <= 0):
            idx = tuple(int(i) for i in np.unravel_index(np.argmin(self.D.data), self.D.shape))
            raise ValueError(f"LowRankGaussian: D must be positive, D{list(idx)} = {self.D.data[idx]:.3e}")
        self._L: Tensor | None = None

    @classmethod
    def from_raw(cls, mu, P, raw_d) -> "LowRankGaussian":
        return cls(mu, P, ops.exp(raw_d))

    @property
    def rank(self) -> int:
        return self.P.shape[-1]

    def covariance_tensor(self) -> Tensor:
        return ops.matmul(self.P, ops.swap_last(self.P)) + ops.diag_embed(self.D)

    @property
    def scale_tril(self) -> Tensor:
        if self._L is None:
            try:
                self._L = ops.cholesky(self.covariance_tensor())
            except np.linalg.LinAlgError:
                d = self.D.data
                idx = tuple(int(i) for i in np.unravel_index(np.argmin(d), d.shape))
                raise np.linalg.LinAlgError(
                    f"LowRankGaussian: Cholesky failed, D{list(idx)} = {d[idx]:.3e}"
                ) from None
        return self._L

    def covariance(self) -> np.ndarray:
        P = self.P.data
        return P @ np.swapaxes(P, -1, -2) + self.D.data[..., :, None] * np.eye(self.dim)


# ---------------------------------------------------------------------------
# Gumbel-Softmax
# ---------------------------------------------------------------------------

def sample_gumbel(rng: np.random.Generator, shape) -> np.ndarray:
    u = rng.random(shape)
    # guard the open interval; rng.random can return exactly 0
    u = np.clip(u, np.finfo(np.float64).tiny, 1.0)
    return -np.log(-np.log(u))


def straight_through(hard: np.ndarray, soft: Tensor) -> Tensor:
    """Forward value ``hard``; the gradient is passed unchanged to ``soft``."""
    return make_result(np.asarray(hard, dtype=np.float64).copy(), (soft,), lambda g: (g,), "straight_through")


def gumbel_softmax_sample(logits, tau: float, rng: np.random.Generator | None = None,
                          mode: str = "st", gumbel: np.ndarray | None = None) -> Tensor:
    """Relaxed categorical draw over the last axis.

    ``mode="soft"`` returns ``softmax((logits + g) / tau)``; ``mode="st"``
    returns the exact one-hot argmax of that vector whose backward pass is the
    soft relaxation's. Pass ``gumbel`` to fix the noise.
    """
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    logits = as_tensor(logits)
    if gumbel is None:
        if rng is None:
            raise ValueError("gumbel_softmax_sample needs an rng or explicit gumbel noise")
        gumbel = sample_gumbel(rng, logits.shape)
    soft = ops.softmax((logits + gumbel) * (1.0 / tau), axis=-1)
    if mode == "soft":
        return soft
    if mode != "st":
        raise ValueError(f"unknown Gumbel-Softmax mode {mode!r}")
    idx = soft.data.argmax(axis=-1)
    hard = np.zeros(soft.shape)
    np.put_along_axis(hard, idx[..., None], 1.0, axis=-1)
    return straight_through(hard, soft)


class GaussianMixture:
    """Mixture of same-dimension Gaussians with softmax-parameterised weights."""

    def __init__(self, logits, components: Sequence[Gaussian], tau: float):
        self.logits = as_tensor(logits)
        self.components = list(components)
        if not self.components:
            raise ValueError("GaussianMixture needs at least one component")
        if self.logits.shape[-1] != len(self.components):
            raise ShapeError(f"GaussianMixture: {self.logits.shape[-1]} logits for {len(self.components)} components")
        dims = {c.dim for c in self.components}
        if len(dims) != 1:
            raise ShapeError(f"GaussianMixture: components disagree on dimension {sorted(dims)}")
        if not tau > 0:
            raise ValueError(f"temperature must be positive, got {tau}")
        self.tau = float(tau)

    @property
    def dim(self) -> int:
        return self.components[0].dim

    @property
    def n_components(self) -> int:
        return len(self.components)

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return self.logits.shape[:-1]

    @property
    def weights(self) -> np.ndarray:
        return ops.softmax(Tensor(self.logits.data), axis=-1).data

    def rsample(self, rng: np.random.Generator, sample_shape: Sequence[int] = ()) -> Tensor:
        sample_shape = tuple(sample_shape)
        gumbel = sample_gumbel(rng, sample_shape + self.logits.shape)
        onehot = gumbel_softmax_sample(self.logits, self.tau, mode="st", gumbel=gumbel)
        draws = ops.stack([c.rsample(rng, sample_shape) for c in self.components], axis=-2)
        return ops.sum(draws * ops.reshape(onehot, onehot.shape + (1,)), axis=-2)

    def log_prob(self, z) -> Tensor:
        z = as_tensor(z)
        if z.shape[-1] != self.dim:
            raise ShapeError(f"log_prob: point has dimension {z.shape[-1]}, distribution {self.dim}")
        comp = ops.stack([c.log_prob(z) for c in self.components], axis=-1)
        return ops.logsumexp(comp + ops.log_softmax(self.logits, axis=-1), axis=-1)

    def mean(self) -> np.ndarray:
        w = self.weights
        mus = np.stack([c.mean() for c in self.components], axis=-2)
        return (w[..., None] * mus).sum(axis=-2)

    def covariance(self) -> np.ndarray:
        # law of total variance
        w = self.weights
        mus = np.stack([c.mean() for c in self.components], axis=-2)
        covs = np.stack([c.covariance() for c in self.components], axis=-3)
        m = (w[..., None] * mus).sum(axis=-2)
        d = mus - m[..., None, :]
        within = (w[..., None, None] * covs).sum(axis=-3)
        between = (w[..., None, None] * d[..., :, None] * d[..., None, :]).sum(axis=-3)
        return within + between


LatentDistribution = Union[DiagGaussian, FullCovGaussian, LowRankGaussian, GaussianMixture]


def sample(dist: LatentDistribution, rng: np.random.Generator, sample_shape: Sequence[int] = ()) -> Tensor:
    return dist.rsample(rng, sample_shape)


def sample_mixture(mix: GaussianMixture, rng: np.random.Generator, sample_shape: Sequence[int] = ()) -> Tensor:
    return mix.rsample(rng, sample_shape)


def log_prob(dist: LatentDistribution, z) -> Tensor:
    return dist.log_prob(z)


# ---------------------------------------------------------------------------
# KL divergence
# ---------------------------------------------------------------------------

def kl_closed_form(q: Gaussian, p: Gaussian) -> Tensor:
    """KL(q || p) between single Gaussians of any covariance family, per batch element."""
    if isinstance(q, GaussianMixture) or isinstance(p, GaussianMixture):
        raise TypeError("kl_closed_form: mixtures have no closed-form KL, use kl_monte_carlo")
    if q.dim != p.dim:
        raise ShapeError(f"kl_closed_form: dimensions differ ({q.dim} vs {p.dim})")
    k = q.dim
    if isinstance(q, DiagGaussian) and isinstance(p, DiagGaussian):
        ratio = ops.exp((q.log_sigma - p.log_sigma) * 2.0)
        maha = ops.square((p.mu - q.mu) / p.sigma)
        inner = ratio + maha - 1.0 - (q.log_sigma - p.log_sigma) * 2.0
        return ops.sum(inner, axis=-1) * 0.5
    Lq, Lp = q.scale_tril, p.scale_tril
    M = ops.solve_tril(Lp, Lq)
    trace = ops.sum(ops.square(M), axis=(-2, -1))
    diff = p.mu - q.mu
    u = ops.solve_tril(Lp, ops.reshape(diff, diff.shape + (1,)))
    maha = ops.sum(ops.square(u), axis=(-2, -1))
    logdet = ops.sum(ops.log(ops.diagonal(Lp)), axis=-1) - ops.sum(ops.log(ops.diagonal(Lq)), axis=-1)
    return (trace + maha - k) * 0.5 + logdet


def kl_monte_carlo(q: LatentDistribution, p: LatentDistribution, n_samples: int,
                   rng: np.random.Generator, return_stderr: bool = False):
    """Reparameterised estimate of KL(q || p): mean of log q(z) - log p(z) with z ~ q.

    With ``return_stderr`` also returns the per-batch-element standard error
    (numpy) of the estimate.
    """
    if n_samples < 1:
        raise ValueError("kl_monte_carlo needs at least one sample")
    if q.dim != p.dim:
        raise ShapeError(f"kl_monte_carlo: dimensions differ ({q.dim} vs {p.dim})")
    z = q.rsample(rng, (n_samples,))
    terms = q.log_prob(z) - p.log_prob(z)
    est = ops.mean(terms, axis=0)
    if not return_stderr:
        return est
    se = terms.data.std(axis=0, ddof=1) / math.sqrt(n_samples) if n_samples > 1 else np.full(est.shape, np.inf)
    return est, se
