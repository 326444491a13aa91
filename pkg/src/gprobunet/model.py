"""Generalized Probabilistic U-Net and the deterministic baselines.

Networks:

* :class:`Encoder` – three conv blocks separated by 2×2 average pooling, then a
  bottleneck block. Shared by the U-Net and both latent encoders.
* :class:`UNet` – encoder plus three bilinear-upsampling decoder blocks with
  skip connections; optional dropout after every block (MC-Dropout).
* :class:`LatentEncoder` – encoder, global average pool and a linear head that
  emits the parameters of the chosen latent family.
* :class:`CombinationHead` – three 1×1 convolutions over the U-Net features
  concatenated with the latent sample broadcast to every pixel.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import ConvBlock, Conv2d, Module, Tensor, no_grad, ops, parameter
from .distributions import (
    DiagGaussian,
    FullCovGaussian,
    GaussianMixture,
    LatentDistribution,
    LowRankGaussian,
    kl_closed_form,
    kl_monte_carlo,
)

LATENT_FAMILIES = ("aa", "fc", "fc-lr", "aa-mixture", "fc-mixture", "fc-lr-mixture")
BASELINE_FAMILIES = ("mc-dropout", "ensemble", "unet")
FAMILIES = LATENT_FAMILIES + BASELINE_FAMILIES


def base_family(family: str) -> str:
    return family.removesuffix("-mixture")


def is_mixture(family: str) -> bool:
    return family.endswith("-mixture")


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------

class Encoder(Module):
    def __init__(self, in_ch: int, filters: Sequence[int], bottleneck: int, rng: np.random.Generator,
                 dropout: float = 0.0):
        super().__init__()
        chans = [in_ch, *filters]
        self.n_blocks = len(filters)
        for i in range(self.n_blocks):
            setattr(self, f"block{i}", ConvBlock(chans[i], chans[i + 1], rng))
        self.bottom = ConvBlock(filters[-1], bottleneck, rng)
        self.dropout = dropout
        self.drop_rng: np.random.Generator | None = None
        self.mc = False

    def _drop(self, h: Tensor) -> Tensor:
        return ops.dropout(h, self.dropout, self.drop_rng, self.dropout > 0 and (self.training or self.mc))

    def forward(self, x: Tensor) -> tuple[list[Tensor], Tensor]:
        skips = []
        h = x
        for i in range(self.n_blocks):
            h = self._drop(getattr(self, f"block{i}")(h))
            skips.append(h)
            h = ops.avg_pool2(h)
        return skips, self._drop(self.bottom(h))


class UNet(Module):
    def __init__(self, in_ch: int, filters: Sequence[int], bottleneck: int, rng: np.random.Generator,
                 dropout: float = 0.0):
        super().__init__()
        self.encoder = Encoder(in_ch, filters, bottleneck, rng, dropout)
        self.n_blocks = len(filters)
        up_in = bottleneck
        for i in reversed(range(self.n_blocks)):
            setattr(self, f"up{i}", ConvBlock(up_in + filters[i], filters[i], rng))
            up_in = filters[i]
        self.out_channels = filters[0]

    def set_dropout_rng(self, rng: np.random.Generator | None, mc: bool = False) -> None:
        self.encoder.drop_rng = rng
        self.encoder.mc = mc

    def forward(self, x: Tensor) -> Tensor:
        skips, h = self.encoder(x)
        for i in reversed(range(self.n_blocks)):
            h = ops.upsample_bilinear2(h)
            h = getattr(self, f"up{i}")(ops.concat([h, skips[i]], axis=1))
            h = self.encoder._drop(h)
        return h


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, scale: float = 1.0):
        super().__init__()
        self.weight = parameter(rng.normal(0.0, scale / np.sqrt(n_in), (n_in, n_out)))
        self.bias = parameter(np.zeros(n_out))

    def forward(self, x: Tensor) -> Tensor:
        return ops.matmul(x, self.weight) + self.bias


def n_latent_params(family: str, z: int, rank: int = 1, n_components: int = 1) -> int:
    base = base_family(family)
    per = {"aa": 2 * z, "fc": z + z * z, "fc-lr": z + z * rank + z}[base]
    return per * n_components + n_components if is_mixture(family) else per


def params_to_distribution(h: Tensor, family: str, z: int, rank: int = 1, n_components: int = 1,
                           tau: float = 0.5) -> LatentDistribution:
    """Split a B×n_params head output into a latent distribution."""
    base = base_family(family)
    B = h.shape[0]

    def component(off: int):
        mu = h[:, off:off + z]
        off += z
        if base == "aa":
            return DiagGaussian(mu, h[:, off:off + z]), off + z
        if base == "fc":
            raw = ops.reshape(h[:, off:off + z * z], (B, z, z))
            return FullCovGaussian.from_raw(mu, raw), off + z * z
        P = ops.reshape(h[:, off:off + z * rank], (B, z, rank))
        off += z * rank
        return LowRankGaussian.from_raw(mu, P, h[:, off:off + z]), off + z

    if not is_mixture(family):
        dist, _ = component(0)
        return dist
    comps, off = [], 0
    for _ in range(n_components):
        c, off = component(off)
        comps.append(c)
    return GaussianMixture(h[:, off:off + n_components], comps, tau)


class LatentEncoder(Module):
    def __init__(self, in_ch: int, filters: Sequence[int], bottleneck: int, n_out: int,
                 rng: np.random.Generator):
        super().__init__()
        self.encoder = Encoder(in_ch, filters, bottleneck, rng)
        self.head = Linear(bottleneck, n_out, rng, scale=0.1)
        self.calls = 0

    def forward(self, x: Tensor) -> Tensor:
        self.calls += 1
        _, h = self.encoder(x)
        return self.head(ops.mean(h, axis=(2, 3)))


class CombinationHead(Module):
    def __init__(self, feat_ch: int, z: int, rng: np.random.Generator, n_classes: int = 2):
        super().__init__()
        self.c1 = Conv2d(feat_ch + z, feat_ch, 1, rng)
        self.c2 = Conv2d(feat_ch, feat_ch, 1, rng)
        self.c3 = Conv2d(feat_ch, n_classes, 1, rng)

    def forward(self, feats: Tensor, z: Tensor) -> Tensor:
        B, _, H, W = feats.shape
        zmap = ops.broadcast_to(ops.reshape(z, z.shape + (1, 1)), (B, z.shape[-1], H, W))
        h = ops.concat([feats, zmap], axis=1)
        h = ops.relu(self.c1(h))
        h = ops.relu(self.c2(h))
        return self.c3(h)


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------

@dataclass
class Architecture:
    filters: tuple[int, ...] = (32, 64, 128)
    bottleneck: int = 512
    in_channels: int = 1


class ProbUNet(Module):
    """U-Net backbone with prior/posterior latent encoders and a combination head."""

    def __init__(self, family: str, latent_dim: int, arch: Architecture, rng: np.random.Generator,
                 beta: float = 1.0, rank: int = 1, n_components: int = 1, tau: float = 0.5,
                 kl_samples: int = 16, ce_reduction: str = "sum"):
        super().__init__()
        if family not in LATENT_FAMILIES:
            raise ValueError(f"ProbUNet: unsupported family {family!r}")
        self.family, self.latent_dim, self.beta = family, latent_dim, beta
        self.rank = rank
        self.n_components = n_components if is_mixture(family) else 1
        self.tau, self.kl_samples, self.ce_reduction = tau, kl_samples, ce_reduction
        n_out = n_latent_params(family, latent_dim, rank, self.n_components)
        self.unet = UNet(arch.in_channels, arch.filters, arch.bottleneck, rng)
        self.prior_net = LatentEncoder(arch.in_channels, arch.filters, arch.bottleneck, n_out, rng)
        self.posterior_net = LatentEncoder(arch.in_channels + 1, arch.filters, arch.bottleneck, n_out, rng)
        self.head = CombinationHead(arch.filters[0], latent_dim, rng)

    def _dist(self, h: Tensor) -> LatentDistribution:
        return params_to_distribution(h, self.family, self.latent_dim, self.rank, self.n_components, self.tau)

    def prior(self, x: Tensor) -> LatentDistribution:
        return self._dist(self.prior_net(x))

    def posterior(self, x: Tensor, y: np.ndarray) -> LatentDistribution:
        yc = Tensor(np.asarray(y, dtype=np.float64)[:, None])
        return self._dist(self.posterior_net(ops.concat([x, yc], axis=1)))

    def features(self, x: Tensor) -> Tensor:
        return self.unet(x)

    def combine(self, feats: Tensor, z: Tensor) -> Tensor:
        return self.head(feats, z)


class UNetModel(Module):
    """Deterministic U-Net (dropout 0) or MC-Dropout U-Net (dropout > 0)."""

    def __init__(self, arch: Architecture, rng: np.random.Generator, dropout: float = 0.0,
                 ce_reduction: str = "sum"):
        super().__init__()
        self.unet = UNet(arch.in_channels, arch.filters, arch.bottleneck, rng, dropout)
        self.out = Conv2d(arch.filters[0], 2, 1, rng)
        self.dropout = dropout
        self.ce_reduction = ce_reduction

    def forward(self, x: Tensor) -> Tensor:
        return self.out(self.unet(x))


# ---------------------------------------------------------------------------
# objective and inference
# ---------------------------------------------------------------------------

@dataclass
class LossTerms:
    loss: Tensor
    ce: float
    kl: float
    kl_stderr: float = 0.0


def elbo_loss(model: ProbUNet, x: Tensor, y: np.ndarray, rng: np.random.Generator,
              beta: float | None = None, kl_mode: str | None = None) -> LossTerms:
    """Cross-entropy under one posterior sample plus beta-weighted KL(posterior || prior)."""
    beta = model.beta if beta is None else beta
    if kl_mode is None:
        kl_mode = "monte-carlo" if is_mixture(model.family) else "closed-form"
    if kl_mode == "closed-form" and is_mixture(model.family):
        raise ValueError("closed-form KL is undefined for mixture latents")
    post = model.posterior(x, y)
    prior = model.prior(x)
    z = post.rsample(rng)
    logits = model.combine(model.features(x), z)
    ce = ops.softmax_ce_with_logits(logits, y, reduction=model.ce_reduction)
    se = 0.0
    if kl_mode == "closed-form":
        kl_b = kl_closed_form(post, prior)
    elif kl_mode == "monte-carlo":
        kl_b, se_b = kl_monte_carlo(post, prior, model.kl_samples, rng, return_stderr=True)
        se = float(np.sqrt(np.sum(se_b ** 2)) / se_b.size)
    else:
        raise ValueError(f"unknown kl mode {kl_mode!r}")
    kl = ops.mean(kl_b)
    loss = ce + kl * beta if beta != 0 else ce
    return LossTerms(loss, float(ce.data), float(kl.data), se)


def unet_loss(model: UNetModel, x: Tensor, y: np.ndarray) -> LossTerms:
    ce = ops.softmax_ce_with_logits(model(x), y, reduction=model.ce_reduction)
    return LossTerms(ce, float(ce.data), 0.0)


def predict_samples(model: ProbUNet, x: Tensor, n: int, rng: np.random.Generator
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``n`` prior samples per image; returns masks (n,B,H,W) and logits (n,B,2,H,W)."""
    model.eval()
    with no_grad():
        feats = model.features(x)
        prior = model.prior(x)
        z = prior.rsample(rng, (n,))
        B = x.shape[0]
        tiled = Tensor(np.broadcast_to(feats.data, (n,) + feats.shape).reshape((n * B,) + feats.shape[1:]))
        zf = Tensor(z.data.reshape(n * B, -1))
        logits = model.combine(tiled, zf).data.reshape((n, B) + (2,) + x.shape[2:])
    return logits.argmax(axis=2).astype(np.uint8), logits


def mc_dropout_predict(model: UNetModel, x: Tensor, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` stochastic passes with dropout active and batch-norm in eval mode."""
    model.eval()
    model.unet.set_dropout_rng(rng, mc=True)
    try:
        with no_grad():
            outs = [model(x).data.argmax(axis=1) for _ in range(n)]
    finally:
        model.unet.set_dropout_rng(None, mc=False)
    return np.stack(outs).astype(np.uint8)


def unet_predict(model: UNetModel, x: Tensor) -> np.ndarray:
    model.eval()
    with no_grad():
        return model(x).data.argmax(axis=1).astype(np.uint8)


def ensemble_predict(members: Sequence[UNetModel], x: Tensor) -> np.ndarray:
    return np.stack([unet_predict(m, x) for m in members])
