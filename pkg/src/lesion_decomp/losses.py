"""Decomposition losses and the WGAN-GP critic objective.

All functions take torch tensors shaped ``(N, C, H, W)`` (plain arrays are
converted) and return 0-d tensors that stay on the autograd graph.

Per-image norms are generalized means over pixels, ``(mean |r|**p)**(1/p)``,
so the loss weights do not depend on image resolution.  An optional boolean
``mask`` zeroes residuals outside it; the pixel count in the mean is still
the full image.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import torch

from .errors import BadShapeError


@dataclass(frozen=True)
class LossConfig:
    p: int = 1
    lambda_gp: float = 10.0
    alpha1: float = 0.01
    alpha2: float = 100.0
    alpha3: float = 100.0

    def __post_init__(self):
        if self.p not in (1, 2):
            raise ValueError(f"p must be 1 or 2, got {self.p}")
        for name in ("lambda_gp", "alpha1", "alpha2", "alpha3"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @property
    def alphas(self):
        return (self.alpha1, self.alpha2, self.alpha3)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class LossValues:
    L_r: float
    L_n: float
    L_c: float
    L_a: float
    L_gen: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _t(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(x, dtype=torch.float64)


def _per_image_norm(residual: torch.Tensor, p: int) -> torch.Tensor:
    flat = residual.reshape(residual.shape[0], -1)
    if p == 1:
        return flat.abs().mean(dim=1)
    # vector_norm has a zero subgradient at the origin, unlike sqrt(mean(r**2))
    return torch.linalg.vector_norm(flat, ord=p, dim=1) / flat.shape[1] ** (1.0 / p)


def _residual(x, est, mask):
    r = x - est
    if mask is not None:
        r = r * _t(mask).to(r.dtype)
    return r


def reconstruction_loss(x, normal_est, lesion_est, p: int = 1, mask=None) -> torch.Tensor:
    """Batch mean of the per-image norm of ``x - normal_est - lesion_est``."""
    x, normal_est, lesion_est = _t(x), _t(normal_est), _t(lesion_est)
    if not (x.shape == normal_est.shape == lesion_est.shape):
        raise BadShapeError(f"shape mismatch: {tuple(x.shape)}, {tuple(normal_est.shape)}, "
                            f"{tuple(lesion_est.shape)}")
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    return _per_image_norm(_residual(x, normal_est + lesion_est, mask), p).mean()


def normal_fidelity_loss(x_normals, normal_est_normals, p: int = 1, mask=None) -> torch.Tensor:
    """Batch mean of the per-image norm of ``x - normal_est`` over normal images.

    An empty subset contributes zero.
    """
    x, est = _t(x_normals), _t(normal_est_normals)
    if x.shape != est.shape:
        raise BadShapeError(f"shape mismatch: {tuple(x.shape)} vs {tuple(est.shape)}")
    if x.shape[0] == 0:
        return est.sum() * 0.0
    return _per_image_norm(_residual(x, est, mask), p).mean()


CriticFn = Callable[[torch.Tensor], torch.Tensor]


def _critic_fn(critic) -> CriticFn:
    return critic.score if hasattr(critic, "score") else critic


def gradient_penalty(critic, real_batch, fake_batch,
                     generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Mean of ``(||grad D(x_hat)||_2 - 1)**2`` over random interpolates.

    ``x_hat = eps * real + (1 - eps) * fake`` with one ``eps ~ U(0, 1)`` per
    sample.  Batches of different length are truncated to the shorter one.
    ``critic`` is a :class:`ModelBundle` or any callable mapping a batch to
    one score per sample.
    """
    real, fake = _t(real_batch), _t(fake_batch)
    n = min(real.shape[0], fake.shape[0])
    if n == 0:
        raise ValueError("gradient penalty needs non-empty real and fake batches")
    real, fake = real[:n], fake[:n]
    if real.shape != fake.shape:
        raise BadShapeError(f"shape mismatch: {tuple(real.shape)} vs {tuple(fake.shape)}")
    eps_shape = (n,) + (1,) * (real.dim() - 1)
    eps = torch.rand(eps_shape, generator=generator, dtype=real.dtype, device=real.device)
    x_hat = (eps * real.detach() + (1 - eps) * fake.detach()).requires_grad_(True)
    scores = _critic_fn(critic)(x_hat)
    grad = None
    if scores.requires_grad:
        grad, = torch.autograd.grad(scores.sum(), x_hat, create_graph=True, allow_unused=True)
    if grad is None:
        grad = torch.zeros_like(x_hat)
    norms = grad.reshape(n, -1).norm(2, dim=1)
    return ((norms - 1.0) ** 2).mean()


def critic_loss(critic, real_normals, fake_normals, lambda_gp: float = 10.0,
                generator: Optional[torch.Generator] = None,
                return_parts: bool = False):
    """``mean D(fake) - mean D(real) + lambda_gp * GP``.

    With ``return_parts`` the result is ``(total, wasserstein_term, gp)``.
    """
    real, fake = _t(real_normals), _t(fake_normals)
    if real.shape[0] == 0 or fake.shape[0] == 0:
        raise ValueError("critic loss needs non-empty real and fake sets")
    fn = _critic_fn(critic)
    w = fn(fake).mean() - fn(real).mean()
    if lambda_gp > 0:
        gp = gradient_penalty(critic, real, fake, generator)
    else:
        gp = torch.zeros((), dtype=w.dtype)
    total = w + lambda_gp * gp
    return (total, w, gp) if return_parts else total


def adversarial_loss(critic_scores_on_fakes) -> torch.Tensor:
    scores = _t(critic_scores_on_fakes)
    if scores.numel() == 0:
        raise ValueError("adversarial loss needs at least one score")
    return -scores.mean()


def generator_objective(L_a, L_r, L_n,
                        alphas: Union[LossConfig, Sequence[float]] = (0.01, 100.0, 100.0)):
    if isinstance(alphas, LossConfig):
        alphas = alphas.alphas
    a1, a2, a3 = alphas
    return a1 * L_a + a2 * L_r + a3 * L_n
