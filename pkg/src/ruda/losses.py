"""The adaptation objectives.

Sign conventions follow the objectives themselves: the classification,
discriminator and encoder objectives are log-likelihoods to be *maximized*;
the clustering (KL) and dissimilarity objectives are *minimized*.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

EPS = 1e-8


def _f64(t: torch.Tensor) -> torch.Tensor:
    # 1 - EPS rounds to 1.0 in float32, so clamped logs are taken in float64
    return t.to(torch.float64)


@dataclass
class SoftAssignment:
    Q: torch.Tensor
    alpha: float = 1.0


@dataclass
class AuxiliaryDistribution:
    P: torch.Tensor
    f: torch.Tensor


def classification_loss(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean log-probability of the true class (one-hot inner product)."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    k = probs.shape[1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    picked = probs.gather(1, labels.view(-1, 1)).squeeze(1)
    return torch.log(_f64(picked).clamp(EPS, 1.0)).mean()


def discriminator_loss(d_source: torch.Tensor, d_target: torch.Tensor) -> torch.Tensor:
    ds = _f64(d_source).clamp(EPS, 1 - EPS)
    dt = _f64(d_target).clamp(EPS, 1 - EPS)
    return torch.log(ds).mean() + torch.log(1 - dt).mean()


def encoder_loss(d_target: torch.Tensor) -> torch.Tensor:
    """Inverted-label generator objective: target features should look like source."""
    return torch.log(_f64(d_target).clamp(EPS, 1 - EPS)).mean()


def squared_distances(features: torch.Tensor, centroids: torch.Tensor) -> torch.Tensor:
    diff = features.unsqueeze(1) - centroids.unsqueeze(0)
    return (diff * diff).sum(-1)


def soft_assign(features: torch.Tensor, centroids: torch.Tensor, alpha: float = 1.0) -> SoftAssignment:
    """Student-t kernel assignment of each feature row to each centroid."""
    if centroids.shape[0] < 2:
        raise ValueError("need at least 2 centroids")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    kernel = (1.0 + squared_distances(features, centroids) / alpha) ** (-(alpha + 1.0) / 2.0)
    return SoftAssignment(kernel / kernel.sum(dim=1, keepdim=True), alpha)


def auxiliary_dist(q: SoftAssignment) -> AuxiliaryDistribution:
    """Sharpened, frequency-normalized target; carries no gradient."""
    Q = q.Q.detach()
    f = Q.sum(dim=0)
    # q_ic <= f_c, so q^2 / f -> 0 as q -> 0; clusters nobody visits get weight 0
    w = torch.where(Q > 0, Q * Q / f.clamp_min(torch.finfo(Q.dtype).tiny), torch.zeros_like(Q))
    return AuxiliaryDistribution(w / w.sum(dim=1, keepdim=True), f)


def clustering_loss(p: AuxiliaryDistribution, q: SoftAssignment) -> torch.Tensor:
    """KL(P || Q) summed over instances and clusters."""
    if p.P.shape != q.Q.shape:
        raise ValueError(f"shape mismatch: P {tuple(p.P.shape)} vs Q {tuple(q.Q.shape)}")
    P = p.P
    return (torch.xlogy(P, P) - P * torch.log(q.Q.clamp_min(EPS))).sum()


def centroid_predictions(classifier: torch.nn.Module, centroids: torch.Tensor) -> torch.Tensor:
    """Matrix whose column c is the class distribution predicted for centroid c."""
    return torch.softmax(classifier(centroids), dim=1).T


def dissimilarity_loss(A: torch.Tensor) -> torch.Tensor:
    """Frobenius norm of the off-diagonal part of A^T A."""
    gram = A.T @ A
    off = gram - torch.diag_embed(torch.diagonal(gram))
    s = (off * off).sum()
    # sqrt has an infinite slope at 0; route that case around it so the
    # gradient stays finite (zero) for perfectly disjoint columns
    positive = s > 0
    return torch.where(positive, torch.sqrt(torch.where(positive, s, torch.ones_like(s))),
                       torch.zeros_like(s))
