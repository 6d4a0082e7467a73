"""Training objectives: surface reconstruction, embedding alignment and prediction refinement."""
from __future__ import annotations

from dataclasses import dataclass

import torch

PHASE_WEIGHTS = {
    "surface": (1.0, 0.0, 0.0),
    "align": (0.0, 1.0, 0.0),
    "refine": (0.0, 1.0, 1.0),
    # end-to-end image model without a prior: Chamfer on image predictions only
    "baseline": (0.0, 0.0, 1.0),
}


def _batched(x):
    return x[None] if x.dim() == 2 else x


def directed_sq_nn(a, b):
    """Mean over ``a`` of the squared distance to the nearest point of ``b``; (B,) result.

    The nearest neighbour is chosen without gradient (ties go to the lowest
    index) and the distance is then recomputed exactly, so gradients flow
    to that single neighbour.
    """
    with torch.no_grad():
        idx = torch.cdist(a, b).argmin(dim=-1)
    nearest = torch.gather(b, 1, idx[..., None].expand(-1, -1, b.shape[-1]))
    return ((a - nearest) ** 2).sum(-1).mean(-1)


def chamfer(a, b, reduce: bool = True):
    """Two-way squared-L2 Chamfer distance, mean-reduced in each direction.

    Accepts (n, 3) / (m, 3) or batched (B, n, 3) / (B, m, 3) inputs. Batched
    inputs return the batch mean unless ``reduce`` is False.
    """
    if a.shape[-2] == 0 or b.shape[-2] == 0:
        raise ValueError("Chamfer distance of an empty point set is undefined")
    single = a.dim() == 2
    a, b = _batched(a), _batched(b)
    per_sample = directed_sq_nn(a, b) + directed_sq_nn(b, a)
    if single:
        return per_sample[0]
    return per_sample.mean() if reduce else per_sample


def surface_loss(vertices, correspondences, reconstructed, alpha: float = 1e-3):
    """Chamfer(V, C_S) + alpha * MSE(V, V_hat); the MSE is the mean over vertices of the squared L2 error."""
    if vertices.shape != reconstructed.shape:
        raise ValueError(f"vertex/reconstruction shape mismatch: {tuple(vertices.shape)} vs {tuple(reconstructed.shape)}")
    mse = ((vertices - reconstructed) ** 2).sum(-1).mean()
    return chamfer(vertices, correspondences) + alpha * mse


def embedding_alignment_loss(z_surface, z_image, normalize_by_dim: bool = False):
    """Batch-mean squared L2 distance between image latents and (detached) surface latents."""
    if z_surface.shape != z_image.shape:
        raise ValueError(f"latent shape mismatch: {tuple(z_surface.shape)} vs {tuple(z_image.shape)}")
    diff = z_surface.detach() - z_image
    per_sample = (diff ** 2).sum(-1)
    if normalize_by_dim:
        per_sample = per_sample / diff.shape[-1]
    return per_sample.mean()


def prediction_refinement_loss(vertices, correspondences):
    return chamfer(vertices, correspondences)


@dataclass(frozen=True)
class LossWeights:
    lambda1: float
    lambda2: float
    lambda3: float
    alpha: float = 1e-3

    @classmethod
    def for_phase(cls, phase: str, alpha: float = 1e-3) -> "LossWeights":
        try:
            return cls(*PHASE_WEIGHTS[phase], alpha=alpha)
        except KeyError:
            raise ValueError(f"unknown training phase {phase!r}") from None

    def check(self):
        pattern = (self.lambda1, self.lambda2, self.lambda3)
        if pattern not in PHASE_WEIGHTS.values():
            raise ValueError(f"weights {pattern} match no training phase {sorted(PHASE_WEIGHTS)}")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        return self


def total_loss(terms: dict, weights: LossWeights):
    """Weighted sum of the ``surface``, ``alignment`` and ``refinement`` terms.

    Values may be tensors or zero-argument callables; a term whose weight is
    zero is never evaluated, so its networks may be absent in that phase.
    """
    weights.check()
    total = 0.0
    for name, w in (("surface", weights.lambda1), ("alignment", weights.lambda2), ("refinement", weights.lambda3)):
        if w == 0:
            continue
        if name not in terms:
            raise KeyError(f"loss term {name!r} is required by the active weights")
        value = terms[name]
        total = total + w * (value() if callable(value) else value)
    return total
