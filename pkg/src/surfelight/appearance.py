"""Stage-1 appearance variability.

A small MLP maps (per-surfel base color, per-surfel embedding, per-image
embedding) to an affine color transform (gamma, beta); the transformed color
rho_tilde = gamma * rho + beta is what gets splatted during geometry training.
The per-image embedding absorbs illumination changes across views so geometry
does not have to.
"""

from __future__ import annotations

import torch
from torch import nn

from .common import DTYPE
from .scene import EMBED_DIM

IMAGE_EMBED_DIM = 32
_HIDDEN = 128


class AppearanceMLP(nn.Module):
    """(3 + 24 + 32) -> 128 -> 128 -> 6 with a smooth rectifier (softplus).

    The output head is zero-initialized, so training starts at the identity
    transform: gamma = exp(0) = 1, beta = 0.
    """

    def __init__(self):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(3 + EMBED_DIM + IMAGE_EMBED_DIM, _HIDDEN),
            nn.Softplus(),
            nn.Linear(_HIDDEN, _HIDDEN),
            nn.Softplus(),
            nn.Linear(_HIDDEN, 6),
        )
        self.net = self.net.to(DTYPE)
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)

    def forward(self, albedo: torch.Tensor, surfel_embed: torch.Tensor,
                image_embed: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Per-surfel (gamma, beta); gamma is exponentiated to stay positive.

        ``albedo`` [S, 3], ``surfel_embed`` [S, 24], ``image_embed`` [32]
        (broadcast over surfels).
        """
        if albedo.shape[-1] != 3 or surfel_embed.shape[-1] != EMBED_DIM:
            raise ValueError("appearance inputs must be [S,3] and [S,24]")
        if image_embed.shape != (IMAGE_EMBED_DIM,):
            raise ValueError(f"image embedding must be [{IMAGE_EMBED_DIM}]")
        x = torch.cat([albedo, surfel_embed,
                       image_embed.unsqueeze(0).expand(albedo.shape[0], -1)], dim=-1)
        raw = self.net(x)
        return torch.exp(raw[:, :3]), raw[:, 3:]


def apply_affine(gamma: torch.Tensor, beta: torch.Tensor,
                 albedo: torch.Tensor) -> torch.Tensor:
    """rho_tilde = gamma * rho + beta, clamped to [0, 1] at the splat input.

    The clamp sits here (the rasterization entry) so gradients vanish exactly
    where the transform saturates, matching the forward clamp location.
    """
    return (gamma * albedo + beta).clamp(0.0, 1.0)


def make_image_embeddings(n_images: int, rng_seed: int = 0) -> torch.Tensor:
    """Per-image embeddings, zero-mean small-variance initialization."""
    gen = torch.Generator().manual_seed(rng_seed)
    return torch.randn(n_images, IMAGE_EMBED_DIM, generator=gen, dtype=DTYPE) * 0.01
