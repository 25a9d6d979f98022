"""Pre-norm transformer pieces shared by the vision and text branches."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


class NonFiniteError(FloatingPointError):
    pass


class BackwardError(RuntimeError):
    pass


def check_finite(x: torch.Tensor, where: str) -> None:
    if not torch.isfinite(x).all():
        raise NonFiniteError(f"non-finite values entering {where}")


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"head count {heads} does not divide width {dim}")
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, return_weights: bool = False):
        *lead, n, d = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)

        def split(t):
            return t.reshape(*lead, n, self.heads, self.head_dim).transpose(-3, -2)

        q, k, v = split(q), split(k), split(v)
        logits = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        # explicit max-subtraction keeps exp() in range for large logits
        logits = logits - logits.amax(dim=-1, keepdim=True).detach()
        weights = logits.exp()
        weights = weights / weights.sum(dim=-1, keepdim=True)
        y = (weights @ v).transpose(-3, -2).reshape(*lead, n, d)
        y = self.out(y)
        return (y, weights) if return_weights else y


class TransformerLayer(nn.Module):
    """x + Attn(LN(x)), then x + MLP(LN(x)). No masking, no dropout."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.dim = dim
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, mlp_ratio * dim)
        self.fc2 = nn.Linear(mlp_ratio * dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.dim:
            raise ValueError(f"token width {x.shape[-1]} does not match layer width {self.dim}")
        check_finite(x, "transformer layer")
        x = x + self.attn(self.norm1(x))
        x = x + self.fc2(F.gelu(self.fc1(self.norm2(x))))
        return x

    def attention_weights(self, x: torch.Tensor) -> torch.Tensor:
        return self.attn(self.norm1(x), return_weights=True)[1]


def transformer_layer(layer: TransformerLayer, seq: torch.Tensor) -> torch.Tensor:
    return layer(seq)


def patchify(images: torch.Tensor, patch_size: int) -> torch.Tensor:
    """(B, H, W, C) -> (B, K, p*p*C), patches in row-major order."""
    b, h, w, c = images.shape
    p = patch_size
    if h % p or w % p:
        raise ValueError(f"image {h}x{w} is not divisible by patch size {p}")
    x = images.reshape(b, h // p, p, w // p, p, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, (h // p) * (w // p), p * p * c)


class PatchEmbed(nn.Module):
    def __init__(self, image_size: int, patch_size: int, channels: int, dim: int):
        super().__init__()
        if image_size % patch_size:
            raise ValueError(f"image size {image_size} is not divisible by patch size {patch_size}")
        self.patch_size = patch_size
        self.num_patches = (image_size // patch_size) ** 2
        self.proj = nn.Linear(patch_size * patch_size * channels, dim)
        self.pos = nn.Parameter(torch.zeros(self.num_patches, dim))

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        tokens = self.proj(patchify(images, self.patch_size))
        if tokens.shape[1] != self.pos.shape[0]:
            raise ValueError(f"got {tokens.shape[1]} patches, positional table holds {self.pos.shape[0]}")
        return tokens + self.pos


def patch_embed(images: torch.Tensor, patch_size: int, projection: nn.Linear, positions: torch.Tensor):
    tokens = projection(patchify(images, patch_size))
    if tokens.shape[-2:] != positions.shape:
        raise ValueError(f"patch tokens {tuple(tokens.shape[-2:])} vs positions {tuple(positions.shape)}")
    return tokens + positions


def backward(loss: torch.Tensor, module: nn.Module) -> dict[str, torch.Tensor]:
    """Backpropagate ``loss`` and return gradients for every trainable tensor of ``module``.

    Frozen tensors (requires_grad=False) are left out. Tensors the loss does
    not depend on get explicit zeros.
    """
    if loss.grad_fn is None:
        raise BackwardError("no forward pass recorded for this loss; run a forward pass first")
    if loss.numel() != 1:
        raise BackwardError("loss must be a scalar")
    named = [(n, p) for n, p in module.named_parameters() if p.requires_grad]
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    out = {}
    for (name, p), g in zip(named, grads):
        g = torch.zeros_like(p) if g is None else g
        p.grad = g.clone() if p.grad is None else p.grad + g
        out[name] = g
    return out
