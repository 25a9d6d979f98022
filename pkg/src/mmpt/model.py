"""Three-branch MMPT model: vision encoder plus attribute and object text encoders."""

from __future__ import annotations

import zlib

import numpy as np
import torch
import torch.nn as nn

from .config import MMPTConfig
from .encoder import PatchEmbed, TransformerLayer, check_finite
from .prompts import PromptBank, apply_visual_prompt, build_text_input, center_placement, random_placements, run_branch
from .scores import ScoreTable

EPS = 1e-12
BRANCHES = ("attribute", "object")

# tensors that never train, whatever the partition
ALWAYS_FROZEN = ("attribute.fixed", "object.fixed")


class VisionBranch(nn.Module):
    def __init__(self, c: MMPTConfig):
        super().__init__()
        self.embed = PatchEmbed(c.image_size, c.patch_size, c.channels, c.d_v)
        self.cls = nn.Parameter(torch.zeros(c.d_v))
        self.layers = nn.ModuleList(TransformerLayer(c.d_v, c.heads_v, c.mlp_ratio) for _ in range(c.h_v))
        self.norm = nn.LayerNorm(c.d_v)


class TextBranch(nn.Module):
    def __init__(self, c: MMPTConfig, n_classes: int, depth: int):
        super().__init__()
        self.class_table = nn.Parameter(torch.zeros(n_classes, c.d_l))
        self.fixed = nn.Parameter(torch.zeros(c.n_fixed, c.d_l), requires_grad=False)
        self.layers = nn.ModuleList(TransformerLayer(c.d_l, c.heads_l, c.mlp_ratio) for _ in range(depth))
        self.norm = nn.LayerNorm(c.d_l)


def _tensor_seed(seed: int, name: str) -> int:
    ss = np.random.SeedSequence([int(seed), zlib.crc32(name.encode())])
    return int(ss.generate_state(1, np.uint64)[0] >> 1)


def init_parameters(model: nn.Module, seed: int) -> None:
    """Deterministic per-tensor init keyed on (seed, tensor name).

    Keying on the name keeps shared tensors identical across model variants
    that add or drop other tensors.
    """
    kinds = {}
    for mod_name, mod in model.named_modules():
        prefix = f"{mod_name}." if mod_name else ""
        if isinstance(mod, nn.Linear):
            kinds[prefix + "weight"] = ("uniform", 1.0 / np.sqrt(mod.in_features))
            kinds[prefix + "bias"] = ("const", 0.0)
        elif isinstance(mod, nn.LayerNorm):
            kinds[prefix + "weight"] = ("const", 1.0)
            kinds[prefix + "bias"] = ("const", 0.0)
    with torch.no_grad():
        for name, p in model.named_parameters():
            kind, scale = kinds.get(name, ("normal", 1.0))
            if name.endswith("embed.pos") or name.endswith("vision.cls"):
                kind, scale = "normal", 0.02
            if kind == "const":
                p.fill_(scale)
                continue
            g = torch.Generator().manual_seed(_tensor_seed(seed, name))
            if kind == "uniform":
                v = (torch.rand(p.shape, generator=g, dtype=torch.float64) * 2 - 1) * scale
            else:
                v = torch.randn(p.shape, generator=g, dtype=torch.float64) * scale
            p.copy_(v.to(p.dtype))


def cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise cosine between rows of a (n, d) and rows of b (k, d) -> (n, k)."""
    an = a / a.norm(dim=-1, keepdim=True).clamp_min(EPS)
    bn = b / b.norm(dim=-1, keepdim=True).clamp_min(EPS)
    # broadcast product rather than a matmul so a row never depends on the batch size
    return (an.unsqueeze(-2) * bn.unsqueeze(-3)).sum(-1)


def rowwise(module: nn.Module, x: torch.Tensor) -> torch.Tensor:
    """Apply a linear map so each row's result does not depend on the batch size.

    BLAS switches to a matrix-vector kernel for a single row, which sums in a
    different order; the broadcast product keeps one reduction order for all B.
    """
    if isinstance(module, nn.Linear):
        out = (x.unsqueeze(-2) * module.weight).sum(-1)
        return out if module.bias is None else out + module.bias
    return module(x)


def score(z: torch.Tensor, Y: torch.Tensor, omega: nn.Module, nu: nn.Module, tau: float) -> torch.Tensor:
    """softmax_k( cos(omega(Y_k), nu(z)) / tau ); z is (B, d_v) or (d_v,).

    The softmax runs in float64: at tau=0.01 the logit gap reaches 200 and
    float32 would underflow the smallest probabilities to exactly zero.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    single = z.dim() == 1
    logits = cosine(rowwise(nu, z.reshape(-1, z.shape[-1])), rowwise(omega, Y)).double() / tau
    probs = torch.softmax(logits, dim=-1)
    return probs[0] if single else probs


class MMPT(nn.Module):
    def __init__(self, config: MMPTConfig):
        super().__init__()
        self.config = config
        c = config
        self.vision = VisionBranch(c)
        self.attribute = TextBranch(c, c.n_attributes, c.h_a)
        self.object = TextBranch(c, c.n_objects, c.h_o)
        self.prompts = PromptBank(c)
        self.omega = nn.Linear(c.d_l, c.d_joint)
        self.nu = nn.Linear(c.d_v, c.d_joint)
        init_parameters(self, c.seed)
        if c.dtype == "float64":
            self.double()

    @property
    def dtype(self) -> torch.dtype:
        return self.omega.weight.dtype

    def as_tensor(self, images) -> torch.Tensor:
        x = torch.as_tensor(np.asarray(images) if not torch.is_tensor(images) else images, dtype=self.dtype)
        if x.dim() == 3:
            x = x.unsqueeze(0)
        c = self.config
        if x.shape[1:] != (c.image_size, c.image_size, c.channels):
            raise ValueError(f"images have shape {tuple(x.shape[1:])}, model expects "
                             f"{(c.image_size, c.image_size, c.channels)}")
        return x

    def placements(self, n: int, rng: np.random.Generator | None):
        c = self.config
        if rng is None:
            return center_placement(c.image_size, c.prompt_patch_size)
        return random_placements(rng, n, c.image_size, c.prompt_patch_size)

    def forward_vision(self, images, rng: np.random.Generator | None = None, placements=None) -> torch.Tensor:
        """Final vision readout z for each image, (B, d_v).

        ``rng`` given: random prompt placement per image (training); otherwise the
        prompt sits at the image center unless explicit ``placements`` are passed.
        """
        x = self.as_tensor(images)
        check_finite(x, "vision branch")
        if self.prompts.phi is not None:
            if placements is None:
                placements = self.placements(x.shape[0], rng)
            x = apply_visual_prompt(x, self.prompts.phi, placements, self.config.phi_mode)
        body = self.vision.embed(x)
        readout = self.vision.cls.expand(x.shape[0], 1, -1)
        z = run_branch(self.vision.layers, self.prompts, "vision", body, readout)
        return self.vision.norm(z)

    def forward_text(self, branch: str) -> torch.Tensor:
        """Final readouts for every class of one text branch, (n_classes, d_l)."""
        if branch not in BRANCHES:
            raise ValueError(f"unknown text branch {branch!r}")
        tb = getattr(self, branch)
        ctx = getattr(self.prompts, f"ctx_{branch}")
        body, readout = build_text_input(tb.class_table, ctx, tb.fixed)
        y = run_branch(tb.layers, self.prompts, branch, body, readout)
        return tb.norm(y)

    def forward(self, images, rng: np.random.Generator | None = None, placements=None):
        """(rho_a, rho_o) probability tensors of shape (B, |A|) and (B, |O|)."""
        z = self.forward_vision(images, rng, placements)
        Ya = self.forward_text("attribute")
        Yo = self.forward_text("object")
        tau = self.config.tau
        return score(z, Ya, self.omega, self.nu, tau), score(z, Yo, self.omega, self.nu, tau)

    @torch.no_grad()
    def score_table(self, images, sample_ids=None, labels=None, space=None, batch_size: int = 256) -> ScoreTable:
        """Eval-mode forward (centered visual prompt) over a whole image array."""
        x = self.as_tensor(images)
        n = x.shape[0]
        if n == 0:
            raise ValueError("empty batch")
        Ya = self.forward_text("attribute")
        Yo = self.forward_text("object")
        ra, ro = [], []
        for i in range(0, n, batch_size):
            z = self.forward_vision(x[i:i + batch_size])
            ra.append(score(z, Ya, self.omega, self.nu, self.config.tau))
            ro.append(score(z, Yo, self.omega, self.nu, self.config.tau))
        if space is not None:
            attrs, objs = list(space.attributes.names), list(space.objects.names)
        else:
            attrs = [f"a{i}" for i in range(self.config.n_attributes)]
            objs = [f"o{i}" for i in range(self.config.n_objects)]
        ids = list(range(n)) if sample_ids is None else list(sample_ids)
        return ScoreTable(attrs, objs, ids, torch.cat(ra).double().numpy(), torch.cat(ro).double().numpy(),
                          labels, space=space)


def forward_batch(model: MMPT, images, **kwargs) -> ScoreTable:
    return model.score_table(images, **kwargs)

