"""Learnable prompt structures and the front/tail token flow through a branch.

Token layout inside every layer is ``[prompt slots, body tokens, readout]``.
Front layers (1..h_s) get a freshly projected shared prompt and drop the
prompt outputs; tail layers (> h_s) carry the prompt outputs forward.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from .config import MMPTConfig

MODALITIES = ("vision", "attribute", "object")


class PromptError(ValueError):
    pass


class PromptBank(nn.Module):
    """Shared prompts t_1..t_{h_s}, per-modality projectors, the pixel patch prompt and context tokens."""

    def __init__(self, config: MMPTConfig):
        super().__init__()
        c = config
        self.h_s = c.h_s if c.shared_active else 0
        self.prompt_len = c.prompt_len if c.shared_active else 0
        self.per_layer = c.per_layer_projectors
        if c.shared_active:
            self.shared = nn.Parameter(torch.zeros(c.h_s, c.prompt_len, c.d_s))
            widths = {"vision": c.d_v, "attribute": c.d_l, "object": c.d_l}
            for m in MODALITIES:
                if self.per_layer:
                    proj = nn.ModuleList(nn.Linear(c.d_s, widths[m]) for _ in range(c.h_s))
                else:
                    proj = nn.Linear(c.d_s, widths[m])
                self.add_module(f"proj_{m}", proj)
        else:
            self.shared = None
        if c.use_visual_prompt:
            p = c.prompt_patch_size
            self.phi = nn.Parameter(torch.zeros(p, p, c.channels))
        else:
            self.phi = None
        self.ctx_attribute = nn.Parameter(torch.zeros(c.n_ctx, c.d_l))
        self.ctx_object = nn.Parameter(torch.zeros(c.n_ctx, c.d_l))

    def projector(self, modality: str, layer_idx: int) -> nn.Linear:
        proj = getattr(self, f"proj_{modality}")
        return proj[layer_idx - 1] if self.per_layer else proj


def project_shared(bank: PromptBank, layer_idx: int, modality: str) -> torch.Tensor:
    """g_m(t_i): the L_p x width prompt block for one layer of one branch (layer_idx is 1-based)."""
    if modality not in MODALITIES:
        raise PromptError(f"unknown modality {modality!r}")
    if bank.shared is None:
        raise PromptError("shared prompts are disabled for this model")
    if not 1 <= layer_idx <= bank.h_s:
        raise PromptError(f"no shared prompt at layer {layer_idx}; defined for layers 1..{bank.h_s}")
    return bank.projector(modality, layer_idx)(bank.shared[layer_idx - 1])


def center_placement(image_size: int, p: int) -> tuple[int, int]:
    off = (image_size - p) // 2
    return off, off


def random_placements(rng: np.random.Generator, n: int, image_size: int, p: int) -> list[tuple[int, int]]:
    hi = image_size - p + 1
    ys = rng.integers(0, hi, size=n)
    xs = rng.integers(0, hi, size=n)
    return [(int(y), int(x)) for y, x in zip(ys, xs)]


def apply_visual_prompt(images: torch.Tensor, phi: torch.Tensor, placements, mode: str = "single") -> torch.Tensor:
    """Add phi to one p x p region per image (no re-clamping).

    ``images`` is (B, H, W, C); ``placements`` is one (row, col) per image, or a
    single pair used for the whole batch. ``mode="all_patches"`` tiles phi over
    every patch instead.
    """
    b, h, w, c = images.shape
    p = phi.shape[0]
    if p > h or p > w:
        raise PromptError(f"visual prompt {p}x{p} does not fit a {h}x{w} image")
    if mode == "all_patches":
        if h % p or w % p:
            raise PromptError("image is not tiled evenly by the visual prompt")
        return images + phi.repeat(h // p, w // p, 1)
    if isinstance(placements, tuple):
        placements = [placements] * b
    if len(placements) != b:
        raise PromptError(f"{len(placements)} placements for a batch of {b}")
    canvases = []
    for y, x in placements:
        if not (0 <= y <= h - p and 0 <= x <= w - p):
            raise PromptError(f"placement ({y}, {x}) puts the prompt outside the image")
        # pad (C, W, H) dims in reverse order: channels untouched
        canvases.append(nn.functional.pad(phi, (0, 0, x, w - p - x, y, h - p - y)))
    return images + torch.stack(canvases)


def _expand(prompt: torch.Tensor, batch: int) -> torch.Tensor:
    return prompt.unsqueeze(0).expand(batch, *prompt.shape)


def front_layer_step(layer, prompt: torch.Tensor, body: torch.Tensor, readout: torch.Tensor):
    """One prompted layer: run on [prompt, body, readout], discard the prompt outputs.

    body is (B, n, d), readout is (B, 1, d), prompt is (L_p, d) shared across the batch.
    """
    if prompt.shape[-1] != body.shape[-1]:
        raise PromptError(f"prompt width {prompt.shape[-1]} does not match branch width {body.shape[-1]}")
    lp = prompt.shape[0]
    out = layer(torch.cat([_expand(prompt, body.shape[0]), body, readout], dim=1))
    return out[:, lp:-1], out[:, -1:]


def tail_layer_step(layer, carried: torch.Tensor, body: torch.Tensor, readout: torch.Tensor,
                    layer_idx: int | None = None, h_s: int | None = None):
    """One carry-through layer: prompt outputs become the next layer's prompts."""
    if layer_idx is not None and h_s is not None and layer_idx <= h_s:
        raise PromptError(f"layer {layer_idx} is a front layer (h_s={h_s}); tail steps start at h_s + 1")
    if carried.shape[-1] != body.shape[-1]:
        raise PromptError("carried prompt width does not match branch width")
    lp = carried.shape[1]
    out = layer(torch.cat([carried, body, readout], dim=1))
    return out[:, :lp], out[:, lp:-1], out[:, -1:]


def run_branch(layers, bank: PromptBank | None, modality: str, body: torch.Tensor, readout: torch.Tensor):
    """Push body+readout through all layers of one branch; returns the final readout (B, d)."""
    shared = bank is not None and bank.shared is not None
    h_s = bank.h_s if shared else 0
    carried = None
    for i, layer in enumerate(layers, start=1):
        if not shared:
            out = layer(torch.cat([body, readout], dim=1))
            body, readout = out[:, :-1], out[:, -1:]
        elif i <= h_s:
            body, readout = front_layer_step(layer, project_shared(bank, i, modality), body, readout)
        else:
            if carried is None:
                carried = _expand(project_shared(bank, h_s, modality), body.shape[0])
            carried, body, readout = tail_layer_step(layer, carried, body, readout, i, h_s)
    return readout[:, 0]


def build_text_input(class_table: torch.Tensor, ctx: torch.Tensor, fixed: torch.Tensor, class_idx=None):
    """Per-class sequences: body = [v_1..v_m, W], readout = the class embedding row.

    Returns body (n, m + n_fixed, d) and readout (n, 1, d) for the requested
    classes (all classes when class_idx is None).
    """
    n_cls = class_table.shape[0]
    if class_idx is None:
        idx = torch.arange(n_cls)
    else:
        idx = torch.as_tensor(class_idx).reshape(-1)
        if ((idx < 0) | (idx >= n_cls)).any():
            raise PromptError(f"class index out of range [0, {n_cls})")
    body = torch.cat([ctx, fixed], dim=0)
    body = body.unsqueeze(0).expand(len(idx), *body.shape)
    readout = class_table[idx].unsqueeze(1)
    return body, readout
