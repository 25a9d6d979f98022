"""Joint attribute + object cross-entropy and the Adam training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .encoder import backward
from .model import ALWAYS_FROZEN, MMPT
from .synthetic import Dataset

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
PROB_FLOOR = 1e-30

# prompt-tune trains only these (by name prefix)
PROMPT_TUNE_PREFIXES = ("prompts.", "omega.", "nu.")


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass(frozen=True)
class ParamPartition:
    trainable: tuple[str, ...]
    frozen: tuple[str, ...]


def make_partition(model: MMPT, preset: str = "toy-full") -> ParamPartition:
    """Split model tensors into trainable/frozen sets and set requires_grad accordingly.

    ``toy-full`` trains everything except the fixed template tokens,
    ``prompt-tune`` trains prompts, projectors, phi, context tokens and the
    two scoring projections, ``frozen`` trains nothing.
    """
    trainable, frozen = [], []
    for name, p in model.named_parameters():
        if name in ALWAYS_FROZEN or preset == "frozen":
            train = False
        elif preset == "toy-full":
            train = True
        elif preset == "prompt-tune":
            train = name.startswith(PROMPT_TUNE_PREFIXES)
        else:
            raise ValueError(f"unknown partition preset {preset!r}")
        p.requires_grad_(train)
        (trainable if train else frozen).append(name)
    return ParamPartition(tuple(trainable), tuple(frozen))


def composition_loss(rho_a: torch.Tensor, rho_o: torch.Tensor, labels, reduction: str = "mean"):
    """-log rho_o(o) - log rho_a(a) per sample; mean over the batch by default."""
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long).reshape(-1, 2)
    idx = torch.arange(labels.shape[0])
    pa = rho_a[idx, labels[:, 0]]
    po = rho_o[idx, labels[:, 1]]
    n_clamped = int((pa < PROB_FLOOR).sum() + (po < PROB_FLOOR).sum())
    if n_clamped:
        log.debug("clamped %d probabilities at %g before log", n_clamped, PROB_FLOOR)
    per = -torch.log(pa.clamp_min(PROB_FLOOR)) - torch.log(po.clamp_min(PROB_FLOOR))
    return per.mean() if reduction == "mean" else per


@dataclass
class TrainState:
    step: int
    seed: int
    param_names: tuple[str, ...]
    optimizer: torch.optim.Adam | None
    loss_ema: float | None = None
    history: list = field(default_factory=list)
    # "random" places the visual prompt anywhere in each training image, "center" uses the eval placement
    placement: str = "random"

    def moments(self, model: MMPT) -> dict[str, dict[str, torch.Tensor]]:
        if self.optimizer is None:
            return {}
        params = dict(model.named_parameters())
        out = {}
        for name in self.param_names:
            st = self.optimizer.state.get(params[name])
            if st:
                out[name] = {"exp_avg": st["exp_avg"], "exp_avg_sq": st["exp_avg_sq"],
                             "step": torch.as_tensor(st["step"], dtype=torch.float64).reshape(1)}
        return out

    def load_moments(self, model: MMPT, moments: dict) -> None:
        if self.optimizer is None:
            return
        params = dict(model.named_parameters())
        for name, st in moments.items():
            p = params[name]
            self.optimizer.state[p] = {
                "step": torch.tensor(float(st["step"].reshape(-1)[0]), dtype=torch.float32),
                "exp_avg": st["exp_avg"].to(p.dtype).clone(),
                "exp_avg_sq": st["exp_avg_sq"].to(p.dtype).clone(),
            }


def init_state(model: MMPT, lr: float, seed: int = 0, partition: str = "toy-full",
               placement: str = "random") -> TrainState:
    if placement not in ("random", "center"):
        raise ValueError(f"unknown placement {placement!r}")
    part = make_partition(model, partition)
    params = dict(model.named_parameters())
    opt = None
    if part.trainable:
        opt = torch.optim.Adam([params[n] for n in part.trainable], lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS,
                               foreach=False)
    return TrainState(0, int(seed), part.trainable, opt, placement=placement)


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), 7, int(step)])


def batch_indices(n: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Indices for one step from an endless stream of seeded epoch permutations."""
    start = step * batch_size
    out = []
    while len(out) < batch_size:
        epoch, offset = divmod(start + len(out), n)
        perm = np.random.default_rng([int(seed), 1, epoch]).permutation(n)
        out.extend(perm[offset:offset + batch_size - len(out)].tolist())
    return np.asarray(out)


def train_step(state: TrainState, model: MMPT, images, labels) -> dict:
    """One forward, backward and Adam update on the trainable tensors."""
    if len(labels) == 0:
        raise ValueError("empty batch")
    rng = step_rng(state.seed, state.step) if state.placement == "random" else None
    rho_a, rho_o = model(images, rng=rng)
    loss = composition_loss(rho_a, rho_o, labels)
    if not torch.isfinite(loss):
        raise NonFiniteLossError(f"non-finite loss at step {state.step}; update skipped")
    grad_norm = 0.0
    if state.optimizer is not None:
        state.optimizer.zero_grad(set_to_none=True)
        grads = backward(loss, model)
        grad_norm = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads.values()))
        state.optimizer.step()
    value = float(loss.detach())
    state.loss_ema = value if state.loss_ema is None else 0.9 * state.loss_ema + 0.1 * value
    state.step += 1
    return {"step": state.step, "loss": value, "grad_norm": grad_norm}


def train_loop(model: MMPT, state: TrainState, train: Dataset, steps: int, batch_size: int,
               eval_hook=None, eval_every: int = 100, on_record=None) -> list:
    """Run ``steps`` more optimization steps; returns the history records.

    ``eval_hook(model)`` must return a dict of metrics; it runs every
    ``eval_every`` steps and after the last step.
    """
    labels_seen = {c.as_tuple() for c in train.space.seen}
    if any(tuple(l) not in labels_seen for l in train.labels().tolist()):
        raise ValueError("training data contains compositions outside the seen split")
    images = torch.as_tensor(train.images(), dtype=model.dtype)
    labels = train.labels()
    history = []
    end = state.step + steps
    while state.step < end:
        idx = batch_indices(len(train), batch_size, state.seed, state.step)
        record = train_step(state, model, images[idx], labels[idx])
        history.append(record)
        if on_record:
            on_record(record)
        if eval_hook is not None and (state.step % eval_every == 0 or state.step == end):
            with torch.no_grad():
                metrics = eval_hook(model)
            entry = {"step": state.step, **metrics}
            history.append(entry)
            if on_record:
                on_record(entry)
    state.history.extend(history)
    return history


def train_accuracy(model: MMPT, data: Dataset) -> float:
    """Open-world composition accuracy on a dataset (eval-mode prompt placement)."""
    from .metrics import predict_open_world_batch

    table = model.score_table(data.images())
    pred = predict_open_world_batch(table.composition_scores())
    return float(np.mean(np.all(pred == data.labels(), axis=1)))
