"""Losses, optimizers, learning-rate schedule, and the end-to-end
single-stage training loop.

The total objective is the distortion cross-entropy plus lambda times the
squared quality-score error; single-task variants (a, b) train on the score
term alone.  Optimization runs at batch size 1 by default with Adam and a
stepwise learning-rate decay applied after every block of three epochs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .checkpoint import load_moments, read_checkpoint, save_checkpoint
from .dataset import DatasetManifest
from .model import MultiTaskIQANet
from .patches import hflip_augment, iterate_training, manifest_patches


class TrainingError(RuntimeError):
    pass


class DivergenceError(TrainingError):
    """Non-finite loss or gradient encountered during training."""


@dataclass
class TrainConfig:
    epochs: int = 50
    lr0: float = 2e-4
    lr_decay: float = 0.98
    decay_every: int = 3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    lambda_: float = 1.0
    batch_size: int = 1
    seed: int = 0
    optimizer: str = "adam"
    momentum: float = 0.9
    grad_clip: Optional[float] = None
    augment_hflip: bool = True
    checkpoint_every: int = 0
    num_threads: Optional[int] = None  # pin torch CPU threads for the run

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        for name in ("lr0", "lr_decay", "adam_beta1", "adam_beta2", "adam_epsilon"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.lambda_ < 0:
            raise ValueError("lambda_ must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.decay_every < 1:
            raise ValueError("decay_every must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ValueError("grad_clip must be positive when set")


# -- losses -------------------------------------------------------------------


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def cross_entropy(d_logits, class_index: int) -> torch.Tensor:
    """-log softmax(d)[c] with max-subtraction; class_index is 1-based."""
    d = _as_tensor(d_logits)
    if d.dim() != 1:
        raise ValueError(f"expected a logit vector, got shape {tuple(d.shape)}")
    m = d.shape[0]
    if not 1 <= class_index <= m:
        raise ValueError(f"class index {class_index} out of range 1..{m}")
    return torch.logsumexp(d, dim=0) - d[class_index - 1]


def l2_loss(s, g_d) -> torch.Tensor:
    diff = _as_tensor(s) - _as_tensor(g_d)
    return diff * diff


def total_loss(d_logits, class_index, s, g_d, lambda_: float = 1.0) -> torch.Tensor:
    """Cross-entropy plus lambda * squared score error.

    When `d_logits` is None (single-task variants) the score term alone is
    the objective.
    """
    ls = l2_loss(s, g_d)
    if d_logits is None:
        return ls
    return cross_entropy(d_logits, class_index) + lambda_ * ls


def batch_losses(
    d_logits: Optional[torch.Tensor],
    class_indices: torch.Tensor,
    s: torch.Tensor,
    g_d: torch.Tensor,
    lambda_: float,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Per-sample (L_d, L_s, L_total) vectors for a batch."""
    ls = (s - g_d) ** 2
    if d_logits is None:
        return torch.zeros_like(ls), ls, ls
    lse = torch.logsumexp(d_logits, dim=1)
    picked = d_logits[torch.arange(d_logits.shape[0]), class_indices - 1]
    ld = lse - picked
    return ld, ls, ld + lambda_ * ls


def lr_at(epoch: int, config: TrainConfig) -> float:
    """lr0 * decay^floor((epoch - 1) / decay_every), epoch counted from 1."""
    if epoch < 1:
        raise ValueError("epoch must be >= 1")
    return config.lr0 * config.lr_decay ** ((epoch - 1) // config.decay_every)


# -- optimizers ----------------------------------------------------------------


def _check_finite_grads(names: list[str], grads: list[torch.Tensor]) -> None:
    norms = torch._foreach_norm(grads)
    if torch.isfinite(torch.stack(norms)).all():
        return
    for name, g in zip(names, grads):
        if not torch.isfinite(g).all():
            raise DivergenceError(f"non-finite gradient for parameter {name}")
    raise DivergenceError("gradient norm overflow")


class Adam:
    """Bias-corrected Adam over named parameters."""

    slots = ("m", "v")

    def __init__(self, params: dict[str, torch.Tensor], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {n: torch.zeros_like(p) for n, p in params.items()}
        self.v = {n: torch.zeros_like(p) for n, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        names = [n for n, p in self.params.items() if p.grad is not None]
        if not names:
            return
        with torch.no_grad():
            ps = [self.params[n] for n in names]
            gs = [self.params[n].grad for n in names]
            _check_finite_grads(names, gs)
            ms = [self.m[n] for n in names]
            vs = [self.v[n] for n in names]
            # m <- b1*m + (1-b1)*g ; v <- b2*v + (1-b2)*g^2
            torch._foreach_mul_(ms, self.beta1)
            torch._foreach_add_(ms, gs, alpha=1.0 - self.beta1)
            torch._foreach_mul_(vs, self.beta2)
            torch._foreach_addcmul_(vs, gs, gs, value=1.0 - self.beta2)
            # p <- p - lr * (m/bc1) / (sqrt(v/bc2) + eps)
            denom = torch._foreach_div(vs, bc2)
            torch._foreach_sqrt_(denom)
            torch._foreach_add_(denom, self.eps)
            update = torch._foreach_div(ms, denom)
            torch._foreach_add_(ps, update, alpha=-lr / bc1)

    def moments(self) -> dict[str, dict[str, torch.Tensor]]:
        return {n: {"m": self.m[n], "v": self.v[n]} for n in self.params}

    def load_moments(self, moments: dict[str, dict[str, torch.Tensor]], t: int) -> None:
        self.t = t
        for name in self.params:
            self.m[name] = moments[name]["m"].clone().to(self.params[name].dtype)
            self.v[name] = moments[name]["v"].clone().to(self.params[name].dtype)


class MomentumSGD:
    """SGD with classical momentum (buffer u <- mu * u + g; p <- p - lr * u)."""

    slots = ("u",)

    def __init__(self, params: dict[str, torch.Tensor], momentum=0.9):
        self.params = params
        self.momentum = momentum
        self.t = 0
        self.u = {n: torch.zeros_like(p) for n, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float) -> None:
        self.t += 1
        names = [n for n, p in self.params.items() if p.grad is not None]
        if not names:
            return
        with torch.no_grad():
            ps = [self.params[n] for n in names]
            gs = [self.params[n].grad for n in names]
            _check_finite_grads(names, gs)
            us = [self.u[n] for n in names]
            torch._foreach_mul_(us, self.momentum)
            torch._foreach_add_(us, gs)
            torch._foreach_add_(ps, us, alpha=-lr)

    def moments(self) -> dict[str, dict[str, torch.Tensor]]:
        return {n: {"u": self.u[n]} for n in self.params}

    def load_moments(self, moments: dict[str, dict[str, torch.Tensor]], t: int) -> None:
        self.t = t
        for name in self.params:
            self.u[name] = moments[name]["u"].clone().to(self.params[name].dtype)


def make_optimizer(config: TrainConfig, params: dict[str, torch.Tensor]):
    if config.optimizer == "adam":
        return Adam(params, config.adam_beta1, config.adam_beta2, config.adam_epsilon)
    return MomentumSGD(params, config.momentum)


# -- training loop ---------------------------------------------------------------


@dataclass
class TrainState:
    epoch: int
    optimizer: str
    step_count: int
    moments: dict
    seed: int
    classes: dict[int, str] = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)


def save_train_checkpoint(path, model: MultiTaskIQANet, state: TrainState) -> None:
    training = {
        "epoch": state.epoch,
        "optimizer": state.optimizer,
        "step_count": state.step_count,
        "seed": state.seed,
        "classes": {str(k): v for k, v in state.classes.items()},
        "history": state.history,
    }
    save_checkpoint(path, model, training=training, moments=state.moments)


def load_train_state(path) -> TrainState:
    header, _, _ = read_checkpoint(path)
    training = header.get("training")
    if not training:
        raise TrainingError(f"{path}: checkpoint has no training state to resume from")
    return TrainState(
        epoch=int(training["epoch"]),
        optimizer=training["optimizer"],
        step_count=int(training["step_count"]),
        moments=load_moments(path),
        seed=int(training["seed"]),
        classes={int(k): v for k, v in training.get("classes", {}).items()},
        history=list(training.get("history", [])),
    )


def train(
    model: MultiTaskIQANet,
    manifest: DatasetManifest,
    config: TrainConfig,
    log_path=None,
    checkpoint_path=None,
    resume: Optional[TrainState] = None,
) -> tuple[TrainState, list[dict]]:
    """Single-stage end-to-end optimization of the joint loss.

    Emits one history entry per epoch with the mean distortion, score, and
    total losses plus the learning rate; the same line is appended to
    `log_path` as JSON when given.  A non-finite loss or gradient aborts the
    run, persisting the last completed epoch's checkpoint if a path was
    provided.
    """
    config.validate()
    if not manifest.records:
        raise ValueError("training manifest is empty")
    if model.config.has_distortion_head and model.config.num_distortions != len(manifest.classes):
        raise ValueError(
            f"model expects {model.config.num_distortions} distortion classes, "
            f"manifest has {len(manifest.classes)}"
        )

    if config.num_threads is not None:
        torch.set_num_threads(config.num_threads)

    patch_list = manifest_patches(manifest, model.config.patch_side)
    patch_list = hflip_augment(patch_list, config.augment_hflip)

    params = dict(model.named_parameters())
    opt = make_optimizer(config, params)
    history: list[dict] = []
    start_epoch = 1
    if resume is not None:
        if resume.optimizer != config.optimizer:
            raise TrainingError(
                f"resume state used optimizer {resume.optimizer!r}, config wants {config.optimizer!r}"
            )
        opt.load_moments(resume.moments, resume.step_count)
        start_epoch = resume.epoch + 1
        history = list(resume.history)

    log_fh = open(log_path, "a", encoding="utf-8") if log_path is not None else None

    def current_state(epoch_done: int) -> TrainState:
        return TrainState(
            epoch=epoch_done,
            optimizer=config.optimizer,
            step_count=opt.t,
            moments=opt.moments(),
            seed=config.seed,
            classes=dict(manifest.classes),
            history=history,
        )

    state = current_state(start_epoch - 1)
    # in-memory snapshot of the last completed epoch, written out if the
    # loss later goes non-finite
    snapshot = None
    if checkpoint_path is not None:
        snapshot = (
            {n: p.detach().clone() for n, p in params.items()},
            {n: {k: t.clone() for k, t in s.items()} for n, s in opt.moments().items()},
            state,
        )

    def abort(message: str):
        if checkpoint_path is not None and snapshot is not None:
            good_params, good_moments, good_state = snapshot
            with torch.no_grad():
                for name, p in params.items():
                    p.copy_(good_params[name])
            good_state.moments = good_moments
            save_train_checkpoint(checkpoint_path, model, good_state)
        raise DivergenceError(message)

    try:
        for epoch in range(start_epoch, config.epochs + 1):
            lr = lr_at(epoch, config)
            sum_ld = sum_ls = sum_lt = 0.0
            n_samples = 0
            for batch in iterate_training(
                patch_list, epoch=epoch, seed=config.seed, batch_size=config.batch_size
            ):
                x = torch.from_numpy(np.stack([p.pixels for p in batch]))
                c = torch.tensor([p.distortion_index for p in batch], dtype=torch.long)
                g = torch.tensor([p.score for p in batch], dtype=torch.float32)
                d, s = model(x)
                ld, ls, lt = batch_losses(d, c, s, g, config.lambda_)
                loss = lt.mean()
                if not torch.isfinite(loss):
                    abort(f"non-finite loss at epoch {epoch}; last good epoch {state.epoch}")
                opt.zero_grad()
                loss.backward()
                if config.grad_clip is not None:
                    torch.nn.utils.clip_grad_norm_(params.values(), config.grad_clip)
                try:
                    opt.step(lr)
                except DivergenceError as exc:
                    abort(f"{exc} at epoch {epoch}; last good epoch {state.epoch}")
                sum_ld += float(ld.sum())
                sum_ls += float(ls.sum())
                sum_lt += float(lt.sum())
                n_samples += len(batch)

            entry = {
                "epoch": epoch,
                "mean_ld": sum_ld / n_samples,
                "mean_ls": sum_ls / n_samples,
                "mean_ltotal": sum_lt / n_samples,
                "lr": lr,
            }
            if not math.isfinite(entry["mean_ltotal"]):
                abort(f"non-finite mean loss at epoch {epoch}; last good epoch {state.epoch}")
            history.append(entry)
            if log_fh is not None:
                log_fh.write(json.dumps(entry) + "\n")
                log_fh.flush()

            state = current_state(epoch)
            if checkpoint_path is not None:
                snapshot = (
                    {n: p.detach().clone() for n, p in params.items()},
                    {n: {k: t.clone() for k, t in s.items()} for n, s in opt.moments().items()},
                    state,
                )
            if config.checkpoint_every and epoch % config.checkpoint_every == 0:
                save_train_checkpoint(checkpoint_path, model, state)
        if checkpoint_path is not None:
            save_train_checkpoint(checkpoint_path, model, state)
    finally:
        if log_fh is not None:
            log_fh.close()
    return state, history
