"""Trainers: vanilla, adversarial (one-step / multi-step), and the
curvature-regularized variants, plus the SGD loop around them.

The regularized objective is

    L(x + eps * g) + lambda * mean_i || grad_x L(x + h*g)_i - grad_x L(x)_i ||_2

with g = sgn(grad_x L(x)) held constant with respect to the weights. The
two inner input-gradients are built with graph construction enabled, so the
optimizer's weight gradient differentiates straight through them.

Per-step gradient-pass budget (observable via autodiff.passes):

    vanilla        1 first-order
    adv-fgsm       2 first-order            (attack + update)
    adv-pgd(k)     k+1 first-order
    adv-fgsmr      3 first-order + 1 second-order backward
    cure           3 first-order + 1 second-order backward
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import metrics
from .attacks import AttackSpec, run_attack_batch
from .data import BatchPlan, LabeledDataset, augment_batch, batches
from .models import Checkpoint, Model, param_leaves, save_checkpoint, load_checkpoint

METHODS = ("vanilla", "adv-fgsm", "adv-pgd", "adv-fgsmr", "cure")


class TrainError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    method: str
    eps: float = 0.1
    lam: float = 4.0              # regularizer strength
    h: float | None = None        # finite-difference step; None -> eps
    attack: AttackSpec | None = None   # inner-maximization override
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_schedule: str = "step"     # x0.1 at 50% and 75% of epochs, or "none"
    epochs: int = 10
    batch: BatchPlan = field(default_factory=lambda: BatchPlan(64))
    eval_every_epoch: bool = False
    eval_attack_k: int = 20
    curvature_sample: int = 512
    clip_train_adv: bool = True   # clip training-time adversarial inputs
    augment: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise TrainError(f"unknown training method {self.method!r}")
        if self.eps < 0 or self.lam < 0:
            raise TrainError("eps and lambda must be >= 0")
        if self.lr_schedule not in ("step", "none"):
            raise TrainError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.epochs < 0:
            raise TrainError("epochs must be >= 0")
        if self.method in ("adv-fgsmr", "cure") and self.resolved_h() <= 0:
            raise TrainError("h must be > 0 for curvature-regularized methods")

    def resolved_h(self) -> float:
        return self.eps if self.h is None else self.h

    def inner_attack(self) -> AttackSpec:
        if self.attack is not None:
            return self.attack
        if self.method == "adv-pgd":
            return AttackSpec(variant="pgd", norm="linf", eps=self.eps, k=20,
                              clip=self.clip_train_adv)
        return AttackSpec(variant="fgsm", eps=self.eps,
                          clip=self.clip_train_adv)


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    reg_value: float | None       # mean regularizer, None if not computed
    clean_acc: float | None
    pgd_acc: float | None
    avg_curvature: float | None
    wall_time_s: float            # step-loop time only; evaluation excluded

    def __post_init__(self):
        if self.wall_time_s <= 0:
            raise TrainError("wall time must be > 0")
        for a in (self.clean_acc, self.pgd_acc):
            if a is not None and not 0.0 <= a <= 1.0:
                raise TrainError(f"accuracy {a} outside [0,1]")


# ---------------------------------------------------------------------------
# optimizer: SGD with classical momentum and coupled weight decay
# ---------------------------------------------------------------------------

def sgd_step(model: Model, grads: dict[str, np.ndarray], state: dict,
             lr: float, momentum: float, weight_decay: float
             ) -> tuple[Model, dict]:
    new_vals = {}
    new_state = {}
    for name, p in model.params:
        g = grads[name]
        if weight_decay:
            g = g + weight_decay * p
        v = momentum * state.get(name, 0.0) + g
        new_state[name] = v
        new_vals[name] = p - lr * v
    return model.with_params(model.params.replace(new_vals)), new_state


def _update(model: Model, loss_expr, leaves, state, lr, momentum, wd):
    grads = ad.gradient(loss_expr, list(leaves.values()))
    grad_map = {n: g.value for n, g in zip(leaves, grads)}
    return sgd_step(model, grad_map, state, lr, momentum, wd)


# ---------------------------------------------------------------------------
# single steps
# ---------------------------------------------------------------------------

def train_step_vanilla(model: Model, batch, state: dict, lr: float,
                       momentum: float = 0.9, weight_decay: float = 5e-4
                       ) -> tuple[Model, float, dict]:
    """One SGD update on the clean-batch mean cross-entropy."""
    images, labels = batch
    leaves = param_leaves(model, depth=1)
    loss = ad.softmax_cross_entropy(model.forward(images, params=leaves), labels)
    model2, state2 = _update(model, loss, leaves, state, lr, momentum,
                             weight_decay)
    return model2, float(loss.value), state2


def train_step_adv(model: Model, batch, attack: AttackSpec, state: dict,
                   lr: float, momentum: float = 0.9,
                   weight_decay: float = 5e-4) -> tuple[Model, float, dict]:
    """Inner maximization by a one- or multi-step attack, then one update.

    The attack runs against a frozen snapshot (parameters enter the attack
    graphs as constants); the update then fits the perturbed batch.
    """
    if attack.variant not in ("fgsm", "pgd"):
        raise TrainError("adversarial training uses fgsm or pgd inner attacks")
    images, labels = batch
    adv = run_attack_batch(model, images, labels, attack)
    leaves = param_leaves(model, depth=1)
    loss = ad.softmax_cross_entropy(model.forward(adv.x_adv, params=leaves),
                                    labels)
    model2, state2 = _update(model, loss, leaves, state, lr, momentum,
                             weight_decay)
    return model2, float(loss.value), state2


@dataclass
class RegularizedObjective:
    expr: ad.Expr                  # scalar to differentiate w.r.t. weights
    leaves: dict[str, ad.Expr]
    loss_value: float              # the loss term alone
    reg_value: float               # realized mean gradient-difference norm


def _objective(model: Model, images, labels, eps: float, lam: float,
               h: float, clip: bool, adversarial_loss: bool,
               params: dict | None = None,
               loss_fn=ad.softmax_cross_entropy) -> RegularizedObjective:
    """Shared builder for the regularized objectives.

    adversarial_loss=True puts the one-step perturbed batch in the loss term
    (the fast-adversarial variant); False keeps the clean batch there (the
    curvature-only baseline).
    """
    leaves = params if params is not None else param_leaves(model, depth=2)

    # Pass 1: attack direction, held constant under the weight derivative.
    x0 = ad.leaf(images, depth=1)
    loss_probe = loss_fn(model.forward(x0), labels)
    direction = np.sign(ad.gradient(loss_probe, [x0])[0].value)

    # Passes 2 and 3: input-gradients with graph construction enabled.
    xh = ad.leaf(images + h * direction, depth=2)
    loss_h = loss_fn(model.forward(xh, params=leaves), labels)
    (grad_h,) = ad.gradient(loss_h, [xh], build_graph=True)

    xc = ad.leaf(images, depth=2)
    loss_c = loss_fn(model.forward(xc, params=leaves), labels)
    (grad_c,) = ad.gradient(loss_c, [xc], build_graph=True)

    n = images.shape[0]
    diff = ad.reshape(ad.sub(grad_h, grad_c), (n, -1))
    reg = ad.scale(ad.sum_all(ad.row_l2_norms(diff)), 1.0 / n)

    if adversarial_loss:
        x_adv = images + eps * direction
        if clip:
            x_adv = np.clip(x_adv, 0.0, 1.0)
        loss_term = loss_fn(model.forward(x_adv, params=leaves), labels)
    else:
        loss_term = loss_c

    objective = ad.add(loss_term, ad.scale(reg, lam))
    return RegularizedObjective(objective, leaves, float(loss_term.value),
                                float(reg.value))


def fgsmr_objective(model: Model, images, labels, eps: float, lam: float,
                    h: float | None = None, clip: bool = True,
                    params: dict | None = None,
                    loss_fn=ad.softmax_cross_entropy) -> RegularizedObjective:
    """Perturbed loss plus gradient-difference penalty, as one scalar Expr.

    Requires differentiability depth 2: the returned expression contains the
    two inner input-gradients as graph nodes. ``loss_fn`` swaps the
    cross-entropy for a surrogate (margin losses make the analytic cases
    checkable in closed form).
    """
    h = eps if h is None else h
    if h <= 0:
        raise TrainError("h must be > 0")
    return _objective(model, images, labels, eps, lam, h, clip,
                      adversarial_loss=True, params=params, loss_fn=loss_fn)


def cure_objective(model: Model, images, labels, eps: float, lam: float,
                   h: float | None = None, params: dict | None = None,
                   loss_fn=ad.softmax_cross_entropy) -> RegularizedObjective:
    """Clean loss plus the same gradient-difference penalty."""
    h = eps if h is None else h
    if h <= 0:
        raise TrainError("h must be > 0")
    return _objective(model, images, labels, eps, lam, h, clip=False,
                      adversarial_loss=False, params=params, loss_fn=loss_fn)


def train_step_fgsmr(model: Model, batch, config: TrainConfig, state: dict,
                     lr: float) -> tuple[Model, float, float, dict]:
    images, labels = batch
    parts = fgsmr_objective(model, images, labels, config.eps, config.lam,
                            config.resolved_h(), clip=config.clip_train_adv)
    model2, state2 = _update(model, parts.expr, parts.leaves, state, lr,
                             config.momentum, config.weight_decay)
    return model2, parts.loss_value, parts.reg_value, state2


def train_step_cure(model: Model, batch, config: TrainConfig, state: dict,
                    lr: float) -> tuple[Model, float, float, dict]:
    images, labels = batch
    parts = cure_objective(model, images, labels, config.eps, config.lam,
                           config.resolved_h())
    model2, state2 = _update(model, parts.expr, parts.leaves, state, lr,
                             config.momentum, config.weight_decay)
    return model2, parts.loss_value, parts.reg_value, state2


# ---------------------------------------------------------------------------
# epoch loop
# ---------------------------------------------------------------------------

def _epoch_seed(base: int, epoch: int) -> int:
    return int(np.random.SeedSequence([base, epoch]).generate_state(1)[0])


def _lr_at(config: TrainConfig, epoch: int) -> float:
    if config.lr_schedule == "none" or config.epochs == 0:
        return config.lr
    lr = config.lr
    if epoch >= config.epochs // 2:
        lr *= 0.1
    if epoch >= (3 * config.epochs) // 4:
        lr *= 0.1
    return lr


def run_training(model: Model, config: TrainConfig,
                 dataset: LabeledDataset,
                 eval_dataset: LabeledDataset | None = None,
                 epoch_callback=None) -> tuple[Checkpoint, list[EpochLog]]:
    """Full training loop; returns the final checkpoint and per-epoch logs.

    Wall time in each log covers the step loop only, so one-step and
    multi-step methods compare on the work the method itself dictates.
    ``epoch_callback(epoch, model, log)`` runs after each epoch's evaluation
    (checkpoint dumps, live printing, ...).
    """
    state: dict = {}
    logs: list[EpochLog] = []
    inner = config.inner_attack()
    base_seed = config.batch.seed if config.batch.seed is not None else None

    for epoch in range(config.epochs):
        lr = _lr_at(config, epoch)
        plan = dataclasses.replace(
            config.batch,
            seed=None if base_seed is None else _epoch_seed(base_seed, epoch))
        aug_rng = np.random.default_rng([config.seed, 7, epoch])

        losses: list[float] = []
        regs: list[float] = []
        t0 = time.perf_counter()
        for images, labels in batches(dataset, plan):
            if config.augment:
                images = augment_batch(images, aug_rng)
            if config.method == "vanilla":
                model, loss, state = train_step_vanilla(
                    model, (images, labels), state, lr, config.momentum,
                    config.weight_decay)
            elif config.method in ("adv-fgsm", "adv-pgd"):
                model, loss, state = train_step_adv(
                    model, (images, labels), inner, state, lr,
                    config.momentum, config.weight_decay)
            elif config.method == "adv-fgsmr":
                model, loss, reg, state = train_step_fgsmr(
                    model, (images, labels), config, state, lr)
                regs.append(reg)
            else:
                model, loss, reg, state = train_step_cure(
                    model, (images, labels), config, state, lr)
                regs.append(reg)
            if not np.isfinite(loss):
                raise TrainError(f"non-finite loss at epoch {epoch}")
            losses.append(loss)
        wall = time.perf_counter() - t0

        clean = pgd_acc = curv = None
        if config.eval_every_epoch and eval_dataset is not None:
            clean = metrics.clean_accuracy(model, eval_dataset)
            eval_spec = AttackSpec(variant="pgd", norm="linf", eps=config.eps,
                                   k=config.eval_attack_k, clip=True)
            pgd_acc = metrics.perturbed_accuracy(model, eval_dataset, eval_spec)
            h = config.resolved_h()
            curv = metrics.average_curvature(
                model, eval_dataset, h if h > 0 else 0.1,
                sample=config.curvature_sample, seed=config.seed)

        log = EpochLog(epoch=epoch,
                       train_loss=float(np.mean(losses)) if losses else 0.0,
                       reg_value=float(np.mean(regs)) if regs else None,
                       clean_acc=clean, pgd_acc=pgd_acc, avg_curvature=curv,
                       wall_time_s=wall)
        logs.append(log)
        if epoch_callback is not None:
            epoch_callback(epoch, model, log)

    meta = {"method": config.method, "eps": config.eps,
            "epoch": config.epochs}
    ckpt_bytes = save_checkpoint(model, meta)
    return load_checkpoint(ckpt_bytes), logs
