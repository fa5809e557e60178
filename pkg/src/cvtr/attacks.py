"""Gradient-based attacks: FGSM, PGD (linf/l2), DeepFool-l2, C&W-l2, transfer.

Batch attacks (fgsm, pgd) take [B,C,H,W] arrays and return per-example
result arrays; the minimal-perturbation attacks (deepfool_l2, cw_l2) work on
a single [C,H,W] example. All budgets are on the [0,1] pixel scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .parallel import ordered_map

BUDGET_SLACK = 1e-9  # tolerance on ||delta|| <= eps checks


class AttackError(ValueError):
    pass


@dataclass(frozen=True)
class AttackSpec:
    """Everything needed to run one attack."""

    variant: str                 # fgsm | pgd | deepfool | cw
    norm: str = "linf"           # linf | l2
    eps: float = 0.1
    alpha: float | None = None   # pgd step size; defaults to eps / 4
    k: int = 20                  # iterations (pgd steps / deepfool cap / cw steps)
    cw_constant: float = 1e-2    # initial tradeoff constant c
    cw_search_steps: int = 6     # binary-search rounds over c
    clip: bool = True            # keep adversarial pixels in [0,1]

    def __post_init__(self):
        if self.variant not in ("fgsm", "pgd", "deepfool", "cw"):
            raise AttackError(f"unknown attack variant {self.variant!r}")
        if self.norm not in ("linf", "l2"):
            raise AttackError(f"unknown norm {self.norm!r}")
        if self.eps < 0:
            raise AttackError("eps must be >= 0")
        if self.k < 1:
            raise AttackError("k must be >= 1")
        if self.variant == "pgd" and self.step_size() <= 0 and self.eps > 0:
            raise AttackError("alpha must be > 0 for iterative attacks")

    def step_size(self) -> float:
        return self.alpha if self.alpha is not None else self.eps / 4.0

    @staticmethod
    def defaults(variant: str, **kw) -> "AttackSpec":
        """Documented per-variant defaults (deepfool 50 iters, C&W 100)."""
        base = {"deepfool": {"norm": "l2", "k": 50},
                "cw": {"norm": "l2", "k": 100}}.get(variant, {})
        base.update(kw)
        return AttackSpec(variant=variant, **base)


@dataclass
class AdversarialExample:
    """Original/perturbed pair plus bookkeeping for one attack run.

    For batch attacks the fields are stacked along axis 0 and ``success`` /
    ``delta_norm`` are per-example arrays.
    """

    x: np.ndarray
    x_adv: np.ndarray
    delta: np.ndarray
    direction: np.ndarray | None
    success: np.ndarray
    delta_norm: np.ndarray


def _flat_norms(delta: np.ndarray, norm: str) -> np.ndarray:
    flat = delta.reshape(delta.shape[0], -1)
    if norm == "linf":
        return np.abs(flat).max(axis=1) if flat.size else np.zeros(len(flat))
    return np.sqrt((flat ** 2).sum(axis=1))


def _input_gradient(model, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """d(mean cross-entropy)/dx with parameters held constant."""
    xe = ad.leaf(x, depth=1)
    logits = model.forward(xe)
    loss = ad.softmax_cross_entropy(logits, y)
    (g,) = ad.gradient(loss, [xe])
    return g.value


def _predict(model, x: np.ndarray) -> np.ndarray:
    return np.argmax(model.forward(x, depth=0).value, axis=1)


def project_linf(delta: np.ndarray, eps: float) -> np.ndarray:
    """Coordinatewise clamp to [-eps, eps]; idempotent."""
    if eps < 0:
        raise AttackError("eps must be >= 0")
    return np.clip(delta, -eps, eps)


def project_l2(delta: np.ndarray, eps: float) -> np.ndarray:
    """Radial scaling onto the eps ball; identity for in-ball inputs.

    2-D and higher inputs are treated as a batch along axis 0, each example
    projected separately; 1-D inputs are a single vector.
    """
    if eps < 0:
        raise AttackError("eps must be >= 0")
    delta = np.asarray(delta, dtype=np.float64)
    if delta.ndim <= 1:
        n = np.linalg.norm(delta)
        return delta * min(1.0, eps / n) if n > eps else delta.copy()
    flat = delta.reshape(delta.shape[0], -1)
    n = np.linalg.norm(flat, axis=1)
    factor = np.ones_like(n)
    over = n > eps
    factor[over] = eps / n[over]
    return (flat * factor[:, None]).reshape(delta.shape)


def fgsm(model, x: np.ndarray, y, eps: float, clip: bool = True
         ) -> AdversarialExample:
    """One-step sign attack: x* = x + eps * sgn(grad_x loss)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    g = _input_gradient(model, x, y)
    direction = np.sign(g)
    x_adv = x + eps * direction
    if clip:
        x_adv = np.clip(x_adv, 0.0, 1.0)
    delta = x_adv - x
    return AdversarialExample(
        x=x, x_adv=x_adv, delta=delta, direction=direction,
        success=_predict(model, x_adv) != y,
        delta_norm=_flat_norms(delta, "linf"))


def pgd(model, x: np.ndarray, y, spec: AttackSpec) -> AdversarialExample:
    """Multi-step signed (linf) or normalized (l2) ascent with projection.

    Starts at x itself (no random start). Each step is projected onto the
    eps ball around x and, when spec.clip is set, clamped to [0,1].
    """
    if spec.variant != "pgd":
        raise AttackError(f"pgd() got spec for {spec.variant!r}")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    alpha = spec.step_size()
    cur = x.copy()
    for _ in range(spec.k):
        g = _input_gradient(model, cur, y)
        if spec.norm == "linf":
            step = alpha * np.sign(g)
        else:
            flat = g.reshape(g.shape[0], -1)
            n = np.linalg.norm(flat, axis=1)
            n[n == 0] = 1.0
            step = alpha * (flat / n[:, None]).reshape(g.shape)
        cur = cur + step
        delta = cur - x
        delta = (project_linf(delta, spec.eps) if spec.norm == "linf"
                 else project_l2(delta, spec.eps))
        cur = x + delta
        if spec.clip:
            cur = np.clip(cur, 0.0, 1.0)
    delta = cur - x
    return AdversarialExample(
        x=x, x_adv=cur, delta=delta, direction=None,
        success=_predict(model, cur) != y,
        delta_norm=_flat_norms(delta, spec.norm))


def _logit_gradients(model, x1: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Value and input-gradient of every logit for a single example.

    One forward pass, then one backward per class over the shared graph.
    """
    xe = ad.leaf(x1, depth=1)
    logits = model.forward(xe)
    k = logits.value.shape[1]
    grads = np.empty((k,) + x1.shape[1:])
    for j in range(k):
        sel = np.zeros((1, k))
        sel[0, j] = 1.0
        s = ad.sum_all(ad.mul(logits, ad.constant(sel)))
        grads[j] = ad.gradient(s, [xe])[0].value[0]
    return logits.value[0], grads


def deepfool_l2(model, x: np.ndarray, max_iter: int = 50,
                overshoot: float = 0.02, y=None) -> AdversarialExample:
    """Iterative linearization toward the nearest class boundary (l2).

    Moves by the minimal-norm step to the closest linearized boundary each
    iteration, stops on a label flip, and scales the final perturbation by
    (1 + overshoot). Failure to flip within max_iter is reported via the
    success flag, not an exception.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise AttackError("deepfool_l2 expects a single [C,H,W] example")
    orig = int(_predict(model, x[None])[0])
    if y is not None and orig != int(y):
        zero = np.zeros_like(x)
        return AdversarialExample(x, x.copy(), zero, None,
                                  np.True_, np.float64(0.0))

    r_tot = np.zeros_like(x)
    flipped = False
    for _ in range(max_iter):
        xi = x + (1.0 + overshoot) * r_tot
        logits, grads = _logit_gradients(model, xi[None])
        pred = int(np.argmax(logits))
        if pred != orig:
            flipped = True
            break
        best = None
        for j in range(len(logits)):
            if j == orig:
                continue
            wj = grads[j] - grads[orig]
            fj = logits[j] - logits[orig]
            wn = np.linalg.norm(wj)
            if wn == 0:
                continue
            dist = abs(fj) / wn
            if best is None or dist < best[0]:
                best = (dist, fj, wj, wn)
        if best is None:
            break
        _, fj, wj, wn = best
        r_tot = r_tot + (abs(fj) / wn ** 2) * wj

    delta = (1.0 + overshoot) * r_tot
    x_adv = x + delta
    if not flipped:
        flipped = int(_predict(model, x_adv[None])[0]) != orig
    return AdversarialExample(
        x=x, x_adv=x_adv, delta=delta, direction=None,
        success=np.bool_(flipped),
        delta_norm=np.float64(np.linalg.norm(delta)))


def cw_l2(model, x: np.ndarray, y: int, spec: AttackSpec) -> AdversarialExample:
    """Carlini-Wagner l2: minimize ||delta||_2 + c * margin loss.

    The box constraint is enforced by the change of variables
    x + delta = (tanh(w) + 1) / 2; plain gradient descent runs for spec.k
    steps per round, and c is binary-searched for spec.cw_search_steps
    rounds keeping the smallest successful perturbation.
    """
    if spec.variant != "cw":
        raise AttackError(f"cw_l2() got spec for {spec.variant!r}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise AttackError("cw_l2 expects a single [C,H,W] example")
    y = int(y)

    pred0 = int(_predict(model, x[None])[0])
    if pred0 != y:
        zero = np.zeros_like(x)
        return AdversarialExample(x, x.copy(), zero, None,
                                  np.True_, np.float64(0.0))

    squash = np.clip(x, 1e-6, 1.0 - 1e-6)
    w0 = np.arctanh(2.0 * squash - 1.0)
    xc = ad.constant(x[None])
    k = model.num_classes
    sel_y = np.zeros((1, k))
    sel_y[0, y] = 1.0

    lr = 0.1
    lower, upper = 0.0, None
    c = spec.cw_constant
    best_adv, best_norm = None, np.inf
    last_adv = x.copy()

    for _ in range(spec.cw_search_steps):
        w = w0.copy()
        success_this_round = False
        for _ in range(spec.k):
            we = ad.leaf(w[None], depth=1)
            x_adv = ad.scale(ad.add(ad.tanh(we), ad.constant(1.0)), 0.5)
            delta = ad.sub(x_adv, xc)
            dist = ad.l2_norm(delta)
            logits = model.forward(x_adv)
            lv = logits.value[0]
            others = np.delete(lv, y)
            j_star = int(np.argmax(others))
            j_star = j_star if j_star < y else j_star + 1
            sel_j = np.zeros((1, k))
            sel_j[0, j_star] = 1.0
            margin = ad.sub(ad.sum_all(ad.mul(logits, ad.constant(sel_y))),
                            ad.sum_all(ad.mul(logits, ad.constant(sel_j))))
            objective = ad.add(dist, ad.scale(ad.relu(margin), c))
            (gw,) = ad.gradient(objective, [we])

            if lv[y] < others.max():  # current iterate already adversarial
                success_this_round = True
                cur_norm = float(dist.value)
                if cur_norm < best_norm:
                    best_norm = cur_norm
                    best_adv = x_adv.value[0].copy()
            w = w - lr * gw.value[0]
            if not np.all(np.isfinite(w)):
                raise AttackError("C&W optimizer diverged (non-finite iterate)")

        final_adv = (np.tanh(w) + 1.0) / 2.0
        last_adv = final_adv
        if int(_predict(model, final_adv[None])[0]) != y:
            success_this_round = True
            n = float(np.linalg.norm(final_adv - x))
            if n < best_norm:
                best_norm, best_adv = n, final_adv.copy()

        if success_this_round:
            upper = c
            c = (lower + upper) / 2.0
        else:
            lower = c
            c = c * 10.0 if upper is None else (lower + upper) / 2.0

    if best_adv is None:
        x_adv_final, success = last_adv, np.bool_(False)
    else:
        x_adv_final, success = best_adv, np.bool_(True)
    delta = x_adv_final - x
    return AdversarialExample(
        x=x, x_adv=x_adv_final, delta=delta, direction=None,
        success=success, delta_norm=np.float64(np.linalg.norm(delta)))


def run_attack_batch(model, images: np.ndarray, labels: np.ndarray,
                     spec: AttackSpec) -> AdversarialExample:
    """Dispatch any attack variant over a batch, stacking the results."""
    if spec.variant == "fgsm":
        return fgsm(model, images, labels, spec.eps, clip=spec.clip)
    if spec.variant == "pgd":
        return pgd(model, images, labels, spec)

    def one(i: int) -> AdversarialExample:
        if spec.variant == "deepfool":
            return deepfool_l2(model, images[i], max_iter=spec.k,
                               y=int(labels[i]))
        return cw_l2(model, images[i], int(labels[i]), spec)

    results = ordered_map(one, range(images.shape[0]))
    return AdversarialExample(
        x=images,
        x_adv=np.stack([r.x_adv for r in results]),
        delta=np.stack([r.delta for r in results]),
        direction=None,
        success=np.array([bool(r.success) for r in results]),
        delta_norm=np.array([float(r.delta_norm) for r in results]))


def transfer_attack(source_model, target_model, dataset, spec: AttackSpec,
                    source_id: str = "source", target_id: str = "target",
                    batch_size: int = 256):
    """Black-box transfer: craft against the source, score on the target."""
    from .metrics import EvalReport, clean_accuracy  # local to avoid a cycle
    import time

    if getattr(source_model, "num_classes", None) != \
            getattr(target_model, "num_classes", None):
        raise AttackError("source/target class count mismatch")
    if source_model.config.input_shape != target_model.config.input_shape:
        raise AttackError("source/target input shape mismatch")

    t0 = time.perf_counter()
    correct = 0
    records = []
    for start in range(0, len(dataset), batch_size):
        img = dataset.images[start:start + batch_size]
        lab = dataset.labels[start:start + batch_size]
        adv = run_attack_batch(source_model, img, lab, spec)
        preds = _predict(target_model, adv.x_adv)
        correct += int((preds == lab).sum())
        for s, n in zip(adv.success, adv.delta_norm):
            records.append({"success": bool(s), "delta_norm": float(n)})
    acc = correct / max(1, len(dataset))
    return EvalReport(
        dataset_id=f"n={len(dataset)}",
        model_id=target_id,
        source_model_id=source_id,
        attack=spec,
        clean_accuracy=clean_accuracy(target_model, dataset),
        perturbed_accuracy=acc,
        rho_adv=None,
        avg_curvature=None,
        n_excluded=0,
        records=records,
        wall_time_s=time.perf_counter() - t0)
