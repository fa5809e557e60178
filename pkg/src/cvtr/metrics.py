"""Robustness and loss-geometry measurements.

Two quantities here mirror the package's training-time machinery on purpose:

* the curvature proxy along the one-step attack direction,
  ||grad_x L(x + h*g) - grad_x L(x)||_2 with g = sgn(grad_x L(x)), and
* the relative perturbation size rho = mean ||x_adv - x||_2 / ||x||_2 for
  minimal-perturbation attacks.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import attacks as atk
from .attacks import AttackSpec
from .data import LabeledDataset

CSV_HEADER = ["model_id", "attack", "norm", "epsilon", "k", "alpha",
              "clean_acc", "perturbed_acc", "rho_adv", "avg_curvature",
              "n_excluded", "wall_time_s"]


class MetricError(ValueError):
    pass


@dataclass
class EvalReport:
    """Structured results of one model x attack evaluation."""

    dataset_id: str
    model_id: str
    attack: AttackSpec | None
    clean_accuracy: float
    perturbed_accuracy: float | None
    rho_adv: float | None
    avg_curvature: float | None
    n_excluded: int
    records: list
    wall_time_s: float
    source_model_id: str | None = None

    def __post_init__(self):
        for a in (self.clean_accuracy, self.perturbed_accuracy):
            if a is not None and not 0.0 <= a <= 1.0:
                raise MetricError(f"accuracy {a} outside [0,1]")
        if self.rho_adv is not None and self.rho_adv < 0:
            raise MetricError("rho_adv must be >= 0")

    def to_json(self, include_records: bool = True) -> str:
        d = {
            "dataset_id": self.dataset_id,
            "model_id": self.model_id,
            "source_model_id": self.source_model_id,
            "attack": None if self.attack is None else {
                "variant": self.attack.variant, "norm": self.attack.norm,
                "eps": self.attack.eps, "alpha": self.attack.alpha,
                "k": self.attack.k, "cw_constant": self.attack.cw_constant,
                "cw_search_steps": self.attack.cw_search_steps,
                "clip": self.attack.clip,
            },
            "clean_accuracy": self.clean_accuracy,
            "perturbed_accuracy": self.perturbed_accuracy,
            "rho_adv": self.rho_adv,
            "avg_curvature": self.avg_curvature,
            "n_excluded": self.n_excluded,
            "wall_time_s": self.wall_time_s,
        }
        if include_records:
            d["records"] = self.records
        return json.dumps(d, sort_keys=True, indent=2)

    def csv_row(self) -> list:
        a = self.attack
        return [
            self.model_id,
            a.variant if a else "",
            a.norm if a else "",
            a.eps if a else "",
            a.k if a else "",
            (a.step_size() if a and a.variant == "pgd" else "") if a else "",
            self.clean_accuracy,
            "" if self.perturbed_accuracy is None else self.perturbed_accuracy,
            "" if self.rho_adv is None else self.rho_adv,
            "" if self.avg_curvature is None else self.avg_curvature,
            self.n_excluded,
            self.wall_time_s,
        ]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        w.writerow(self.csv_row())
        return buf.getvalue()


def clean_accuracy(model, dataset: LabeledDataset,
                   batch_size: int = 256) -> float:
    if len(dataset) == 0:
        raise MetricError("empty dataset")
    correct = 0
    for i in range(0, len(dataset), batch_size):
        logits = model.forward(dataset.images[i:i + batch_size], depth=0)
        correct += int((np.argmax(logits.value, axis=1)
                        == dataset.labels[i:i + batch_size]).sum())
    return correct / len(dataset)


def perturbed_accuracy(model, dataset: LabeledDataset, spec: AttackSpec,
                       batch_size: int = 256) -> float:
    """Fraction still classified correctly after the attack."""
    if len(dataset) == 0:
        raise MetricError("empty dataset")
    correct = 0
    for i in range(0, len(dataset), batch_size):
        img = dataset.images[i:i + batch_size]
        lab = dataset.labels[i:i + batch_size]
        adv = atk.run_attack_batch(model, img, lab, spec)
        preds = atk._predict(model, adv.x_adv)
        correct += int((preds == lab).sum())
    return correct / len(dataset)


def rho_adv(model, dataset: LabeledDataset, spec: AttackSpec,
            batch_size: int = 256) -> tuple[float, int]:
    """Mean relative l2 perturbation of a minimal-perturbation attack.

    Examples the attack fails to flip (and the degenerate ||x||=0 case) are
    excluded from the mean; the second return value counts the exclusions.
    """
    if spec.variant not in ("deepfool", "cw"):
        raise MetricError("rho_adv is defined for minimal-perturbation "
                          "attacks (deepfool, cw)")
    ratios = []
    excluded = 0
    for i in range(0, len(dataset), batch_size):
        img = dataset.images[i:i + batch_size]
        lab = dataset.labels[i:i + batch_size]
        adv = atk.run_attack_batch(model, img, lab, spec)
        for j in range(img.shape[0]):
            xn = np.linalg.norm(img[j])
            if not adv.success[j] or xn == 0.0:
                excluded += 1
                continue
            ratios.append(np.linalg.norm(adv.x_adv[j] - img[j]) / xn)
    if not ratios:
        raise MetricError("no successful adversarial examples to average")
    return float(np.mean(ratios)), excluded


def _input_grads(model, images: np.ndarray, labels: np.ndarray,
                 loss_fn=ad.softmax_cross_entropy) -> np.ndarray:
    xe = ad.leaf(images, depth=1)
    loss = loss_fn(model.forward(xe), labels)
    return ad.gradient(loss, [xe])[0].value


def average_curvature(model, dataset: LabeledDataset, h: float,
                      sample: int | None = None, seed: int = 0,
                      batch_size: int = 256,
                      loss_fn=ad.softmax_cross_entropy) -> float:
    """Mean gradient change along the one-step sign direction.

    First-order only: two plain gradient passes per batch, no graph
    construction. ``sample`` caps the number of examples (seeded choice)
    so per-epoch profiling stays cheap.
    """
    if h <= 0:
        raise MetricError("h must be > 0")
    if sample is not None and sample < len(dataset):
        idx = np.random.default_rng(seed).choice(len(dataset), sample,
                                                 replace=False)
        idx.sort()
        dataset = dataset.take(idx)
    total, count = 0.0, 0
    for i in range(0, len(dataset), batch_size):
        img = dataset.images[i:i + batch_size]
        lab = dataset.labels[i:i + batch_size]
        g1 = _input_grads(model, img, lab, loss_fn)
        g2 = _input_grads(model, img + h * np.sign(g1), lab, loss_fn)
        diff = (g2 - g1).reshape(img.shape[0], -1)
        total += float(np.sqrt((diff ** 2).sum(axis=1)).sum())
        count += img.shape[0]
    if count == 0:
        raise MetricError("empty dataset")
    return total / count


def direction_similarity(model, x: np.ndarray, y: int, eps: float,
                         k: int = 20, alpha: float | None = None) -> float:
    """Cosine similarity between the one-step and multi-step perturbations.

    Compares eps * sgn(grad) against the final PGD-linf perturbation for the
    same example; 1.0 means the single step already points where the
    iterated attack ends up.
    """
    if eps <= 0:
        raise MetricError("eps must be > 0")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    yarr = np.asarray([y]).reshape(1)
    one_step = atk.fgsm(model, x, yarr, eps, clip=False)
    d1 = (eps * one_step.direction).ravel()
    spec = AttackSpec(variant="pgd", norm="linf", eps=eps, alpha=alpha, k=k,
                      clip=False)
    d2 = atk.pgd(model, x, yarr, spec).delta.ravel()
    n1, n2 = np.linalg.norm(d1), np.linalg.norm(d2)
    if n1 == 0 or n2 == 0:
        raise MetricError("zero-norm perturbation")
    return float(np.dot(d1, d2) / (n1 * n2))


def evaluate(model, dataset: LabeledDataset, spec: AttackSpec,
             model_id: str = "model", dataset_id: str = "",
             curvature_h: float | None = None,
             curvature_sample: int = 512,
             batch_size: int = 256) -> EvalReport:
    """Full evaluation of one model under one attack, with timing.

    Minimal-perturbation attacks additionally report rho_adv; every variant
    reports the perturbed-set accuracy and per-example records.
    """
    if len(dataset) == 0:
        raise MetricError("empty dataset")
    t0 = time.perf_counter()
    clean = clean_accuracy(model, dataset, batch_size)
    minimal = spec.variant in ("deepfool", "cw")
    correct, excluded = 0, 0
    ratios: list[float] = []
    records = []
    for i in range(0, len(dataset), batch_size):
        img = dataset.images[i:i + batch_size]
        lab = dataset.labels[i:i + batch_size]
        adv = atk.run_attack_batch(model, img, lab, spec)
        preds = atk._predict(model, adv.x_adv)
        correct += int((preds == lab).sum())
        for j in range(img.shape[0]):
            records.append({"success": bool(adv.success[j]),
                            "delta_norm": float(adv.delta_norm[j])})
            if minimal:
                xn = np.linalg.norm(img[j])
                if adv.success[j] and xn > 0:
                    ratios.append(np.linalg.norm(adv.x_adv[j] - img[j]) / xn)
                else:
                    excluded += 1
    rho = float(np.mean(ratios)) if ratios else None
    h = curvature_h if curvature_h is not None else (spec.eps or 0.1)
    curv = average_curvature(model, dataset, h, sample=curvature_sample)
    return EvalReport(
        dataset_id=dataset_id or f"n={len(dataset)}",
        model_id=model_id,
        attack=spec,
        clean_accuracy=clean,
        perturbed_accuracy=correct / len(dataset),
        rho_adv=rho,
        avg_curvature=curv,
        n_excluded=excluded,
        records=records,
        wall_time_s=time.perf_counter() - t0)
