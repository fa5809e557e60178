"""Operator surface: train / eval / profile / transfer / attack subcommands.

Every run echoes its fully resolved configuration and writes all outputs
atomically under --out together with a manifest, so a result directory is
self-describing and a repeated run with the same config and seed produces
byte-identical reports (timing fields aside).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import data as dat
from . import metrics
from . import models
from . import training
from .attacks import AttackError, AttackSpec, run_attack_batch
from .data import BatchPlan, DataError, LabeledDataset
from .models import CheckpointError, ModelConfig, ModelError
from .training import TrainConfig, TrainError

EXIT_OK = 0
EXIT_ABORT = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_CHECKPOINT = 4
EXIT_SHAPE = 5


class ConfigError(ValueError):
    pass


def parse_eps(value) -> float:
    """Budgets come as decimals or fraction strings like "8/255"."""
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if isinstance(value, str):
        try:
            return float(Fraction(value))
        except (ValueError, ZeroDivisionError) as e:
            raise ConfigError(f"cannot parse budget {value!r}: {e}") from e
    raise ConfigError(f"budget must be a number or fraction string, got {value!r}")


# ---------------------------------------------------------------------------
# strict config schema
# ---------------------------------------------------------------------------

_MODEL_DEFAULTS = {
    "arch": "mnist-cnn",
    "input_shape": [1, 28, 28],
    "num_classes": 10,
    "depth": 2,
    "width": 1,
}

_DATA_DEFAULTS = {
    "format": "idx",
    "train_images": None, "train_labels": None,
    "test_images": None, "test_labels": None,
    "train_files": None, "test_files": None,
    "n_per_class": None, "centers": None, "spread": None, "data_seed": 0,
    "limit": None, "eval_limit": None,
}

_ATTACK_DEFAULTS = {
    "variant": "pgd", "norm": "linf", "eps": 0.1, "alpha": None, "k": 20,
    "cw_constant": 1e-2, "cw_search_steps": 6, "clip": True,
}

_TRAIN_DEFAULTS = {
    "method": "vanilla",
    "eps": 0.1, "lambda": 4.0, "h": None,
    "epochs": 10, "batch_size": 64, "shuffle_seed": 0, "drop_last": False,
    "lr": 0.1, "momentum": 0.9, "weight_decay": 5e-4, "lr_schedule": "step",
    "eval_every_epoch": True, "eval_attack_k": 20, "curvature_sample": 512,
    "clip_train_adv": True, "augment": False, "save_every_epoch": False,
    "attack": None,
}

_TOP_DEFAULTS = {"seed": 0, "model": None, "data": None, "train": None}


def _merge_section(raw, defaults: dict, where: str) -> dict:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be a JSON object")
    unknown = set(raw) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    merged = dict(defaults)
    merged.update(raw)
    return merged


def resolve_config(raw: dict) -> dict:
    """Validate a raw run config and fill in every default."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    top = _merge_section(raw, _TOP_DEFAULTS, "config")
    out = {"seed": int(top["seed"])}
    out["model"] = _merge_section(top["model"], _MODEL_DEFAULTS, "model")
    out["data"] = _merge_section(top["data"], _DATA_DEFAULTS, "data")
    tr = _merge_section(top["train"], _TRAIN_DEFAULTS, "train")
    tr["eps"] = parse_eps(tr["eps"])
    if tr["h"] is not None:
        tr["h"] = parse_eps(tr["h"])
    if tr["attack"] is not None:
        a = _merge_section(tr["attack"], _ATTACK_DEFAULTS, "train.attack")
        a["eps"] = parse_eps(a["eps"])
        if a["alpha"] is not None:
            a["alpha"] = parse_eps(a["alpha"])
        tr["attack"] = a
    out["train"] = tr
    if out["data"]["format"] not in ("idx", "cifar10", "blobs"):
        raise ConfigError(f"unknown data format {out['data']['format']!r}")
    return out


def build_train_config(resolved: dict) -> TrainConfig:
    tr = resolved["train"]
    attack = None
    if tr["attack"] is not None:
        a = tr["attack"]
        attack = AttackSpec(variant=a["variant"], norm=a["norm"], eps=a["eps"],
                            alpha=a["alpha"], k=int(a["k"]),
                            cw_constant=a["cw_constant"],
                            cw_search_steps=int(a["cw_search_steps"]),
                            clip=bool(a["clip"]))
    try:
        return TrainConfig(
            method=tr["method"], eps=tr["eps"], lam=tr["lambda"], h=tr["h"],
            attack=attack, lr=tr["lr"], momentum=tr["momentum"],
            weight_decay=tr["weight_decay"], lr_schedule=tr["lr_schedule"],
            epochs=int(tr["epochs"]),
            batch=BatchPlan(int(tr["batch_size"]), tr["shuffle_seed"],
                            bool(tr["drop_last"])),
            eval_every_epoch=bool(tr["eval_every_epoch"]),
            eval_attack_k=int(tr["eval_attack_k"]),
            curvature_sample=int(tr["curvature_sample"]),
            clip_train_adv=bool(tr["clip_train_adv"]),
            augment=bool(tr["augment"]), seed=resolved["seed"])
    except (TrainError, DataError) as e:
        raise ConfigError(str(e)) from e


def build_model_config(resolved: dict) -> ModelConfig:
    m = resolved["model"]
    try:
        return ModelConfig(arch=m["arch"], input_shape=tuple(m["input_shape"]),
                           num_classes=int(m["num_classes"]),
                           depth=int(m["depth"]), width=int(m["width"]),
                           seed=resolved["seed"])
    except ModelError as e:
        raise ConfigError(str(e)) from e


def _read(path) -> bytes:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"missing file: {p}")
    return p.read_bytes()


def load_datasets(dcfg: dict) -> tuple[LabeledDataset, LabeledDataset]:
    fmt = dcfg["format"]
    if fmt == "idx":
        for key in ("train_images", "train_labels", "test_images",
                    "test_labels"):
            if dcfg[key] is None:
                raise ConfigError(f"data.{key} is required for format idx")
        train = dat.parse_idx(_read(dcfg["train_images"]),
                              _read(dcfg["train_labels"]))
        test = dat.parse_idx(_read(dcfg["test_images"]),
                             _read(dcfg["test_labels"]))
    elif fmt == "cifar10":
        if not dcfg["train_files"] or not dcfg["test_files"]:
            raise ConfigError("data.train_files and data.test_files are "
                              "required for format cifar10")
        train_bytes = b"".join(_read(f) for f in dcfg["train_files"])
        test_bytes = b"".join(_read(f) for f in dcfg["test_files"])
        train = dat.parse_cifar10(train_bytes)
        test = dat.parse_cifar10(test_bytes)
    else:  # blobs
        if dcfg["n_per_class"] is None or dcfg["centers"] is None:
            raise ConfigError("data.n_per_class and data.centers are "
                              "required for format blobs")
        spread = dcfg["spread"] if dcfg["spread"] is not None else 0.05
        train = dat.synthetic_blobs(int(dcfg["n_per_class"]), dcfg["centers"],
                                    spread, seed=int(dcfg["data_seed"]))
        test = dat.synthetic_blobs(max(1, int(dcfg["n_per_class"]) // 5),
                                   dcfg["centers"], spread,
                                   seed=int(dcfg["data_seed"]) + 1)
    if dcfg["limit"] is not None:
        train = train.subset(int(dcfg["limit"]))
    if dcfg["eval_limit"] is not None:
        test = test.subset(int(dcfg["eval_limit"]))
    return train, test


# ---------------------------------------------------------------------------
# output plumbing
# ---------------------------------------------------------------------------

class OutDir:
    """Atomic writes (temp + rename) under one directory, with a manifest."""

    def __init__(self, root, command: str):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.command = command
        self.outputs: list[str] = []

    def write_bytes(self, name: str, payload: bytes) -> Path:
        final = self.root / name
        final.parent.mkdir(parents=True, exist_ok=True)
        tmp = final.parent / f".{final.name}.tmp"
        tmp.write_bytes(payload)
        os.replace(tmp, final)
        self.outputs.append(name)
        return final

    def write_text(self, name: str, payload: str) -> Path:
        return self.write_bytes(name, payload.encode("utf-8"))

    def finish(self) -> None:
        manifest = {"command": self.command,
                    "outputs": sorted(self.outputs)}
        payload = json.dumps(manifest, sort_keys=True, indent=2) + "\n"
        final = self.root / "manifest.json"
        tmp = self.root / ".manifest.json.tmp"
        tmp.write_text(payload)
        os.replace(tmp, final)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def epoch_log_csv(logs) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_loss", "reg_value", "clean_acc", "pgd_acc",
                "avg_curvature", "wall_time_s"])
    for log in logs:
        w.writerow([log.epoch, _fmt(log.train_loss), _fmt(log.reg_value),
                    _fmt(log.clean_acc), _fmt(log.pgd_acc),
                    _fmt(log.avg_curvature), _fmt(log.wall_time_s)])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    raw = json.loads(Path(args.config).read_text())
    resolved = resolve_config(raw)
    tcfg = build_train_config(resolved)
    mcfg = build_model_config(resolved)
    train_ds, eval_ds = load_datasets(resolved["data"])
    model = models.build_model(mcfg)

    out = OutDir(args.out, "train")
    out.write_text("resolved_config.json",
                   json.dumps(resolved, sort_keys=True, indent=2) + "\n")

    save_every = resolved["train"]["save_every_epoch"]

    def callback(epoch, m, log):
        if save_every:
            out.write_bytes(f"epochs/epoch_{epoch:04d}.cvtr",
                            models.save_checkpoint(
                                m, {"method": tcfg.method, "eps": tcfg.eps,
                                    "epoch": epoch}))
        bits = [f"epoch {epoch}", f"loss {log.train_loss:.4f}"]
        if log.reg_value is not None:
            bits.append(f"reg {log.reg_value:.4f}")
        if log.clean_acc is not None:
            bits.append(f"clean {log.clean_acc:.4f}")
        if log.pgd_acc is not None:
            bits.append(f"pgd {log.pgd_acc:.4f}")
        print("  ".join(bits))

    ckpt, logs = training.run_training(model, tcfg, train_ds, eval_ds,
                                       epoch_callback=callback)
    out.write_bytes("checkpoint.cvtr",
                    models.save_checkpoint(ckpt.model(), ckpt.meta))
    out.write_text("epoch_log.csv", epoch_log_csv(logs))
    out.finish()
    return EXIT_OK


def _attack_spec_from_flags(args) -> AttackSpec:
    try:
        return AttackSpec(
            variant=args.attack, norm=args.norm, eps=parse_eps(args.eps),
            alpha=None if args.alpha is None else parse_eps(args.alpha),
            k=args.k if args.k is not None else
            {"deepfool": 50, "cw": 100}.get(args.attack, 20),
            clip=not args.no_clip)
    except AttackError as e:
        raise ConfigError(str(e)) from e


def _dataset_from_flags(args) -> LabeledDataset:
    if args.data_format == "idx":
        if not args.images or not args.labels:
            raise ConfigError("--images and --labels are required for idx data")
        ds = dat.parse_idx(_read(args.images), _read(args.labels))
    else:
        if not args.files:
            raise ConfigError("--files is required for cifar10 data")
        ds = dat.parse_cifar10(b"".join(_read(f) for f in args.files))
    if args.limit is not None:
        ds = ds.subset(args.limit)
    return ds


def _load_checkpoint_file(path) -> models.Checkpoint:
    p = Path(path)
    if not p.is_file():
        raise CheckpointError(f"missing checkpoint: {p}")
    return models.load_checkpoint(p.read_bytes())


def _check_compat(model, ds: LabeledDataset) -> None:
    if tuple(ds.images.shape[1:]) != model.config.input_shape:
        raise ModelError(
            f"dataset shape {ds.images.shape[1:]} does not match model "
            f"input {model.config.input_shape}")


def cmd_eval(args) -> int:
    ckpt = _load_checkpoint_file(args.checkpoint)
    model = ckpt.model()
    ds = _dataset_from_flags(args)
    _check_compat(model, ds)
    spec = _attack_spec_from_flags(args)
    report = metrics.evaluate(model, ds, spec,
                              model_id=ckpt.meta.get("method", "model"),
                              curvature_sample=args.curvature_sample)
    out = OutDir(args.out, "eval")
    out.write_text("eval_report.json", report.to_json() + "\n")
    out.write_text("eval_report.csv", report.to_csv())
    out.finish()
    print(f"clean={report.clean_accuracy:.4f}", end=" ")
    if report.perturbed_accuracy is not None:
        print(f"perturbed={report.perturbed_accuracy:.4f}", end=" ")
    if report.rho_adv is not None:
        print(f"rho_adv={report.rho_adv:.4f} excluded={report.n_excluded}",
              end=" ")
    print(f"avg_curvature={report.avg_curvature:.4f}")
    return EXIT_OK


def cmd_profile(args) -> int:
    ckpt_dir = Path(args.checkpoints)
    files = sorted(ckpt_dir.glob("*.cvtr"))
    if not files:
        raise CheckpointError(f"no .cvtr checkpoints under {ckpt_dir}")
    ds = _dataset_from_flags(args)
    eps = parse_eps(args.eps)
    h = parse_eps(args.h) if args.h is not None else eps
    spec = AttackSpec(variant="pgd", norm="linf", eps=eps,
                      alpha=None if args.alpha is None else parse_eps(args.alpha),
                      k=args.k if args.k is not None else 20)

    rows = []
    last_model = None
    for f in files:
        ckpt = models.load_checkpoint(f.read_bytes())
        model = ckpt.model()
        _check_compat(model, ds)
        epoch = int(ckpt.meta.get("epoch", -1))
        pgd_acc = metrics.perturbed_accuracy(model, ds, spec)
        curv = metrics.average_curvature(model, ds, h,
                                         sample=args.curvature_sample)
        rows.append((epoch, pgd_acc, curv))
        last_model = model
    rows.sort(key=lambda r: r[0])

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "pgd_acc", "avg_curvature"])
    for r in rows:
        w.writerow([r[0], _fmt(r[1]), _fmt(r[2])])

    n = min(args.similarity_sample, len(ds))
    sims = [metrics.direction_similarity(last_model, ds.images[i],
                                         int(ds.labels[i]), eps,
                                         k=spec.k, alpha=spec.alpha)
            for i in range(n)]
    stats = {"n": n, "mean": float(np.mean(sims)), "min": float(np.min(sims)),
             "max": float(np.max(sims)), "std": float(np.std(sims))}

    out = OutDir(args.out, "profile")
    out.write_text("profile.csv", buf.getvalue())
    out.write_text("direction_similarity.json",
                   json.dumps(stats, sort_keys=True, indent=2) + "\n")
    out.finish()
    print(buf.getvalue(), end="")
    return EXIT_OK


def cmd_transfer(args) -> int:
    src = _load_checkpoint_file(args.source)
    tgt = _load_checkpoint_file(args.target)
    source_model, target_model = src.model(), tgt.model()
    if (source_model.config.input_shape != target_model.config.input_shape
            or source_model.num_classes != target_model.num_classes):
        raise ModelError("source/target models are not attack-compatible")
    ds = _dataset_from_flags(args)
    _check_compat(source_model, ds)
    spec = _attack_spec_from_flags(args)

    from .attacks import transfer_attack
    report = transfer_attack(source_model, target_model, ds, spec,
                             source_id=src.meta.get("method", "source"),
                             target_id=tgt.meta.get("method", "target"))
    out = OutDir(args.out, "transfer")
    out.write_text("transfer_report.json", report.to_json() + "\n")
    out.write_text("transfer_report.csv", report.to_csv())
    out.finish()
    print(f"source={report.source_model_id} target={report.model_id} "
          f"clean={report.clean_accuracy:.4f} "
          f"transfer={report.perturbed_accuracy:.4f}")
    return EXIT_OK


def cmd_attack(args) -> int:
    ckpt = _load_checkpoint_file(args.checkpoint)
    model = ckpt.model()
    ds = _dataset_from_flags(args)
    _check_compat(model, ds)
    if not 0 <= args.index < len(ds):
        raise ConfigError(f"--index {args.index} outside dataset of {len(ds)}")
    spec = _attack_spec_from_flags(args)
    img = ds.images[args.index:args.index + 1]
    lab = ds.labels[args.index:args.index + 1]
    adv = run_attack_batch(model, img, lab, spec)

    out = OutDir(args.out, "attack")
    for name, arr in (("x", adv.x[0]), ("x_adv", adv.x_adv[0]),
                      ("delta", adv.delta[0])):
        buf = io.BytesIO()
        np.save(buf, arr)
        out.write_bytes(f"{name}.npy", buf.getvalue())
    out.finish()
    print(f"label={int(lab[0])} success={bool(np.atleast_1d(adv.success)[0])} "
          f"delta_norm={float(np.atleast_1d(adv.delta_norm)[0]):.6f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing and dispatch
# ---------------------------------------------------------------------------

def _add_dataset_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data-format", choices=["idx", "cifar10"], default="idx")
    p.add_argument("--images", help="IDX image file")
    p.add_argument("--labels", help="IDX label file")
    p.add_argument("--files", nargs="+", help="CIFAR-10 binary batch files")
    p.add_argument("--limit", type=int, default=None,
                   help="evaluate only the first N examples")


def _add_attack_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--attack", choices=["fgsm", "pgd", "deepfool", "cw"],
                   default="pgd")
    p.add_argument("--norm", choices=["linf", "l2"], default="linf")
    p.add_argument("--eps", default="0.1",
                   help="budget, decimal or fraction like 8/255")
    p.add_argument("--k", type=int, default=None, help="iteration count")
    p.add_argument("--alpha", default=None, help="step size (default eps/4)")
    p.add_argument("--no-clip", action="store_true",
                   help="do not clamp adversarial pixels to [0,1]")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="cvtr",
        description="curvature-regularized fast adversarial training toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint under an attack")
    e.add_argument("--checkpoint", required=True)
    _add_dataset_flags(e)
    _add_attack_flags(e)
    e.add_argument("--curvature-sample", type=int, default=512)
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_eval)

    pr = sub.add_parser("profile",
                        help="per-epoch robustness/curvature curves")
    pr.add_argument("--checkpoints", required=True,
                    help="directory of per-epoch .cvtr checkpoints")
    _add_dataset_flags(pr)
    pr.add_argument("--eps", default="0.1")
    pr.add_argument("--k", type=int, default=None)
    pr.add_argument("--alpha", default=None)
    pr.add_argument("--h", default=None, help="curvature step (default eps)")
    pr.add_argument("--curvature-sample", type=int, default=512)
    pr.add_argument("--similarity-sample", type=int, default=32)
    pr.add_argument("--out", required=True)
    pr.set_defaults(fn=cmd_profile)

    tr = sub.add_parser("transfer", help="black-box transfer evaluation")
    tr.add_argument("--source", required=True)
    tr.add_argument("--target", required=True)
    _add_dataset_flags(tr)
    _add_attack_flags(tr)
    tr.add_argument("--out", required=True)
    tr.set_defaults(fn=cmd_transfer)

    a = sub.add_parser("attack", help="single-image attack debug dump")
    a.add_argument("--checkpoint", required=True)
    _add_dataset_flags(a)
    _add_attack_flags(a)
    a.add_argument("--index", type=int, default=0)
    a.add_argument("--out", required=True)
    a.set_defaults(fn=cmd_attack)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, AttackError, json.JSONDecodeError) as e:
        print(f"error: invalid configuration: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"error: data: {e}", file=sys.stderr)
        return EXIT_DATA
    except CheckpointError as e:
        print(f"error: checkpoint: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except ModelError as e:
        print(f"error: shape/model: {e}", file=sys.stderr)
        return EXIT_SHAPE
    except (TrainError, metrics.MetricError) as e:
        print(f"error: run aborted: {e}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
