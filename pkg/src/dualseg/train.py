"""SGD training with a polynomial LR schedule, IoU evaluation,
multi-scale inference, and the variant-comparison (ablation) runner.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from .data import SceneConfig, SegSample, augment, generate_dataset, scale_augment
from .errors import ContractError, DimensionError, DivergenceError
from .model import ModelConfig, ModelOutput, build_model, multi_loss, save_checkpoint
from .nn import IGNORE_INDEX, interp_matrix
from .tensor import Tensor, make_rng

TRAIN_DATA_SEED = 1_000
VAL_DATA_SEED = 1_000_000


@dataclass
class TrainConfig:
    base_lr: float = 0.01
    poly_power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 40
    batch_size: int = 8
    aux_weight: float = 0.5
    seeds: tuple = (0, 1, 2)
    train_samples: int = 512
    val_samples: int = 128
    crop: tuple = (56, 56)
    flip_prob: float = 0.5
    scale_choices: tuple = (0.75, 1.0, 1.25)
    ignore_index: int = IGNORE_INDEX

    def validate(self):
        if self.base_lr <= 0 or self.poly_power <= 0:
            raise ContractError("base_lr and poly_power must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ContractError(f"momentum must lie in [0,1), got {self.momentum}")
        if self.weight_decay < 0 or self.aux_weight < 0:
            raise ContractError("weight_decay and aux_weight must be nonnegative")
        if self.epochs < 0 or self.batch_size < 1:
            raise ContractError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class EvalReport:
    per_class_iou: np.ndarray
    mean_iou: float
    pixel_accuracy: float
    confusion: np.ndarray
    present: np.ndarray


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    step_loss: list = field(default_factory=list)


def poly_lr(it: int, total_iter: int, base_lr: float, power: float) -> float:
    """base_lr * (1 - it/total_iter) ** power."""
    if total_iter < 1:
        raise ContractError(f"poly_lr: total_iter must be >= 1, got {total_iter}")
    if it < 0 or it > total_iter:
        raise ContractError(f"poly_lr: iter {it} outside [0, {total_iter}]")
    return base_lr * (1.0 - it / total_iter) ** power


def sgd_step(params, grads, velocities, lr, momentum, weight_decay):
    """v <- momentum*v + g + weight_decay*p;  p <- p - lr*v  (in place)."""
    for p, g, v in zip(params, grads, velocities):
        if g.shape != p.shape or v.shape != p.shape:
            raise DimensionError(
                f"sgd_step: param {p.shape} vs grad {g.shape} vs velocity {v.shape}")
        v *= momentum
        v += g + weight_decay * p
        p -= lr * v


class SGD:
    """Velocity-form momentum with weight decay folded into the gradient."""

    def __init__(self, params, momentum: float, weight_decay: float):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocities = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float):
        datas, grads = [], []
        for p in self.params:
            datas.append(p.data)
            grads.append(p.grad if p.grad is not None else np.zeros_like(p.data))
        sgd_step(datas, grads, self.velocities, lr, self.momentum, self.weight_decay)


# -- evaluation ------------------------------------------------------------------


def confusion_matrix(pred, labels, num_classes: int, ignore_index: int = IGNORE_INDEX):
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    if pred.shape != labels.shape:
        raise DimensionError(f"confusion: pred {pred.shape} vs labels {labels.shape}")
    if pred.min(initial=0) < 0 or pred.max(initial=0) >= num_classes:
        raise ContractError("confusion: prediction outside [0, num_classes)")
    valid = labels != ignore_index
    if np.any((labels < 0) | ((labels >= num_classes) & valid)):
        raise ContractError("confusion: label outside [0, num_classes) and not ignored")
    idx = labels[valid].astype(np.int64) * num_classes + pred[valid].astype(np.int64)
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(
        num_classes, num_classes)


def report_from_confusion(confusion: np.ndarray) -> EvalReport:
    """IoU_c = TP / (TP + FP + FN); classes absent everywhere are excluded."""
    conf = np.asarray(confusion, dtype=np.int64)
    tp = np.diag(conf).astype(np.float64)
    fn = conf.sum(axis=1) - tp
    fp = conf.sum(axis=0) - tp
    denom = tp + fp + fn
    present = denom > 0
    iou = np.zeros(conf.shape[0], dtype=np.float64)
    iou[present] = tp[present] / denom[present]
    mean = float(iou[present].mean()) if present.any() else 0.0
    total = conf.sum()
    acc = float(tp.sum() / total) if total else 0.0
    return EvalReport(per_class_iou=iou, mean_iou=mean, pixel_accuracy=acc,
                      confusion=conf, present=present)


def mean_iou(pred, labels, num_classes: int, ignore_index: int = IGNORE_INDEX) -> EvalReport:
    return report_from_confusion(confusion_matrix(pred, labels, num_classes, ignore_index))


def _resize_chw(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = arr.shape[-2:]
    if (h, w) == (out_h, out_w):
        return arr
    rmat = interp_matrix(h, out_h, np.float64)
    cmat = interp_matrix(w, out_w, np.float64)
    return np.einsum("oi,cij,pj->cop", rmat, arr, cmat, optimize=True)


def _pad_to_multiple(img: np.ndarray, mult: int) -> tuple:
    h, w = img.shape[-2:]
    ph = (-h) % mult
    pw = (-w) % mult
    if ph or pw:
        img = np.pad(img, ((0, 0), (0, ph), (0, pw)), mode="reflect")
    return img, h, w


def _softmax_np(z: np.ndarray, axis: int) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def multi_scale_inference(model, image: np.ndarray, scales) -> np.ndarray:
    """Mean over scales of softmax(model(resized image)) resized back.

    ``image`` is [3,H,W]; the result is a [k,H,W] probability map. Scaled
    extents that are not multiples of 8 are reflect-padded before the
    forward pass and cropped back after.
    """
    scales = list(scales)
    if not scales:
        raise ContractError("multi_scale_inference: empty scale list")
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise DimensionError(f"multi_scale_inference: expected [3,H,W], got {image.shape}")
    h, w = image.shape[1:]
    dtype = next(p.data.dtype for _, p in model.named_parameters())
    acc = None
    for f in scales:
        if f <= 0:
            raise ContractError(f"multi_scale_inference: scale {f} must be positive")
        scaled = _resize_chw(image, int(round(h * f)), int(round(w * f)))
        padded, sh, sw = _pad_to_multiple(scaled, 8)
        x = Tensor(padded[None].astype(dtype))
        logits = model(x, training=False).main_logits.data[0].astype(np.float64)
        prob = _softmax_np(logits[:, :sh, :sw], axis=0)
        prob = _resize_chw(prob, h, w)
        acc = prob if acc is None else acc + prob
    return acc / len(scales)


def predict(model, image: np.ndarray, scales=(1.0,)) -> np.ndarray:
    return np.argmax(multi_scale_inference(model, image, scales), axis=0)


def evaluate(model, samples, num_classes: int, scales=(1.0,),
             ignore_index: int = IGNORE_INDEX) -> EvalReport:
    """Aggregate confusion over ``samples`` and report IoUs from the total."""
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    for s in samples:
        pred = predict(model, s.image, scales)
        conf += confusion_matrix(pred, s.labels, num_classes, ignore_index)
    return report_from_confusion(conf)


# -- training loop ---------------------------------------------------------------


def _augment_sample(s: SegSample, cfg: TrainConfig, rng) -> SegSample:
    f = float(cfg.scale_choices[int(rng.integers(0, len(cfg.scale_choices)))])
    if f != 1.0:
        s = scale_augment(s, f, min_extent=1)
    ch, cw = cfg.crop
    h, w = s.labels.shape
    ph, pw = max(0, ch - h), max(0, cw - w)
    if ph or pw:
        image = np.pad(s.image, ((0, 0), (0, ph), (0, pw)), mode="reflect")
        labels = np.pad(s.labels, ((0, ph), (0, pw)), mode="constant",
                        constant_values=cfg.ignore_index)
        s = SegSample(image=image, labels=labels)
    return augment(s, cfg.crop, cfg.flip_prob, rng)


def _batch(samples, idxs, cfg: TrainConfig, rng, dtype):
    imgs, labs = [], []
    for i in idxs:
        s = _augment_sample(samples[i], cfg, rng)
        imgs.append(s.image)
        labs.append(s.labels)
    x = Tensor(np.stack(imgs).astype(dtype))
    return x, np.stack(labs)


def train(model, train_set, val_set, cfg: TrainConfig, seed: int,
          out_dir=None) -> tuple:
    """Run the full schedule; returns (model, TrainHistory).

    Deterministic in (model init, datasets, cfg, seed): shuffling and
    augmentation draw from a stream derived only from ``seed``. A single
    non-finite loss aborts with the failing step in the message. With
    ``out_dir`` set, writes metrics.csv and checkpoint.bin there.
    """
    cfg.validate()
    rng = make_rng(seed, 2)
    dtype = next(p.data.dtype for _, p in model.named_parameters())
    opt = SGD([p for _, p in model.named_parameters()], cfg.momentum, cfg.weight_decay)
    steps_per_epoch = -(-len(train_set) // cfg.batch_size)
    total_iter = max(1, cfg.epochs * steps_per_epoch)
    history = TrainHistory()
    num_classes = model.cfg.num_classes
    it = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_set))
        losses = []
        lr = cfg.base_lr
        for b in range(steps_per_epoch):
            idxs = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            x, labels = _batch(train_set, idxs, cfg, rng, dtype)
            out = model(x, training=True)
            loss = multi_loss(out, labels, cfg.aux_weight, cfg.ignore_index)
            val = float(loss.data)
            if not np.isfinite(val):
                raise DivergenceError(f"non-finite loss {val} at step {it} (epoch {epoch})")
            model.zero_grad()
            loss.backward()
            lr = poly_lr(it, total_iter, cfg.base_lr, cfg.poly_power)
            opt.step(lr)
            losses.append(val)
            history.step_loss.append(val)
            it += 1
        report = evaluate(model, val_set, num_classes, ignore_index=cfg.ignore_index)
        row = {"epoch": epoch, "lr": lr, "train_loss": float(np.mean(losses)),
               "val_miou": report.mean_iou}
        for c in range(num_classes):
            row[f"iou_{c}"] = float(report.per_class_iou[c])
        history.epochs.append(row)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_history_csv(os.path.join(out_dir, "metrics.csv"), history, num_classes)
        save_checkpoint(os.path.join(out_dir, "checkpoint.bin"), model,
                        meta={"model": asdict(model.cfg), "epochs": cfg.epochs,
                              "seed": seed})
    return model, history


def write_history_csv(path, history: TrainHistory, num_classes: int):
    cols = ["epoch", "lr", "train_loss", "val_miou"] + [
        f"iou_{c}" for c in range(num_classes)]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for row in history.epochs:
            writer.writerow(row)


# -- ablation --------------------------------------------------------------------


def make_datasets(scene: SceneConfig, cfg: TrainConfig) -> tuple:
    train_set = generate_dataset(scene, cfg.train_samples, TRAIN_DATA_SEED)
    val_set = generate_dataset(scene, cfg.val_samples, VAL_DATA_SEED)
    return train_set, val_set


def run_ablation(cfgs, scene: SceneConfig, out_path=None, eval_scales=(1.0,),
                 log=None) -> list:
    """Train each (ModelConfig, TrainConfig) over its seeds; summarize mIoU.

    Returns one row per variant, in input order:
    {variant, mean_miou, std_miou, per_seed: [...]}. Std uses ddof=0.
    All variants see identical train/val data; only the parameter init
    and shuffling streams differ across seeds.
    """
    if len(cfgs) < 1:
        raise ContractError("run_ablation: need at least one (ModelConfig, TrainConfig)")
    rows = []
    for model_cfg, train_cfg in cfgs:
        train_cfg.validate()
        train_set, val_set = make_datasets(scene, train_cfg)
        scores = []
        for seed in train_cfg.seeds:
            model = build_model(model_cfg, seed)
            model, _ = train(model, train_set, val_set, train_cfg, seed)
            report = evaluate(model, val_set, model_cfg.num_classes, scales=eval_scales)
            scores.append(report.mean_iou)
            if log is not None:
                log(f"{model_cfg.variant} seed={seed} miou={report.mean_iou:.4f}")
        rows.append({"variant": model_cfg.variant,
                     "mean_miou": float(np.mean(scores)),
                     "std_miou": float(np.std(scores)),
                     "per_seed": [float(s) for s in scores]})
    if out_path is not None:
        write_ablation_csv(out_path, rows)
    return rows


def demo_scene() -> SceneConfig:
    """Scene used by the shipped comparison run: a large ambiguous region
    keeps enough loss mass on the marker-decided classes to learn from."""
    return SceneConfig(ambiguous_extent=(20, 32))


def demo_model_config(variant: str) -> ModelConfig:
    return ModelConfig(variant=variant, backbone_channels=(16, 24, 32, 48),
                       module_channels=32, reduction_ratio=4)


def demo_train_config(**overrides) -> TrainConfig:
    """Minutes-scale schedule sized so all four variants finish their
    transition on the marker task. Full-size crops keep the corner marker
    visible; a random 56-crop of a 64 image would exclude it ~99% of the
    time and erase the long-range signal."""
    base = dict(epochs=100, batch_size=8, base_lr=0.05, train_samples=256,
                val_samples=32, crop=(64, 64), scale_choices=(1.0,),
                seeds=(0, 1, 2))
    base.update(overrides)
    return TrainConfig(**base)


def demo_ablation_configs(variants=("baseline_fcn", "pam_only", "cam_only", "dual"),
                          **overrides) -> list:
    return [(demo_model_config(v), demo_train_config(**overrides)) for v in variants]


def write_ablation_csv(path, rows):
    n_seeds = max(len(r["per_seed"]) for r in rows)
    cols = ["variant", "mean_miou", "std_miou"] + [f"miou_seed{i}" for i in range(n_seeds)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for r in rows:
            writer.writerow([r["variant"], f"{r['mean_miou']:.6f}", f"{r['std_miou']:.6f}"]
                            + [f"{s:.6f}" for s in r["per_seed"]])
