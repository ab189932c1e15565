"""KL-divergence training with L2 regularization, plus checkpointing.

Loss: sum_n y_n·log(y_n / yhat_n) + (lambda/2)·||theta||^2 where theta ranges
over convolution and dense weights (not biases or norm parameters).
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .augment import balanced_oversample, center_crop, make_batch
from .autodiff import Tensor
from .errors import FormatError, InvalidConfigError, InvalidInputError
from .evaluation import evaluate_predictions
from .model import ModelConfig, RespiratoryClassifier

CHECKPOINT_MAGIC = b"LSCK"
CHECKPOINT_VERSION = 1
PRED_FLOOR = 1e-8

HISTORY_COLUMNS = ("epoch", "split", "loss", "SE", "SP", "AS", "HS", "Score")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    learning_rate: float = 1e-4
    l2_lambda: float = 1e-4
    seed: int = 0
    eval_every: int = 1
    early_stop_evals: int = 20

    def __post_init__(self):
        if min(self.epochs, self.batch_size, self.eval_every) < 0 or (
            self.batch_size == 0 or self.eval_every == 0
        ):
            raise InvalidConfigError("train config values must be positive")
        if self.learning_rate < 0 or self.l2_lambda < 0:
            raise InvalidConfigError("rates must be nonnegative")


def regularized_parameters(model):
    """Conv, dense and attention-projection weights; biases and norm affine
    parameters are left unregularized."""
    out = {}
    for name, p in model.parameters().items():
        parts = name.split(".")
        if parts[-1] in ("weight", "wo") or (
            len(parts) >= 2 and parts[-2] in ("wq", "wk", "wv")
        ):
            out[name] = p
    return out


def kl_loss(y, y_hat, params=(), l2_lambda=0.0):
    """Eq-style objective: KL(y || y_hat) summed over the batch plus an L2
    penalty. `y` is a constant probability matrix; `y_hat` a Tensor."""
    y = np.asarray(y, dtype=np.float64)
    if np.any(y < 0):
        raise InvalidInputError("labels must be nonnegative")
    y_hat = y_hat if isinstance(y_hat, Tensor) else Tensor(np.asarray(y_hat))
    if y.shape != y_hat.shape:
        raise InvalidInputError("label and prediction shapes differ")
    mask = y > 0
    y_log_y = float(np.sum(y[mask] * np.log(y[mask])))  # 0·log 0 -> 0
    clamped = ad.clip_min(y_hat, PRED_FLOOR)
    cross = ad.tsum(Tensor(y * mask) * ad.log(clamped))
    loss = Tensor(np.float64(y_log_y)) - cross
    for p in params:
        loss = loss + ad.tsum(p * p) * (l2_lambda / 2.0)
    return loss


class Adam:
    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.step_count
        bias2 = 1.0 - b2**self.step_count
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            g = g.astype(p.data.dtype, copy=False)
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            update = (self.m[name] / bias1) / (
                np.sqrt(self.v[name] / bias2) + self.eps
            )
            p.data = p.data - (self.lr * update).astype(p.data.dtype)


def train_step(model, batch, labels, optimizer, l2_lambda):
    """One forward/backward/update; returns the pre-update loss."""
    model.zero_grad()
    rng = getattr(model, "_dropout_rng", None)
    probs = model.forward(batch, training=True, rng=rng)
    reg = regularized_parameters(model)
    loss = kl_loss(labels, probs, reg.values(), l2_lambda)
    value = loss.item()
    if not np.isfinite(value):
        raise InvalidInputError("non-finite training loss")
    loss.backward()
    optimizer.step()
    return value


@dataclass
class FitResult:
    history: list
    best_score: float
    best_epoch: int
    checkpoint_path: str | None


def _stack_eval(dataset, indices, crop_bins):
    specs, labels = [], []
    for i in indices:
        item = dataset[i]
        specs.append(center_crop(item.spec, crop_bins).values)
        labels.append(int(np.argmax(item.label)))
    batch = np.stack(specs)[:, None, :, :].astype(np.float64)
    return batch, np.asarray(labels)


def evaluate_model(model, dataset, indices, task, crop_bins, batch_size=32):
    """Deterministic eval-mode scoring on center-cropped spectrograms."""
    truths, probs = [], []
    with ad.no_grad():
        for start in range(0, len(indices), batch_size):
            chunk = indices[start : start + batch_size]
            batch, truth = _stack_eval(dataset, chunk, crop_bins)
            out = model.forward(batch, training=False)
            probs.append(out.data)
            truths.append(truth)
    return evaluate_predictions(
        np.concatenate(truths), np.concatenate(probs), task
    )


def fit(model, dataset, train_idx, val_idx, task, train_config, augment_config,
        checkpoint_path=None):
    """Balanced-batch training with periodic validation scoring; keeps the
    checkpoint of the best validation Score."""
    if not train_idx:
        raise InvalidInputError("empty training split")
    cfg = train_config
    classes = {i: int(np.argmax(dataset[i].label)) for i in train_idx}
    rng = np.random.default_rng(cfg.seed)
    model._dropout_rng = rng
    optimizer = Adam(model.parameters(), lr=cfg.learning_rate)

    if augment_config.oversample:
        stream = balanced_oversample(classes, cfg.batch_size, cfg.seed + 1)
    else:
        stream = _shuffled_batches(list(train_idx), cfg.batch_size, cfg.seed + 1)
    steps_per_epoch = max(1, -(-len(train_idx) // cfg.batch_size))

    history = []
    best_score, best_epoch = -1.0, -1
    evals_since_best = 0
    for epoch in range(cfg.epochs):
        epoch_loss = 0.0
        for _ in range(steps_per_epoch):
            batch, labels = make_batch(dataset, next(stream), augment_config, rng)
            epoch_loss += train_step(model, batch, labels, optimizer,
                                     cfg.l2_lambda)
        epoch_loss /= steps_per_epoch
        if (epoch + 1) % cfg.eval_every == 0 and val_idx:
            report = evaluate_model(model, dataset, val_idx, task,
                                    augment_config.crop_bins)
            history.append(
                {
                    "epoch": epoch + 1,
                    "split": "validation",
                    "loss": epoch_loss,
                    "SE": report.se,
                    "SP": report.sp,
                    "AS": report.as_score,
                    "HS": report.hs_score,
                    "Score": report.score,
                }
            )
            if report.score > best_score:
                best_score, best_epoch = report.score, epoch + 1
                evals_since_best = 0
                if checkpoint_path:
                    save_checkpoint(checkpoint_path, model, optimizer,
                                    cfg.seed, epoch + 1)
            else:
                evals_since_best += 1
                if evals_since_best >= cfg.early_stop_evals:
                    break
    if checkpoint_path and best_epoch < 0:
        save_checkpoint(checkpoint_path, model, optimizer, cfg.seed, cfg.epochs)
    return FitResult(
        history=history,
        best_score=best_score,
        best_epoch=best_epoch,
        checkpoint_path=checkpoint_path,
    )


def _shuffled_batches(indices, batch_size, seed):
    rng = np.random.default_rng(seed)
    while True:
        order = list(indices)
        rng.shuffle(order)
        for start in range(0, len(order), batch_size):
            chunk = order[start : start + batch_size]
            if chunk:
                yield chunk


def write_history_csv(path, history):
    lines = [",".join(HISTORY_COLUMNS)]
    for row in history:
        lines.append(
            ",".join(
                str(row[c]) if c in ("epoch", "split") else f"{row[c]:.6f}"
                for c in HISTORY_COLUMNS
            )
        )
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


# -- checkpoint container ---------------------------------------------------------


def save_checkpoint(path, model, optimizer=None, seed=0, epoch=0):
    """Binary container: magic, version, JSON index, float32 LE payloads."""
    params = model.parameters()
    buffers = dict(model.named_buffers())
    arrays = []
    index = {"params": [], "buffers": [], "opt_moments": []}
    for name, p in params.items():
        index["params"].append({"name": name, "shape": list(p.shape)})
        arrays.append(p.data.astype("<f4"))
    for name, b in buffers.items():
        index["buffers"].append({"name": name, "shape": list(b.shape)})
        arrays.append(b.astype("<f8"))
    opt_state = {"step": 0}
    if optimizer is not None:
        opt_state["step"] = optimizer.step_count
        for name in params:
            index["opt_moments"].append({"name": name,
                                         "shape": list(params[name].shape)})
            arrays.append(optimizer.m[name].astype("<f4"))
            arrays.append(optimizer.v[name].astype("<f4"))
    header = {
        "config": model.config.to_dict(),
        "index": index,
        "optimizer": opt_state,
        "seed": int(seed),
        "epoch": int(epoch),
    }
    blob = json.dumps(header, sort_keys=True).encode()
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for a in arrays:
            fh.write(a.tobytes())
    os.replace(tmp, path)


def load_checkpoint(path):
    """Returns (model, optimizer, seed, epoch) with parameters, buffers and
    Adam moments restored."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    version, header_len = struct.unpack("<II", blob[4:12])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(blob[12 : 12 + header_len])
    except ValueError as exc:
        raise FormatError(f"{path}: corrupt checkpoint header") from exc
    config = ModelConfig.from_dict(header["config"])
    model = RespiratoryClassifier(config, seed=header["seed"])
    params = model.parameters()
    buffers = dict(model.named_buffers())
    offset = 12 + header_len

    def take(shape, dtype):
        nonlocal offset
        n = int(np.prod(shape)) * np.dtype(dtype).itemsize
        if offset + n > len(blob):
            raise FormatError(f"{path}: truncated checkpoint payload")
        out = np.frombuffer(blob[offset : offset + n], dtype=dtype).reshape(shape)
        offset += n
        return out

    for entry in header["index"]["params"]:
        name = entry["name"]
        if name not in params:
            raise FormatError(f"{path}: unknown parameter {name!r}")
        data = take(entry["shape"], "<f4")
        if list(params[name].shape) != entry["shape"]:
            raise FormatError(f"{path}: shape mismatch for {name!r}")
        params[name].data = data.astype(params[name].data.dtype)
    for entry in header["index"]["buffers"]:
        name = entry["name"]
        if name not in buffers:
            raise FormatError(f"{path}: unknown buffer {name!r}")
        buffers[name][...] = take(entry["shape"], "<f8")
    optimizer = Adam(params)
    optimizer.step_count = header["optimizer"]["step"]
    for entry in header["index"]["opt_moments"]:
        name = entry["name"]
        optimizer.m[name] = take(entry["shape"], "<f4").astype(np.float32).copy()
        optimizer.v[name] = take(entry["shape"], "<f4").astype(np.float32).copy()
    if offset != len(blob):
        raise FormatError(f"{path}: trailing bytes in checkpoint")
    return model, optimizer, header["seed"], header["epoch"]
