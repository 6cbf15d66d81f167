"""Training loop, evaluation and data plumbing shared by the CLI commands."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import datagen
from . import tensor as T
from .config import RunConfig
from .metrics import evaluate
from .model import PredictiveModel, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


def sprite_spec(cfg: RunConfig, seed) -> datagen.SpriteSequenceSpec:
    size = 28 if cfg.sprite == "mnist" else cfg.sprite_size
    return datagen.SpriteSequenceSpec(
        height=cfg.canvas, width=cfg.canvas, length=cfg.seq_len, sprites=cfg.sprites,
        source=cfg.sprite, sprite_h=size, sprite_w=size, velocity_min=cfg.velocity_min,
        velocity_max=cfg.velocity_max, seed=seed, composite=cfg.composite)


def _digits(cfg):
    if cfg.sprite != "mnist":
        return None
    if not cfg.mnist_images:
        raise ValueError("sprite = mnist needs mnist_images (an IDX file); "
                         "use sprite = rect or cross for synthetic sprites")
    digits, _ = datagen.load_idx(cfg.mnist_images, cfg.mnist_labels or None)
    return digits


def load_data(cfg: RunConfig):
    """(train, eval) sequence batches, each (N, T, C, H, W) float32."""
    if cfg.dataset:
        data = datagen.load_batch(cfg.dataset)
        if data.shape[2] != cfg.frame_channels or data.shape[3] != cfg.canvas:
            raise ValueError(f"dataset shape {data.shape} does not match the config")
        n_eval = min(cfg.eval_sequences, data.shape[0])
        return data, data[:n_eval]
    digits = _digits(cfg)
    train = datagen.generate(sprite_spec(cfg, cfg.data_seed), cfg.train_sequences, digits)
    held = datagen.generate(sprite_spec(cfg, cfg.eval_data_seed), cfg.eval_sequences, digits)
    return train, held


@dataclass
class TrainResult:
    model: PredictiveModel
    losses: list = field(default_factory=list)
    checkpoint: str = ""
    log_path: str = ""


def _ckpt_extra(rng):
    return {"rng": rng.bit_generator.state}


def train(cfg: RunConfig, data=None, out_dir=None, on_step=None, record_maps=False):
    """Teacher-forced (or closed-loop) training for cfg.steps Adam updates.

    ``on_step(step, result)`` is called after every update with the rollout
    result (graph already consumed) for monitoring; ``record_maps`` keeps
    per-cell gate and state maps in its traces.
    """
    out_dir = out_dir or cfg.out
    os.makedirs(out_dir, exist_ok=True)
    if data is None:
        data, _ = load_data(cfg)
    model = PredictiveModel(cfg)
    opt = T.Adam(model.parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    rng = np.random.default_rng(cfg.seed)
    mode = cfg.train_mode
    after = cfg.cond_len if mode == "closed_loop" else None
    frames_per_seq = data.shape[1] - 1
    log_path = os.path.join(out_dir, "loss.csv")
    ckpt_path = os.path.join(out_dir, "checkpoint.stau")
    losses = []
    order = np.empty(0, np.int64)
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "loss", "loss_per_frame"])
        for step in range(1, cfg.steps + 1):
            if len(order) < cfg.batch_size:
                order = np.concatenate([order, rng.permutation(len(data))])
            idx, order = order[:cfg.batch_size], order[cfg.batch_size:]
            try:
                res = model.rollout(data[idx], mode, after, record_maps)
                value = res.loss.data.item()
                if not math.isfinite(value):
                    raise T.NumericError("non-finite loss")
                res.loss.backward()
            except T.NumericError as exc:
                fh.flush()
                raise TrainingDiverged(
                    f"step {step}: {exc}; last good checkpoint kept at {ckpt_path}") from exc
            opt.step()
            losses.append(value)
            if step % cfg.log_every == 0:
                writer.writerow([step, repr(value), repr(value / frames_per_seq)])
            if on_step is not None:
                on_step(step, res)
            if step % cfg.checkpoint_every == 0:
                save_checkpoint(ckpt_path, model, step, _ckpt_extra(rng), optimizer=opt)
                log.info("step %d loss %.6f (checkpoint)", step, value)
    save_checkpoint(ckpt_path, model, cfg.steps, _ckpt_extra(rng), optimizer=opt)
    return TrainResult(model, losses, ckpt_path, log_path)


def evaluate_model(model: PredictiveModel, frames, cond_len, horizon, label=""):
    """Closed-loop prediction of ``horizon`` frames after ``cond_len`` context frames."""
    if cond_len + horizon > frames.shape[1]:
        raise ValueError("sequence too short for cond_len + horizon")
    frames = frames[:, :cond_len + horizon]
    preds, _ = model.predict(frames, cond_len)
    # predictions[:, t-1] estimates frame t+1 (1-based); keep the future part
    future = preds[:, cond_len - 1:]
    truth = frames[:, cond_len:]
    return evaluate(future, truth, label), future


def read_loss_log(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [float(r["loss"]) for r in rows]


__all__ = ["train", "evaluate_model", "load_data", "load_checkpoint", "read_loss_log",
           "TrainingDiverged", "TrainResult"]
