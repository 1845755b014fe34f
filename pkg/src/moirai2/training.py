"""AdamW with warmup + cosine schedule, and the training loop."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .datapipe import make_sample, sample_window, zscore_filter
from .model import Model, ModelConfig, NormalizationError, save_checkpoint
from .objective import batch_quantile_loss
from .series import Series

logger = logging.getLogger(__name__)


class ScheduleError(ValueError):
    pass


class TrainingDivergenceError(RuntimeError):
    pass


@dataclass
class OptimConfig:
    lr_peak: float = 1e-3
    weight_decay: float = 1e-1
    beta1: float = 0.9
    beta2: float = 0.98
    warmup_steps: int = 200
    total_steps: int = 2000
    batch_size: int = 32
    eps: float = 1e-8
    clip_norm: float | None = 1.0

    def __post_init__(self):
        if not 0 < self.warmup_steps < self.total_steps:
            raise ValueError(f"need 0 < warmup_steps ({self.warmup_steps}) < total_steps ({self.total_steps})")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")


def lr_at(step: int, cfg: OptimConfig) -> float:
    if not 0 <= step <= cfg.total_steps:
        raise ScheduleError(f"step {step} outside [0, {cfg.total_steps}]")
    if step <= cfg.warmup_steps:
        return cfg.lr_peak * step / cfg.warmup_steps
    frac = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.lr_peak * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass
class OptimState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def global_grad_norm(params: dict[str, nx.Tensor]) -> float:
    return math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params.values()))


def clip_grads(params: dict[str, nx.Tensor], max_norm: float) -> float:
    norm = global_grad_norm(params)
    if norm > max_norm:
        scale = np.float32(max_norm / (norm + 1e-6))
        for p in params.values():
            p.grad *= scale
    return norm


def adamw_step(params: dict[str, nx.Tensor], state: OptimState, cfg: OptimConfig, lr: float) -> None:
    """One decoupled-weight-decay Adam update from the ``.grad`` of each parameter."""
    for name, p in params.items():
        if not np.all(np.isfinite(p.grad)):
            raise TrainingDivergenceError(f"non-finite gradient in parameter {name!r}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for name, p in params.items():
        g = p.grad
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        p.data *= np.float32(1.0 - lr * cfg.weight_decay)
        p.data -= (lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)).astype(np.float32)


@dataclass
class TrainFlags:
    """Ablation switches; the defaults are the full model."""

    mask_rate: float = 0.5
    multi_token: bool = True
    projection_kind: str = "residual_block"
    loss: str = "quantile"
    ctx_patches: int = 48
    exclude_norm_prefix: bool = True

    def apply(self, cfg: ModelConfig) -> ModelConfig:
        changes: dict = {"projection_kind": self.projection_kind}
        if not self.multi_token:
            changes["n_token"] = 1
        if self.loss == "median_l1":
            changes |= {"n_q": 1, "quantile_levels": (0.5,)}
        elif self.loss != "quantile":
            raise ValueError(f"unknown loss {self.loss!r}")
        return dataclasses.replace(cfg, **changes)


def future_targets(target: np.ndarray, mask: np.ndarray, n_token: int, p: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-position targets for the next ``n_token`` patches.

    ``target``/``mask`` are ``[B, T * p]``; returns ``[B, T, n_token, p]`` pairs
    with the mask zero wherever the future runs past the window.
    """
    b, n = target.shape
    t = n // p
    tp = target.reshape(b, t, p)
    mp = mask.reshape(b, t, p)
    out = np.zeros((b, t, n_token, p), dtype=np.float32)
    out_mask = np.zeros_like(out)
    for k in range(n_token):
        shift = k + 1
        if shift < t:
            out[:, : t - shift, k] = tp[:, shift:]
            out_mask[:, : t - shift, k] = mp[:, shift:]
    return out, out_mask


def _left_pad(arr: np.ndarray, length: int) -> np.ndarray:
    pad = [(length - arr.shape[0], 0)] + [(0, 0)] * (arr.ndim - 1)
    return np.pad(arr, pad)


def draw_batch(corpus: list[Series], cfg: ModelConfig, flags: TrainFlags, batch: int,
               rng: np.random.Generator, max_tries: int = 8):
    """Sample windows, patchify, mask; returns ``(x_hat, targets, target_mask)``."""
    window = flags.ctx_patches * cfg.p_in
    feats, tgts, masks = [], [], []
    attempts = 0
    while len(feats) < batch:
        attempts += 1
        if attempts > 100 * batch:
            raise RuntimeError("could not draw a usable training window from the corpus")
        s = corpus[int(rng.integers(0, len(corpus)))]
        for _ in range(max_tries):
            w = sample_window(s, window, rng)
            try:
                if zscore_filter(w):
                    break
            except NormalizationError:
                continue
        else:
            continue
        try:
            smp = make_sample(w, cfg, flags.mask_rate, rng, flags.exclude_norm_prefix)
        except (NormalizationError, ValueError):
            continue
        feats.append(smp.context_patches)
        tgts.append(smp.target.reshape(-1, cfg.p_in))
        masks.append(smp.target_mask.reshape(-1, cfg.p_in))
    t = max(f.shape[0] for f in feats)
    x = np.stack([_left_pad(f, t) for f in feats])
    y = np.stack([_left_pad(a, t).reshape(-1) for a in tgts])
    m = np.stack([_left_pad(a, t).reshape(-1) for a in masks])
    y, m = future_targets(y, m, cfg.n_token, cfg.p_out)
    return x, y, m


class BatchProducer:
    """Runs ``draw`` ``n`` times on a background thread into a bounded queue.

    One thread owns the sampling RNG, so the batch sequence is the same as
    drawing inline. An exception in ``draw`` is re-raised by :meth:`get`.
    """

    def __init__(self, draw, n: int, depth: int = 4):
        self._q: queue.Queue = queue.Queue(maxsize=depth)
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, args=(draw, n), daemon=True, name="batch-producer")
        self._thread.start()

    def _put(self, item) -> bool:
        while not self._stop.is_set():
            try:
                self._q.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def _run(self, draw, n: int) -> None:
        try:
            for _ in range(n):
                if not self._put(draw()):
                    return
        except Exception as exc:  # noqa: BLE001 - handed to the consumer
            self._put(exc)

    def get(self):
        item = self._q.get()
        if isinstance(item, Exception):
            raise item
        return item

    def close(self) -> None:
        self._stop.set()
        self._thread.join()


def loss_weights(flags: TrainFlags) -> list[float] | None:
    # 2 * pinball at 0.5 is absolute error
    return [2.0] if flags.loss == "median_l1" else None


def train(
    corpus: list[Series],
    model_cfg: ModelConfig,
    optim_cfg: OptimConfig,
    flags: TrainFlags | None = None,
    seed: int = 0,
    log_path: str | Path | None = None,
    ckpt_path: str | Path | None = None,
    ckpt_every: int = 0,
) -> tuple[Model, list[dict]]:
    """Train from scratch; returns the model and per-step ``step/loss/lr/grad_norm`` records.

    A checkpoint is written to ``ckpt_path`` every ``ckpt_every`` steps and at
    the end. A non-finite loss raises :class:`TrainingDivergenceError`, leaving
    the last good checkpoint on disk.
    """
    flags = flags or TrainFlags()
    cfg = flags.apply(model_cfg)
    corpus = [s for s in corpus if _filter_ok(s)]
    if not corpus:
        raise ValueError("corpus is empty after z-score filtering")
    rng = np.random.default_rng(seed)
    model = Model.init(cfg, seed)
    state = OptimState()
    weights = loss_weights(flags)
    log: list[dict] = []
    writer = None
    fh = open(log_path, "w", newline="") if log_path else None
    producer = BatchProducer(lambda: draw_batch(corpus, cfg, flags, optim_cfg.batch_size, rng),
                             optim_cfg.total_steps)
    try:
        if fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss", "lr", "grad_norm"])
        for step in range(1, optim_cfg.total_steps + 1):
            x, y, m = producer.get()
            model.zero_grad()
            loss = batch_quantile_loss(model(x), y, m, cfg.quantile_levels, weights)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergenceError(f"loss became {value} at step {step}")
            nx.backward(loss)
            gnorm = (clip_grads(model.params, optim_cfg.clip_norm) if optim_cfg.clip_norm
                     else global_grad_norm(model.params))
            lr = lr_at(step, optim_cfg)
            adamw_step(model.params, state, optim_cfg, lr)
            rec = {"step": step, "loss": value, "lr": lr, "grad_norm": gnorm}
            log.append(rec)
            if writer:
                writer.writerow([step, repr(value), repr(lr), repr(gnorm)])
            if step % 100 == 0:
                logger.info("step %d loss %.5f lr %.2e grad_norm %.3f", step, value, lr, gnorm)
            if ckpt_path and ckpt_every and step % ckpt_every == 0:
                save_checkpoint(model, ckpt_path)
    finally:
        producer.close()
        if fh:
            fh.close()
    if ckpt_path:
        save_checkpoint(model, ckpt_path)
    return model, log


def _filter_ok(s: Series) -> bool:
    try:
        return zscore_filter(s)
    except NormalizationError:
        return False
