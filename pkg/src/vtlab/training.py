"""Training loop, evaluation, checkpointing, and pretraining transfer."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as tt
from .data import VideoDataset, gen_image_task
from .errors import ConfigError, FormatError, TransferError
from .models import Model, ModelConfig, build_model, inflate_2d_to_3d, spatial_restriction
from .tensor import NumericsError, Tensor

CKPT_MAGIC = b"VTCK"


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 3e-4
    weight_decay: float = 0.05
    betas: tuple = (0.9, 0.999)
    warmup_fraction: float = 0.1
    seed: int = 0
    eval_batch_size: int = 64

    def __post_init__(self):
        if not 0 <= self.warmup_fraction < 1:
            raise ConfigError(f"warmup_fraction must be in [0, 1), got {self.warmup_fraction}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup then cosine decay to zero."""
    if total_steps <= 0:
        return cfg.lr
    warm = max(int(round(cfg.warmup_fraction * total_steps)), 0)
    if step < warm:
        return cfg.lr * (step + 1) / warm
    progress = (step - warm) / max(total_steps - warm, 1)
    return cfg.lr * 0.5 * (1.0 + np.cos(np.pi * progress))


def train(model: Model, ds: VideoDataset, indices=None, cfg: TrainConfig | None = None,
          log=None) -> dict:
    """Minibatch AdamW training; returns a history of per-step losses.

    Batch order is drawn from a counter-based generator keyed by cfg.seed, so
    runs are reproducible. A non-finite loss or update aborts with the step
    and learning rate in the message.
    """
    cfg = cfg or TrainConfig()
    indices = np.arange(len(ds)) if indices is None else np.asarray(indices)
    if len(indices) == 0:
        raise ConfigError("empty training set")
    params = model.parameters()
    state = tt.AdamWState(params)
    order_rng = np.random.Generator(np.random.Philox(key=[cfg.seed, 0]))
    steps_per_epoch = -(-len(indices) // cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    losses = []
    step = 0
    for epoch in range(cfg.epochs):
        perm = indices[order_rng.permutation(len(indices))]
        for b in range(steps_per_epoch):
            batch = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            x = Tensor(ds.videos[batch].astype(model.dtype))
            y = ds.labels[batch]
            lr = lr_at(step, total_steps, cfg)
            try:
                model.zero_grads()
                loss = tt.cross_entropy(model.forward(x), y)
                tt.backward(loss)
                tt.adamw_step(params, state, lr=lr, betas=cfg.betas,
                              weight_decay=cfg.weight_decay)
            except NumericsError as e:
                raise NumericsError(
                    f"training diverged at step {step} (epoch {epoch}, lr {lr:.3e}): {e}"
                ) from e
            losses.append(float(loss.data))
            if log is not None:
                log(step, epoch, losses[-1], lr)
            step += 1
    return {"losses": losses, "steps": step, "epochs": cfg.epochs}


def evaluate(model: Model, ds: VideoDataset, indices=None, topk=(1,),
             batch_size: int = 64) -> dict:
    """Top-k accuracy. Ties in the logits resolve to the lower class index."""
    indices = np.arange(len(ds)) if indices is None else np.asarray(indices)
    kmax = max(topk)
    hits = {k: 0 for k in topk}
    for s in range(0, len(indices), batch_size):
        batch = indices[s:s + batch_size]
        x = Tensor(ds.videos[batch].astype(model.dtype))
        logits = model.forward(x).data
        # stable sort on negated logits: equal scores keep ascending class order
        ranked = np.argsort(-logits, axis=1, kind="stable")[:, :kmax]
        y = ds.labels[batch][:, None]
        for k in topk:
            hits[k] += int(np.sum(np.any(ranked[:, :k] == y, axis=1)))
    n = len(indices)
    return {f"top{k}": hits[k] / n for k in topk}


def pretrain_and_inflate(video_config: ModelConfig, n_images: int = 2000,
                         image_seed: int = 100, train_cfg: TrainConfig | None = None,
                         seed: int = 0, dtype=np.float32) -> Model:
    """Train the 2D restriction on the image task, then inflate to video."""
    image_config = spatial_restriction(video_config)
    if image_config.num_classes != video_config.num_classes:
        raise TransferError("restriction changed the class count")
    images = gen_image_task(n_images, seed=image_seed)
    model2d = build_model(image_config, seed=seed, dtype=dtype)
    train(model2d, images, cfg=train_cfg or TrainConfig(epochs=10, seed=seed))
    return inflate_2d_to_3d(model2d, video_config, seed=seed, dtype=dtype)


# ---------------------------------------------------------------------------
# checkpoints
#
# Layout: MAGIC | u64 header_len | JSON header (config, dtype, names, shapes,
# offsets) | raw little-endian payload.


def save_checkpoint(path, model: Model, extra: dict | None = None) -> None:
    names = list(model.named)
    header = {
        "config": model.config.to_dict(),
        "dtype": model.dtype.name,
        "params": {n: list(model.named[n].shape) for n in names},
        "extra": extra or {},
    }
    hb = json.dumps(header).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC + struct.pack("<Q", len(hb)) + hb)
        for n in names:
            f.write(np.ascontiguousarray(model.named[n].data).tobytes())


def load_checkpoint(path) -> Model:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a vtlab checkpoint")
    hlen, = struct.unpack("<Q", raw[4:12])
    header = json.loads(raw[12:12 + hlen])
    config = ModelConfig.from_dict(header["config"])
    dtype = np.dtype(header["dtype"])
    model = build_model(config, seed=0, dtype=dtype)
    off = 12 + hlen
    for name, shape in header["params"].items():
        if name not in model.named:
            raise FormatError(f"{path}: unknown parameter {name}")
        shape = tuple(shape)
        if model.named[name].shape != shape:
            raise FormatError(f"{path}: shape mismatch for {name}")
        n = int(np.prod(shape))
        if off + n * dtype.itemsize > len(raw):
            raise FormatError(f"{path}: truncated payload at parameter {name}")
        arr = np.frombuffer(raw, dtype=dtype, count=n, offset=off)
        model.named[name].data = arr.reshape(shape).copy()
        off += n * dtype.itemsize
    if off != len(raw):
        raise FormatError(f"{path}: trailing or missing payload bytes")
    return model
