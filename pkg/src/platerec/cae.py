"""Convolutional autoencoder used as the image feature extractor.

Encoder: three 2x downsamplings over building blocks (conv 3x3 + batch norm
+ ReLU) with channel widths 64, 32, 16, 3; the 3-channel bottleneck feature
maps, flattened, are the image encoding. Decoder mirrors the encoder with
nearest-neighbor upsampling and ends in a sigmoid so reconstructions stay
in (0, 1).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .metrics import EarlyStopState


@dataclass
class CaeConfig:
    input_height: int = 32
    input_width: int = 32
    input_channels: int = 3
    loss_kind: str = "bce"
    batch_size: int = 32
    patience: int = 6
    max_epochs: int = 100
    learning_rate: float = 0.001
    seed: int = 0

    def __post_init__(self):
        if self.input_height % 8 or self.input_width % 8:
            raise ValueError(
                f"input dimensions must be divisible by 8 (three 2x poolings), "
                f"got {self.input_height}x{self.input_width}"
            )
        if self.input_channels != 3:
            raise ValueError("only 3-channel inputs are supported")
        if self.loss_kind not in ("bce", "mse"):
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")

    @property
    def code_shape(self):
        return (3, self.input_height // 8, self.input_width // 8)

    @property
    def code_length(self):
        c, h, w = self.code_shape
        return c * h * w

    def to_dict(self):
        return {
            "input_height": self.input_height,
            "input_width": self.input_width,
            "input_channels": self.input_channels,
            "loss_kind": self.loss_kind,
            "batch_size": self.batch_size,
            "patience": self.patience,
            "max_epochs": self.max_epochs,
            "learning_rate": self.learning_rate,
            "seed": self.seed,
        }


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    wall_time: list[float] = field(default_factory=list)
    best_epoch: int = -1

    def to_dict(self):
        return {
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "wall_time": self.wall_time,
            "best_epoch": self.best_epoch,
        }


def _building_block(cin, cout, rng, dtype):
    return [nn.Conv3x3(cin, cout, rng, dtype), nn.BatchNorm(cout, dtype), nn.ReLU()]


class CaeModel:

    def __init__(self, encoder: nn.Sequential, decoder: nn.Sequential, config: CaeConfig):
        self.encoder = encoder
        self.decoder = decoder
        self.config = config

    def params(self):
        return self.encoder.params() + self.decoder.params()

    def forward(self, x, mode=nn.INFERENCE):
        return self.decoder.forward(self.encoder.forward(x, mode=mode), mode=mode)

    def backward(self, grad_out):
        return self.encoder.backward(self.decoder.backward(grad_out))

    def state_dict(self):
        out = {}
        for name, arr in self.encoder.state_dict().items():
            out[f"encoder.{name}"] = arr
        for name, arr in self.decoder.state_dict().items():
            out[f"decoder.{name}"] = arr
        return out


def build_cae(config: CaeConfig, rng=None, dtype=nn.DTYPE) -> CaeModel:
    if rng is None:
        rng = nn.make_rng(config.seed, "cae-init")
    enc = []
    enc += _building_block(3, 64, rng, dtype)
    enc.append(nn.MaxPool2x2())
    enc += _building_block(64, 32, rng, dtype)
    enc.append(nn.MaxPool2x2())
    enc += _building_block(32, 16, rng, dtype)
    enc += _building_block(16, 3, rng, dtype)
    enc.append(nn.MaxPool2x2())

    dec = []
    dec += _building_block(3, 16, rng, dtype)
    dec.append(nn.Upsample2x())
    dec += _building_block(16, 32, rng, dtype)
    dec.append(nn.Upsample2x())
    dec += _building_block(32, 64, rng, dtype)
    dec.append(nn.Upsample2x())
    dec.append(nn.Conv3x3(64, 3, rng, dtype))
    dec.append(nn.BatchNorm(3, dtype))
    dec.append(nn.Sigmoid())
    return CaeModel(nn.Sequential(enc), nn.Sequential(dec), config)


def _as_batch(images, config):
    """HWC image stack -> NCHW float array, validating dimensions."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1:] != (config.input_height, config.input_width, 3):
        raise ValueError(
            f"expected images of shape ({config.input_height}, {config.input_width}, 3), "
            f"got {arr.shape}"
        )
    return np.ascontiguousarray(arr.transpose(0, 3, 1, 2))


def train_cae(model: CaeModel, train_images, val_images, config: CaeConfig):
    """Early-stopped reconstruction training; restores the best-epoch weights.

    Monitors validation reconstruction loss (inference mode); stops after
    `patience` epochs without improvement and at most max_epochs.
    """
    x_train = _as_batch(train_images, config)
    if x_train.shape[0] == 0:
        raise ValueError("empty train set")
    x_val = _as_batch(val_images, config) if len(val_images) else x_train

    rng = nn.make_rng(config.seed, "cae-train")
    params = model.params()
    history = TrainHistory()
    stopper = EarlyStopState(patience=config.patience)
    n = x_train.shape[0]

    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            batch = x_train[order[start:start + config.batch_size]]
            if batch.shape[0] < 2:
                continue  # training-mode batch norm needs at least two samples
            out = model.forward(batch, mode=nn.TRAINING)
            loss, grad = nn.loss_eval(out, batch, config.loss_kind)
            nn.zero_grads(params)
            model.backward(grad)
            nn.adam_step(params, config.learning_rate)
            losses.append(loss)
        train_loss = float(np.mean(losses))
        val_loss = evaluate_loss(model, x_val, config)
        history.train_loss.append(train_loss)
        history.val_loss.append(val_loss)
        history.wall_time.append(time.perf_counter() - t0)
        keep_going = stopper.update(-val_loss, epoch, nn.snapshot_state(model))
        if not keep_going:
            break

    if stopper.best_snapshot is not None:
        nn.load_state(model, stopper.best_snapshot)
        history.best_epoch = stopper.best_epoch
    return model, history


def evaluate_loss(model: CaeModel, x_nchw, config: CaeConfig, batch_size=64):
    losses, weights = [], []
    for start in range(0, x_nchw.shape[0], batch_size):
        batch = x_nchw[start:start + batch_size]
        out = model.forward(batch, mode=nn.INFERENCE)
        loss, _ = nn.loss_eval(out, batch, config.loss_kind)
        losses.append(loss)
        weights.append(batch.shape[0])
    return float(np.average(losses, weights=weights))


def encode_images(model: CaeModel, images, batch_size=64):
    """Flattened bottleneck codes (inference mode), one row per image."""
    x = _as_batch(images, model.config)
    codes = []
    for start in range(0, x.shape[0], batch_size):
        code = model.encoder.forward(x[start:start + batch_size], mode=nn.INFERENCE)
        codes.append(code.reshape(code.shape[0], -1))
    return np.concatenate(codes, axis=0)


def encode_image(model: CaeModel, image):
    return encode_images(model, [image])[0]


def reconstruct_image(model: CaeModel, image):
    x = _as_batch(image, model.config)
    out = model.forward(x, mode=nn.INFERENCE)
    return np.ascontiguousarray(out[0].transpose(1, 2, 0))
