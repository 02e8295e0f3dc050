"""Scale-specific fully-convolutional classifier and its training loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import ConvSpec

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class LayerSpec:
    name: str
    conv: ConvSpec
    relu: bool = True
    dropout: float = 0.0


@dataclass(frozen=True)
class NetworkConfig:
    layers: tuple[LayerSpec, ...]
    num_classes: int
    crop_size: int
    in_channels: int = 3
    preset: str = "custom"

    def __post_init__(self):
        if not self.layers:
            raise ValueError("network needs at least one layer")
        head = self.layers[-1].conv
        if head.out_channels != self.num_classes or head.kernel != (1, 1):
            raise ValueError(f"last layer must be a 1x1 conv with {self.num_classes} "
                             f"outputs, got {head}")
        for layer in self.layers:
            if not 0.0 <= layer.dropout < 1.0:
                raise ValueError(f"{layer.name}: dropout {layer.dropout} outside [0, 1)")

    def min_input_size(self) -> int:
        """Smallest square input that still yields a non-empty class map."""
        size = 1
        for layer in reversed(self.layers):
            c = layer.conv
            kh = max(c.kernel)
            size = max((size - 1) * c.stride + kh - 2 * c.pad, 1)
        # padding can make the inverse estimate optimistic; walk forward to confirm
        while self._out_size(size) < 1:
            size += 1
        while size > 1 and self._out_size(size - 1) >= 1:
            size -= 1
        return size

    def _out_size(self, size: int) -> int:
        for layer in self.layers:
            c = layer.conv
            if size + 2 * c.pad < max(c.kernel):
                return 0
            size = c.output_size(size, size)[0]
        return size

    def to_dict(self) -> dict:
        return {
            "preset": self.preset,
            "num_classes": self.num_classes,
            "crop_size": self.crop_size,
            "in_channels": self.in_channels,
            "layers": [{"name": l.name, "out_channels": l.conv.out_channels,
                        "kernel": list(l.conv.kernel), "stride": l.conv.stride,
                        "pad": l.conv.pad, "relu": l.relu, "dropout": l.dropout}
                       for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        layers = tuple(
            LayerSpec(l["name"], ConvSpec(l["out_channels"], tuple(l["kernel"]),
                                          l["stride"], l["pad"]),
                      l["relu"], l["dropout"])
            for l in d["layers"])
        return cls(layers, d["num_classes"], d["crop_size"], d.get("in_channels", 3),
                   d.get("preset", "custom"))


def _blocks(widths, first, head_width, num_classes, head_relu=True):
    # three strided blocks, two 1x1 layers and the class map
    w1, w2, w3 = widths
    k1, s1 = first
    return (
        LayerSpec("conv1.1", ConvSpec(w1, (k1, k1), s1, 0)),
        LayerSpec("conv1.2", ConvSpec(w1, (1, 1), 1, 0)),
        LayerSpec("conv1.3", ConvSpec(w1, (3, 3), 2, 1)),
        LayerSpec("conv2.1", ConvSpec(w2, (5, 5), 1, 2)),
        LayerSpec("conv2.2", ConvSpec(w2, (1, 1), 1, 0)),
        LayerSpec("conv2.3", ConvSpec(w2, (3, 3), 2, 0)),
        LayerSpec("conv3.1", ConvSpec(w3, (3, 3), 1, 1)),
        LayerSpec("conv3.2", ConvSpec(w3, (1, 1), 1, 0)),
        LayerSpec("conv3.3", ConvSpec(w3, (3, 3), 2, 0), dropout=0.5),
        LayerSpec("conv4", ConvSpec(head_width, (1, 1), 1, 0)),
        LayerSpec("conv5", ConvSpec(head_width, (1, 1), 1, 0)),
        LayerSpec("conv6", ConvSpec(num_classes, (1, 1), 1, 0), relu=head_relu),
    )


def table1_config(num_classes: int = 210, crop_size: int = 224) -> NetworkConfig:
    """The full-size single-scale architecture (96/256/384/1024 filters)."""
    return NetworkConfig(_blocks((96, 256, 384), (11, 4), 1024, num_classes),
                         num_classes, crop_size, preset="table1")


def desk_config(num_classes: int = 4, crop_size: int = 64) -> NetworkConfig:
    """Reduced preset for CPU runs.

    Same block structure as :func:`table1_config` with 16/32/48/128 filters and
    a 5x5 stride-2 first layer, so the minimum input side drops to 29 pixels.
    The class-map layer is linear: with few classes a rectified head can lose
    a class for good early in training.
    """
    return NetworkConfig(_blocks((16, 32, 48), (5, 2), 128, num_classes, head_relu=False),
                         num_classes, crop_size, preset="desk")


PRESETS = {"table1": table1_config, "desk": desk_config}


@dataclass
class TrainConfig:
    learning_rate: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_decay_factor: float = 10.0
    plateau_patience: int = 3
    min_delta: float = 1e-4
    batch_size: int = 16
    max_epochs: int = 60
    min_lr: float = 1e-5
    seed: int = 0
    augment_flip: bool = False

    def __post_init__(self):
        if self.lr_decay_factor <= 1:
            raise ValueError("lr_decay_factor must exceed 1")
        for name in ("learning_rate", "batch_size", "max_epochs", "plateau_patience", "min_lr"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("momentum and weight_decay must be non-negative")


class Network:
    """Parameters, optimizer state and normalization statistics of one scale's CNN."""

    def __init__(self, config: NetworkConfig, params: dict[str, list[np.ndarray]],
                 mean=None, std=None):
        self.config = config
        self.params = params
        self.velocity = {k: [np.zeros_like(p) for p in v] for k, v in params.items()}
        dt = T.get_dtype()
        c = config.in_channels
        self.mean = np.zeros(c, dtype=dt) if mean is None else np.asarray(mean, dtype=dt)
        self.std = np.ones(c, dtype=dt) if std is None else np.asarray(std, dtype=dt)
        self.epoch = 0
        self.lr: float | None = None

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    def zeros_like(self) -> "Network":
        net = Network(self.config,
                      {k: [np.zeros_like(p) for p in v] for k, v in self.params.items()},
                      self.mean.copy(), self.std.copy())
        return net

    def astype(self, dtype) -> "Network":
        net = Network(self.config,
                      {k: [p.astype(dtype) for p in v] for k, v in self.params.items()},
                      self.mean.astype(dtype), self.std.astype(dtype))
        net.epoch, net.lr = self.epoch, self.lr
        return net

    # -- forward / backward ---------------------------------------------------

    def forward(self, x: np.ndarray, training: bool = False,
                rng: np.random.Generator | None = None):
        """Return ``(logits, cache)`` for a batch ``x`` of shape N x C x H x W."""
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise T.ShapeError(f"expected N x {self.config.in_channels} x H x W, got {x.shape}")
        min_side = self.config.min_input_size()
        if min(x.shape[2:]) < min_side:
            raise T.ShapeError(f"input {x.shape[2]}x{x.shape[3]} is below the minimum "
                               f"input size {min_side}")
        h = ((x - self.mean.astype(x.dtype)[None, :, None, None])
             / self.std.astype(x.dtype)[None, :, None, None])
        cache = []
        for layer in self.config.layers:
            w, b = self.params[layer.name]
            cols = T.im2col(h, layer.conv)
            z = T.conv2d_forward(h, w, b, layer.conv, cols)
            a = T.relu_forward(z) if layer.relu else z
            a, mask = T.dropout_forward(a, layer.dropout, training, rng)
            cache.append((h, cols, z, mask))
            h = a
        logits = T.global_average_pool_forward(h)
        cache.append(h.shape)
        return logits, cache

    def backward(self, cache, grad_logits: np.ndarray, guided: bool = False,
                 need_params: bool = True, need_input: bool = True, trace=None):
        """Backpropagate ``grad_logits``; return ``(param_grads, grad_input)``.

        With ``guided`` every ReLU uses the guided-backprop gate. ``grad_input``
        is the gradient w.r.t. the raw (unnormalized) input, or None when
        ``need_input`` is false. If ``trace`` is a list, one
        ``(layer name, pre-activation, incoming gradient)`` tuple is appended per ReLU.
        """
        gate = T.guided_relu_backward if guided else T.relu_backward
        g = T.global_average_pool_backward(grad_logits, cache[-1])
        grads = {}
        first = self.config.layers[0].name
        for layer, (h, cols, z, mask) in zip(reversed(self.config.layers), reversed(cache[:-1])):
            g = T.dropout_backward(g, mask)
            if layer.relu:
                if trace is not None:
                    trace.append((layer.name, z, g))
                g = gate(g, z)
            w = self.params[layer.name][0]
            gx, gw, gb = T.conv2d_backward(g, h, w, layer.conv, cols,
                                           need_input_grad=need_input or layer.name != first)
            if need_params:
                grads[layer.name] = [gw, gb]
            g = gx
        if g is not None:
            g = g / self.std.astype(g.dtype)[None, :, None, None]
        return grads, g

    def posteriors(self, x: np.ndarray, training: bool = False, rng=None) -> np.ndarray:
        logits, _ = self.forward(x, training, rng)
        return T.softmax(logits)

    # -- persistence ----------------------------------------------------------

    def save(self, path) -> None:
        """Write ``<path>`` (tensor container) and ``<path>.json`` (sidecar)."""
        path = Path(path)
        names = [l.name for l in self.config.layers]
        tensors = [t for n in names for t in self.params[n]]
        T.write_tensors(path, tensors)
        sidecar = {"config": self.config.to_dict(), "epoch": self.epoch, "lr": self.lr,
                   "normalization": {"mean": [float(m) for m in self.mean],
                                     "std": [float(v) for v in self.std]},
                   "tensors": [f"{n}.{s}" for n in names for s in ("weight", "bias")]}
        Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2))

    @classmethod
    def load(cls, path) -> "Network":
        path = Path(path)
        side = json.loads(Path(str(path) + ".json").read_text())
        config = NetworkConfig.from_dict(side["config"])
        tensors = T.read_tensors(path)
        if len(tensors) != 2 * len(config.layers):
            raise ValueError(f"{path}: expected {2 * len(config.layers)} tensors, "
                             f"found {len(tensors)}")
        dt = T.get_dtype()
        params = {l.name: [tensors[2 * i].astype(dt), tensors[2 * i + 1].astype(dt)]
                  for i, l in enumerate(config.layers)}
        norm = side["normalization"]
        net = cls(config, params, np.array(norm["mean"]), np.array(norm.get("std", [1.0] * config.in_channels)))
        net.epoch, net.lr = side["epoch"], side["lr"]
        return net


def build_network(config: NetworkConfig, rng: np.random.Generator) -> Network:
    """He-normal weights (std sqrt(2 / fan_in)), zero biases."""
    dt = T.get_dtype()
    params = {}
    cin = config.in_channels
    for layer in config.layers:
        c = layer.conv
        kh, kw = c.kernel
        fan_in = cin * kh * kw
        w = rng.standard_normal((c.out_channels, cin, kh, kw)) * math.sqrt(2.0 / fan_in)
        params[layer.name] = [w.astype(dt), np.zeros(c.out_channels, dtype=dt)]
        cin = c.out_channels
    return Network(config, params)


def forward_crop(net: Network, crop: np.ndarray, training: bool = False, rng=None):
    """Posteriors for a batch of crops plus the backward cache."""
    logits, cache = net.forward(crop, training, rng)
    return T.softmax(logits), cache


def loss_and_grads(net: Network, x: np.ndarray, labels, training: bool = True, rng=None):
    logits, cache = net.forward(x, training, rng)
    loss, post, grad_logits = T.softmax_xent(logits, labels)
    grads, _ = net.backward(cache, grad_logits, need_input=False)
    return loss, grads


def apply_update(net: Network, grads, lr: float, momentum: float, weight_decay: float) -> None:
    """SGD step ``v <- momentum*v + g + wd*w``, ``p <- p - lr*v``; biases skip decay."""
    for name, (gw, gb) in grads.items():
        (w, b), (vw, vb) = net.params[name], net.velocity[name]
        vw *= momentum
        vw += gw
        if weight_decay:
            vw += weight_decay * w
        vb *= momentum
        vb += gb
        w -= lr * vw
        b -= lr * vb


def train_step(net: Network, crops: np.ndarray, labels, config: TrainConfig,
               rng: np.random.Generator, lr: float | None = None) -> float:
    if len(crops) == 0:
        raise ValueError("empty batch")
    loss, grads = loss_and_grads(net, crops, labels, training=True, rng=rng)
    if not np.isfinite(loss):
        raise DivergenceError(f"non-finite loss {loss} at epoch {net.epoch}")
    apply_update(net, grads, config.learning_rate if lr is None else lr,
                 config.momentum, config.weight_decay)
    return loss


def predict_full_image(net: Network, img: np.ndarray) -> np.ndarray:
    """Posterior for a whole H x W x C image; the class map is averaged before softmax."""
    x = T.as_tensor(np.transpose(img, (2, 0, 1))[None])
    return net.posteriors(x, training=False)[0]


def predict_images(net: Network, images: list[np.ndarray]) -> np.ndarray:
    """Full-image posteriors for a list of images, batching equal shapes."""
    out = np.zeros((len(images), net.num_classes), dtype=np.float64)
    groups: dict[tuple, list[int]] = {}
    for i, img in enumerate(images):
        groups.setdefault(img.shape, []).append(i)
    for shape, idx in groups.items():
        for start in range(0, len(idx), 16):
            chunk = idx[start:start + 16]
            x = T.as_tensor(np.stack([np.transpose(images[i], (2, 0, 1)) for i in chunk]))
            out[chunk] = net.posteriors(x)
    return out


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_mca: float
    lr: float


@dataclass
class ScaleData:
    """Images of one pyramid scale, as H x W x C float arrays in [0, 1]."""
    train_images: list
    train_labels: np.ndarray
    val_images: list
    val_labels: np.ndarray
    meta: dict = field(default_factory=dict)


def channel_stats(images) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and standard deviation over all pixels of ``images``."""
    c = images[0].shape[2]
    total, sq, count = np.zeros(c), np.zeros(c), 0
    for img in images:
        flat = img.reshape(-1, c).astype(np.float64)
        total += flat.sum(axis=0)
        sq += (flat * flat).sum(axis=0)
        count += flat.shape[0]
    mean = total / count
    std = np.sqrt(np.maximum(sq / count - mean * mean, 0.0))
    return mean, np.where(std > 1e-6, std, 1.0)


def train(net: Network, data: ScaleData, config: TrainConfig,
          on_epoch=None) -> tuple[Network, list[EpochRecord]]:
    """Epoch loop with plateau learning-rate decay on the validation loss.

    One random crop per training image per epoch. The learning rate is divided
    by ``lr_decay_factor`` once ``plateau_patience`` epochs pass without the
    validation loss improving by more than ``min_delta``; training stops at
    ``max_epochs`` or when the rate falls below ``min_lr``.
    """
    from .dataset import sample_crop  # local import: dataset depends on pyramid only
    from .evaluation import mean_class_accuracy

    if not data.train_images or not data.val_images:
        raise ValueError("training needs non-empty train and val splits")
    rng = np.random.default_rng([config.seed, 1])
    mean, std = channel_stats(data.train_images)
    net.mean, net.std = mean.astype(T.get_dtype()), std.astype(T.get_dtype())
    crop_size = min(net.config.crop_size,
                    min(min(im.shape[:2]) for im in data.train_images))
    lr = config.learning_rate if net.lr is None else net.lr
    best, stale = math.inf, 0
    history: list[EpochRecord] = []
    labels = np.asarray(data.train_labels)
    n = len(data.train_images)
    while net.epoch < config.max_epochs:
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            crops = np.stack([sample_crop(data.train_images[i], crop_size, rng,
                                          flip=config.augment_flip).tensor for i in idx])
            loss = train_step(net, T.as_tensor(crops), labels[idx], config, rng, lr)
            losses.append(loss * len(idx))
        net.epoch += 1
        post = predict_images(net, data.val_images)
        val_labels = np.asarray(data.val_labels)
        val_loss = float(-np.mean(np.log(np.maximum(
            post[np.arange(len(val_labels)), val_labels], 1e-12))))
        val_mca = mean_class_accuracy(val_labels, post.argmax(axis=1), net.num_classes)
        rec = EpochRecord(net.epoch, float(sum(losses) / n), val_loss, val_mca, lr)
        history.append(rec)
        log.info("epoch %d train %.4f val %.4f mca %.2f lr %.1e", rec.epoch,
                 rec.train_loss, rec.val_loss, rec.val_mca, lr)
        if on_epoch is not None:
            on_epoch(net, rec)
        if val_loss < best - config.min_delta:
            best, stale = val_loss, 0
        else:
            stale += 1
            if stale >= config.plateau_patience:
                lr /= config.lr_decay_factor
                stale = 0
                if lr < config.min_lr:
                    break
    net.lr = lr
    return net, history


def write_history(history: list[EpochRecord], path) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,train_loss,val_loss,val_mca,lr\n")
        for r in history:
            fh.write(f"{r.epoch},{r.train_loss:.6f},{r.val_loss:.6f},{r.val_mca:.4f},{r.lr:.6g}\n")


def read_history(path) -> list[EpochRecord]:
    rows = Path(path).read_text().strip().splitlines()[1:]
    out = []
    for row in rows:
        e, tl, vl, vm, lr = row.split(",")
        out.append(EpochRecord(int(e), float(tl), float(vl), float(vm), float(lr)))
    return out
