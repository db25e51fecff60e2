"""Small convolutional binary classifier built directly on numpy.

The architecture family is fixed: stacks of 3x3 convolutions with padding 1,
ReLU, and 2x2 max pooling, followed by fully connected layers whose widths
shrink by a constant step down to a single sigmoid output. Everything runs
in float64 so gradients can be checked against central finite differences.

Also provides class-activation heatmaps and guided backpropagation for
inspecting what a trained classifier responds to, and a simple checkpoint
format (JSON header plus a little-endian float64 weight blob).
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .scandata import CScanImage, IMAGE_SIZE

__all__ = [
    "BATCH_SIZES",
    "CnnConfig",
    "CnnModel",
    "Explanation",
    "TrainReport",
    "backward",
    "bce_loss",
    "build_model",
    "forward",
    "grad_cam",
    "guided_gradcam",
    "load_checkpoint",
    "predict_labels",
    "render_explanation",
    "save_checkpoint",
    "train",
]

BATCH_SIZES = (16, 32, 64, 128, 256)


@dataclass(frozen=True)
class CnnConfig:
    """Hyperparameters of one classifier, each within its search range."""

    n_fc_layers: int = 1
    n_conv_layers: int = 3
    channel_ratio: int = 3
    batch_size: int = 16
    early_stop: int = 1
    learning_rate: float = 0.014
    momentum: float = 0.176
    epochs: int = 264

    def __post_init__(self):
        if not 1 <= int(self.n_fc_layers) == self.n_fc_layers <= 6:
            raise ValueError("n_fc_layers must be an integer in [1, 6]")
        if not 1 <= int(self.n_conv_layers) == self.n_conv_layers <= 6:
            raise ValueError("n_conv_layers must be an integer in [1, 6]")
        if not 1 <= int(self.channel_ratio) == self.channel_ratio <= 3:
            raise ValueError("channel_ratio must be an integer in [1, 3]")
        if self.batch_size not in BATCH_SIZES:
            raise ValueError(f"batch_size must be one of {BATCH_SIZES}")
        if not 0 <= int(self.early_stop) == self.early_stop <= 5:
            raise ValueError("early_stop must be an integer in [0, 5]")
        if not 1e-5 <= self.learning_rate <= 0.5:
            raise ValueError("learning_rate must lie in [1e-5, 0.5]")
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")
        if not 100 <= int(self.epochs) == self.epochs <= 500:
            raise ValueError("epochs must be an integer in [100, 500]")

    def to_dict(self) -> dict:
        return {"n_fc_layers": self.n_fc_layers,
                "n_conv_layers": self.n_conv_layers,
                "channel_ratio": self.channel_ratio,
                "batch_size": self.batch_size,
                "early_stop": self.early_stop,
                "learning_rate": self.learning_rate,
                "momentum": self.momentum,
                "epochs": self.epochs}

    @classmethod
    def from_dict(cls, d: dict) -> "CnnConfig":
        return cls(n_fc_layers=int(d["n_fc_layers"]),
                   n_conv_layers=int(d["n_conv_layers"]),
                   channel_ratio=int(d["channel_ratio"]),
                   batch_size=int(d["batch_size"]),
                   early_stop=int(d["early_stop"]),
                   learning_rate=float(d["learning_rate"]),
                   momentum=float(d["momentum"]),
                   epochs=int(d["epochs"]))


def _he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class _Conv3x3:
    """3x3 convolution, stride 1, padding 1 (spatial size preserved)."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator):
        self.weight = _he_uniform(rng, (out_ch, in_ch, 3, 3), in_ch * 9)
        self.bias = np.zeros(out_ch)
        self.grad_weight = None
        self.grad_bias = None
        self._padded = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        n, _, h, w = x.shape
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        self._padded = xp
        out = np.zeros((n, self.weight.shape[0], h, w))
        for di in range(3):
            for dj in range(3):
                out += np.einsum("oc,nchw->nohw", self.weight[:, :, di, dj],
                                 xp[:, :, di:di + h, dj:dj + w],
                                 optimize=True)
        return out + self.bias[None, :, None, None]

    def backward(self, dy: np.ndarray) -> np.ndarray:
        xp = self._padded
        n, _, hp, wp = xp.shape
        h, w = hp - 2, wp - 2
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = dy.sum(axis=(0, 2, 3))
        dxp = np.zeros_like(xp)
        for di in range(3):
            for dj in range(3):
                xs = xp[:, :, di:di + h, dj:dj + w]
                self.grad_weight[:, :, di, dj] = np.einsum(
                    "nohw,nchw->oc", dy, xs, optimize=True)
                dxp[:, :, di:di + h, dj:dj + w] += np.einsum(
                    "oc,nohw->nchw", self.weight[:, :, di, dj], dy,
                    optimize=True)
        return dxp[:, :, 1:-1, 1:-1]


class _ReLU:
    def __init__(self):
        self.out = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self.out = np.maximum(x, 0.0)
        return self.out

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return dy * (self.out > 0)

    def backward_guided(self, dy: np.ndarray) -> np.ndarray:
        # pass gradient only where the unit fired and the gradient agrees
        return dy * (self.out > 0) * (dy > 0)


class _MaxPool2:
    """2x2 max pooling, stride 2; gradient routes to the first max index."""

    def __init__(self):
        self._idx = None
        self._shape = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ValueError("pooled input must have even spatial size")
        self._shape = x.shape
        win = (x.reshape(n, c, h // 2, 2, w // 2, 2)
               .transpose(0, 1, 2, 4, 3, 5)
               .reshape(n, c, h // 2, w // 2, 4))
        self._idx = np.argmax(win, axis=-1)
        return np.take_along_axis(win, self._idx[..., None], axis=-1)[..., 0]

    def backward(self, dy: np.ndarray) -> np.ndarray:
        n, c, h, w = self._shape
        dwin = np.zeros((n, c, h // 2, w // 2, 4))
        np.put_along_axis(dwin, self._idx[..., None], dy[..., None], axis=-1)
        return (dwin.reshape(n, c, h // 2, w // 2, 2, 2)
                .transpose(0, 1, 2, 4, 3, 5)
                .reshape(n, c, h, w))


class _Flatten:
    def __init__(self):
        self._shape = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return dy.reshape(self._shape)


class _Dense:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        self.weight = _he_uniform(rng, (n_in, n_out), n_in)
        self.bias = np.zeros(n_out)
        self.grad_weight = None
        self.grad_bias = None
        self._input = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._input = x
        return x @ self.weight + self.bias

    def backward(self, dy: np.ndarray) -> np.ndarray:
        self.grad_weight = self._input.T @ dy
        self.grad_bias = dy.sum(axis=0)
        return dy @ self.weight.T


@dataclass(eq=False)
class CnnModel:
    config: CnnConfig
    input_size: int
    layers: list = field(repr=False)
    conv_relu_indices: list = field(repr=False)

    def param_items(self) -> list[tuple[str, np.ndarray]]:
        items = []
        conv_i = fc_i = 0
        for layer in self.layers:
            if isinstance(layer, _Conv3x3):
                items.append((f"conv{conv_i}.weight", layer.weight))
                items.append((f"conv{conv_i}.bias", layer.bias))
                conv_i += 1
            elif isinstance(layer, _Dense):
                items.append((f"fc{fc_i}.weight", layer.weight))
                items.append((f"fc{fc_i}.bias", layer.bias))
                fc_i += 1
        return items

    def grad_items(self) -> dict[str, np.ndarray]:
        grads = {}
        conv_i = fc_i = 0
        for layer in self.layers:
            if isinstance(layer, _Conv3x3):
                grads[f"conv{conv_i}.weight"] = layer.grad_weight
                grads[f"conv{conv_i}.bias"] = layer.grad_bias
                conv_i += 1
            elif isinstance(layer, _Dense):
                grads[f"fc{fc_i}.weight"] = layer.grad_weight
                grads[f"fc{fc_i}.bias"] = layer.grad_bias
                fc_i += 1
        return grads

    def param_vector(self) -> np.ndarray:
        return np.concatenate([a.ravel() for _, a in self.param_items()])

    def set_param_vector(self, vec: np.ndarray) -> None:
        pos = 0
        for _, arr in self.param_items():
            arr.flat[:] = vec[pos:pos + arr.size]
            pos += arr.size
        if pos != vec.size:
            raise ValueError("parameter vector size mismatch")


def fc_widths(n_flat: int, n_fc_layers: int) -> list[int]:
    """Hidden widths from the constant-step shrink rule, final width 1.

    With F flattened units and L layers, each hidden layer drops by
    floor(F/L) from F; the last layer always has a single output unit.
    """
    step = n_flat // n_fc_layers
    widths = [n_flat - i * step for i in range(1, n_fc_layers)]
    return widths + [1]


def build_model(cfg: CnnConfig, rng: np.random.Generator,
                input_size: int = IMAGE_SIZE) -> CnnModel:
    """Assemble the conv and dense stacks with He-uniform initial weights."""
    spatial = input_size
    if input_size % (2 ** cfg.n_conv_layers) != 0:
        raise ValueError(
            f"input size {input_size} does not survive "
            f"{cfg.n_conv_layers} halvings")
    layers = []
    conv_relu_indices = []
    in_ch = 1
    for k in range(1, cfg.n_conv_layers + 1):
        out_ch = cfg.channel_ratio ** k
        layers.append(_Conv3x3(in_ch, out_ch, rng))
        conv_relu_indices.append(len(layers))
        layers.append(_ReLU())
        layers.append(_MaxPool2())
        in_ch = out_ch
        spatial //= 2
    layers.append(_Flatten())
    n_flat = in_ch * spatial * spatial
    widths = fc_widths(n_flat, cfg.n_fc_layers)
    n_in = n_flat
    for i, width in enumerate(widths):
        layers.append(_Dense(n_in, width, rng))
        if i < len(widths) - 1:
            layers.append(_ReLU())
        n_in = width
    return CnnModel(config=cfg, input_size=input_size, layers=layers,
                    conv_relu_indices=conv_relu_indices)


def _as_batch(batch, input_size: int) -> np.ndarray:
    if isinstance(batch, np.ndarray):
        x = batch.astype(np.float64, copy=False)
    else:
        x = np.stack([np.asarray(img.pixels, dtype=np.float64)
                      for img in batch])
    if x.ndim == 3:
        x = x[:, None, :, :]
    if x.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != (input_size,) * 2:
        raise ValueError(
            f"expected batch shaped (n, 1, {input_size}, {input_size})")
    return x


def _forward_logits(model: CnnModel, x: np.ndarray) -> np.ndarray:
    out = x
    for layer in model.layers:
        out = layer.forward(out)
    return out[:, 0]


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _bce_from_logits(z: np.ndarray, y: np.ndarray) -> float:
    # softplus(z) - y*z, evaluated without overflow for large |z|
    softplus = np.logaddexp(0.0, z)
    return float(np.mean(softplus - y * z))


def forward(model: CnnModel, batch) -> np.ndarray:
    """Probabilities in (0, 1), one per image."""
    x = _as_batch(batch, model.input_size)
    return _sigmoid(_forward_logits(model, x))


def predict_labels(model: CnnModel, batch) -> np.ndarray:
    """Boolean defect calls at the fixed 0.5 threshold."""
    return forward(model, batch) >= 0.5


def bce_loss(model: CnnModel, batch, labels) -> float:
    x = _as_batch(batch, model.input_size)
    y = np.asarray(labels, dtype=np.float64)
    return _bce_from_logits(_forward_logits(model, x), y)


def backward(model: CnnModel, batch, labels) -> dict[str, np.ndarray]:
    """Mean-BCE gradients for every parameter, keyed by parameter name."""
    x = _as_batch(batch, model.input_size)
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != (x.shape[0],):
        raise ValueError("labels must match the batch length")
    if y.min() < 0.0 or y.max() > 1.0:
        raise ValueError("labels must lie in [0, 1]")
    z = _forward_logits(model, x)
    dz = (_sigmoid(z) - y) / y.size
    dy = dz[:, None]
    for layer in reversed(model.layers):
        dy = layer.backward(dy)
    return model.grad_items()


@dataclass
class TrainReport:
    train_losses: list[float]
    val_losses: list[float] | None
    stopped_epoch: int
    seed: int | None
    model: CnnModel


def _dataset_arrays(dataset) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(dataset, tuple):
        x, y = dataset
        return np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    x = np.stack([np.asarray(img.pixels, dtype=np.float64)
                  for img in dataset.images])
    return x, dataset.labels().astype(np.float64)


def train(model: CnnModel, dataset, cfg: CnnConfig, rng: np.random.Generator,
          max_epochs: int | None = None, seed: int | None = None) -> TrainReport:
    """SGD with momentum over shuffled mini-batches.

    With early_stop > 0, 10% of the data is held out and training stops
    once validation loss fails to improve for that many consecutive
    epochs. max_epochs caps cfg.epochs for budgeted runs; it does not
    alter any other hyperparameter.
    """
    x, y = _dataset_arrays(dataset)
    if x.ndim == 3:
        x = x[:, None, :, :]
    n = x.shape[0]
    if n == 0:
        raise ValueError("dataset is empty")
    if len(np.unique(y)) < 2:
        raise ValueError("training requires both classes present")
    epochs = cfg.epochs if max_epochs is None else min(cfg.epochs, max_epochs)

    if cfg.early_stop > 0:
        n_val = max(1, int(round(0.1 * n)))
        if n_val >= n:
            raise ValueError("dataset too small to hold out validation data")
        perm = rng.permutation(n)
        val_idx, train_idx = perm[:n_val], perm[n_val:]
        x_val, y_val = x[val_idx], y[val_idx]
        x_tr, y_tr = x[train_idx], y[train_idx]
    else:
        x_val = y_val = None
        x_tr, y_tr = x, y

    velocity = {name: np.zeros_like(arr) for name, arr in model.param_items()}
    train_losses: list[float] = []
    val_losses: list[float] | None = [] if cfg.early_stop > 0 else None
    best_val = np.inf
    stale = 0
    stopped_epoch = 0

    n_tr = x_tr.shape[0]
    for epoch in range(epochs):
        order = rng.permutation(n_tr)
        epoch_loss = 0.0
        for start in range(0, n_tr, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb, yb = x_tr[idx], y_tr[idx]
            z = _forward_logits(model, xb)
            epoch_loss += _bce_from_logits(z, yb) * idx.size
            dz = (_sigmoid(z) - yb) / yb.size
            dy = dz[:, None]
            for layer in reversed(model.layers):
                dy = layer.backward(dy)
            grads = model.grad_items()
            for name, arr in model.param_items():
                v = velocity[name]
                v *= cfg.momentum
                v -= cfg.learning_rate * grads[name]
                arr += v
        train_losses.append(epoch_loss / n_tr)
        stopped_epoch = epoch + 1
        if cfg.early_stop > 0:
            vloss = _bce_from_logits(_forward_logits(model, x_val), y_val)
            val_losses.append(vloss)
            if vloss < best_val:
                best_val = vloss
                stale = 0
            else:
                stale += 1
                if stale >= cfg.early_stop:
                    break
    return TrainReport(train_losses=train_losses, val_losses=val_losses,
                       stopped_epoch=stopped_epoch, seed=seed, model=model)


# --------------------------------------------------------------- explanations

def _single_image(img, input_size: int) -> np.ndarray:
    if isinstance(img, CScanImage):
        px = np.asarray(img.pixels, dtype=np.float64)
    else:
        px = np.asarray(img, dtype=np.float64)
    if px.shape != (input_size, input_size):
        raise ValueError(f"expected a {input_size}x{input_size} image")
    return px


def _logit_gradients(model: CnnModel, x: np.ndarray,
                     guided: bool = False) -> tuple[np.ndarray, list]:
    """Backprop d(logit)/d(everything); returns input grad and the
    gradient w.r.t. each layer's output, aligned with model.layers."""
    _forward_logits(model, x)
    grads_out: list = [None] * len(model.layers)
    dy = np.ones((1, 1))
    for j in range(len(model.layers) - 1, -1, -1):
        grads_out[j] = dy
        layer = model.layers[j]
        if guided and isinstance(layer, _ReLU):
            dy = layer.backward_guided(dy)
        else:
            dy = layer.backward(dy)
    return dy, grads_out


def grad_cam(model: CnnModel, img, conv_layer_index: int) -> np.ndarray:
    """Class-activation heatmap for one image, upsampled to input size.

    Channel weights are the spatial means of the logit gradient at the
    chosen conv block's post-ReLU maps; the weighted sum is rectified,
    nearest-neighbor upsampled, and scaled by its own maximum.
    """
    if not 0 <= conv_layer_index < len(model.conv_relu_indices):
        raise ValueError(
            f"conv_layer_index out of range [0, "
            f"{len(model.conv_relu_indices) - 1}]")
    px = _single_image(img, model.input_size)
    x = px[None, None, :, :]
    _, grads_out = _logit_gradients(model, x)
    relu_idx = model.conv_relu_indices[conv_layer_index]
    maps = model.layers[relu_idx].out[0]
    d_maps = grads_out[relu_idx][0]
    alphas = d_maps.mean(axis=(1, 2))
    cam = np.maximum(np.einsum("k,khw->hw", alphas, maps), 0.0)
    factor = model.input_size // cam.shape[0]
    cam = np.repeat(np.repeat(cam, factor, axis=0), factor, axis=1)
    peak = cam.max()
    return cam / peak if peak > 0 else cam


@dataclass
class Explanation:
    heatmap: np.ndarray
    guided_bp: np.ndarray
    guided_cam: np.ndarray
    mixed: np.ndarray


def guided_gradcam(model: CnnModel, img,
                   conv_layer_index: int | None = None) -> Explanation:
    """Guided backprop, its product with the heatmap, and the overlay.

    The overlay adds 1.5 times the guided class-activation product to the
    input image and rescales the result to [0, 1].
    """
    if conv_layer_index is None:
        conv_layer_index = len(model.conv_relu_indices) - 1
    px = _single_image(img, model.input_size)
    heatmap = grad_cam(model, px, conv_layer_index)
    dx, _ = _logit_gradients(model, px[None, None, :, :], guided=True)
    guided_bp = dx[0, 0]
    guided_cam = guided_bp * heatmap
    mixed = 1.5 * guided_cam + px
    span = np.ptp(mixed)
    if span > 0:
        mixed = (mixed - mixed.min()) / span
    else:
        mixed = np.zeros_like(mixed)
    return Explanation(heatmap=heatmap, guided_bp=guided_bp,
                       guided_cam=guided_cam, mixed=mixed)


def render_explanation(img, explanation: Explanation, path) -> None:
    """Input, heatmap, and overlay side by side as one PNG."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    px = np.asarray(img.pixels if isinstance(img, CScanImage) else img)
    fig, axes = plt.subplots(1, 3, figsize=(9, 3.2))
    panels = [(px, "input", "gray"),
              (explanation.heatmap, "activation", "viridis"),
              (explanation.mixed, "overlay", "gray")]
    for ax, (data, title, cmap) in zip(axes, panels):
        ax.imshow(data, cmap=cmap, vmin=0.0, vmax=1.0)
        ax.set_title(title)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# ---------------------------------------------------------------- checkpoints

_CKPT_MAGIC = b"TCNN"


def save_checkpoint(model: CnnModel, path, seed: int | None = None) -> None:
    """JSON header followed by all weights as one little-endian f64 blob."""
    items = model.param_items()
    header = {
        "format_version": 1,
        "config": model.config.to_dict(),
        "input_size": model.input_size,
        "seed": seed,
        "params": [{"name": n, "shape": list(a.shape)} for n, a in items],
    }
    blob = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes()
                    for _, a in items)
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        fh.write(blob)


def load_checkpoint(path) -> tuple[CnnModel, int | None]:
    raw = Path(path).read_bytes()
    if raw[:4] != _CKPT_MAGIC:
        raise ValueError("not a model checkpoint")
    head_len = struct.unpack("<I", raw[4:8])[0]
    header = json.loads(raw[8:8 + head_len].decode("utf-8"))
    if header.get("format_version") != 1:
        raise ValueError("unsupported checkpoint version")
    cfg = CnnConfig.from_dict(header["config"])
    model = build_model(cfg, np.random.default_rng(0),
                        input_size=int(header["input_size"]))
    blob = raw[8 + head_len:]
    pos = 0
    items = dict(model.param_items())
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(blob, dtype="<f8", count=count,
                               offset=pos).reshape(shape)
        pos += count * 8
        items[entry["name"]][...] = values
    if pos != len(blob):
        raise ValueError("checkpoint blob length mismatch")
    return model, header["seed"]
