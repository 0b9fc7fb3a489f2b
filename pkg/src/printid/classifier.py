"""Small residual convolutional classifier trained from scratch.

Fixed architecture (all convs 3x3, stride 1, same padding):

    input (1, H, W)
    -> stem conv 8 + ReLU
    -> residual block: conv 8 + ReLU, conv 8, identity skip added
    -> 2x2 max pool
    -> conv 16 + ReLU
    -> 2x2 max pool
    -> fully connected -> num_classes -> softmax

Everything runs in double precision on numpy. Weight init is fan-in scaled
uniform, U(-a, a) with a = sqrt(6 / fan_in), drawn from the shared
counter-based stream in a fixed parameter order, so (init seed, train seed,
dataset) determine the trained parameters bit for bit.
"""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import rotate as nd_rotate

from .render import NoiseModel, TransmissionImage, add_noise
from .rng import Stream, derive_seed

_MAGIC = b"PIDNET01"
_PARAM_ORDER = ["w_stem", "b_stem", "w_res1", "b_res1", "w_res2", "b_res2",
                "w_mid", "b_mid", "w_fc", "b_fc"]


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite during training."""


class NonFiniteError(ValueError):
    """A tensor violated the finite-values invariant at a layer boundary."""


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int
    input_hw: tuple[int, int] = (64, 64)
    stem_channels: int = 8
    mid_channels: int = 16

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if any(d % 4 != 0 or d < 4 for d in self.input_hw):
            raise ValueError("input sides must be multiples of 4 (two 2x2 pools)")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.002  # larger rates destabilise this net, see ledger
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 30
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass
class AccuracyTrace:
    """Per-epoch (train_loss, train_acc, test_acc)."""

    train_loss: list[float] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)
    test_acc: list[float] = field(default_factory=list)

    def append(self, loss: float, tr_acc: float, te_acc: float) -> None:
        self.train_loss.append(loss)
        self.train_acc.append(tr_acc)
        self.test_acc.append(te_acc)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "train_acc", "test_acc"])
        for i in range(len(self.train_loss)):
            writer.writerow([i + 1, repr(self.train_loss[i]), repr(self.train_acc[i]),
                             repr(self.test_acc[i])])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "AccuracyTrace":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0] != ["epoch", "train_loss", "train_acc", "test_acc"]:
            raise ValueError("malformed accuracy trace CSV")
        trace = cls()
        for _e, lo, tr, te in rows[1:]:
            trace.append(float(lo), float(tr), float(te))
        return trace


@dataclass
class LabeledDataset:
    """Images, labels and a fixed train/test assignment."""

    images: np.ndarray  # (N, H, W) float64 in [0, 1]
    labels: np.ndarray  # (N,) int
    train_idx: np.ndarray
    test_idx: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.train_idx = np.asarray(self.train_idx, dtype=np.int64)
        self.test_idx = np.asarray(self.test_idx, dtype=np.int64)
        if self.images.ndim != 3 or self.images.shape[0] != self.labels.shape[0]:
            raise ValueError("images must be (N, H, W) with one label per image")
        if np.intersect1d(self.train_idx, self.test_idx).size:
            raise ValueError("train and test splits must be disjoint")
        classes = np.unique(self.labels)
        for split_name, idx in (("train", self.train_idx), ("test", self.test_idx)):
            present = np.unique(self.labels[idx])
            if not np.array_equal(present, classes):
                raise ValueError(f"every class needs at least one {split_name} sample")

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1


def _require_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains non-finite values")


class _Scratch:
    """Reusable float64 work buffers keyed by name and shape; large conv
    patch matrices dominate the step cost on low-bandwidth machines, so they
    are allocated once per (layer, batch size) instead of per step."""

    def __init__(self):
        self._buffers: dict = {}

    def get(self, name: str, shape: tuple[int, ...]) -> np.ndarray:
        key = (name, shape)
        buf = self._buffers.get(key)
        if buf is None:
            buf = np.empty(shape)
            self._buffers[key] = buf
        return buf


def _conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, scratch: _Scratch, tag: str):
    """Same-padded 3x3 conv in channels-leading layout.

    x is (C, N, H, W); returns (y (F, N, H, W), cols (C*9, N*H*W)). The cols
    matrix is a scratch buffer cached for the backward pass of the same step.
    """
    c, n, h, wd = x.shape
    f = w.shape[0]
    xp = scratch.get(tag + ".xp", (c, n, h + 2, wd + 2))
    _zero_border(xp)
    xp[:, :, 1 : h + 1, 1 : wd + 1] = x
    cols = scratch.get(tag + ".cols", (c * 9, n * h * wd))
    view = cols.reshape(c, 9, n, h, wd)
    k = 0
    for ky in range(3):
        for kx in range(3):
            view[:, k] = xp[:, :, ky : ky + h, kx : kx + wd]
            k += 1
    y = w.reshape(f, c * 9) @ cols
    y += b[:, None]
    return y.reshape(f, n, h, wd), cols


def _conv_backward(dy: np.ndarray, cols: np.ndarray, w: np.ndarray,
                   x_shape: tuple[int, int, int, int], scratch: _Scratch, tag: str,
                   need_dx: bool = True):
    """Gradients of _conv_forward; dx computation is skipped for the first
    layer where the input gradient is unused.

    dx is the correlation of dy with spatially flipped kernels, evaluated as
    one GEMM over an im2col of dy; this keeps the GEMM inner dimension at
    C*9 instead of the (slow) channel count.
    """
    c, n, h, wd = x_shape
    f = dy.shape[0]
    dy_mat = dy.reshape(f, n * h * wd)
    dw = (dy_mat @ cols.T).reshape(w.shape)
    db = dy_mat.sum(axis=1)
    if not need_dx:
        return None, dw, db
    dyp = scratch.get(tag + ".dyp", (f, n, h + 2, wd + 2))
    dyp[:] = 0.0
    dyp[:, :, 1 : h + 1, 1 : wd + 1] = dy
    dycols = scratch.get(tag + ".dycols", (f * 9, n * h * wd))
    view = dycols.reshape(f, 9, n, h, wd)
    k = 0
    for ky in range(3):
        for kx in range(3):
            view[:, k] = dyp[:, :, ky : ky + h, kx : kx + wd]
            k += 1
    wflip = np.ascontiguousarray(w.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1]).reshape(c, f * 9)
    dx = (wflip @ dycols).reshape(c, n, h, wd)
    return dx, dw, db


def _pool_forward(x: np.ndarray):
    c, n, h, w = x.shape
    v = x.reshape(c, n, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    v = np.ascontiguousarray(v).reshape(c, n, h // 2, w // 2, 4)
    idx = v.argmax(axis=-1)
    out = np.take_along_axis(v, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _pool_backward(dout: np.ndarray, idx: np.ndarray, x_shape: tuple[int, int, int, int]):
    c, n, h, w = x_shape
    dv = np.zeros((c, n, h // 2, w // 2, 4))
    np.put_along_axis(dv, idx[..., None], dout[..., None], axis=-1)
    dv = dv.reshape(c, n, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(dv).reshape(c, n, h, w)


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class ConvClassifier:
    """The fixed residual CNN; parameters live in ``self.params``.

    Inputs are grayscale intensities in [0, 1]; forward centers them to
    [-1, 1] before the stem conv. Activations use a channels-leading
    (C, N, H, W) layout internally so every conv is one flat GEMM.
    """

    def __init__(self, config: ModelConfig, init_seed: int = 0):
        self.config = config
        h, w = config.input_hw
        cs, cm = config.stem_channels, config.mid_channels
        self.flat_dim = cm * (h // 4) * (w // 4)
        self._scratch = _Scratch()
        stream = Stream(init_seed)

        def uniform_fan_in(shape, fan_in):
            bound = np.sqrt(6.0 / fan_in)
            return (stream.uniform(int(np.prod(shape))) * 2.0 - 1.0).reshape(shape) * bound

        self.params: dict[str, np.ndarray] = {
            "w_stem": uniform_fan_in((cs, 1, 3, 3), 9),
            "b_stem": np.zeros(cs),
            "w_res1": uniform_fan_in((cs, cs, 3, 3), cs * 9),
            "b_res1": np.zeros(cs),
            "w_res2": uniform_fan_in((cs, cs, 3, 3), cs * 9),
            "b_res2": np.zeros(cs),
            "w_mid": uniform_fan_in((cm, cs, 3, 3), cs * 9),
            "b_mid": np.zeros(cm),
            # the classifier head starts near zero so initial logits are
            # small; large confident-wrong logits at init destabilise SGD
            # with momentum at the default step size
            "w_fc": uniform_fan_in((self.flat_dim, config.num_classes), self.flat_dim) * 0.05,
            "b_fc": np.zeros(config.num_classes),
        }

    def forward(self, batch: np.ndarray):
        """Returns (logits, probabilities, cache for backward).

        The cache aliases internal scratch buffers: it is consumed by the
        matching backward() call and invalidated by the next forward().
        """
        x = np.asarray(batch, dtype=np.float64)
        if x.ndim == 4 and x.shape[1] == 1:
            x = x[:, 0]
        if x.ndim != 3 or x.shape[1:] != self.config.input_hw:
            raise ValueError(f"batch shape {x.shape} does not match input config "
                             f"{self.config.input_hw}")
        _require_finite("input batch", x)
        p = self.params
        n = x.shape[0]
        h, w = self.config.input_hw
        x = (x - 0.5) * 2.0
        x = x.reshape(1, n, h, w)

        z0, cols0 = _conv_forward(x, p["w_stem"], p["b_stem"], self._scratch, "stem")
        a0 = np.maximum(z0, 0.0)
        z1, cols1 = _conv_forward(a0, p["w_res1"], p["b_res1"], self._scratch, "res1")
        a1 = np.maximum(z1, 0.0)
        z2, cols2 = _conv_forward(a1, p["w_res2"], p["b_res2"], self._scratch, "res2")
        r = a0 + z2
        p1, idx1 = _pool_forward(r)
        z3, cols3 = _conv_forward(p1, p["w_mid"], p["b_mid"], self._scratch, "mid")
        a3 = np.maximum(z3, 0.0)
        p2, idx2 = _pool_forward(a3)
        # per-sample flatten in (C, H, W) order
        flat = np.ascontiguousarray(p2.transpose(1, 0, 2, 3)).reshape(n, self.flat_dim)
        logits = flat @ p["w_fc"] + p["b_fc"]
        _require_finite("logits", logits)
        probs = _softmax(logits)
        cache = {
            "n": n, "z0": z0, "a0": a0, "cols0": cols0,
            "z1": z1, "cols1": cols1,
            "z2": z2, "cols2": cols2, "r": r, "idx1": idx1,
            "z3": z3, "cols3": cols3, "p1": p1, "idx2": idx2,
            "flat": flat, "probs": probs,
        }
        return logits, probs, cache

    def backward(self, cache: dict, labels: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of mean cross-entropy over the batch for every parameter."""
        p = self.params
        probs = cache["probs"]
        n = cache["n"]
        labels = np.asarray(labels, dtype=np.int64)
        dlogits = probs.copy()
        dlogits[np.arange(n), labels] -= 1.0
        dlogits /= n

        grads: dict[str, np.ndarray] = {}
        grads["w_fc"] = cache["flat"].T @ dlogits
        grads["b_fc"] = dlogits.sum(axis=0)
        dflat = dlogits @ p["w_fc"].T

        cm = self.config.mid_channels
        hw4 = (self.config.input_hw[0] // 4, self.config.input_hw[1] // 4)
        dp2 = np.ascontiguousarray(dflat.reshape(n, cm, *hw4).transpose(1, 0, 2, 3))
        da3 = _pool_backward(dp2, cache["idx2"], cache["z3"].shape)
        dz3 = da3 * (cache["z3"] > 0.0)
        dp1, grads["w_mid"], grads["b_mid"] = _conv_backward(
            dz3, cache["cols3"], p["w_mid"], cache["p1"].shape, self._scratch, "mid")
        dr = _pool_backward(dp1, cache["idx1"], cache["r"].shape)
        da1, grads["w_res2"], grads["b_res2"] = _conv_backward(
            dr, cache["cols2"], p["w_res2"], cache["z1"].shape, self._scratch, "res2")
        dz1 = da1 * (cache["z1"] > 0.0)
        da0_conv, grads["w_res1"], grads["b_res1"] = _conv_backward(
            dz1, cache["cols1"], p["w_res1"], cache["a0"].shape, self._scratch, "res1")
        dz0 = (dr + da0_conv) * (cache["z0"] > 0.0)
        _, grads["w_stem"], grads["b_stem"] = _conv_backward(
            dz0, cache["cols0"], p["w_stem"], (1, n, *self.config.input_hw),
            self._scratch, "stem", need_dx=False)
        return grads


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean cross-entropy, computed with a stable log-sum-exp."""
    labels = np.asarray(labels, dtype=np.int64)
    zmax = logits.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(logits - zmax).sum(axis=1))
    return float(np.mean(lse - logits[np.arange(len(labels)), labels]))


def evaluate(model: ConvClassifier, images: np.ndarray, labels: np.ndarray,
             batch_size: int = 64) -> tuple[float, np.ndarray]:
    """Accuracy and confusion matrix (rows true class, columns predicted)."""
    labels = np.asarray(labels, dtype=np.int64)
    c = model.config.num_classes
    confusion = np.zeros((c, c), dtype=np.int64)
    for lo in range(0, len(labels), batch_size):
        batch = images[lo : lo + batch_size]
        logits, _, _ = model.forward(batch)
        pred = logits.argmax(axis=1)
        np.add.at(confusion, (labels[lo : lo + batch_size], pred), 1)
    accuracy = float(np.trace(confusion) / max(1, confusion.sum()))
    return accuracy, confusion


def train(model: ConvClassifier, dataset: LabeledDataset,
          cfg: TrainConfig) -> tuple[ConvClassifier, AccuracyTrace]:
    """SGD with momentum over seeded per-epoch shuffles.

    Train accuracy and loss are accumulated from the training forward passes
    (before each update); test accuracy is evaluated after every epoch.
    Raises TrainingDivergedError when the loss becomes non-finite.
    """
    if dataset.num_classes != model.config.num_classes:
        raise ValueError("dataset class count does not match the model")
    shuffle = Stream(derive_seed(cfg.seed, "shuffle"))
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    trace = AccuracyTrace()
    train_images = dataset.images[dataset.train_idx]
    train_labels = dataset.labels[dataset.train_idx]
    test_images = dataset.images[dataset.test_idx]
    test_labels = dataset.labels[dataset.test_idx]
    n = len(train_labels)
    for _epoch in range(cfg.epochs):
        perm = shuffle.permutation(n)
        losses = 0.0
        correct = 0
        for lo in range(0, n, cfg.batch_size):
            sel = perm[lo : lo + cfg.batch_size]
            batch = train_images[sel]
            labels = train_labels[sel]
            try:
                logits, _probs, cache = model.forward(batch)
                loss = cross_entropy(logits, labels)
            except NonFiniteError as exc:
                raise TrainingDivergedError(f"diverged at epoch {_epoch + 1}: {exc}") from exc
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"loss diverged at epoch {_epoch + 1}")
            losses += loss * len(sel)
            correct += int((logits.argmax(axis=1) == labels).sum())
            grads = model.backward(cache, labels)
            for key, g in grads.items():
                velocity[key] = cfg.momentum * velocity[key] + g
                model.params[key] -= cfg.learning_rate * velocity[key]
        try:
            test_acc, _ = evaluate(model, test_images, test_labels)
        except NonFiniteError as exc:
            raise TrainingDivergedError(f"diverged at epoch {_epoch + 1}: {exc}") from exc
        trace.append(losses / n, correct / n, test_acc)
    return model, trace


def augment(img: TransmissionImage, rotations: list[float],
            noise: NoiseModel | None = None) -> list[TransmissionImage]:
    """Expansion rule: the original, plus one bilinear rotation per nonzero
    angle (edge pixels clamped), plus one noisy copy when noise is enabled.
    Angles that are 0 mod 360 are skipped since the original is always kept."""
    out = [img]
    for angle in rotations:
        if angle % 360.0 == 0.0:
            continue
        rotated = nd_rotate(img.intensities, angle=angle, reshape=False,
                            order=1, mode="nearest")
        out.append(TransmissionImage(np.clip(rotated, 0.0, 1.0), img.pixel_pitch))
    if noise is not None and noise.gaussian_sigma > 0:
        out.append(add_noise(img, noise))
    return out


def save_model(model: ConvClassifier, path) -> None:
    """Little-endian binary dump: magic, version, config, then each tensor as
    (name, shape, float64 data) in a fixed order. Round-trips bit-exactly."""
    parts = [_MAGIC, struct.pack("<I", 1)]
    parts.append(struct.pack("<3I", model.config.num_classes, *model.config.input_hw))
    parts.append(struct.pack("<I", len(_PARAM_ORDER)))
    for name in _PARAM_ORDER:
        arr = np.ascontiguousarray(model.params[name], dtype="<f8")
        nb = name.encode("ascii")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_model(path) -> ConvClassifier:
    data = open(path, "rb").read()
    if data[:8] != _MAGIC:
        raise ValueError("not a model file (bad magic)")
    pos = 8
    (version,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if version != 1:
        raise ValueError(f"unsupported model version {version}")
    num_classes, in_h, in_w = struct.unpack_from("<3I", data, pos)
    pos += 12
    (n_tensors,) = struct.unpack_from("<I", data, pos)
    pos += 4
    model = ConvClassifier(ModelConfig(num_classes=num_classes, input_hw=(in_h, in_w)))
    for _ in range(n_tensors):
        (name_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + name_len].decode("ascii")
        pos += name_len
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        count = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape)
        pos += 8 * count
        if name not in model.params:
            raise ValueError(f"unknown tensor {name!r} in model file")
        model.params[name] = arr.astype(np.float64)
    return model
