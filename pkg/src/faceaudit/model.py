"""Small VGG-style convolutional classifier with explicit backprop.

The network is conv blocks (conv 3x3 same-padding -> ReLU -> max-pool)
followed by dense layers and a softmax head.  Everything is plain numpy so
training is bit-deterministic given (seed, data order, config), gradients can
be verified against finite differences, and Grad-CAM can read the last conv
block's activations and their gradients directly.

Images enter as (N, H, W, 3) uint8 or float; pixel values are scaled from
[0, 255] to [0, 1] with no mean subtraction.  Embeddings for contrastive
training are the penultimate dense activations, L2-normalized.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import NonFiniteLoss, ShapeMismatch

CHECKPOINT_MAGIC = b"FACKPT01"
CHECKPOINT_FORMAT_VERSION = 1

GENDER_CLASSES = ("Male", "Female")


@dataclass(frozen=True)
class ClassifierConfig:
    """Architecture and initialization of the classifier."""

    input_hw: tuple = (256, 200)
    channels: int = 3
    conv_blocks: tuple = ((16, 3, 2), (32, 3, 2), (64, 3, 2))  # (filters, kernel, pool)
    dense: tuple = (128,)
    class_names: tuple = GENDER_CLASSES
    weight_init_seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if len(self.conv_blocks) < 1:
            raise ValueError("at least one conv block required (Grad-CAM hook point)")
        if len(self.class_names) < 2:
            raise ValueError("need at least two classes")
        if len(self.dense) < 1:
            raise ValueError("need at least one dense layer (embedding source)")

    @property
    def classes(self) -> int:
        return len(self.class_names)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        return {
            "input_hw": list(self.input_hw),
            "channels": self.channels,
            "conv_blocks": [list(b) for b in self.conv_blocks],
            "dense": list(self.dense),
            "class_names": list(self.class_names),
            "weight_init_seed": self.weight_init_seed,
            "dtype": self.dtype,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClassifierConfig":
        return cls(
            input_hw=tuple(d["input_hw"]),
            channels=d["channels"],
            conv_blocks=tuple(tuple(b) for b in d["conv_blocks"]),
            dense=tuple(d["dense"]),
            class_names=tuple(d["class_names"]),
            weight_init_seed=d["weight_init_seed"],
            dtype=d["dtype"],
        )


def _layer_dims(config: ClassifierConfig):
    """Spatial dims after each conv block and the flattened feature size."""
    h, w = config.input_hw
    c = config.channels
    dims = []
    for filters, _kernel, pool in config.conv_blocks:
        h, w = h // pool, w // pool
        c = filters
        dims.append((h, w, c))
    return dims, h * w * c


def init_params(config: ClassifierConfig) -> dict:
    """He-initialized parameter tensors, deterministic under the init seed."""
    g = np.random.Generator(np.random.Philox(key=config.weight_init_seed))
    dt = config.np_dtype
    params = {}
    cin = config.channels
    for i, (filters, kernel, _pool) in enumerate(config.conv_blocks):
        fan_in = kernel * kernel * cin
        params[f"conv{i}_w"] = (
            g.standard_normal((kernel, kernel, cin, filters)) * np.sqrt(2.0 / fan_in)
        ).astype(dt)
        params[f"conv{i}_b"] = np.zeros(filters, dtype=dt)
        cin = filters
    _, flat = _layer_dims(config)
    sizes = [flat, *config.dense, config.classes]
    for i in range(len(sizes) - 1):
        name = f"dense{i}" if i < len(sizes) - 2 else "head"
        params[f"{name}_w"] = (
            g.standard_normal((sizes[i], sizes[i + 1])) * np.sqrt(2.0 / sizes[i])
        ).astype(dt)
        params[f"{name}_b"] = np.zeros(sizes[i + 1], dtype=dt)
    return params


@dataclass
class Checkpoint:
    """Model parameters plus config and training provenance."""

    config: ClassifierConfig
    params: dict
    provenance: dict = field(default_factory=dict)
    format_version: int = CHECKPOINT_FORMAT_VERSION

    def copy(self) -> "Checkpoint":
        return Checkpoint(
            config=self.config,
            params={k: v.copy() for k, v in self.params.items()},
            provenance=json.loads(json.dumps(self.provenance)),
            format_version=self.format_version,
        )

    def validate(self) -> None:
        expected = init_params(self.config)
        if set(expected) != set(self.params):
            raise ValueError(
                f"parameter names {sorted(self.params)} do not match config"
            )
        for k, v in expected.items():
            if self.params[k].shape != v.shape:
                raise ValueError(
                    f"parameter {k}: shape {self.params[k].shape}, "
                    f"config implies {v.shape}"
                )


def new_checkpoint(config: ClassifierConfig, provenance: Optional[dict] = None) -> Checkpoint:
    return Checkpoint(config=config, params=init_params(config),
                      provenance=provenance or {})


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write magic, a JSON header, then raw little-endian float32 tensors."""
    ckpt.validate()
    names = sorted(ckpt.params)
    header = {
        "format_version": ckpt.format_version,
        "config": ckpt.config.to_dict(),
        "provenance": ckpt.provenance,
        "tensors": [
            {"name": n, "shape": list(ckpt.params[n].shape)} for n in names
        ],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for n in names:
            fh.write(np.ascontiguousarray(ckpt.params[n], dtype="<f4").tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        if header["format_version"] != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(
                f"unsupported checkpoint version {header['format_version']}"
            )
        config = ClassifierConfig.from_dict(header["config"])
        params = {}
        for spec in header["tensors"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 4)
            arr = np.frombuffer(buf, dtype="<f4").reshape(shape)
            params[spec["name"]] = arr.astype(config.np_dtype)
    ckpt = Checkpoint(config=config, params=params,
                      provenance=header["provenance"])
    ckpt.validate()
    return ckpt


# -- forward / backward --------------------------------------------------

def prepare_images(config: ClassifierConfig, images) -> np.ndarray:
    """Batchify and scale images to the model's input tensor."""
    x = np.asarray(images)
    if x.ndim == 3:
        x = x[None]
    h, w = config.input_hw
    if x.shape[1:] != (h, w, config.channels):
        raise ShapeMismatch(
            f"expected (N, {h}, {w}, {config.channels}), got {x.shape}"
        )
    x = x.astype(config.np_dtype)
    if np.issubdtype(np.asarray(images).dtype, np.integer):
        x = x / 255.0
    return x


def _conv_forward(x, w, b):
    """Same-padding stride-1 convolution via sliding windows."""
    kh, kw, cin, cout = w.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    n, oh, ow = win.shape[0], win.shape[1], win.shape[2]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * oh * ow, kh * kw * cin)
    out = cols @ w.reshape(kh * kw * cin, cout) + b
    return out.reshape(n, oh, ow, cout), cols


def _conv_backward(d_out, cols, x_shape, w):
    kh, kw, cin, cout = w.shape
    n, h, wd, _ = x_shape
    d_flat = d_out.reshape(n * h * wd, cout)
    dw = (cols.T @ d_flat).reshape(kh, kw, cin, cout)
    db = d_flat.sum(axis=0)
    d_cols = (d_flat @ w.reshape(kh * kw * cin, cout).T).reshape(
        n, h, wd, kh, kw, cin
    )
    ph, pw = kh // 2, kw // 2
    d_xp = np.zeros((n, h + 2 * ph, wd + 2 * pw, cin), dtype=d_out.dtype)
    for i in range(kh):
        for j in range(kw):
            d_xp[:, i : i + h, j : j + wd, :] += d_cols[:, :, :, i, j, :]
    return d_xp[:, ph : ph + h, pw : pw + wd, :], dw, db


def _pool_forward(x, p):
    n, h, w, c = x.shape
    oh, ow = h // p, w // p
    win = x[:, : oh * p, : ow * p, :].reshape(n, oh, p, ow, p, c)
    win = win.transpose(0, 1, 3, 5, 2, 4).reshape(n, oh, ow, c, p * p)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _pool_backward(d_out, idx, x_shape, p):
    n, h, w, c = x_shape
    oh, ow = h // p, w // p
    d_win = np.zeros((n, oh, ow, c, p * p), dtype=d_out.dtype)
    np.put_along_axis(d_win, idx[..., None], d_out[..., None], axis=-1)
    d_win = d_win.reshape(n, oh, ow, c, p, p).transpose(0, 1, 4, 2, 5, 3)
    d_x = np.zeros(x_shape, dtype=d_out.dtype)
    d_x[:, : oh * p, : ow * p, :] = d_win.reshape(n, oh * p, ow * p, c)
    return d_x


def forward_cache(ckpt: Checkpoint, images) -> dict:
    """Full forward pass retaining intermediates for backprop and Grad-CAM.

    Returns a cache dict with 'logits', 'probs', 'embedding' (L2-normalized
    penultimate activations) and 'last_conv' (post-ReLU activations of the
    final conv block, before its pool).
    """
    cfg = ckpt.config
    x = prepare_images(cfg, images)
    cache = {"x": x, "conv": [], "dense": []}
    a = x
    for i, (_f, _k, pool) in enumerate(cfg.conv_blocks):
        z, cols = _conv_forward(a, ckpt.params[f"conv{i}_w"], ckpt.params[f"conv{i}_b"])
        relu = np.maximum(z, 0)
        pooled, idx = _pool_forward(relu, pool)
        cache["conv"].append(
            {"in_shape": a.shape, "cols": cols, "z": z, "relu_shape": relu.shape,
             "pool_idx": idx, "pool": pool}
        )
        if i == len(cfg.conv_blocks) - 1:
            cache["last_conv"] = relu
        a = pooled
    n = a.shape[0]
    a = a.reshape(n, -1)
    cache["flat_in_shape"] = cache["conv"][-1]["relu_shape"]
    for i in range(len(cfg.dense)):
        z = a @ ckpt.params[f"dense{i}_w"] + ckpt.params[f"dense{i}_b"]
        h = np.maximum(z, 0)
        cache["dense"].append({"a_in": a, "z": z})
        a = h
    cache["penult"] = a
    norms = np.linalg.norm(a, axis=1, keepdims=True)
    safe = np.maximum(norms, 1e-12)
    cache["embedding"] = a / safe
    cache["emb_norms"] = safe
    logits = a @ ckpt.params["head_w"] + ckpt.params["head_b"]
    cache["head_in"] = a
    cache["logits"] = logits
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    cache["probs"] = e / e.sum(axis=1, keepdims=True)
    return cache


def forward(ckpt: Checkpoint, images) -> np.ndarray:
    """Post-softmax class scores, shape (N, classes) (or (classes,) for one image)."""
    single = np.asarray(images).ndim == 3
    probs = forward_cache(ckpt, images)["probs"]
    return probs[0] if single else probs


def embed(ckpt: Checkpoint, images) -> np.ndarray:
    """L2-normalized penultimate-layer embeddings."""
    single = np.asarray(images).ndim == 3
    emb = forward_cache(ckpt, images)["embedding"]
    return emb[0] if single else emb


def backward(
    ckpt: Checkpoint,
    cache: dict,
    d_logits: Optional[np.ndarray] = None,
    d_embedding: Optional[np.ndarray] = None,
    want_conv_grad: bool = False,
):
    """Backpropagate upstream gradients to all parameters.

    `d_logits` and/or `d_embedding` give the loss gradient at the head output
    and at the normalized embedding.  When `want_conv_grad` is set, the
    gradient at the last conv block's post-ReLU activations is returned as
    well (Grad-CAM's hook point).
    """
    cfg = ckpt.config
    dt = cfg.np_dtype
    grads = {k: np.zeros_like(v) for k, v in ckpt.params.items()}
    penult = cache["penult"]
    d_h = np.zeros_like(penult)

    if d_logits is not None:
        d_logits = d_logits.astype(dt)
        grads["head_w"] += cache["head_in"].T @ d_logits
        grads["head_b"] += d_logits.sum(axis=0)
        d_h += d_logits @ ckpt.params["head_w"].T

    if d_embedding is not None:
        d_embedding = d_embedding.astype(dt)
        e = cache["embedding"]
        norms = cache["emb_norms"]
        # d/dh of h/||h||: (d_e - e (e . d_e)) / ||h||
        dot = (e * d_embedding).sum(axis=1, keepdims=True)
        d_h += (d_embedding - e * dot) / norms

    d_a = d_h
    for i in reversed(range(len(cfg.dense))):
        layer = cache["dense"][i]
        d_z = d_a * (layer["z"] > 0)
        grads[f"dense{i}_w"] += layer["a_in"].T @ d_z
        grads[f"dense{i}_b"] += d_z.sum(axis=0)
        d_a = d_z @ ckpt.params[f"dense{i}_w"].T

    d_pooled = d_a.reshape(_pooled_shape(cache["conv"][-1]))
    d_conv_out = None
    for i in reversed(range(len(cfg.conv_blocks))):
        blk = cache["conv"][i]
        d_relu = _pool_backward(d_pooled, blk["pool_idx"], blk["relu_shape"], blk["pool"])
        if i == len(cfg.conv_blocks) - 1 and want_conv_grad:
            d_conv_out = d_relu.copy()
        d_z = d_relu * (blk["z"] > 0)
        d_in, dw, db = _conv_backward(
            d_z, blk["cols"], blk["relu_shape"], ckpt.params[f"conv{i}_w"]
        )
        grads[f"conv{i}_w"] += dw
        grads[f"conv{i}_b"] += db
        d_pooled = d_in

    if want_conv_grad:
        return grads, d_conv_out
    return grads


def _pooled_shape(blk):
    n, h, w, c = blk["relu_shape"]
    p = blk["pool"]
    return (n, h // p, w // p, c)


# -- losses --------------------------------------------------------------

def bce_loss(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log-likelihood of the true class.

    For the 2-class gender head this is exactly binary cross-entropy on the
    positive-class probability; the same form covers the 8-class country head.
    """
    n = probs.shape[0]
    p = np.clip(probs[np.arange(n), labels], 1e-12, 1.0)
    return float(-np.log(p).mean())


def bce_loss_grad(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Gradient of bce_loss at the logits (softmax folded in)."""
    n, c = probs.shape
    onehot = np.zeros((n, c), dtype=probs.dtype)
    onehot[np.arange(n), labels] = 1.0
    return (probs - onehot) / n


# -- optimizer -----------------------------------------------------------

@dataclass
class AdamState:
    """Adam moments; default betas/epsilon per the optimizer's convention."""

    learning_rate: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_update(params: dict, grads: dict, state: AdamState) -> dict:
    """One Adam step; returns new params, mutates the optimizer state."""
    state.t += 1
    out = {}
    for k, p in params.items():
        g = grads[k].astype(p.dtype)
        m = state.m.get(k)
        v = state.v.get(k)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * g * g
        state.m[k] = m
        state.v[k] = v
        mhat = m / (1 - state.beta1 ** state.t)
        vhat = v / (1 - state.beta2 ** state.t)
        out[k] = p - state.learning_rate * mhat / (np.sqrt(vhat) + state.epsilon)
    return out


def train_step(ckpt: Checkpoint, batch, opt_state: AdamState):
    """One supervised step on (images, label_indices); returns (ckpt', metrics).

    The input checkpoint is never mutated.
    """
    images, labels = batch
    labels = np.asarray(labels)
    if labels.max() >= ckpt.config.classes or labels.min() < 0:
        raise ValueError(f"label out of range for {ckpt.config.classes} classes")
    cache = forward_cache(ckpt, images)
    loss = bce_loss(cache["probs"], labels)
    if not np.isfinite(loss):
        raise NonFiniteLoss(f"loss={loss}")
    grads = backward(ckpt, cache, d_logits=bce_loss_grad(cache["probs"], labels))
    new_params = adam_update(ckpt.params, grads, opt_state)
    out = Checkpoint(config=ckpt.config, params=new_params,
                     provenance=dict(ckpt.provenance))
    acc = float((cache["probs"].argmax(axis=1) == labels).mean())
    return out, {"loss": loss, "accuracy": acc}
