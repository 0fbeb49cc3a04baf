"""2D U-Net assembly, Adam with coupled L2, and checkpointing.

The network is the standard contracting/expanding topology: ``depth`` encoder
levels (conv block, dropout, maxpool), a bottleneck block, then mirrored
decoder stages (nearest upsample + 3x3 conv, skip concat, conv block,
dropout) and a final 1x1 conv to class logits. Every conv except the head is
followed by batchnorm and relu. Weights are Glorot-uniform, biases zero,
drawn in fixed topology order from a seeded generator.

Checkpoints serialize a canonical-JSON architecture descriptor plus named
float32 tensors; optimizer state rides along under reserved ``adam.*`` names.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from segforge import autodiff as ad

DECODER_STYLE = "nearest_upsample_conv3"
CHECKPOINT_MAGIC = b"UNSC"
CHECKPOINT_VERSION = 1


class ModelError(ValueError):
    """Invalid configuration, shapes, or optimizer input."""


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint file."""


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 3
    base_channels: int = 16
    in_channels: int = 1
    num_classes: int = 8
    convs_per_block: int = 2
    dropout_rate: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.depth < 1:
            raise ModelError(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 1:
            raise ModelError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.in_channels < 1:
            raise ModelError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.num_classes < 2:
            raise ModelError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.convs_per_block < 1:
            raise ModelError(f"convs_per_block must be >= 1, got {self.convs_per_block}")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ModelError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")


@dataclass
class AdamState:
    """First/second moments per parameter name; t counts completed steps."""
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def _level_channels(cfg: UNetConfig, level: int) -> int:
    return cfg.base_channels * (2 ** level)


class Model:
    """Parameter store plus the forward pass; gradients live on the Tensors."""

    def __init__(self, cfg: UNetConfig, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.params: dict[str, ad.Tensor] = {}
        self.bn: dict[str, ad.BatchNormState] = {}
        self._build_layers()
        self._glorot_init(cfg.seed)

    # --- layer table -----------------------------------------------------
    def conv_layers(self):
        """(name, cin, cout, k) in topology order; also the init draw order."""
        cfg = self.cfg
        layers = []
        prev = cfg.in_channels
        for i in range(cfg.depth):
            ch = _level_channels(cfg, i)
            for j in range(cfg.convs_per_block):
                layers.append((f"enc{i}.conv{j}", prev if j == 0 else ch, ch, 3))
            prev = ch
        bott = _level_channels(cfg, cfg.depth)
        for j in range(cfg.convs_per_block):
            layers.append((f"bott.conv{j}", prev if j == 0 else bott, bott, 3))
        prev = bott
        for i in reversed(range(cfg.depth)):
            ch = _level_channels(cfg, i)
            layers.append((f"dec{i}.up", prev, ch, 3))
            for j in range(cfg.convs_per_block):
                layers.append((f"dec{i}.conv{j}", 2 * ch if j == 0 else ch, ch, 3))
            prev = ch
        layers.append(("head", prev, cfg.num_classes, 1))
        return layers

    @staticmethod
    def _bn_name(conv_name: str):
        if conv_name == "head":
            return None  # logits layer has no batchnorm
        if conv_name.endswith(".up"):
            return conv_name[:-3] + ".upbn"
        prefix, conv = conv_name.rsplit(".conv", 1)
        return f"{prefix}.bn{conv}"

    def _build_layers(self) -> None:
        for name, cin, cout, k in self.conv_layers():
            self.params[f"{name}.w"] = ad.Tensor(
                np.zeros((cout, cin, k, k)), requires_grad=True, dtype=self.dtype)
            self.params[f"{name}.b"] = ad.Tensor(
                np.zeros(cout), requires_grad=True, dtype=self.dtype)
            bn = self._bn_name(name)
            if bn is not None:
                self.params[f"{bn}.gamma"] = ad.Tensor(
                    np.ones(cout), requires_grad=True, dtype=self.dtype)
                self.params[f"{bn}.beta"] = ad.Tensor(
                    np.zeros(cout), requires_grad=True, dtype=self.dtype)
                self.bn[bn] = ad.BatchNormState(cout, dtype=self.dtype)

    def _glorot_init(self, seed: int) -> None:
        rng = np.random.default_rng(seed)
        for name, cin, cout, k in self.conv_layers():
            fan_in = cin * k * k
            fan_out = cout * k * k
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            draw = rng.uniform(-limit, limit, size=(cout, cin, k, k))
            self.params[f"{name}.w"].data = draw.astype(self.dtype)
            self.params[f"{name}.b"].data = np.zeros(cout, dtype=self.dtype)
            bn = self._bn_name(name)
            if bn is not None:
                self.params[f"{bn}.gamma"].data = np.ones(cout, dtype=self.dtype)
                self.params[f"{bn}.beta"].data = np.zeros(cout, dtype=self.dtype)
                self.bn[bn] = ad.BatchNormState(cout, dtype=self.dtype)

    # --- forward ---------------------------------------------------------
    def _conv_bn_relu(self, g, name, h, mode):
        h = ad.conv2d(g, h, self.params[f"{name}.w"], self.params[f"{name}.b"],
                      padding="same")
        bn = self._bn_name(name)
        h = ad.batchnorm2d(g, h, self.params[f"{bn}.gamma"], self.params[f"{bn}.beta"],
                           self.bn[bn], mode)
        return ad.relu(g, h)

    def _block(self, g, prefix, h, mode):
        for j in range(self.cfg.convs_per_block):
            h = self._conv_bn_relu(g, f"{prefix}.conv{j}", h, mode)
        return h

    def forward(self, g: ad.Graph, x: ad.Tensor, mode: str, dropout_seed: int = 0) -> ad.Tensor:
        """Logits (N, num_classes, H, W); H, W must be divisible by 2^depth."""
        cfg = self.cfg
        if x.data.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ModelError(
                f"input must be (N, {cfg.in_channels}, H, W), got shape {x.data.shape}")
        div = 2 ** cfg.depth
        if x.shape[2] % div or x.shape[3] % div:
            raise ModelError(
                f"H, W must be divisible by {div}, got {x.shape[2]}x{x.shape[3]}")
        drop = 0
        skips = []
        h = x
        for i in range(cfg.depth):
            h = self._block(g, f"enc{i}", h, mode)
            h = ad.dropout(g, h, cfg.dropout_rate, mode, seed=(dropout_seed, drop))
            drop += 1
            skips.append(h)
            h = ad.maxpool2d(g, h)
        h = self._block(g, "bott", h, mode)
        for i in reversed(range(cfg.depth)):
            h = ad.upsample2d_nearest(g, h)
            h = self._conv_bn_relu(g, f"dec{i}.up", h, mode)
            h = ad.concat_channel(g, h, skips[i])
            h = self._block(g, f"dec{i}", h, mode)
            h = ad.dropout(g, h, cfg.dropout_rate, mode, seed=(dropout_seed, drop))
            drop += 1
        return ad.conv2d(g, h, self.params["head.w"], self.params["head.b"],
                         padding="same")

    # --- descriptors -----------------------------------------------------
    def descriptor(self) -> dict:
        cfg = self.cfg
        return {
            "depth": cfg.depth,
            "base_channels": cfg.base_channels,
            "in_channels": cfg.in_channels,
            "num_classes": cfg.num_classes,
            "convs_per_block": cfg.convs_per_block,
            "dropout_rate": cfg.dropout_rate,
            "seed": cfg.seed,
            "decoder": DECODER_STYLE,
        }

    def state_tensors(self) -> dict:
        """All checkpoint tensors: parameters plus BN running statistics."""
        out = dict((name, t.data) for name, t in self.params.items())
        for name, s in self.bn.items():
            out[f"{name}.running_mean"] = s.running_mean
            out[f"{name}.running_var"] = s.running_var
        return out

    def parameter_count(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def zero_grads(self) -> None:
        for t in self.params.values():
            t.grad = None

    def stats_initialized(self) -> bool:
        return all(s.batches_seen > 0 for s in self.bn.values())


def build_unet(cfg: UNetConfig, dtype=np.float32) -> Model:
    return Model(cfg, dtype=dtype)


def config_from_descriptor(desc: dict) -> UNetConfig:
    if desc.get("decoder") != DECODER_STYLE:
        raise CheckpointError(f"unsupported decoder style {desc.get('decoder')!r}")
    return UNetConfig(
        depth=int(desc["depth"]), base_channels=int(desc["base_channels"]),
        in_channels=int(desc["in_channels"]), num_classes=int(desc["num_classes"]),
        convs_per_block=int(desc["convs_per_block"]),
        dropout_rate=float(desc["dropout_rate"]), seed=int(desc["seed"]))


def _descriptor_diff(a: dict, b: dict):
    """Field names whose values differ, ignoring seed (init provenance)."""
    keys = (set(a) | set(b)) - {"seed"}
    return sorted(k for k in keys if a.get(k) != b.get(k))


# --- optimizer ----------------------------------------------------------

def adam_step(params: dict, grads: dict, s: AdamState, lr: float = 1e-5,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              l2: float = 1e-4) -> None:
    """One coupled-L2 Adam update in place; rejects non-finite gradients.

    g <- grad + l2*param; m <- b1 m + (1-b1) g; v <- b2 v + (1-b2) g^2;
    bias correction uses t+1; param <- param - lr * m_hat / (sqrt(v_hat) + eps).
    """
    for name in params:
        if name not in grads or grads[name] is None:
            raise ModelError(f"missing gradient for parameter {name}")
        if not np.all(np.isfinite(grads[name])):
            raise ModelError(f"non-finite gradient for parameter {name}")
    t = s.t + 1
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        arr = p.data if isinstance(p, ad.Tensor) else p
        g = np.asarray(grads[name], dtype=arr.dtype) + arr.dtype.type(l2) * arr
        if name not in s.m:
            s.m[name] = np.zeros_like(arr)
            s.v[name] = np.zeros_like(arr)
        s.m[name] = beta1 * s.m[name] + (1.0 - beta1) * g
        s.v[name] = beta2 * s.v[name] + (1.0 - beta2) * (g * g)
        m_hat = s.m[name] / c1
        v_hat = s.v[name] / c2
        arr -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(arr.dtype)
    s.t = t


def model_adam_step(model: Model, s: AdamState, **kw) -> None:
    grads = dict((name, t.grad) for name, t in model.params.items())
    adam_step(model.params, grads, s, **kw)


# --- inference ----------------------------------------------------------

def forward_infer(model: Model, batch: np.ndarray) -> np.ndarray:
    """Class probabilities (N, C, H, W) in infer mode (dropout off, running stats)."""
    if not model.stats_initialized():
        raise ModelError("running batch-norm statistics uninitialized: train first")
    g = ad.Graph()
    x = ad.Tensor(np.asarray(batch), dtype=model.dtype)
    logits = model.forward(g, x, "infer")
    return ad.softmax_channel(g, logits).data


def predict_labels(model: Model, batch: np.ndarray) -> np.ndarray:
    """Argmax labels (N, H, W); ties break toward the lower class index."""
    probs = forward_infer(model, batch)
    return probs.argmax(axis=1).astype(np.uint8)


# --- checkpoint I/O ------------------------------------------------------

def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def save_checkpoint(model: Model, path, optim: AdamState | None = None,
                    preprocess: dict | None = None) -> None:
    tensors = dict(model.state_tensors())
    if optim is not None:
        for name in model.params:
            if name in optim.m:
                tensors[f"adam.m.{name}"] = optim.m[name]
                tensors[f"adam.v.{name}"] = optim.v[name]
        tensors["adam.t"] = np.array([optim.t], dtype=np.float32)
    meta = {
        "arch": model.descriptor(),
        "bn_batches_seen": dict((name, s.batches_seen) for name, s in sorted(model.bn.items())),
    }
    if preprocess is not None:
        meta["preprocess"] = preprocess
    blob = _canonical_json(meta)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            data = np.ascontiguousarray(tensors[name], dtype="<f4")
            encoded = name.encode()
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())


@dataclass
class Checkpoint:
    version: int
    arch: dict
    bn_batches_seen: dict
    tensors: dict
    preprocess: dict | None = None


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint: {what}")
    return buf


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad magic {magic!r}")
        (version,) = struct.unpack("<H", _read_exact(fh, 2, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (jlen,) = struct.unpack("<I", _read_exact(fh, 4, "descriptor length"))
        meta = json.loads(_read_exact(fh, jlen, "descriptor"))
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
            name = _read_exact(fh, nlen, "name").decode()
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1, "ndim"))
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, "dims"))
            size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            payload = _read_exact(fh, 4 * size, f"payload of {name}")
            tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
        if fh.read(1):
            raise CheckpointError("trailing bytes after last tensor")
    return Checkpoint(version=version, arch=meta["arch"],
                      bn_batches_seen=meta["bn_batches_seen"], tensors=tensors,
                      preprocess=meta.get("preprocess"))


def _load_state(model: Model, ckpt: Checkpoint) -> None:
    expected = model.state_tensors()
    for name in ckpt.tensors:
        if name.startswith("adam."):
            continue
        if name not in expected:
            raise CheckpointError(f"unknown tensor name {name!r}")
    for name, cur in expected.items():
        if name not in ckpt.tensors:
            raise CheckpointError(f"checkpoint missing tensor {name!r}")
        arr = ckpt.tensors[name]
        if arr.shape != cur.shape:
            raise CheckpointError(
                f"tensor {name!r} has shape {arr.shape}, expected {cur.shape}")
    for name, t in model.params.items():
        t.data = ckpt.tensors[name].astype(model.dtype)
    for name, s in model.bn.items():
        s.running_mean = ckpt.tensors[f"{name}.running_mean"].astype(model.dtype)
        s.running_var = ckpt.tensors[f"{name}.running_var"].astype(model.dtype)
        s.batches_seen = int(ckpt.bn_batches_seen.get(name, 0))


def restore_model(ckpt: Checkpoint, dtype=np.float32) -> Model:
    """Rebuild a model exactly as checkpointed (architecture + all state)."""
    model = build_unet(config_from_descriptor(ckpt.arch), dtype=dtype)
    _load_state(model, ckpt)
    return model


def restore_adam(ckpt: Checkpoint, model: Model) -> AdamState | None:
    if "adam.t" not in ckpt.tensors:
        return None
    s = AdamState(t=int(ckpt.tensors["adam.t"][0]))
    for name in model.params:
        key = f"adam.m.{name}"
        if key in ckpt.tensors:
            s.m[name] = ckpt.tensors[key].astype(model.dtype)
            s.v[name] = ckpt.tensors[f"adam.v.{name}"].astype(model.dtype)
    return s


def init_weights(model: Model, source) -> Model:
    """Reinitialize in place: ("glorot", seed) or ("transfer", checkpoint path).

    Transfer copies every parameter and running statistic from a checkpoint
    whose architecture descriptor matches exactly (seed aside); nothing is
    frozen. Mismatches are rejected listing the differing fields.
    """
    if not (isinstance(source, (tuple, list)) and len(source) == 2):
        raise ModelError(f"source must be ('glorot', seed) or ('transfer', path), got {source!r}")
    kind, arg = source
    if kind == "glorot":
        model.cfg = replace(model.cfg, seed=int(arg))
        model._glorot_init(int(arg))
        return model
    if kind == "transfer":
        ckpt = load_checkpoint(arg)
        diff = _descriptor_diff(ckpt.arch, model.descriptor())
        if diff:
            raise ModelError(f"architecture mismatch in fields: {', '.join(diff)}")
        _load_state(model, ckpt)
        return model
    raise ModelError(f"unknown init source kind {kind!r}")
