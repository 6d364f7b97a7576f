"""PointNet-lite classifier: shared per-point MLP, global max-pool, FC head.

Parameters live in an ordered :class:`ModelParams` mapping and persist in the
binary PCVM format::

    b"PCVM" | u32 version=1 | u32 count |
        per tensor: u16 name_len, name (utf-8), u8 rank, u32 extents..., f32 data...

All integers and floats are little-endian.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, FormatError
from .tensor import (
    DTYPE,
    Tensor,
    add_bias,
    log_softmax,
    matmul,
    reduce_max,
    relu,
    reshape,
)

MAGIC = b"PCVM"
VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int
    point_mlp_widths: tuple = (64, 128, 256)
    head_widths: tuple = (128,)
    with_input_tnet: bool = False
    num_points: int = 1024
    tnet_mlp_widths: tuple = (64, 128)
    tnet_head_widths: tuple = (64,)

    def __post_init__(self):
        for name in ("point_mlp_widths", "head_widths", "tnet_mlp_widths", "tnet_head_widths"):
            widths = tuple(int(w) for w in getattr(self, name))
            object.__setattr__(self, name, widths)
            if any(w < 1 for w in widths):
                raise ValueError(f"{name} must all be >= 1, got {widths}")
        if not self.point_mlp_widths:
            raise ValueError("point_mlp_widths must not be empty")
        if self.with_input_tnet and not self.tnet_mlp_widths:
            raise ValueError("tnet_mlp_widths must not be empty")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.num_points < 1:
            raise ValueError(f"num_points must be >= 1, got {self.num_points}")


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.tensors[name]

    def names(self):
        return list(self.tensors)

    def copy(self, requires_grad=False):
        return ModelParams(
            self.config,
            {k: Tensor(v.data.copy(), requires_grad=requires_grad) for k, v in self.tensors.items()},
        )

    def equals(self, other):
        if self.names() != other.names():
            return False
        return all(
            self[k].shape == other[k].shape and self[k].data.tobytes() == other[k].data.tobytes()
            for k in self.names()
        )


def _layer_shapes(config):
    """Ordered (name, shape) list implied by ``config``."""
    shapes = []

    def dense(prefix, widths, fan_in):
        for i, w in enumerate(widths):
            shapes.append((f"{prefix}.{i}.weight", (fan_in, w)))
            shapes.append((f"{prefix}.{i}.bias", (w,)))
            fan_in = w
        return fan_in

    if config.with_input_tnet:
        c = dense("tnet.mlp", config.tnet_mlp_widths, 3)
        c = dense("tnet.head", config.tnet_head_widths, c)
        shapes.append(("tnet.out.weight", (c, 9)))
        shapes.append(("tnet.out.bias", (9,)))
    c = dense("mlp", config.point_mlp_widths, 3)
    c = dense("head", config.head_widths, c)
    shapes.append(("out.weight", (c, config.num_classes)))
    shapes.append(("out.bias", (config.num_classes,)))
    return shapes


def init(config, seed=0):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.

    The T-Net output layer starts at zero weight with an identity bias, so an
    untrained T-Net applies the 3x3 identity.
    """
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in _layer_shapes(config):
        if name == "tnet.out.weight":
            arr = np.zeros(shape, dtype=DTYPE)
        elif name == "tnet.out.bias":
            arr = np.eye(3, dtype=DTYPE).reshape(9)
        elif name.endswith(".bias"):
            arr = np.zeros(shape, dtype=DTYPE)
        else:
            bound = np.sqrt(1.0 / shape[0])
            arr = rng.uniform(-bound, bound, size=shape).astype(DTYPE)
            # float32 rounding must not step outside the float64 bound
            b32 = DTYPE(bound)
            if b32 > bound:
                b32 = np.nextafter(b32, DTYPE(0))
            np.clip(arr, -b32, b32, out=arr)
        tensors[name] = Tensor(arr)
    return ModelParams(config, tensors)


def _dense_stack(params, prefix, widths, h):
    for i in range(len(widths)):
        h = matmul(h, params[f"{prefix}.{i}.weight"])
        h = relu(add_bias(h, params[f"{prefix}.{i}.bias"]))
    return h


def input_transform(params, batch):
    """The (b, 3, 3) matrices predicted by the input T-Net."""
    cfg = params.config
    h = _dense_stack(params, "tnet.mlp", cfg.tnet_mlp_widths, batch)
    h = reshape(reduce_max(h), (batch.shape[0], 1, -1))
    h = _dense_stack(params, "tnet.head", cfg.tnet_head_widths, h)
    h = add_bias(matmul(h, params["tnet.out.weight"]), params["tnet.out.bias"])
    return reshape(h, (batch.shape[0], 3, 3))


def _check_batch(batch):
    batch = batch if isinstance(batch, Tensor) else Tensor(batch)
    if batch.data.ndim != 3 or batch.shape[-1] != 3:
        raise DimensionError(f"expected a (b, n, 3) batch, got {batch.shape}")
    return batch


def forward(params, batch):
    """Log-class-probabilities of shape (b, k) for a (b, n, 3) batch."""
    batch = _check_batch(batch)
    cfg = params.config
    x = batch
    if cfg.with_input_tnet:
        x = matmul(x, input_transform(params, x))
    h = _dense_stack(params, "mlp", cfg.point_mlp_widths, x)
    # (b, 1, c) keeps each sample's head product independent of the batch size
    h = reshape(reduce_max(h), (batch.shape[0], 1, -1))
    h = _dense_stack(params, "head", cfg.head_widths, h)
    scores = add_bias(matmul(h, params["out.weight"]), params["out.bias"])
    return log_softmax(reshape(scores, (batch.shape[0], -1)))


def layer_outputs(params, batch):
    """Concrete activations after each stage, in the order interval
    propagation visits them: per-point layers, pool, head layers, scores, output.
    """
    batch = _check_batch(batch)
    cfg = params.config
    if cfg.with_input_tnet:
        raise DimensionError("layer_outputs does not trace the T-Net")
    outs = []
    h = batch
    for i in range(len(cfg.point_mlp_widths)):
        h = relu(add_bias(matmul(h, params[f"mlp.{i}.weight"]), params[f"mlp.{i}.bias"]))
        outs.append((f"mlp.{i}", h.data))
    b = batch.shape[0]
    h = reshape(reduce_max(h), (b, 1, -1))
    outs.append(("maxpool", h.data[:, 0]))
    for i in range(len(cfg.head_widths)):
        h = relu(add_bias(matmul(h, params[f"head.{i}.weight"]), params[f"head.{i}.bias"]))
        outs.append((f"head.{i}", h.data[:, 0]))
    scores = reshape(add_bias(matmul(h, params["out.weight"]), params["out.bias"]), (b, -1))
    outs.append(("scores", scores.data))
    outs.append(("log_softmax", log_softmax(scores).data))
    return outs


def argmax_rows(logits):
    # np.argmax returns the first maximal index, i.e. the lowest class id
    return [int(i) for i in np.argmax(np.asarray(logits), axis=-1)]


def predict(params, batch):
    return argmax_rows(forward(params, batch).data)


# -- persistence -------------------------------------------------------------

def to_bytes(params):
    chunks = [MAGIC, struct.pack("<II", VERSION, len(params.tensors))]
    for name, t in params.tensors.items():
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<B", t.data.ndim))
        chunks.append(struct.pack(f"<{t.data.ndim}I", *t.shape))
        chunks.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return b"".join(chunks)


def save(params, path):
    with open(path, "wb") as fh:
        fh.write(to_bytes(params))


def expected_file_size(params):
    size = len(MAGIC) + 8
    for name, t in params.tensors.items():
        size += 2 + len(name.encode("utf-8")) + 1 + 4 * t.data.ndim + 4 * t.size
    return size


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated file while reading {what}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def _infer_config(tensors):
    def widths(prefix):
        out = []
        while f"{prefix}.{len(out)}.weight" in tensors:
            out.append(tensors[f"{prefix}.{len(out)}.weight"].shape[-1])
        return tuple(out)

    if "out.weight" not in tensors or tensors["out.weight"].data.ndim != 2:
        raise FormatError("tensor 'out.weight' missing or not a matrix")
    tnet = "tnet.out.weight" in tensors
    kwargs = dict(
        num_classes=tensors["out.weight"].shape[1],
        point_mlp_widths=widths("mlp"),
        head_widths=widths("head"),
        with_input_tnet=tnet,
    )
    if tnet:
        kwargs.update(tnet_mlp_widths=widths("tnet.mlp"), tnet_head_widths=widths("tnet.head"))
    try:
        return ModelConfig(**kwargs)
    except ValueError as exc:
        raise FormatError(f"inconsistent model tensors: {exc}") from exc


def from_bytes(buf, config=None):
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic, not a PCVM model file")
    version, count = r.unpack("<II", "header")
    if version != VERSION:
        raise FormatError(f"unsupported PCVM version {version}")
    tensors = {}
    for i in range(count):
        (name_len,) = r.unpack("<H", f"name length of tensor #{i}")
        try:
            name = r.take(name_len, f"name of tensor #{i}").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"tensor #{i} name is not valid utf-8") from exc
        (rank,) = r.unpack("<B", f"rank of tensor '{name}'")
        if rank == 0:
            raise FormatError(f"tensor '{name}' has rank 0")
        shape = r.unpack(f"<{rank}I", f"extents of tensor '{name}'")
        if 0 in shape:
            raise FormatError(f"tensor '{name}' has a zero extent {shape}")
        numel = int(np.prod(shape))
        raw = r.take(4 * numel, f"data of tensor '{name}'")
        if name in tensors:
            raise FormatError(f"tensor '{name}' appears twice")
        tensors[name] = Tensor(np.frombuffer(raw, dtype="<f4").reshape(shape))
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after the last tensor")

    inferred = _infer_config(tensors)
    if config is None:
        config = inferred
    expected = _layer_shapes(config)
    for name, shape in expected:
        if name not in tensors:
            raise FormatError(f"tensor '{name}' missing")
        if tensors[name].shape != tuple(shape):
            raise FormatError(
                f"tensor '{name}' has shape {tensors[name].shape}, expected {tuple(shape)}"
            )
    extra = set(tensors) - {n for n, _ in expected}
    if extra:
        raise FormatError(f"unexpected tensor '{sorted(extra)[0]}'")
    ordered = {name: tensors[name] for name, _ in expected}
    if list(ordered) != list(tensors):
        raise FormatError("tensors are not in canonical order")
    return ModelParams(config, ordered)


def load(path, config=None):
    """Read a PCVM file. ``config`` overrides fields the format does not store
    (``num_points``); layer shapes are always validated against it.
    """
    with open(path, "rb") as fh:
        return from_bytes(fh.read(), config)
