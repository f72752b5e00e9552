"""VGG-style network description, construction, surgery and checkpoints."""
from __future__ import annotations

import configparser
import io
import os
import struct
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import (
    BadMagicError,
    CheckpointError,
    ShapeError,
    ShapeTableMismatchError,
    SurgeryError,
    TruncatedCheckpointError,
    UnsupportedVersionError,
    ValidationError,
)

MAGIC = b"PRZK"
VERSION = 1



def creation_time() -> int:
    """Unix time, pinned by ``SOURCE_DATE_EPOCH`` when set so reruns are byte-identical."""
    pinned = os.environ.get("SOURCE_DATE_EPOCH")
    return int(pinned) if pinned else int(time.time())


@dataclass(frozen=True)
class BlockSpec:
    convs: int
    out_channels: int

    def __post_init__(self):
        if self.convs < 1 or self.out_channels < 1:
            raise ValidationError(f"block needs convs >= 1 and out_channels >= 1, got {self}")

    def __str__(self) -> str:
        return f"{self.convs}x{self.out_channels}"


@dataclass(frozen=True)
class NetworkSpec:
    blocks: tuple[BlockSpec, ...]
    num_classes: int
    hidden_dims: tuple[int, ...] = ()
    input_side: int = 32
    input_channels: int = 1

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if not self.blocks:
            raise ValidationError("network needs at least one block")
        if self.num_classes < 2:
            raise ValidationError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.input_channels < 1:
            raise ValidationError("input_channels must be >= 1")
        if any(h < 1 for h in self.hidden_dims):
            raise ValidationError(f"hidden dims must be positive, got {self.hidden_dims}")
        infer_shapes(self, self.input_side)

    def descriptor(self) -> str:
        return (
            f"input_side = {self.input_side}\n"
            f"input_channels = {self.input_channels}\n"
            f"blocks = {format_blocks(self.blocks)}\n"
            f"hidden_dims = {', '.join(map(str, self.hidden_dims))}\n"
            f"num_classes = {self.num_classes}\n"
        )

    def param_shapes(self) -> list[tuple[tuple[int, ...], tuple[int]]]:
        shapes = []
        c = self.input_channels
        for b in self.blocks:
            for _ in range(b.convs):
                shapes.append(((b.out_channels, c, 3, 3), (b.out_channels,)))
                c = b.out_channels
        ch, side = infer_shapes(self, self.input_side)[-1]
        width = ch * side * side
        for h in (*self.hidden_dims, self.num_classes):
            shapes.append(((h, width, 1, 1), (h,)))
            width = h
        return shapes


def parse_blocks(text: str) -> tuple[BlockSpec, ...]:
    """``"2x8, 2x16"`` -> two blocks of two convs each."""
    blocks = []
    for item in filter(None, (t.strip() for t in text.split(","))):
        convs, sep, width = item.lower().partition("x")
        if not sep:
            raise ValidationError(f"block {item!r} must be written as <convs>x<channels>")
        try:
            blocks.append(BlockSpec(int(convs), int(width)))
        except ValueError as exc:
            raise ValidationError(f"bad block {item!r}: {exc}") from None
    return tuple(blocks)


def format_blocks(blocks: Sequence[BlockSpec]) -> str:
    return ", ".join(str(b) for b in blocks)


def parse_int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise ValidationError(f"expected comma-separated integers, got {text!r}") from None


def spec_from_mapping(m) -> NetworkSpec:
    known = {"input_side", "input_channels", "blocks", "hidden_dims", "num_classes"}
    unknown = set(m) - known
    if unknown:
        raise ValidationError(f"unknown network keys: {sorted(unknown)}")
    try:
        return NetworkSpec(
            blocks=parse_blocks(m["blocks"]),
            num_classes=int(m["num_classes"]),
            hidden_dims=parse_int_list(m.get("hidden_dims", "")),
            input_side=int(m["input_side"]),
            input_channels=int(m.get("input_channels", 1)),
        )
    except KeyError as exc:
        raise ValidationError(f"network descriptor missing key {exc}") from None


def parse_spec_descriptor(text: str) -> NetworkSpec:
    """Parse the ``key = value`` text emitted by :meth:`NetworkSpec.descriptor`."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.read_string(text if text.lstrip().startswith("[") else "[network]\n" + text)
    return spec_from_mapping(dict(cp["network"]))


def infer_shapes(spec: NetworkSpec, input_side: int) -> list[tuple[int, int]]:
    """(channels, side) after each block."""
    out = []
    side = input_side
    for i, b in enumerate(spec.blocks):
        if side % 2 or side < 2:
            raise ShapeError(
                f"input side {input_side} is not divisible by 2^{len(spec.blocks)}: "
                f"block {i} receives odd side {side}"
            )
        side //= 2
        out.append((b.out_channels, side))
    return out


def _he_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _fresh_layer(rng, wshape, dtype) -> T.LayerParams:
    fan_in = int(np.prod(wshape[1:]))
    return T.LayerParams(
        _he_uniform(rng, wshape, fan_in).astype(dtype),
        np.zeros(wshape[0], dtype=dtype),
    )


class Model:
    """Sequential stack of VGG blocks followed by a fully connected head."""

    def __init__(self, spec: NetworkSpec, blocks: list[list[T.LayerParams]], head: list[T.LayerParams]):
        self.spec = spec
        self.blocks = blocks
        self.head = head
        expected = spec.param_shapes()
        got = [(p.weight.shape, p.bias.shape) for p in self.parameters()]
        if got != expected:
            raise ShapeError(f"parameter shapes {got} do not match spec {expected}")
        self.frozen: set[int] = set()

    @property
    def dtype(self):
        return self.head[-1].weight.dtype

    def parameters(self) -> list[T.LayerParams]:
        return [p for blk in self.blocks for p in blk] + list(self.head)

    def parameter_names(self) -> list[str]:
        names = [f"block{b}.conv{i}" for b, blk in enumerate(self.blocks) for i in range(len(blk))]
        names += [f"head.fc{i}" for i in range(len(self.head))]
        return names

    def num_parameters(self) -> int:
        return sum(p.weight.size + p.bias.size for p in self.parameters())

    def astype(self, dtype) -> "Model":
        return Model(
            self.spec,
            [[p.copy(dtype) for p in blk] for blk in self.blocks],
            [p.copy(dtype) for p in self.head],
        )

    def copy(self) -> "Model":
        m = self.astype(self.dtype)
        m.frozen = set(self.frozen)
        return m

    def _check_input(self, x):
        x = T.check_tensor4(x, "model input")
        s = self.spec
        if x.shape[1:] != (s.input_channels, s.input_side, s.input_side):
            raise ShapeError(
                f"model expects (n, {s.input_channels}, {s.input_side}, {s.input_side}) "
                f"input, got {x.shape}"
            )
        return np.ascontiguousarray(x.transpose(0, 2, 3, 1), dtype=self.dtype)

    def _forward(self, x, keep: bool):
        h = self._check_input(x)
        caches = []
        for blk in self.blocks:
            for p in blk:
                y, cols = T.conv_forward_nhwc(h, p.weight, p.bias)
                np.maximum(y, 0, out=y)
                if keep:
                    caches.append(("conv", h.shape, cols, y))
                h = y
            pooled = T.maxpool_forward(h)
            if keep:
                caches.append(("pool", h, pooled))
            h = pooled
        n = h.shape[0]
        feat_shape = h.shape
        h = h.transpose(0, 3, 1, 2).reshape(n, -1)
        if keep:
            caches.append(("flatten", feat_shape))
        for i, p in enumerate(self.head):
            w = p.weight.reshape(p.out_channels, -1)
            y = h @ w.T + p.bias
            last = i == len(self.head) - 1
            if not last:
                np.maximum(y, 0, out=y)
            if keep:
                caches.append(("fc", h, y, last))
            h = y
        return h, caches

    def forward(self, x) -> np.ndarray:
        """Logits, shape (n, num_classes)."""
        return self._forward(x, keep=False)[0]

    def loss(self, x, labels) -> float:
        return T.softmax_cross_entropy(self.forward(x), labels)[0]

    def loss_and_grads(self, x, labels):
        """Mean cross-entropy and ``[(grad_w, grad_b), ...]`` aligned with :meth:`parameters`."""
        logits, caches = self._forward(x, keep=True)
        loss, g = T.softmax_cross_entropy(logits, labels)
        params = self.parameters()
        grads: list = [None] * len(params)
        pi = len(params) - 1
        for entry in reversed(caches):
            kind = entry[0]
            if kind == "fc":
                _, h_in, y, last = entry
                if not last:
                    g = g * (y > 0)
                p = params[pi]
                w = p.weight.reshape(p.out_channels, -1)
                grads[pi] = ((g.T @ h_in).reshape(p.weight.shape), g.sum(axis=0))
                g = g @ w
                pi -= 1
            elif kind == "flatten":
                n, hh, ww, c = entry[1]
                g = np.ascontiguousarray(g.reshape(n, c, hh, ww).transpose(0, 2, 3, 1))
            elif kind == "pool":
                _, h_in, pooled = entry
                g = T.maxpool_backward(h_in, pooled, g)
            else:
                _, x_shape, cols, y = entry
                g = g * (y > 0)
                p = params[pi]
                gx, gw, gb = T.conv_backward_nhwc(cols, x_shape, p.weight, g, need_input_grad=pi > 0)
                grads[pi] = (gw, gb)
                g = gx
                pi -= 1
        return loss, grads

    def predict_proba(self, x, batch_size: int = 256) -> np.ndarray:
        out = [T.softmax(self.forward(x[i:i + batch_size])) for i in range(0, len(x), batch_size)]
        if not out:
            return np.zeros((0, self.spec.num_classes), dtype=self.dtype)
        return np.concatenate(out)


def build_network(spec: NetworkSpec, seed: int, dtype=np.float32) -> Model:
    """He-uniform weights, zero biases, drawn in spec order from one seeded stream."""
    rng = np.random.default_rng(seed)
    layers = [_fresh_layer(rng, w, dtype) for w, _ in spec.param_shapes()]
    return _assemble(spec, layers)


def _assemble(spec: NetworkSpec, layers: list[T.LayerParams]) -> Model:
    blocks, k = [], 0
    for b in spec.blocks:
        blocks.append(layers[k:k + b.convs])
        k += b.convs
    return Model(spec, blocks, layers[k:])


def replace_head(model: Model, num_classes: int, seed: int) -> Model:
    """Swap the final FC layer for a freshly initialized ``num_classes``-way layer."""
    if num_classes < 2:
        raise ValidationError(f"num_classes must be >= 2, got {num_classes}")
    spec = replace(model.spec, num_classes=num_classes)
    wshape = spec.param_shapes()[-1][0]
    rng = np.random.default_rng(seed)
    layers = [p.copy() for p in model.parameters()[:-1]]
    layers.append(_fresh_layer(rng, wshape, model.dtype))
    return _assemble(spec, layers)


def progressive_surgery(stage1: Model, new_blocks: Sequence[BlockSpec], seed: int) -> Model:
    """Drop the first block and prepend two fresh blocks; input side doubles.

    Everything after the removed block, including the head, is copied over
    unchanged.
    """
    s = stage1.spec
    new_blocks = tuple(new_blocks)
    if len(s.blocks) < 2:
        raise SurgeryError(f"surgery needs a network with >= 2 blocks, got {len(s.blocks)}")
    if len(new_blocks) != 2:
        raise SurgeryError(f"surgery adds exactly 2 blocks, got {len(new_blocks)}")
    removed = s.blocks[0]
    if new_blocks[-1].out_channels != removed.out_channels:
        raise SurgeryError(
            f"channel mismatch at the junction: new block outputs {new_blocks[-1].out_channels} "
            f"channels but the removed first block produced {removed.out_channels}"
        )
    spec2 = replace(s, blocks=new_blocks + s.blocks[1:], input_side=2 * s.input_side)
    rng = np.random.default_rng(seed)
    fresh_shapes = spec2.param_shapes()[: sum(b.convs for b in new_blocks)]
    fresh = [_fresh_layer(rng, w, stage1.dtype) for w, _ in fresh_shapes]
    retained = [p.copy() for p in stage1.parameters()[removed.convs:]]
    return _assemble(spec2, fresh + retained)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    model: Model
    meta: dict = field(default_factory=dict)
    history: list = field(default_factory=list, compare=False, repr=False)

    @property
    def spec(self) -> NetworkSpec:
        return self.model.spec

    @property
    def stage(self) -> str:
        return self.meta.get("stage", "")


def _descriptor(ckpt: Checkpoint) -> str:
    meta = {"stage": "", "seed": 0, "config_digest": "", "created": creation_time()}
    meta.update(ckpt.meta)
    lines = ["[network]", ckpt.model.spec.descriptor().rstrip(), "", "[meta]"]
    lines += [f"{k} = {meta[k]}" for k in sorted(meta)]
    return "\n".join(lines) + "\n"


def save_checkpoint(ckpt: Checkpoint | Model, path) -> Path:
    if isinstance(ckpt, Model):
        ckpt = Checkpoint(ckpt)
    desc = _descriptor(ckpt).encode("utf-8")
    arrays = []
    for p in ckpt.model.parameters():
        arrays += [p.weight, p.bias]
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(desc)))
    buf.write(desc)
    buf.write(struct.pack("<I", len(arrays)))
    for a in arrays:
        buf.write(struct.pack("<I", a.ndim))
        buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
    for a in arrays:
        buf.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(buf.getvalue())
    return path


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(f"{self.path}: truncated payload at byte {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, count: int = 1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals if count > 1 else vals[0]


def load_checkpoint(path, expected_spec: NetworkSpec | None = None) -> Checkpoint:
    path = Path(path)
    r = _Reader(path.read_bytes(), path)
    if r.take(4) != MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise UnsupportedVersionError(f"{path}: checkpoint version {version} unsupported (want {VERSION})")
    desc = r.take(r.u32()).decode("utf-8")
    cp = configparser.ConfigParser(interpolation=None)
    cp.read_string(desc)
    spec = spec_from_mapping(dict(cp["network"]))
    meta = dict(cp["meta"]) if cp.has_section("meta") else {}
    for key in ("seed", "created"):
        if key in meta:
            meta[key] = int(meta[key])
    n_arrays = r.u32()
    shapes = []
    for _ in range(n_arrays):
        ndim = r.u32()
        shapes.append(tuple(np.atleast_1d(r.u32(ndim)).tolist()) if ndim else ())
    want = [s for pair in spec.param_shapes() for s in pair]
    if shapes != want:
        raise ShapeTableMismatchError(f"{path}: shape table {shapes} does not match its spec {want}")
    if expected_spec is not None:
        expected = [s for pair in expected_spec.param_shapes() for s in pair]
        if expected != shapes or expected_spec != spec:
            raise ShapeTableMismatchError(
                f"{path}: checkpoint spec ({format_blocks(spec.blocks)} @ {spec.input_side}) "
                f"does not match expected ({format_blocks(expected_spec.blocks)} @ {expected_spec.input_side})"
            )
    arrays = []
    for shape in shapes:
        count = int(np.prod(shape))
        arrays.append(np.frombuffer(r.take(4 * count), dtype="<f4").astype(np.float32).reshape(shape))
    if r.pos != len(r.data):
        raise CheckpointError(f"{path}: {len(r.data) - r.pos} trailing bytes")
    layers = [T.LayerParams(arrays[i], arrays[i + 1]) for i in range(0, len(arrays), 2)]
    return Checkpoint(_assemble(spec, layers), meta)
