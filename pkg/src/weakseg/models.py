"""Classifier and encoder-decoder segmenter built from :mod:`weakseg.nn`.

Parameter naming (segmenter, d=1, n=1, N=1)::

    stem.conv.weight  stem.conv.bias  stem.bn.gamma  stem.bn.beta
    down0.block0.stage0.conv.weight ... down0.block0.stage0.bn.beta
    up0.block0.stage0.conv.weight   ... up0.block0.stage0.bn.beta
    head.weight  head.bias

The classifier shares the ``stem``/``down*`` layout and ends in ``fc.weight``,
``fc.bias``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from . import nn
from .autodiff import ShapeError, Tensor, make_result

# Scale applied to the He init of the segmenter's 1-channel head so the
# untrained mask starts near 0.5 instead of saturating.
HEAD_INIT_SCALE = 0.1

FORMAT_MAGIC = b"WSEGMDL\x00"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sII")  # magic, version, header length


class ModelFormatError(ValueError):
    pass


class VersionMismatchError(ModelFormatError):
    pass


class TruncatedStreamError(ModelFormatError):
    pass


class ChecksumError(ModelFormatError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    c: int = 8
    d: int = 2
    n: int = 1
    N: int = 1
    num_classes: int = 8
    input_size: tuple[int, int] = (64, 64)

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        for k in ("c", "d", "n", "N", "num_classes"):
            if int(getattr(self, k)) < 1:
                raise ValueError(f"{k} must be >= 1, got {getattr(self, k)}")

    @property
    def depth(self) -> int:
        return self.d * self.n * self.N + 1

    def check_input_size(self, size=None) -> None:
        h, w = self.input_size if size is None else size
        step = 2 ** self.d
        if h % step or w % step:
            raise ShapeError(f"input size {(h, w)} is not divisible by 2^d = {step}")

    def key(self) -> tuple:
        return (self.c, self.d, self.n, self.N, self.num_classes, self.input_size)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        return d


@dataclass
class Model:
    config: ModelConfig
    kind: str
    dtype: np.dtype = field(default_factory=lambda: np.dtype(np.float64))
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("classifier", "segmenter"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        self.config.check_input_size()
        self.dtype = np.dtype(self.dtype)
        cfg, dt = self.config, self.dtype
        rng = np.random.default_rng(self.seed)
        self.stem = nn.ConvBNReLU(1, cfg.c, rng, dt)
        self.down = [[nn.ResidualBlock(cfg.c, cfg.n, rng, dt) for _ in range(cfg.N)] for _ in range(cfg.d)]
        if self.kind == "classifier":
            self.fc = nn.Linear(cfg.c, cfg.num_classes, rng, dt)
        else:
            self.up = [[nn.ResidualBlock(cfg.c, cfg.n, rng, dt) for _ in range(cfg.N)] for _ in range(cfg.d)]
            self.head = nn.Conv3x3(cfg.c, 1, rng, dt, init_scale=HEAD_INIT_SCALE)

    # -- structure -----------------------------------------------------------

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.stem.named_tensors("stem")
        for i, level in enumerate(self.down):
            for j, blk in enumerate(level):
                yield from blk.named_tensors(f"down{i}.block{j}")
        if self.kind == "classifier":
            yield from self.fc.named_tensors("fc")
        else:
            for i, level in enumerate(self.up):
                for j, blk in enumerate(level):
                    yield from blk.named_tensors(f"up{i}.block{j}")
            yield from self.head.named_tensors("head")

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        yield from self.stem.named_buffers("stem")
        for i, level in enumerate(self.down):
            for j, blk in enumerate(level):
                yield from blk.named_buffers(f"down{i}.block{j}")
        if self.kind == "segmenter":
            for i, level in enumerate(self.up):
                for j, blk in enumerate(level):
                    yield from blk.named_buffers(f"up{i}.block{j}")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def conv_count(self) -> int:
        return sum(1 for name, _ in self.named_parameters() if name.endswith(".weight") and
                   (".conv." in name or name.startswith("head")))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    # -- forward -------------------------------------------------------------

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        if x.data.ndim != 4 or x.shape[1] != 1:
            raise ShapeError(f"expected [batch, 1, H, W] input, got {x.shape}")
        self.config.check_input_size(x.shape[2:])
        h = self.stem(x, training)
        skips = []
        for level in self.down:
            for blk in level:
                h = blk(h, training)
            skips.append(h)
            h = nn.maxpool2x2(h)
        if self.kind == "classifier":
            return nn.linear_softmax(nn.global_avg_pool(h), self.fc.weight, self.fc.bias)
        for i in reversed(range(self.config.d)):
            h = nn.bilinear_upsample_x2(h) + skips[i]
            for blk in self.up[i]:
                h = blk(h, training)
        return nn.sigmoid(self.head(h))

    __call__ = forward


def build_classifier(config: ModelConfig, seed: int = 0, dtype=np.float64) -> Model:
    return Model(config, "classifier", np.dtype(dtype), seed)


def build_segmenter(config: ModelConfig, seed: int = 0, dtype=np.float64) -> Model:
    return Model(config, "segmenter", np.dtype(dtype), seed)


def spatial_mean(mask: Tensor) -> Tensor:
    """Per-sample average of a [batch, 1, H, W] mask -> [batch]."""
    if mask.data.ndim != 4 or mask.shape[1] != 1:
        raise ShapeError(f"spatial mean needs a single-channel mask, got {mask.shape}")
    b, _, h, w = mask.shape
    out = mask.data.reshape(b, -1).mean(axis=1)
    return make_result(out, (mask,),
                       lambda g: ((mask, np.broadcast_to(g[:, None, None, None] / (h * w), mask.shape).copy()),))


# -- serialization -----------------------------------------------------------

def serialize_model(model: Model) -> bytes:
    """Header JSON + little-endian parameter/buffer payload + SHA-256 trailer."""
    entries, chunks = [], []
    le = model.dtype.newbyteorder("<")
    for name, p in model.named_parameters():
        entries.append({"name": name, "shape": list(p.shape), "role": "param"})
        chunks.append(np.ascontiguousarray(p.data, dtype=le).tobytes())
    for name, b in model.named_buffers():
        entries.append({"name": name, "shape": list(b.shape), "role": "buffer"})
        chunks.append(np.ascontiguousarray(b, dtype=le).tobytes())
    header = json.dumps({
        "kind": model.kind,
        "config": model.config.to_dict(),
        "dtype": model.dtype.name,
        "seed": model.seed,
        "tensors": entries,
    }, sort_keys=True).encode()
    body = _PREFIX.pack(FORMAT_MAGIC, FORMAT_VERSION, len(header)) + header + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def deserialize_model(blob: bytes) -> Model:
    if len(blob) < _PREFIX.size:
        raise TruncatedStreamError("stream shorter than the format prefix")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != FORMAT_MAGIC:
        raise ModelFormatError("not a weakseg model stream")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"format version {version}, expected {FORMAT_VERSION}")
    if len(blob) < _PREFIX.size + hlen + 32:
        raise TruncatedStreamError("stream truncated inside header")
    try:
        header = json.loads(blob[_PREFIX.size:_PREFIX.size + hlen])
    except ValueError as exc:
        raise ModelFormatError(f"corrupt header: {exc}") from None
    dtype = np.dtype(header["dtype"])
    payload = sum(int(np.prod(e["shape"], dtype=np.int64)) for e in header["tensors"]) * dtype.itemsize
    expected = _PREFIX.size + hlen + payload + 32
    if len(blob) < expected:
        raise TruncatedStreamError(f"stream has {len(blob)} bytes, expected {expected}")
    if len(blob) > expected:
        raise ModelFormatError("trailing bytes after checksum")
    if hashlib.sha256(blob[:-32]).digest() != blob[-32:]:
        raise ChecksumError("checksum mismatch")

    cfg = header["config"]
    model = Model(ModelConfig(**cfg), header["kind"], dtype, header.get("seed", 0))
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    le = dtype.newbyteorder("<")
    off = _PREFIX.size + hlen
    for e in header["tensors"]:
        shape = tuple(e["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(blob, dtype=le, count=nbytes // dtype.itemsize, offset=off).astype(dtype).reshape(shape)
        off += nbytes
        target = params.get(e["name"]) if e["role"] == "param" else None
        if target is not None:
            if target.shape != shape:
                raise ModelFormatError(f"shape mismatch for {e['name']}")
            target.data = arr.copy()
        elif e["name"] in buffers:
            buffers[e["name"]][...] = arr
        else:
            raise ModelFormatError(f"unknown tensor {e['name']!r}")
    return model


def save_model(model: Model, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_model(model))


def load_model(path) -> Model:
    with open(path, "rb") as fh:
        return deserialize_model(fh.read())
