"""Binary checkpoint format (little-endian).

Layout::

    b"FCSR"  magic
    u32      format version
    u32      flags (bit 0: optimizer state follows, bit 1: loss settings follow)
    u32 x 2  scale numerator, denominator
    u32 x 6  lr_patch, num_blocks, ident_dim, bottleneck_dim, final_dim, units_per_block
    u8 x 2   head kind, unit variant
    [f64 x 3 beta, sigma, eps]                       if flags bit 1
    u32      tensor count
    per tensor: u16 name length, UTF-8 name, u8 rank, u32 x rank dims, float32 data
    [optimizer section]                              if flags bit 0
        u8 kind, f64 x 3 (momentum-or-decay, eps, weight decay), u32 slot count,
        then slots encoded like tensors

Tensors are written in model order: parameters first, then batch-norm buffers.
"""
import struct
from fractions import Fraction
from pathlib import Path

import numpy as np

from .model import HEADS, VARIANTS, ModelConfig, SRModel
from .objectives import LossConfig
from .optim import RMSProp, SGDMomentum

MAGIC = b"FCSR"
VERSION = 1
FLAG_OPTIMIZER = 1
FLAG_LOSS = 2
_OPT_KINDS = ("sgd-momentum", "rmsprop")


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class CheckpointLayoutError(CheckpointError):
    """Name table or dimensions disagree with what the stored config implies."""


def _tensor_bytes(name, arr):
    raw = name.encode("utf-8")
    out = [struct.pack("<H", len(raw)), raw, struct.pack("<B", arr.ndim),
           struct.pack(f"<{arr.ndim}I", *arr.shape)]
    out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def _model_tensors(model):
    items = [(p.name, p.value) for p in model.parameters()]
    items += list(model.buffers().items())
    return items


def checkpoint_save(model, optimizer=None, loss_config=None):
    c = model.config
    flags = (FLAG_OPTIMIZER if optimizer is not None else 0) | (FLAG_LOSS if loss_config is not None else 0)
    parts = [MAGIC, struct.pack("<II", VERSION, flags),
             struct.pack("<II", c.scale.numerator, c.scale.denominator),
             struct.pack("<6I", c.lr_patch, c.num_blocks, c.ident_dim, c.bottleneck_dim, c.final_dim,
                         c.units_per_block),
             struct.pack("<BB", HEADS.index(c.head), VARIANTS.index(c.unit_variant))]
    if loss_config is not None:
        parts.append(struct.pack("<3d", loss_config.beta, loss_config.sigma, loss_config.eps))
    tensors = _model_tensors(model)
    parts.append(struct.pack("<I", len(tensors)))
    parts += [_tensor_bytes(n, a) for n, a in tensors]
    if optimizer is not None:
        if isinstance(optimizer, SGDMomentum):
            hyper = (optimizer.momentum, 0.0, optimizer.weight_decay)
        else:
            hyper = (optimizer.decay, optimizer.eps, optimizer.weight_decay)
        parts.append(struct.pack("<B3dI", _OPT_KINDS.index(optimizer.kind), *hyper, len(optimizer.slots)))
        parts += [_tensor_bytes(n, optimizer.slots[n]) for n in sorted(optimizer.slots)]
    return b"".join(parts)


class _Reader:
    def __init__(self, data):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(f"checkpoint truncated while reading {what} "
                                           f"(need {n} bytes at offset {self.pos}, have {len(self.data) - self.pos})")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def tensor(self):
        (nlen,) = self.unpack("<H", "tensor name length")
        try:
            name = bytes(self.take(nlen, "tensor name")).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointLayoutError(f"tensor name at offset {self.pos - nlen} is not UTF-8") from e
        (rank,) = self.unpack("<B", f"rank of {name}")
        dims = self.unpack(f"<{rank}I", f"dims of {name}")
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        raw = self.take(4 * count, f"data of {name} (dims {dims})")
        return name, dims, np.frombuffer(raw, dtype="<f4").reshape(dims)


def read_header(data):
    """Parse magic, version, flags, config and optional loss settings."""
    r = _Reader(data)
    magic = bytes(r.take(4, "magic"))
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version, flags = r.unpack("<II", "version")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint format version {version}, this build reads {VERSION}")
    num, den = r.unpack("<II", "scale")
    dims = r.unpack("<6I", "config")
    head, variant = r.unpack("<BB", "head/variant")
    if head >= len(HEADS) or variant >= len(VARIANTS) or den == 0:
        raise CheckpointLayoutError(f"invalid config codes head={head} variant={variant} scale={num}/{den}")
    config = ModelConfig(Fraction(num, den), *dims, head=HEADS[head], unit_variant=VARIANTS[variant])
    loss = None
    if flags & FLAG_LOSS:
        beta, sigma, eps = r.unpack("<3d", "loss settings")
        loss = LossConfig(beta=beta, sigma=sigma, eps=eps)
    return dict(version=version, flags=flags, config=config, loss=loss), r


def checkpoint_load(data, with_extras=False):
    """Rebuild an SRModel from bytes.

    With ``with_extras`` returns ``(model, optimizer_or_None, loss_config_or_None)``.
    """
    header, r = read_header(data)
    config = header["config"]
    model = SRModel(config, seed=0)
    params = model.named_parameters()
    buffers = model.buffers()
    expected = [n for n, _ in _model_tensors(model)]
    (count,) = r.unpack("<I", "tensor count")
    if count != len(expected):
        raise CheckpointLayoutError(f"checkpoint has {count} tensors, config implies {len(expected)}")
    for want in expected:
        name, dims, arr = r.tensor()
        if name != want:
            raise CheckpointLayoutError(f"tensor name table mismatch: found {name!r}, expected {want!r}")
        target = params[name].value if name in params else buffers[name]
        if tuple(dims) != target.shape:
            raise CheckpointLayoutError(f"tensor {name!r}: stored dims {tuple(dims)} "
                                        f"({int(np.prod(dims))} values) but config implies {target.shape} "
                                        f"({target.size} values)")
        target[...] = arr
    optimizer = None
    if header["flags"] & FLAG_OPTIMIZER:
        kind, a, b, wd, nslots = r.unpack("<B3dI", "optimizer header")
        if kind >= len(_OPT_KINDS):
            raise CheckpointLayoutError(f"unknown optimizer kind code {kind}")
        optimizer = SGDMomentum(a, wd) if _OPT_KINDS[kind] == "sgd-momentum" else RMSProp(a, b, wd)
        for _ in range(nslots):
            name, dims, arr = r.tensor()
            if name not in params or params[name].value.shape != tuple(dims):
                raise CheckpointLayoutError(f"optimizer slot {name!r} {tuple(dims)} matches no parameter")
            optimizer.slots[name] = arr.astype(np.float32)
        optimizer.seal()
    if r.pos != len(r.data):
        raise CheckpointLayoutError(f"{len(r.data) - r.pos} trailing bytes after checkpoint payload")
    if with_extras:
        return model, optimizer, header["loss"]
    return model


def save(path, model, optimizer=None, loss_config=None):
    Path(path).write_bytes(checkpoint_save(model, optimizer, loss_config))


def load(path, with_extras=False):
    return checkpoint_load(Path(path).read_bytes(), with_extras)
