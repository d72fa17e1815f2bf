"""Full network assembly, accounting, and checkpoint serialization.

The stack follows the published layout: a 7x7x7 stride-2 stem, a 3x3x3
stride-2 max pool, three stages of (strided residual unit + attention
stack), three trailing residual units (the first strided), an optional
non-local block, global average pooling, and a fully connected head that
emits logits.  Channel widths double at each downsampling stage.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ops
from . import tensor as T
from .errors import ConfigError, FormatError, ShapeError
from .modules import (
    AttentionModule,
    Builder,
    Conv3d,
    Linear,
    Module,
    NonLocalBlock,
    ResidualUnit,
)

CHECKPOINT_MAGIC = b"NLCK"
CHECKPOINT_VERSION = 1


@dataclass
class NetworkConfig:
    """Declarative description of one network variant.

    ``attention_stacks`` has one count per stage: [1, 1, 1] is the 3-stack
    variant, [1, 2, 3] the 6-stack variant, [0, 0, 0] the plain-ResNet
    ablation.  ``base_channels`` is 64 at paper scale, 8 for desk runs.
    """

    base_channels: int = 8
    attention_stacks: tuple = (1, 1, 1)
    attention_variant: str = "mixed"
    use_nonlocal: bool = True
    num_classes: int = 3
    input_shape: tuple = (16, 32, 32)

    def __post_init__(self):
        self.attention_stacks = tuple(int(n) for n in self.attention_stacks)
        self.input_shape = tuple(int(n) for n in self.input_shape)
        if len(self.attention_stacks) != 3:
            raise ConfigError("attention_stacks must have exactly 3 entries")
        if any(n < 0 for n in self.attention_stacks):
            raise ConfigError("attention stack counts must be >= 0")
        if self.base_channels < 1 or self.num_classes < 2:
            raise ConfigError("base_channels must be >= 1 and num_classes >= 2")
        if len(self.input_shape) != 3:
            raise ConfigError("input_shape must be (D, H, W)")

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _feasible_down_steps(shape, limit=2):
    """Largest k <= limit with every spatial extent divisible by 2^k."""
    k = 0
    while k < limit and all(e % (1 << (k + 1)) == 0 and e >> (k + 1) >= 1 for e in shape):
        k += 1
    return k


class NLRAN(Module):
    """The assembled classification network; ``forward`` emits logits."""

    def __init__(self, cfg: NetworkConfig, build: Builder):
        c = cfg.base_channels
        self.cfg = cfg
        self.stem = Conv3d(1, c, 7, build, stride=2)
        # stages: (in, mid, out, stride); widths double at each downsampling
        stage_specs = [
            (c, c, 4 * c, 1),
            (4 * c, 2 * c, 8 * c, 2),
            (8 * c, 4 * c, 16 * c, 2),
        ]
        shape = self._stem_pool_shape(cfg.input_shape)
        self.stage_units = []
        self.attention = []
        for i, (cin, mid, cout, stride) in enumerate(stage_specs):
            self.stage_units.append(ResidualUnit(cin, mid, cout, build, stride=stride))
            shape = self._strided(shape, stride)
            down = _feasible_down_steps(shape)
            self.attention.append(
                [
                    AttentionModule(cout, build, down_steps=down, variant=cfg.attention_variant)
                    for _ in range(cfg.attention_stacks[i])
                ]
            )
        self.tail = [
            ResidualUnit(16 * c, 8 * c, 32 * c, build, stride=2),
            ResidualUnit(32 * c, 8 * c, 32 * c, build),
            ResidualUnit(32 * c, 8 * c, 32 * c, build),
        ]
        self.nonlocal_block = NonLocalBlock(32 * c, build) if cfg.use_nonlocal else None
        self.fc = Linear(32 * c, cfg.num_classes, build)
        self.trace_shapes()  # raises ConfigError if shape-infeasible

    @staticmethod
    def _stem_pool_shape(input_shape):
        d, h, w = input_shape
        shape = tuple(ops._out_extent(e, 7, 2, 3) for e in (d, h, w))
        return tuple(ops._out_extent(e, 3, 2, 1) for e in shape)

    @staticmethod
    def _strided(shape, stride):
        return tuple(ops._out_extent(e, 3, stride, 1) for e in shape)

    def forward(self, x, record=None):
        """Run the network on (N, 1, D, H, W) input.

        ``record``, when given, is a dict that receives ``attention_maps``
        (list of M tensors, in network order) and ``pre_gap`` (the feature
        map entering global average pooling); recording never alters the
        computation.
        """
        if x.data.ndim != 5 or x.shape[1] != 1:
            raise ShapeError(f"expected (N, 1, D, H, W) input, got {x.shape}")
        maps = [] if record is not None else None
        y = T.relu(self.stem.forward(x))
        y = ops.maxpool3d(y, kernel=3, stride=2, padding=1)
        for unit, stack in zip(self.stage_units, self.attention):
            y = unit.forward(y)
            for att in stack:
                y = att.forward(y, collect=maps)
        for unit in self.tail:
            y = unit.forward(y)
        if self.nonlocal_block is not None:
            y = self.nonlocal_block.forward(y)
        if record is not None:
            record["attention_maps"] = maps
            record["pre_gap"] = y
        pooled = ops.global_average_pool(y)
        flat = T.reshape(pooled, (pooled.shape[0], pooled.shape[1]))
        return self.fc.forward(flat)

    # -- shape engine (symbolic; never allocates activations) -----------

    def trace_shapes(self):
        """Ordered (stage name, (C, D, H, W)) rows of the forward pass."""
        d, h, w = self.cfg.input_shape
        rows = []
        try:
            shape = self.stem.out_shape((1, d, h, w))
            rows.append(("conv1", shape))
            shape = (shape[0], *(ops._out_extent(e, 3, 2, 1) for e in shape[1:]))
            rows.append(("maxpool", shape))
            for i, (unit, stack) in enumerate(zip(self.stage_units, self.attention), 1):
                shape = unit.out_shape(shape)
                rows.append((f"residual{i}", shape))
                for j, att in enumerate(stack, 1):
                    shape = att.out_shape(shape)
                    rows.append((f"attention{i}.{j}", shape))
            for j, unit in enumerate(self.tail, 1):
                shape = unit.out_shape(shape)
                rows.append((f"tail{j}", shape))
            if self.nonlocal_block is not None:
                shape = self.nonlocal_block.out_shape(shape)
                rows.append(("nonlocal", shape))
            rows.append(("gap", (shape[0], 1, 1, 1)))
            rows.append(("fc", (self.cfg.num_classes,)))
        except ShapeError as exc:
            stage = rows[-1][0] if rows else "stem"
            raise ConfigError(f"config infeasible after stage {stage!r}: {exc}") from exc
        return rows

    def count_flops(self):
        """Multiply-add estimate for a batch-1 forward pass."""
        d, h, w = self.cfg.input_shape
        total, shape = self.stem.flops((1, d, h, w))
        shape = (shape[0], *(ops._out_extent(e, 3, 2, 1) for e in shape[1:]))
        for unit, stack in zip(self.stage_units, self.attention):
            f, shape = unit.flops(shape)
            total += f
            for att in stack:
                f, shape = att.flops(shape)
                total += f
        for unit in self.tail:
            f, shape = unit.flops(shape)
            total += f
        if self.nonlocal_block is not None:
            f, shape = self.nonlocal_block.flops(shape)
            total += f
        total += self.fc.flops()
        return total


def build(cfg: NetworkConfig, seed=0, dtype=np.float64, meta=False):
    """Construct a network (Kaiming-initialized, or shape-only when meta)."""
    return NLRAN(cfg, Builder(seed=seed, dtype=dtype, meta=meta))


def count_params(model):
    return sum(p.count for p in model.parameters())


def count_flops(model):
    return model.count_flops()


# -- checkpoints --------------------------------------------------------


def checkpoint_bytes(model, epoch=0, best_metric=0.0):
    header = {
        "config": asdict(model.cfg),
        "epoch": int(epoch),
        "best_metric": float(best_metric),
    }
    blob = json.dumps(header, sort_keys=True).encode()
    named = list(model.named_parameters())
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<H", CHECKPOINT_VERSION))
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(named)))
    for name, param in named:
        encoded = name.encode()
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        T.write_array(buf, param.data)
    return buf.getvalue()


def save_checkpoint(model, path, epoch=0, best_metric=0.0):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model, epoch, best_metric))


def load_checkpoint(path, expect_config=None):
    """Rebuild a model from a checkpoint; returns (model, header dict)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}")
        raw = fh.read(2)
        if len(raw) != 2:
            raise FormatError("truncated checkpoint header")
        (version,) = struct.unpack("<H", raw)
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        (blob_len,) = struct.unpack("<I", fh.read(4))
        blob = fh.read(blob_len)
        if len(blob) != blob_len:
            raise FormatError("truncated checkpoint config")
        header = json.loads(blob.decode())
        cfg = NetworkConfig.from_dict(header["config"])
        if expect_config is not None and asdict(expect_config) != asdict(cfg):
            raise ConfigError("checkpoint config does not match the expected config")
        (count,) = struct.unpack("<I", fh.read(4))
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode()
            tensors[name] = T.read_array(fh)

    first = next(iter(tensors.values())) if tensors else np.zeros(0)
    model = build(cfg, dtype=first.dtype)
    for name, param in model.named_parameters():
        if name not in tensors:
            raise FormatError(f"checkpoint missing parameter {name!r}")
        arr = tensors.pop(name)
        if arr.shape != param.declared_shape:
            raise FormatError(
                f"checkpoint parameter {name!r} has shape {arr.shape}, "
                f"expected {param.declared_shape}"
            )
        param.data = arr
    if tensors:
        raise FormatError(f"checkpoint has unexpected parameters: {sorted(tensors)}")
    return model, header
