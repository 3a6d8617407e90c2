"""Cell search space: operation pool, architecture encoding, model blueprint.

A cell is a fully-connected DAG over nodes V0..VK. V0 adapts the cell
input with a 1x1 convolution; each internal node j sums o(i,j)(f_i) over
all predecessors i < j; the cell output concatenates the K internal
nodes, so its width is K * cell_width. Three blocks of N cells, each
followed by a stride-2 3x3 max pool, sit between a 3x3 stem convolution
and a global-average-pool + linear classifier.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path

import numpy as np

from .errors import PoolVersionError, ValidationError

POOL_VERSION = "dpnas-v1"


class OperationId(IntEnum):
    """The 10-operation pool. Codes are a serialization contract."""

    CONV_RELU = 0
    CONV_TANH = 1
    CONV_SIGMOID = 2
    CONV_HARDTANH = 3
    CONV_SELU = 4
    CONV_LINEAR = 5
    SKIP_IDENTITY = 6
    MAX_POOL_3X3 = 7
    AVG_POOL_3X3 = 8
    ZERO = 9

    @property
    def is_conv(self) -> bool:
        """Conv3x3 -> GroupNorm -> activation blocks; the only ops with weights."""
        return self.value <= OperationId.CONV_LINEAR

    @property
    def is_pool(self) -> bool:
        return self in (OperationId.MAX_POOL_3X3, OperationId.AVG_POOL_3X3)


N_OPS = 10
CONV_OPS = tuple(op for op in OperationId if op.is_conv)
POOL_OPS = (OperationId.MAX_POOL_3X3, OperationId.AVG_POOL_3X3)


def enumerate_edges(k: int) -> list[tuple[int, int]]:
    """All (i, j) with 0 <= i < j <= k, lexicographic.

    This ordering is the controller's canonical action order and the
    order of codes in every serialized architecture.
    """
    if k < 1:
        raise ValidationError(f"node count K must be >= 1, got {k}")
    return [(i, j) for i in range(k) for j in range(i + 1, k + 1)]


def num_edges(k: int) -> int:
    return k * (k + 1) // 2


@dataclass(frozen=True)
class Architecture:
    """One operation per cell edge, stored in canonical edge order."""

    k: int
    ops: tuple[OperationId, ...]

    def __post_init__(self):
        if self.k < 1:
            raise ValidationError(f"node count K must be >= 1, got {self.k}")
        expected = num_edges(self.k)
        if len(self.ops) != expected:
            raise ValidationError(
                f"architecture with K={self.k} needs {expected} edge ops, "
                f"got {len(self.ops)}")
        bad = [o for o in self.ops if not isinstance(o, OperationId)]
        if bad:
            raise ValidationError(f"non-pool operations in edge map: {bad}")
        object.__setattr__(self, "ops", tuple(OperationId(o) for o in self.ops))

    @classmethod
    def from_edge_ops(cls, k: int, edge_ops: dict) -> "Architecture":
        """Build from an explicit {(i, j): op} map; reports missing/extra edges."""
        canonical = enumerate_edges(k)
        missing = [e for e in canonical if e not in edge_ops]
        extra = [e for e in edge_ops if e not in set(canonical)]
        if missing or extra:
            raise ValidationError(
                f"edge map does not cover K={k} exactly: "
                f"missing={missing} extra={extra}")
        return cls(k=k, ops=tuple(OperationId(edge_ops[e]) for e in canonical))

    @property
    def edge_ops(self) -> dict[tuple[int, int], OperationId]:
        return dict(zip(enumerate_edges(self.k), self.ops))

    def op(self, i: int, j: int) -> OperationId:
        return self.edge_ops[(i, j)]

    def replace_ops(self, mapping) -> "Architecture":
        """New architecture with each op passed through `mapping(edge, op)`."""
        edges = enumerate_edges(self.k)
        return Architecture(
            k=self.k,
            ops=tuple(mapping(e, o) for e, o in zip(edges, self.ops)))


def encode(arch: Architecture) -> list[int]:
    """Integer codes in canonical edge order; inverse of decode."""
    return [int(o) for o in arch.ops]


def decode(codes, k: int | None = None) -> Architecture:
    codes = list(codes)
    if k is None:
        # invert len = k(k+1)/2
        k = int((math.isqrt(8 * len(codes) + 1) - 1) // 2)
    if num_edges(k) != len(codes):
        raise ValidationError(
            f"sequence of length {len(codes)} does not match K={k} "
            f"({num_edges(k)} edges expected)")
    try:
        ops = tuple(OperationId(c) for c in codes)
    except ValueError as exc:
        raise ValidationError(f"unknown operation code: {exc}") from exc
    return Architecture(k=k, ops=ops)


def sample_uniform(k: int, rng: np.random.Generator) -> Architecture:
    """Each edge drawn independently and uniformly from the pool."""
    codes = rng.integers(0, N_OPS, size=num_edges(k))
    return Architecture(k=k, ops=tuple(OperationId(int(c)) for c in codes))


def search_space_size(k: int) -> int:
    """Exact number of distinct encodings: 10^(K(K+1)/2)."""
    return N_OPS ** num_edges(k)


def architecture_to_json(arch: Architecture) -> dict:
    return {"K": arch.k, "ops": encode(arch), "pool_version": POOL_VERSION}


def architecture_from_json(obj: dict) -> Architecture:
    version = obj.get("pool_version")
    if version != POOL_VERSION:
        raise PoolVersionError(
            f"architecture was encoded against pool {version!r}, "
            f"this build speaks {POOL_VERSION!r}")
    if "K" not in obj or "ops" not in obj:
        raise ValidationError("architecture JSON needs 'K' and 'ops'")
    return decode(obj["ops"], k=int(obj["K"]))


def save_architecture(arch: Architecture, path) -> None:
    Path(path).write_text(json.dumps(architecture_to_json(arch), indent=2) + "\n")


def load_architecture(path) -> Architecture:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: not valid JSON: {exc}") from exc
    return architecture_from_json(obj)


@dataclass(frozen=True)
class CellGraph:
    """Expansion of an Architecture into explicit node wiring.

    Edges only run from lower to higher node index, so the graph is
    acyclic by construction. `node_inputs[j]` lists (i, op) feeding node j.
    """

    k: int
    node_inputs: tuple[tuple[tuple[int, OperationId], ...], ...]

    @classmethod
    def from_architecture(cls, arch: Architecture) -> "CellGraph":
        ops = arch.edge_ops
        inputs = tuple(
            tuple((i, ops[(i, j)]) for i in range(j))
            for j in range(1, arch.k + 1))
        return cls(k=arch.k, node_inputs=inputs)


# ---------------------------------------------------------------------------
# Model blueprint

GN_MAX_GROUPS = 8


def gn_groups(channels: int) -> int:
    return math.gcd(GN_MAX_GROUPS, channels)


def _pooled(size: int) -> int:
    # 3x3 stride-2 max pool with padding 1
    return (size + 2 - 3) // 2 + 1


@dataclass(frozen=True)
class LayerTrace:
    name: str
    out_shape: tuple[int, int, int]
    params: int


@dataclass(frozen=True)
class ModelSpec:
    """Complete network blueprint with an exact parameter count."""

    arch: Architecture
    stage_channels: tuple[int, int, int]
    n_cells: int
    num_classes: int
    input_shape: tuple[int, int, int]
    param_count: int
    trace: tuple[LayerTrace, ...]


def _conv_params(c_in: int, c_out: int, kernel: int, bias: bool) -> int:
    return c_in * c_out * kernel * kernel + (c_out if bias else 0)


def build_model_spec(arch: Architecture, stage_channels, n_cells: int,
                     num_classes: int, input_shape) -> ModelSpec:
    """Walk the blueprint, checking shapes and counting parameters exactly.

    Cell conv blocks are Conv3x3(bias off) + GN(affine); adapters and the
    stem carry biases; classifier is global average pool + one linear map.
    """
    stage_channels = tuple(int(c) for c in stage_channels)
    input_shape = tuple(int(d) for d in input_shape)
    if len(stage_channels) != 3 or any(c <= 0 for c in stage_channels):
        raise ValidationError(
            f"stage_channels must be three positive ints, got {stage_channels}")
    if n_cells < 1:
        raise ValidationError(f"cells per stage must be >= 1, got {n_cells}")
    if len(input_shape) != 3:
        raise ValidationError(f"input shape must be (C, H, W), got {input_shape}")

    c_in, h, w = input_shape
    trace: list[LayerTrace] = []
    total = 0

    def add(name, shape, params):
        nonlocal total
        if any(d <= 0 for d in shape):
            raise ValidationError(f"layer {name} produces empty shape {shape}")
        total += params
        trace.append(LayerTrace(name=name, out_shape=shape, params=params))

    stem_c = stage_channels[0]
    add("stem_conv3x3", (stem_c, h, w), _conv_params(c_in, stem_c, 3, bias=True))
    cur_c = stem_c

    n_conv_edges = sum(1 for o in arch.ops if o.is_conv)
    for s, width in enumerate(stage_channels):
        for cell_idx in range(n_cells):
            prefix = f"stage{s}.cell{cell_idx}"
            add(f"{prefix}.adapter_conv1x1", (width, h, w),
                _conv_params(cur_c, width, 1, bias=True))
            conv_block = _conv_params(width, width, 3, bias=False) + 2 * width
            add(f"{prefix}.edges[{n_conv_edges} conv]", (width, h, w),
                n_conv_edges * conv_block)
            cur_c = arch.k * width
            add(f"{prefix}.concat", (cur_c, h, w), 0)
        h, w = _pooled(h), _pooled(w)
        add(f"stage{s}.downsample_maxpool3x3s2", (cur_c, h, w), 0)

    add("global_avg_pool", (cur_c, 1, 1), 0)
    if cur_c != arch.k * stage_channels[2]:
        raise ValidationError(
            f"classifier input {cur_c} != K*C3 = {arch.k * stage_channels[2]}")
    add("classifier_linear", (num_classes, 1, 1),
        cur_c * num_classes + num_classes)

    return ModelSpec(arch=arch, stage_channels=stage_channels, n_cells=n_cells,
                     num_classes=num_classes, input_shape=input_shape,
                     param_count=total, trace=tuple(trace))
