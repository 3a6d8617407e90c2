"""Torch realization of model blueprints, plus the fixed CNN for ablations."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ValidationError
from .search_space import (
    Architecture,
    ModelSpec,
    OperationId,
    enumerate_edges,
    gn_groups,
)

ACTIVATIONS = {
    OperationId.CONV_RELU: nn.ReLU,
    OperationId.CONV_TANH: nn.Tanh,
    OperationId.CONV_SIGMOID: nn.Sigmoid,
    OperationId.CONV_HARDTANH: nn.Hardtanh,
    OperationId.CONV_SELU: nn.SELU,
    OperationId.CONV_LINEAR: nn.Identity,
}


def conv_block(width: int, op: OperationId) -> nn.Module:
    """Conv3x3 -> GroupNorm -> activation. Bias off; GN supplies the affine."""
    return nn.Sequential(
        nn.Conv2d(width, width, 3, padding=1, bias=False),
        nn.GroupNorm(gn_groups(width), width),
        ACTIVATIONS[op](),
    )


def apply_param_free(op: OperationId, x: torch.Tensor) -> torch.Tensor:
    if op == OperationId.SKIP_IDENTITY:
        return x
    if op == OperationId.MAX_POOL_3X3:
        return F.max_pool2d(x, 3, stride=1, padding=1)
    if op == OperationId.AVG_POOL_3X3:
        return F.avg_pool2d(x, 3, stride=1, padding=1, count_include_pad=False)
    if op == OperationId.ZERO:
        return torch.zeros_like(x)
    raise ValidationError(f"{op} is not parameter-free")


class Cell(nn.Module):
    """Fully-connected cell: V0 = adapter(input), Vj = sum_i<j op(i,j)(Vi).

    Output concatenates the K internal nodes (never V0), so a node whose
    inputs are all ZERO still contributes a zero slab of the right width.
    `edge_convs` may be injected to share weights across cells; `omit_edges`
    drops edges from the summation entirely (used to verify that ZERO and
    edge-deletion are equivalent).
    """

    def __init__(self, arch: Architecture, in_channels: int, width: int,
                 edge_convs: dict | None = None, adapter: nn.Module | None = None,
                 omit_edges: frozenset = frozenset()):
        super().__init__()
        self.arch = arch
        self.width = width
        self.omit_edges = frozenset(omit_edges)
        self.adapter = adapter if adapter is not None else nn.Conv2d(
            in_channels, width, 1, bias=True)
        convs = {}
        for (i, j), op in arch.edge_ops.items():
            if (i, j) in self.omit_edges or not op.is_conv:
                continue
            if edge_convs is not None:
                convs[f"{i}_{j}"] = edge_convs[(i, j)]
            else:
                convs[f"{i}_{j}"] = conv_block(width, op)
        self.edge_convs = nn.ModuleDict(convs)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        nodes = [self.adapter(x)]
        edge_ops = self.arch.edge_ops
        for j in range(1, self.arch.k + 1):
            acc = None
            for i in range(j):
                if (i, j) in self.omit_edges:
                    continue
                op = edge_ops[(i, j)]
                if op == OperationId.ZERO:
                    continue  # contributes exact zeros
                out = (self.edge_convs[f"{i}_{j}"](nodes[i]) if op.is_conv
                       else apply_param_free(op, nodes[i]))
                acc = out if acc is None else acc + out
            if acc is None:
                acc = torch.zeros_like(nodes[0])
            nodes.append(acc)
        return torch.cat(nodes[1:], dim=1)


class DpnasNetwork(nn.Module):
    """Stem -> 3 x (N cells + downsample) -> global average pool -> linear.

    All shared-module arguments are optional; when given, the referenced
    modules (and hence their parameters) are shared with the caller's store.
    """

    def __init__(self, spec: ModelSpec, *, stem: nn.Module | None = None,
                 adapters: dict | None = None, edge_convs: dict | None = None,
                 classifier: nn.Module | None = None,
                 omit_edges: frozenset = frozenset()):
        super().__init__()
        self.spec = spec
        c_in = spec.input_shape[0]
        stem_c = spec.stage_channels[0]
        self.stem = stem if stem is not None else nn.Conv2d(
            c_in, stem_c, 3, padding=1, bias=True)
        cells = []
        cur_c = stem_c
        for s, width in enumerate(spec.stage_channels):
            for n in range(spec.n_cells):
                cells.append(Cell(
                    spec.arch, cur_c, width,
                    adapter=None if adapters is None else adapters[(s, n)],
                    edge_convs=None if edge_convs is None else edge_convs[s],
                    omit_edges=omit_edges))
                cur_c = spec.arch.k * width
        self.cells = nn.ModuleList(cells)
        self.classifier = classifier if classifier is not None else nn.Linear(
            cur_c, spec.num_classes)

        if not omit_edges:
            got = sum(p.numel() for p in self.parameters())
            if got != spec.param_count:
                raise ValidationError(
                    f"instantiated parameter count {got} != blueprint "
                    f"count {spec.param_count}")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.stem(x)
        n = self.spec.n_cells
        for idx, cell in enumerate(self.cells):
            x = cell(x)
            if (idx + 1) % n == 0:  # end of a stage
                x = F.max_pool2d(x, 3, stride=2, padding=1)
        x = x.mean(dim=(2, 3))
        return self.classifier(x)


def build_network(spec: ModelSpec, seed: int) -> DpnasNetwork:
    """Deterministic fresh initialization, isolated from the global RNG."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return DpnasNetwork(spec)


# ---------------------------------------------------------------------------
# Fixed small CNN used by the activation/pooling ablations. Activation and
# pooling are swappable; everything else stays put so comparisons are clean.

ABLATION_ACTIVATIONS = {
    "relu": nn.ReLU,
    "relu6": nn.ReLU6,
    "elu": nn.ELU,
    "selu": nn.SELU,
    "tanh": nn.Tanh,
    "hardtanh": nn.Hardtanh,
    "leaky_relu": nn.LeakyReLU,
    "sigmoid": nn.Sigmoid,
}

NEGATIVE_PRESERVING = ("selu", "tanh", "hardtanh", "elu", "leaky_relu")
NON_NEGATIVE = ("relu", "relu6")


class SmallCNN(nn.Module):
    """Two strided convs + two linear layers, no normalization."""

    def __init__(self, input_shape, num_classes: int = 10,
                 activation: str = "tanh", pooling: str = "max"):
        super().__init__()
        if activation not in ABLATION_ACTIVATIONS:
            raise ValidationError(f"unknown activation {activation!r}")
        if pooling not in ("max", "avg"):
            raise ValidationError(f"unknown pooling {pooling!r}")
        act = ABLATION_ACTIVATIONS[activation]
        self.activation = activation
        self.pooling = pooling
        c_in, h, w = input_shape
        self.conv1 = nn.Conv2d(c_in, 16, 8, stride=2, padding=3)
        self.conv2 = nn.Conv2d(16, 32, 4, stride=2)
        self.act1 = act()
        self.act2 = act()
        self.act3 = act()
        h1 = self._after(h)
        w1 = self._after(w)
        self.fc1 = nn.Linear(32 * h1 * w1, 32)
        self.fc2 = nn.Linear(32, num_classes)

    @staticmethod
    def _after(size: int) -> int:
        s = (size + 2 * 3 - 8) // 2 + 1   # conv1
        s = (s - 2) // 1 + 1              # pool 2x2 stride 1
        s = (s - 4) // 2 + 1              # conv2
        s = (s - 2) // 1 + 1              # pool 2x2 stride 1
        return s

    def _pool(self, x):
        if self.pooling == "max":
            return F.max_pool2d(x, 2, stride=1)
        return F.avg_pool2d(x, 2, stride=1)

    def forward(self, x):
        x = self._pool(self.act1(self.conv1(x)))
        x = self._pool(self.act2(self.conv2(x)))
        x = torch.flatten(x, 1)
        x = self.act3(self.fc1(x))
        return self.fc2(x)


def build_small_cnn(input_shape, seed: int, activation: str = "tanh",
                    pooling: str = "max", num_classes: int = 10) -> SmallCNN:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return SmallCNN(input_shape, num_classes=num_classes,
                        activation=activation, pooling=pooling)
