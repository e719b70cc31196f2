"""Symbolic model graphs: construction, parameter counting, rank-2
execution, JSON summaries and weight checkpoints.

A ModelGraph is an ordered list of named layers wired by parent references.
Graphs are rank-generic: rank-2 and rank-3 models can both be constructed
and counted, but only rank-2 graphs execute.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import blocks
from .ops import (
    BatchNormParams,
    ConvParams,
    batchnorm,
    batchnorm_param_count,
    conv2d,
    conv_param_count,
    conv_transpose2d,
    maxpool2d,
    relu,
    sigmoid,
)
from .tensor import (
    Node,
    ShapeError,
    Tensor,
    _as_dtype,
    constant,
    parameter,
    read_tnsr,
    write_tnsr,
)

BATCHNORM_EPSILON = 1e-3
BATCHNORM_MOMENTUM = 0.99

ARCHITECTURES = ("unet", "multiresunet")


class UnsupportedRankError(ValueError):
    """Execution requested for a rank the graph does not support."""


@dataclass
class Layer:
    name: str
    kind: str
    parents: tuple[str, ...]
    out_channels: int
    out_spatial: tuple[int, ...]
    config: dict = field(default_factory=dict)
    params: dict[str, Node] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class ParamReport:
    """Per-layer trainable parameter counts; total is their sum."""

    per_layer: dict[str, int]
    total: int


class ModelGraph:
    """Layer graph with named parameter tensors.

    Weights are initialized at construction: convs draw from a uniform
    variance-preserving range, biases start at zero, batchnorm at identity.
    """

    def __init__(self, rank: int, spatial, in_channels: int,
                 precision: str = "train", seed: int = 0, metadata: dict | None = None):
        if rank not in (2, 3):
            raise UnsupportedRankError(f"rank must be 2 or 3, got {rank}")
        spatial = tuple(int(e) for e in spatial)
        if len(spatial) != rank:
            raise ShapeError(f"{len(spatial)} spatial extents for rank {rank}")
        if any(e < 1 for e in spatial):
            raise ShapeError(f"invalid spatial extents {spatial}")
        if in_channels < 1:
            raise ShapeError(f"invalid channel count {in_channels}")
        self.rank = rank
        self.spatial = spatial
        self.in_channels = int(in_channels)
        self.precision = precision
        self.metadata = dict(metadata or {})
        self.layers: list[Layer] = []
        self._index: dict[str, Layer] = {}
        self._dtype = _as_dtype(precision)
        self._rng = np.random.default_rng(seed)

    # -- structure queries ------------------------------------------------

    def layer(self, name: str) -> Layer:
        return self._index[name]

    def channels(self, name: str) -> int:
        return self._index[name].out_channels

    @property
    def output_layer(self) -> Layer:
        return self.layers[-1]

    def trainable_parameters(self):
        """Ordered (qualified name, Node) pairs of every trainable tensor."""
        for layer in self.layers:
            for key, node in layer.params.items():
                yield f"{layer.name}.{key}", node

    def named_buffers(self):
        for layer in self.layers:
            for key, arr in layer.buffers.items():
                yield f"{layer.name}.{key}", arr

    # -- layer construction -----------------------------------------------

    def _register(self, layer: Layer) -> str:
        if layer.name in self._index:
            raise ValueError(f"duplicate layer name {layer.name!r}")
        self.layers.append(layer)
        self._index[layer.name] = layer
        return layer.name

    def add_input(self, name: str = "input") -> str:
        return self._register(Layer(name, "input", (), self.in_channels, self.spatial))

    def add_conv(self, parent: str, filters: int, kernel_size: int,
                 name: str, padding: str = "same") -> str:
        src = self._index[parent]
        cin = src.out_channels
        k = int(kernel_size)
        fan = k**self.rank
        limit = np.sqrt(6.0 / (fan * cin + fan * filters))
        kshape = (k,) * self.rank + (cin, filters)
        kernel = parameter(
            self._rng.uniform(-limit, limit, size=kshape).astype(self._dtype))
        bias = parameter(np.zeros(filters, dtype=self._dtype))
        assert kernel.value.size + bias.value.size == conv_param_count(k, self.rank, cin, filters)
        layer = Layer(name, "conv", (parent,), filters, src.out_spatial,
                      config={"kernel_size": k, "stride": 1, "padding": padding,
                              "in_channels": cin, "filters": filters},
                      params={"kernel": kernel, "bias": bias})
        return self._register(layer)

    def add_conv_transpose(self, parent: str, filters: int, name: str) -> str:
        src = self._index[parent]
        cin = src.out_channels
        fan = 2**self.rank
        limit = np.sqrt(6.0 / (fan * cin + fan * filters))
        kshape = (2,) * self.rank + (cin, filters)
        kernel = parameter(
            self._rng.uniform(-limit, limit, size=kshape).astype(self._dtype))
        bias = parameter(np.zeros(filters, dtype=self._dtype))
        assert kernel.value.size + bias.value.size == conv_param_count(2, self.rank, cin, filters)
        spatial = tuple(2 * e for e in src.out_spatial)
        layer = Layer(name, "conv_transpose", (parent,), filters, spatial,
                      config={"kernel_size": 2, "stride": 2,
                              "in_channels": cin, "filters": filters},
                      params={"kernel": kernel, "bias": bias})
        return self._register(layer)

    def add_batchnorm(self, parent: str, name: str) -> str:
        src = self._index[parent]
        c = src.out_channels
        gamma = parameter(np.ones(c, dtype=self._dtype))
        beta = parameter(np.zeros(c, dtype=self._dtype))
        assert gamma.value.size + beta.value.size == batchnorm_param_count(c)
        layer = Layer(name, "batchnorm", (parent,), c, src.out_spatial,
                      config={"channels": c, "epsilon": BATCHNORM_EPSILON,
                              "momentum": BATCHNORM_MOMENTUM},
                      params={"gamma": gamma, "beta": beta},
                      buffers={"running_mean": np.zeros(c, dtype=self._dtype),
                               "running_var": np.ones(c, dtype=self._dtype)})
        return self._register(layer)

    def add_relu(self, parent: str, name: str) -> str:
        src = self._index[parent]
        return self._register(Layer(name, "relu", (parent,), src.out_channels, src.out_spatial))

    def add_sigmoid(self, parent: str, name: str) -> str:
        src = self._index[parent]
        return self._register(Layer(name, "sigmoid", (parent,), src.out_channels, src.out_spatial))

    def add_maxpool(self, parent: str, name: str) -> str:
        src = self._index[parent]
        if any(e % 2 for e in src.out_spatial):
            raise ShapeError(f"pooling needs even extents, got {src.out_spatial}")
        spatial = tuple(e // 2 for e in src.out_spatial)
        return self._register(Layer(name, "maxpool", (parent,), src.out_channels, spatial))

    def add_concat(self, a: str, b: str, name: str) -> str:
        la, lb = self._index[a], self._index[b]
        if la.out_spatial != lb.out_spatial:
            raise ShapeError(f"concat spatial mismatch {la.out_spatial} vs {lb.out_spatial}")
        channels = la.out_channels + lb.out_channels
        return self._register(Layer(name, "concat", (a, b), channels, la.out_spatial))

    def add_add(self, a: str, b: str, name: str) -> str:
        la, lb = self._index[a], self._index[b]
        if la.out_spatial != lb.out_spatial or la.out_channels != lb.out_channels:
            raise ShapeError(
                f"add needs equal shapes, got {la.out_channels}@{la.out_spatial} "
                f"vs {lb.out_channels}@{lb.out_spatial}")
        return self._register(Layer(name, "add", (a, b), la.out_channels, la.out_spatial))

    # -- execution ----------------------------------------------------------

    def apply(self, x: Node, mode: str = "inference") -> Node:
        """Run the graph on an input node (rank 2 only)."""
        if self.rank != 2:
            raise UnsupportedRankError("only rank-2 graphs execute")
        if x.data.ndim != 4 or x.shape[1:] != (*self.spatial, self.in_channels):
            raise ShapeError(
                f"input shape {x.shape} does not match spec "
                f"[N,{self.spatial[0]},{self.spatial[1]},{self.in_channels}]")
        from .tensor import add as node_add
        from .tensor import concat_channels

        cache: dict[str, Node] = {}
        for layer in self.layers:
            if layer.kind == "input":
                cache[layer.name] = x
            elif layer.kind == "conv":
                p = ConvParams(kernel=layer.params["kernel"], bias=layer.params["bias"],
                               stride=layer.config["stride"], padding=layer.config["padding"])
                cache[layer.name] = conv2d(cache[layer.parents[0]], p)
            elif layer.kind == "conv_transpose":
                p = ConvParams(kernel=layer.params["kernel"], bias=layer.params["bias"],
                               stride=2, padding="valid")
                cache[layer.name] = conv_transpose2d(cache[layer.parents[0]], p)
            elif layer.kind == "batchnorm":
                p = BatchNormParams(gamma=layer.params["gamma"], beta=layer.params["beta"],
                                    running_mean=layer.buffers["running_mean"],
                                    running_var=layer.buffers["running_var"],
                                    epsilon=layer.config["epsilon"],
                                    momentum=layer.config["momentum"])
                cache[layer.name] = batchnorm(cache[layer.parents[0]], p, mode)
            elif layer.kind == "relu":
                cache[layer.name] = relu(cache[layer.parents[0]])
            elif layer.kind == "sigmoid":
                cache[layer.name] = sigmoid(cache[layer.parents[0]])
            elif layer.kind == "maxpool":
                cache[layer.name] = maxpool2d(cache[layer.parents[0]])
            elif layer.kind == "concat":
                cache[layer.name] = concat_channels(cache[layer.parents[0]], cache[layer.parents[1]])
            elif layer.kind == "add":
                cache[layer.name] = node_add(cache[layer.parents[0]], cache[layer.parents[1]])
            else:  # pragma: no cover
                raise ValueError(f"unknown layer kind {layer.kind!r}")
        return cache[self.output_layer.name]


def forward(m: ModelGraph, x, mode: str = "inference") -> Tensor:
    """Execute a rank-2 graph on a [N,H,W,C] tensor and return the output."""
    node = constant(x.data if isinstance(x, Tensor) else x)
    return m.apply(node, mode).value


def count_parameters(m: ModelGraph) -> ParamReport:
    """Trainable parameter counts via the closed-form layer formulas."""
    per_layer: dict[str, int] = {}
    for layer in m.layers:
        if layer.kind in ("conv", "conv_transpose"):
            per_layer[layer.name] = conv_param_count(
                layer.config["kernel_size"], m.rank,
                layer.config["in_channels"], layer.config["filters"])
        elif layer.kind == "batchnorm":
            per_layer[layer.name] = batchnorm_param_count(layer.config["channels"])
        else:
            per_layer[layer.name] = 0
    return ParamReport(per_layer=per_layer, total=sum(per_layer.values()))


def summarize(m: ModelGraph) -> dict:
    """JSON-ready model description with per-layer parameter counts."""
    report = count_parameters(m)
    return {
        "architecture": m.metadata.get("architecture", ""),
        "rank": m.rank,
        "input_shape": [*m.spatial, m.in_channels],
        "metadata": dict(m.metadata),
        "layers": [
            {
                "name": layer.name,
                "type": layer.kind,
                "output_channels": layer.out_channels,
                "params": report.per_layer[layer.name],
            }
            for layer in m.layers
        ],
        "total_params": report.total,
    }


# -- checkpoints ------------------------------------------------------------
#
# Concatenated TNSR containers (parameters first, then buffers, in graph
# order), followed by a JSON index of name -> byte offset and an 8-byte
# little-endian length of that index so a reader can locate it from the end
# of the file.


def _checkpoint_entries(m: ModelGraph):
    for name, node in m.trainable_parameters():
        yield name, node.value.data
    for name, arr in m.named_buffers():
        yield name, arr


def save_checkpoint(m: ModelGraph, path) -> None:
    blob = io.BytesIO()
    offsets: dict[str, int] = {}
    for name, arr in _checkpoint_entries(m):
        offsets[name] = blob.tell()
        write_tnsr(blob, Tensor(arr))
    index = json.dumps(offsets, sort_keys=True).encode()
    with open(path, "wb") as fp:
        fp.write(blob.getvalue())
        fp.write(index)
        fp.write(struct.pack("<Q", len(index)))


def load_checkpoint(m: ModelGraph, path) -> None:
    """Restore parameters and buffers in place; names and shapes must match."""
    with open(path, "rb") as fp:
        raw = fp.read()
    (index_len,) = struct.unpack("<Q", raw[-8:])
    index = json.loads(raw[-8 - index_len:-8].decode())
    body = io.BytesIO(raw)
    for name, arr in _checkpoint_entries(m):
        if name not in index:
            raise KeyError(f"checkpoint missing tensor {name!r}")
        body.seek(index[name])
        t = read_tnsr(body)
        if t.shape != arr.shape:
            raise ShapeError(f"checkpoint tensor {name!r} has shape {t.shape}, expected {arr.shape}")
        arr[:] = t.data.astype(arr.dtype)


# -- architecture builders ---------------------------------------------------


def _check_extents(spatial) -> tuple[int, ...]:
    spatial = tuple(int(e) for e in spatial)
    if any(e % 16 for e in spatial):
        raise ShapeError(f"input extents must be divisible by 16, got {spatial}")
    return spatial


def build_multiresunet(rank: int = 2, input_extents=(256, 256), in_channels: int = 3,
                       u_base: int = 32, alpha: float = 1.67, variant: str = "multires",
                       precision: str = "train", seed: int = 0) -> ModelGraph:
    """Encoder-decoder with multi-resolution blocks and residual skip paths.

    The per-level width budget doubles with depth: encoder blocks 1..4 use
    U = u_base * 2^(level-1), the center block uses 16*u_base, and decoder
    blocks mirror the encoder. Each decoder stage upsamples with a 2x2
    stride-2 transposed conv sized to the target level's U, concatenates
    the level's skip-path output, and applies the block.
    """
    spatial = _check_extents(input_extents)
    g = ModelGraph(rank, spatial, in_channels, precision=precision, seed=seed,
                   metadata={"architecture": "multiresunet", "u_base": int(u_base),
                             "alpha": float(alpha), "variant": variant})
    x = g.add_input()
    skips: list[str] = []
    cur = x
    for level in range(1, 5):
        u = u_base * 2 ** (level - 1)
        w = blocks.compute_block_widths(u, alpha)
        cur = blocks.add_multires_block(g, cur, w, variant, name=f"mres{level}")
        skips.append(blocks.add_res_path(g, cur, level, name=f"respath{level}",
                                         base_filters=u_base))
        cur = g.add_maxpool(cur, name=f"pool{level}")
    cur = blocks.add_multires_block(
        g, cur, blocks.compute_block_widths(16 * u_base, alpha), variant, name="mres5")
    for level in (4, 3, 2, 1):
        idx = 10 - level
        u = u_base * 2 ** (level - 1)
        up = g.add_conv_transpose(cur, u, name=f"up{idx}")
        cat = g.add_concat(up, skips[level - 1], name=f"cat{idx}")
        cur = blocks.add_multires_block(
            g, cat, blocks.compute_block_widths(u, alpha), variant, name=f"mres{idx}")
    head = g.add_conv(cur, 1, 1, name="head")
    g.add_sigmoid(head, name="head_sigmoid")
    return g


def build_unet_baseline(rank: int = 2, input_extents=(256, 256), in_channels: int = 3,
                        u_base: int = 32, precision: str = "train", seed: int = 0) -> ModelGraph:
    """Classic five-level encoder-decoder baseline.

    Rank 2: two plain 3x3 conv+ReLU per level, filters u_base*2^i, 2x2 max
    pooling, transposed convs halving the filters, concatenation skips and
    a 1x1 sigmoid head. Rank 3 is one level shallower, doubles the filter
    count before each pooling, and batch-normalizes every conv.
    """
    spatial = _check_extents(input_extents)
    g = ModelGraph(rank, spatial, in_channels, precision=precision, seed=seed,
                   metadata={"architecture": "unet", "u_base": int(u_base)})
    x = g.add_input()
    if rank == 2:
        filters = [u_base * 2**i for i in range(5)]

        def double_conv(parent, f, prefix):
            c = g.add_conv(parent, f, 3, name=f"{prefix}.conv1")
            c = g.add_relu(c, name=f"{prefix}.relu1")
            c = g.add_conv(c, f, 3, name=f"{prefix}.conv2")
            return g.add_relu(c, name=f"{prefix}.relu2")

        skips = []
        cur = x
        for level in range(1, 5):
            cur = double_conv(cur, filters[level - 1], f"enc{level}")
            skips.append(cur)
            cur = g.add_maxpool(cur, name=f"pool{level}")
        cur = double_conv(cur, filters[4], "center")
        for level in (4, 3, 2, 1):
            cur = g.add_conv_transpose(cur, filters[level - 1], name=f"up{level}")
            cur = g.add_concat(cur, skips[level - 1], name=f"cat{level}")
            cur = double_conv(cur, filters[level - 1], f"dec{level}")
    else:
        def conv_bn_relu(parent, f, prefix):
            c = g.add_conv(parent, f, 3, name=f"{prefix}.conv")
            c = g.add_batchnorm(c, name=f"{prefix}.bn")
            return g.add_relu(c, name=f"{prefix}.relu")

        skips = []
        cur = x
        for level in range(1, 4):
            cur = conv_bn_relu(cur, u_base * 2 ** (level - 1), f"enc{level}.a")
            cur = conv_bn_relu(cur, u_base * 2**level, f"enc{level}.b")
            skips.append(cur)
            cur = g.add_maxpool(cur, name=f"pool{level}")
        cur = conv_bn_relu(cur, u_base * 8, "center.a")
        cur = conv_bn_relu(cur, u_base * 16, "center.b")
        for level in (3, 2, 1):
            cur = g.add_conv_transpose(cur, g.channels(cur), name=f"up{level}")
            cur = g.add_concat(cur, skips[level - 1], name=f"cat{level}")
            cur = conv_bn_relu(cur, u_base * 2**level, f"dec{level}.a")
            cur = conv_bn_relu(cur, u_base * 2**level, f"dec{level}.b")
    head = g.add_conv(cur, 1, 1, name="head")
    g.add_sigmoid(head, name="head_sigmoid")
    return g


def build_model(architecture: str, rank: int = 2, input_extents=(256, 256),
                in_channels: int = 3, u_base: int = 32, alpha: float = 1.67,
                variant: str = "multires", precision: str = "train", seed: int = 0) -> ModelGraph:
    if architecture == "multiresunet":
        return build_multiresunet(rank, input_extents, in_channels, u_base, alpha,
                                  variant, precision, seed)
    if architecture == "unet":
        return build_unet_baseline(rank, input_extents, in_channels, u_base,
                                   precision, seed)
    raise ValueError(f"unknown architecture {architecture!r}")
