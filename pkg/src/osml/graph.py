"""Meta-hierarchical graph of knowledge blocks.

Each layer holds one or more committed blocks (conv or dense units sharing a
per-layer spec) plus, during a search episode, one uncommitted novel
candidate. Pathways select one block per layer and finish in a linear head
that is re-initialized per task.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tensor

CHECKPOINT_MAGIC = b"OSMLGRPH"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class BlockSpec:
    """Shape and wiring of every block in one layer."""

    kind: str  # "conv" or "dense"
    width: int
    kernel_size: int = 3
    stride: int = 1
    padding: int = 1
    batch_norm: bool = True
    activation: str = "relu"  # "relu" or "identity"

    def __post_init__(self):
        if self.kind not in ("conv", "dense"):
            raise ValueError(f"unknown block kind {self.kind!r}")
        if self.activation not in ("relu", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.width < 1:
            raise ValueError("block width must be positive")


@dataclass
class KnowledgeBlock:
    block_id: int
    layer: int
    params: ParamSet
    created_step: int


@dataclass(frozen=True)
class Pathway:
    """One committed block id per layer, low to high."""

    block_ids: tuple

    def __len__(self):
        return len(self.block_ids)


@dataclass
class MetaGraph:
    specs: list
    input_shape: tuple
    n_classes: int
    seed: int
    layers: list = field(default_factory=list)  # list[list[KnowledgeBlock]]
    candidates: list | None = None  # one uncommitted block per layer, or None
    head: ParamSet = field(default_factory=dict)
    next_block_id: int = 0

    @property
    def n_layers(self) -> int:
        return len(self.specs)

    def block_counts(self) -> list:
        return [len(layer) for layer in self.layers]

    def find_block(self, block_id: int) -> KnowledgeBlock:
        for layer in self.layers:
            for b in layer:
                if b.block_id == block_id:
                    return b
        raise KeyError(f"no committed block with id {block_id}")


# Importance coefficients: one 1-D array per layer, length = committed blocks
# plus one novel slot while candidates are active.
ImportanceVector = list


def trace_shapes(specs, input_shape) -> list:
    """Per-layer output shapes (without the batch axis)."""
    shapes = []
    cur = tuple(input_shape)
    for spec in specs:
        if spec.kind == "conv":
            if len(cur) != 3:
                raise ValueError(f"conv block needs (C, H, W) input, got {cur}")
            c, h, w = cur
            oh = ad._conv_out_size(h, spec.kernel_size, spec.stride, spec.padding)
            ow = ad._conv_out_size(w, spec.kernel_size, spec.stride, spec.padding)
            if oh < 1 or ow < 1:
                raise ValueError("conv block shrinks input below 1x1")
            cur = (spec.width, oh, ow)
        else:
            d = int(np.prod(cur))
            cur = (spec.width,)
        shapes.append(cur)
    return shapes


def feature_dim(specs, input_shape) -> int:
    shapes = trace_shapes(specs, input_shape)
    return int(np.prod(shapes[-1])) if shapes else int(np.prod(input_shape))


def _init_block_params(spec: BlockSpec, in_shape, rng) -> ParamSet:
    # fan-in scaled normal draws keep early activations near unit scale
    params = {}
    if spec.kind == "conv":
        c = in_shape[0]
        fan_in = c * spec.kernel_size * spec.kernel_size
        shape = (spec.width, c, spec.kernel_size, spec.kernel_size)
    else:
        fan_in = int(np.prod(in_shape))
        shape = (fan_in, spec.width)
    params["weight"] = (rng.standard_normal(shape) / np.sqrt(fan_in)).astype(np.float32)
    if spec.batch_norm:
        params["gamma"] = np.ones(spec.width, dtype=np.float32)
        params["beta"] = np.zeros(spec.width, dtype=np.float32)
    return params


def init_head(graph: MetaGraph) -> ParamSet:
    # Zero weights, not random: a fresh head must carry no preference between
    # classes or features, so task-level comparisons (importance gradients,
    # block replay) see block quality rather than head-draw luck.  One inner
    # step turns the zero head into a support-defined class readout.
    d = feature_dim(graph.specs, graph.input_shape)
    return {
        "weight": np.zeros((d, graph.n_classes), dtype=np.float32),
        "bias": np.zeros(graph.n_classes, dtype=np.float32),
    }


def init_graph(specs, input_shape, n_classes, seed: int) -> MetaGraph:
    """Fresh graph with exactly one committed block per layer."""
    graph = MetaGraph(list(specs), tuple(input_shape), int(n_classes), int(seed))
    rng = np.random.default_rng((seed, 0))
    shapes = [tuple(input_shape)] + trace_shapes(specs, input_shape)
    for l, spec in enumerate(specs):
        in_shape = shapes[l]
        if spec.kind == "dense" and len(in_shape) > 1:
            in_shape = (int(np.prod(in_shape)),)
        block = KnowledgeBlock(graph.next_block_id, l, _init_block_params(spec, in_shape, rng), 0)
        graph.next_block_id += 1
        graph.layers.append([block])
    graph.head = init_head(graph)
    return graph


def _layer_in_shapes(graph: MetaGraph) -> list:
    shapes = [graph.input_shape] + trace_shapes(graph.specs, graph.input_shape)
    out = []
    for l, spec in enumerate(graph.specs):
        s = shapes[l]
        if spec.kind == "dense" and len(s) > 1:
            s = (int(np.prod(s)),)
        out.append(s)
    return out


def spawn_novel_candidates(graph: MetaGraph, rng) -> None:
    """Attach one fresh uncommitted block per layer.

    Candidate ids are drawn from the shared counter at spawn time; ids of
    candidates that are never committed are retired, not reused.
    """
    if graph.candidates is not None:
        raise RuntimeError("candidates already active; commit or discard first")
    in_shapes = _layer_in_shapes(graph)
    cands = []
    for l, spec in enumerate(graph.specs):
        block = KnowledgeBlock(graph.next_block_id, l, _init_block_params(spec, in_shapes[l], rng), -1)
        graph.next_block_id += 1
        cands.append(block)
    graph.candidates = cands


def param_path(layer: int, block_id: int, name: str) -> str:
    return f"layer{layer}/block{block_id}/{name}"


def block_param_paths(block: KnowledgeBlock) -> dict:
    return {name: param_path(block.layer, block.block_id, name) for name in block.params}


def collect_params(graph: MetaGraph, blocks, include_head: bool = True) -> ParamSet:
    """Name -> array view over the given blocks (plus the head).

    Arrays are referenced, not copied; sgd_step and friends always allocate
    new arrays, so meta-initials are never mutated through this map.
    """
    out = {}
    for b in blocks:
        for name, arr in b.params.items():
            out[param_path(b.layer, b.block_id, name)] = arr
    if include_head:
        for name, arr in graph.head.items():
            out[f"head/{name}"] = arr
    return out


def apply_params(graph: MetaGraph, params: ParamSet) -> None:
    """Write named arrays back into their blocks and the head.

    Replaces array references; nothing is mutated in place, so ParamSets
    captured earlier keep their values.
    """
    blocks = {(b.layer, b.block_id): b for b in all_active_blocks(graph)}
    for path, arr in params.items():
        if path.startswith("head/"):
            name = path[len("head/") :]
            if name not in graph.head:
                raise KeyError(f"unknown head parameter {path!r}")
            graph.head[name] = arr
            continue
        layer_part, block_part, name = path.split("/")
        key = (int(layer_part[len("layer") :]), int(block_part[len("block") :]))
        if key not in blocks or name not in blocks[key].params:
            raise KeyError(f"unknown parameter path {path!r}")
        blocks[key].params[name] = arr


def layer_blocks(graph: MetaGraph, layer: int) -> list:
    """Committed blocks of a layer, plus the active candidate last."""
    blocks = list(graph.layers[layer])
    if graph.candidates is not None:
        blocks.append(graph.candidates[layer])
    return blocks


def all_active_blocks(graph: MetaGraph) -> list:
    out = []
    for l in range(graph.n_layers):
        out.extend(layer_blocks(graph, l))
    return out


def pathway_blocks(graph: MetaGraph, pathway: Pathway) -> list:
    if len(pathway) != graph.n_layers:
        raise ValueError("pathway length does not match layer count")
    return [graph.find_block(bid) for bid in pathway.block_ids]


def _block_forward(spec: BlockSpec, tensors: dict, block: KnowledgeBlock, x: Tensor) -> Tensor:
    w = tensors[param_path(block.layer, block.block_id, "weight")]
    if spec.kind == "conv":
        h = ad.conv2d(x, w, stride=spec.stride, padding=spec.padding)
    else:
        if x.data.ndim > 2:
            x = ad.reshape(x, (x.data.shape[0], -1))
        h = ad.matmul(x, w)
    if spec.batch_norm:
        gamma = tensors[param_path(block.layer, block.block_id, "gamma")]
        beta = tensors[param_path(block.layer, block.block_id, "beta")]
        h = ad.batch_norm(h, gamma, beta)
    if spec.activation == "relu":
        h = ad.relu(h)
    return h


def _head_forward(tensors: dict, x: Tensor) -> Tensor:
    if x.data.ndim > 2:
        x = ad.reshape(x, (x.data.shape[0], -1))
    return ad.bias_add(ad.matmul(x, tensors["head/weight"]), tensors["head/bias"])


def mixed_forward(graph: MetaGraph, importance, tensors: dict, x: Tensor) -> Tensor:
    """Soft forward pass: each layer outputs the softmax-importance-weighted
    sum of all its block outputs. Gradients reach both parameters and the
    importance logits."""
    h = x
    for l in range(graph.n_layers):
        blocks = layer_blocks(graph, l)
        imp = importance[l]
        if imp.data.shape != (len(blocks),):
            raise ValueError(
                f"layer {l}: importance length {imp.data.shape} != block count {len(blocks)}"
            )
        weights = ad.softmax(imp)
        mixed = None
        for i, b in enumerate(blocks):
            out = _block_forward(graph.specs[l], tensors, b, h)
            term = ad.mul(ad.pick(weights, i), out)
            mixed = term if mixed is None else ad.add(mixed, term)
        h = mixed
    return _head_forward(tensors, h)


def pathway_forward(graph: MetaGraph, pathway: Pathway, tensors: dict, x: Tensor) -> Tensor:
    """Hard forward pass through one selected block per layer."""
    h = x
    for l, b in enumerate(pathway_blocks(graph, pathway)):
        h = _block_forward(graph.specs[l], tensors, b, h)
    return _head_forward(tensors, h)


def init_importance(graph: MetaGraph) -> ImportanceVector:
    """Zero logits over each layer's active blocks (uniform mixture)."""
    return [
        np.zeros(len(layer_blocks(graph, l)), dtype=np.float32) for l in range(graph.n_layers)
    ]


def select_pathway(graph: MetaGraph, importance) -> list:
    """Per-layer argmax of importance; ties break toward the lowest index,
    so committed blocks beat the novel candidate on exact ties."""
    selected = []
    for l in range(graph.n_layers):
        n = len(layer_blocks(graph, l))
        imp = np.asarray(importance[l])
        if imp.shape != (n,):
            raise ValueError(f"layer {l}: importance length {imp.shape} != block count {n}")
        selected.append(int(np.argmax(imp)))
    return selected


def commit(graph: MetaGraph, selected: list, task_index: int) -> Pathway:
    """Promote selected novel candidates, discard the rest, return the pathway."""
    ids = []
    for l, idx in enumerate(selected):
        committed = graph.layers[l]
        if idx < len(committed):
            ids.append(committed[idx].block_id)
        elif graph.candidates is not None and idx == len(committed):
            block = graph.candidates[l]
            block.created_step = task_index
            committed.append(block)
            ids.append(block.block_id)
        else:
            raise ValueError(f"layer {l}: selected index {idx} out of range")
    graph.candidates = None
    return Pathway(tuple(ids))


def discard_candidates(graph: MetaGraph) -> None:
    graph.candidates = None


def selection_ratios(history) -> dict:
    """history: iterable of (tag, Pathway). Returns block_id -> tag -> the
    fraction of that block's selections coming from the tag."""
    counts: dict = {}
    for tag, pathway in history:
        for bid in pathway.block_ids:
            counts.setdefault(bid, {}).setdefault(tag, 0)
            counts[bid][tag] += 1
    ratios = {}
    for bid, per_tag in counts.items():
        total = sum(per_tag.values())
        ratios[bid] = {tag: c / total for tag, c in per_tag.items()}
    return ratios


# checkpoint I/O ------------------------------------------------------------

_KINDS = {"conv": 0, "dense": 1}
_KINDS_REV = {v: k for k, v in _KINDS.items()}
_ACTS = {"relu": 0, "identity": 1}
_ACTS_REV = {v: k for k, v in _ACTS.items()}


def _pack_params(params: ParamSet) -> bytes:
    out = [struct.pack("<I", len(params))]
    for name, arr in params.items():
        nb = name.encode("utf-8")
        a = np.ascontiguousarray(arr, dtype="<f4")
        out.append(struct.pack("<H", len(nb)))
        out.append(nb)
        out.append(struct.pack("<B", a.ndim))
        out.append(struct.pack(f"<{a.ndim}I", *a.shape))
        out.append(a.tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ValueError("checkpoint truncated")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        vals = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return vals[0] if len(vals) == 1 else vals


def _read_params(r: _Reader) -> ParamSet:
    params = {}
    for _ in range(r.unpack("<I")):
        name = r.take(r.unpack("<H")).decode("utf-8")
        ndim = r.unpack("<B")
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim)) if ndim else ()
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape)
        params[name] = arr.astype(np.float32).copy()
    return params


def save_graph(graph: MetaGraph, path) -> None:
    """Binary checkpoint: committed blocks and head; candidates are transient."""
    out = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    out.append(
        struct.pack(
            "<IIqQ", graph.n_layers, graph.n_classes, graph.seed, graph.next_block_id
        )
    )
    out.append(struct.pack("<B", len(graph.input_shape)))
    out.append(struct.pack(f"<{len(graph.input_shape)}I", *graph.input_shape))
    for spec in graph.specs:
        out.append(
            struct.pack(
                "<BIIIIBB",
                _KINDS[spec.kind],
                spec.width,
                spec.kernel_size,
                spec.stride,
                spec.padding,
                int(spec.batch_norm),
                _ACTS[spec.activation],
            )
        )
    blocks = [b for layer in graph.layers for b in layer]
    out.append(struct.pack("<I", len(blocks)))
    for b in blocks:
        out.append(struct.pack("<IQq", b.layer, b.block_id, b.created_step))
        out.append(_pack_params(b.params))
    out.append(_pack_params(graph.head))
    with open(path, "wb") as f:
        f.write(b"".join(out))


def load_graph(path) -> MetaGraph:
    with open(path, "rb") as f:
        r = _Reader(f.read())
    if r.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise ValueError("not a graph checkpoint (bad magic)")
    version = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    n_layers, n_classes, seed, next_id = r.unpack("<IIqQ")
    rank = r.unpack("<B")
    input_shape = tuple(struct.unpack(f"<{rank}I", r.take(4 * rank)))
    specs = []
    for _ in range(n_layers):
        kind, width, k, s, p, bn, act = r.unpack("<BIIIIBB")
        specs.append(
            BlockSpec(_KINDS_REV[kind], width, k, s, p, bool(bn), _ACTS_REV[act])
        )
    graph = MetaGraph(specs, input_shape, n_classes, seed)
    graph.layers = [[] for _ in range(n_layers)]
    for _ in range(r.unpack("<I")):
        layer, block_id, created = r.unpack("<IQq")
        if layer >= n_layers:
            raise ValueError("checkpoint block references missing layer")
        graph.layers[layer].append(KnowledgeBlock(block_id, layer, _read_params(r), created))
    graph.head = _read_params(r)
    graph.next_block_id = next_id
    for layer in graph.layers:
        if not layer:
            raise ValueError("checkpoint has an empty layer")
    return graph
