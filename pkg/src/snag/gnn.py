"""Node aggregators, layer aggregators and the full GNN forward pass.

A layer computes ``h_v = elu(W . agg({h_u : u in Ñ(v)}) + b)``. The graph
passed to :func:`node_aggregate` must already contain self-loops.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from . import tensor as T
from .graph import Graph
from .tensor import Tensor

if TYPE_CHECKING:
    from .space import Genotype


class NodeAggregatorKind(str, enum.Enum):
    GCN = "gcn"
    SAGE_SUM = "sage-sum"
    SAGE_MEAN = "sage-mean"
    SAGE_MAX = "sage-max"
    SAGE_LSTM = "sage-lstm"
    MLP = "mlp"
    GAT = "gat"
    GAT_SYM = "gat-sym"
    GAT_COS = "gat-cos"
    GAT_LINEAR = "gat-linear"
    GAT_GEN_LINEAR = "gat-gen-linear"


class LayerAggregatorKind(str, enum.Enum):
    CONCAT = "concat"
    MAX = "max"
    LSTM = "lstm"


GAT_KINDS = frozenset({NodeAggregatorKind.GAT, NodeAggregatorKind.GAT_SYM, NodeAggregatorKind.GAT_COS,
                       NodeAggregatorKind.GAT_LINEAR, NodeAggregatorKind.GAT_GEN_LINEAR})

ATTENTION_SLOPE = 0.2


# ---------------------------------------------------------------- parameter schemas

def _lstm_schema(d_in: int, d_hidden: int) -> dict[str, tuple[int, ...]]:
    return {"lstm_wx": (d_in, 4 * d_hidden), "lstm_wh": (d_hidden, 4 * d_hidden), "lstm_b": (4 * d_hidden,)}


def node_param_schema(kind: NodeAggregatorKind, d_in: int, d_out: int) -> dict[str, tuple[int, ...]]:
    kind = NodeAggregatorKind(kind)
    if kind is NodeAggregatorKind.SAGE_LSTM:
        return {**_lstm_schema(d_in, d_out), "weight": (d_out, d_out), "bias": (d_out,)}
    if kind is NodeAggregatorKind.MLP:
        return {"hidden": (d_in, d_out), "hidden_bias": (d_out,), "weight": (d_out, d_out), "bias": (d_out,)}
    schema = {"weight": (d_in, d_out), "bias": (d_out,)}
    if kind is NodeAggregatorKind.GAT_GEN_LINEAR:
        schema.update(att_wl=(d_out, d_out), att_wr=(d_out, d_out), att_g=(d_out, 1))
    elif kind in GAT_KINDS:
        schema.update(att_l=(d_out, 1), att_r=(d_out, 1))
    return schema


def layer_agg_param_schema(kind: LayerAggregatorKind | None, dim: int) -> dict[str, tuple[int, ...]]:
    if kind is LayerAggregatorKind.LSTM:
        return _lstm_schema(dim, dim)
    return {}


def init_params(schema: dict[str, tuple[int, ...]], rng: np.random.Generator) -> dict[str, Tensor]:
    """Glorot-uniform matrices, zero biases; LSTM forget-gate bias starts at 1."""
    out = {}
    for name, shape in schema.items():
        if len(shape) == 1:
            data = np.zeros(shape)
            if name == "lstm_b":
                h = shape[0] // 4
                data[h:2 * h] = 1.0
        else:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            data = rng.uniform(-limit, limit, size=shape)
        out[name] = Tensor(data, requires_grad=True)
    return out


def _check_params(kind, params: dict[str, Tensor], schema: dict[str, tuple[int, ...]]) -> None:
    if set(params) != set(schema):
        raise ValueError(f"{kind}: expected parameters {sorted(schema)}, got {sorted(params)}")
    for name, shape in schema.items():
        if params[name].shape != shape:
            raise ValueError(f"{kind}: parameter {name} has shape {params[name].shape}, expected {shape}")


# ---------------------------------------------------------------- building blocks

def lstm_cell(x_proj: Tensor, h: Tensor, c: Tensor, wh: Tensor, b: Tensor,
              mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """One LSTM step given the input already multiplied by the input weights.

    Gate order in the 4H columns: input, forget, cell, output. Rows with a false
    ``mask`` keep their state.
    """
    hidden = h.shape[1]
    hc = T.lstm_step(x_proj + h @ wh + b, h, c, mask)
    return hc[:, :hidden], hc[:, hidden:]


def neighbor_sequences(g: Graph) -> tuple[np.ndarray, np.ndarray]:
    """Per-step neighbour index and validity mask, shape (max_degree, N).

    Neighbours of each node are visited in ascending node-id order.
    """
    deg = g.degrees
    steps = int(deg.max()) if g.num_nodes else 0
    t = np.arange(steps)[:, None]
    valid = t < deg[None, :]
    pos = np.where(valid, g.offsets[:-1][None, :] + t, 0)
    idx = np.where(valid, g.targets[np.minimum(pos, max(g.num_entries - 1, 0))], 0)
    return idx, valid


def _lstm_aggregate(g: Graph, h: Tensor, p: dict[str, Tensor]) -> Tensor:
    idx, valid = neighbor_sequences(g)
    hidden = p["lstm_wh"].shape[0]
    proj = h @ p["lstm_wx"]
    hs = T.tensor(np.zeros((g.num_nodes, hidden)))
    cs = T.tensor(np.zeros((g.num_nodes, hidden)))
    for step in range(idx.shape[0]):
        mask = None if valid[step].all() else valid[step]
        hs, cs = lstm_cell(T.gather_rows(proj, idx[step]), hs, cs, p["lstm_wh"], p["lstm_b"], mask)
    return hs


def attention_scores(kind: NodeAggregatorKind, g: Graph, z: Tensor, p: dict[str, Tensor]) -> Tensor:
    """Raw score per CSR entry (v, u), shape (E, 1), before LeakyReLU."""
    dst, src = g.sources, g.targets
    if kind is NodeAggregatorKind.GAT:
        return T.gather_rows(z @ p["att_l"], dst) + T.gather_rows(z @ p["att_r"], src)
    if kind is NodeAggregatorKind.GAT_SYM:
        both = p["att_l"] + p["att_r"]
        s = z @ both
        return T.gather_rows(s, dst) + T.gather_rows(s, src)
    if kind is NodeAggregatorKind.GAT_COS:
        left = z * T.reshape(p["att_l"], (1, -1))
        right = z * T.reshape(p["att_r"], (1, -1))
        return T.sum(T.gather_rows(left, dst) * T.gather_rows(right, src), axis=1, keepdims=True)
    if kind is NodeAggregatorKind.GAT_LINEAR:
        return T.gather_rows(T.tanh(z @ p["att_l"]), dst) + T.gather_rows(T.tanh(z @ p["att_r"]), src)
    if kind is NodeAggregatorKind.GAT_GEN_LINEAR:
        mixed = T.gather_rows(z @ p["att_wl"], dst) + T.gather_rows(z @ p["att_wr"], src)
        return T.tanh(mixed) @ p["att_g"]
    raise ValueError(f"{kind} is not an attention aggregator")


def attention_weights(kind: NodeAggregatorKind, g: Graph, h: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Normalised attention coefficient per CSR entry, shape (E, 1)."""
    z = h @ params["weight"]
    return _attention(NodeAggregatorKind(kind), g, z, params)


def _attention(kind, g, z, p):
    return T.segment_softmax(T.leaky_relu(attention_scores(kind, g, z, p), ATTENTION_SLOPE), g.segments)


def gcn_coefficients(g: Graph) -> np.ndarray:
    deg = g.degrees.astype(np.float64)
    return (1.0 / np.sqrt(deg[g.sources] * deg[g.targets]))[:, None]


def node_aggregate(kind: NodeAggregatorKind, g: Graph, h: Tensor, params: dict[str, Tensor],
                   activation=T.elu) -> Tensor:
    """One message-passing layer of the given kind: ``activation(W . agg(...) + b)``.

    Pass ``activation=None`` for the pre-activation output.
    """
    kind = NodeAggregatorKind(kind)
    if h.ndim != 2 or h.shape[0] != g.num_nodes:
        raise ValueError(f"{kind.value}: features {h.shape} do not match {g.num_nodes} nodes")
    d_out = params["bias"].shape[0] if "bias" in params else 0
    _check_params(kind.value, params, node_param_schema(kind, h.shape[1], d_out))
    if not g.has_self_loops:
        raise ValueError(f"{kind.value}: graph must include self-loops (use add_self_loops)")
    w, b = params["weight"], params["bias"]
    seg = g.segments

    if kind is NodeAggregatorKind.GCN:
        z = h @ w
        out = T.segment_sum(T.gather_rows(z, g.targets) * gcn_coefficients(g), seg)
    elif kind is NodeAggregatorKind.SAGE_SUM:
        out = T.segment_sum(T.gather_rows(h @ w, g.targets), seg)
    elif kind is NodeAggregatorKind.SAGE_MEAN:
        out = T.segment_mean(T.gather_rows(h @ w, g.targets), seg)
    elif kind is NodeAggregatorKind.SAGE_MAX:
        out = T.segment_max(T.gather_rows(h, g.targets), seg) @ w
    elif kind is NodeAggregatorKind.SAGE_LSTM:
        out = _lstm_aggregate(g, h, params) @ w
    elif kind is NodeAggregatorKind.MLP:
        out = T.relu(h @ params["hidden"] + params["hidden_bias"]) @ w
    else:
        z = h @ w
        alpha = _attention(kind, g, z, params)
        out = T.segment_sum(T.gather_rows(z, g.targets) * alpha, seg)
    out = out + b
    return activation(out) if activation is not None else out


def layer_aggregate(kind: LayerAggregatorKind | None, layers: list[Tensor],
                    params: dict[str, Tensor] | None = None) -> Tensor:
    """Combine the selected layer outputs into one representation per node.

    ``kind=None`` is the ablated mode: the last selected output is returned as is.
    """
    if not layers:
        raise ValueError("layer_aggregate: no layers selected")
    if kind is None:
        return layers[-1]
    kind = LayerAggregatorKind(kind)
    if kind is LayerAggregatorKind.CONCAT:
        return layers[0] if len(layers) == 1 else T.concat(layers, axis=1)
    dims = {x.shape for x in layers}
    if len(dims) != 1:
        raise ValueError(f"layer_aggregate {kind.value}: layer shapes differ {sorted(dims)}")
    if kind is LayerAggregatorKind.MAX:
        return layers[0] if len(layers) == 1 else T.maximum(*layers)
    params = params or {}
    dim = layers[0].shape[1]
    _check_params("layer-lstm", params, layer_agg_param_schema(kind, dim))
    n = layers[0].shape[0]
    hs = T.tensor(np.zeros((n, dim)))
    cs = T.tensor(np.zeros((n, dim)))
    for x in layers:
        hs, cs = lstm_cell(x @ params["lstm_wx"], hs, cs, params["lstm_wh"], params["lstm_b"])
    return hs


# ---------------------------------------------------------------- model

@dataclass
class GnnModel:
    genotype: Genotype
    layers: list[dict[str, Tensor]]
    layer_agg: dict[str, Tensor]
    classifier: dict[str, Tensor]
    dims: list[int]
    dropout: float = 0.0
    multilabel: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def output_width(self) -> int:
        """Width of the layer-aggregated representation fed to the classifier."""
        return self.classifier["weight"].shape[0]

    def parameters(self) -> list[Tensor]:
        params = [p for layer in self.layers for p in layer.values()]
        params += list(self.layer_agg.values()) + list(self.classifier.values())
        return params

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers, 1):
            out.update({f"layer{i}.{k}": v.data.copy() for k, v in layer.items()})
        out.update({f"layer_agg.{k}": v.data.copy() for k, v in self.layer_agg.items()})
        out.update({f"classifier.{k}": v.data.copy() for k, v in self.classifier.items()})
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for i, layer in enumerate(self.layers, 1):
            for k, v in layer.items():
                v.data = state[f"layer{i}.{k}"].copy()
        for k, v in self.layer_agg.items():
            v.data = state[f"layer_agg.{k}"].copy()
        for k, v in self.classifier.items():
            v.data = state[f"classifier.{k}"].copy()


def selected_layers(genotype: Genotype) -> list[int]:
    """1-based indices of layer outputs fed to the layer aggregator."""
    k = len(genotype.node_aggs)
    return [i + 1 for i, bit in enumerate(genotype.skips) if bit] + [k]


def build_model(genotype: Genotype, in_dim: int, num_classes: int, hidden: int = 64,
                rng: np.random.Generator | None = None, dropout: float = 0.0,
                multilabel: bool = False) -> GnnModel:
    rng = rng if rng is not None else np.random.default_rng(0)
    k = len(genotype.node_aggs)
    dims = [in_dim] + [hidden] * k
    layers = [init_params(node_param_schema(kind, dims[i], dims[i + 1]), rng)
              for i, kind in enumerate(genotype.node_aggs)]
    layer_agg = init_params(layer_agg_param_schema(genotype.layer_agg, hidden), rng)
    if genotype.layer_agg is LayerAggregatorKind.CONCAT:
        width = hidden * len(selected_layers(genotype))
    else:
        width = hidden
    classifier = init_params({"weight": (width, num_classes), "bias": (num_classes,)}, rng)
    return GnnModel(genotype, layers, layer_agg, classifier, dims, dropout, multilabel)


def forward(model: GnnModel, g: Graph, genotype: Genotype | None = None, *, training: bool = False,
            rng: np.random.Generator | None = None) -> Tensor:
    """Logits of shape (N, num_classes) for every node of ``g``."""
    geno = model.genotype
    if genotype is not None and genotype != geno:
        raise ValueError(f"model was built for {geno}, not {genotype}")
    if len(model.layers) != len(geno.node_aggs):
        raise ValueError("model layer count does not match genotype")
    if g.num_features != model.dims[0]:
        raise ValueError(f"graph has {g.num_features} features, model expects {model.dims[0]}")
    g = g if g.has_self_loops else _with_loops(g)
    h = T.tensor(g.features)
    outputs = []
    for kind, params in zip(geno.node_aggs, model.layers):
        h = T.dropout(h, model.dropout, rng, training)
        h = node_aggregate(kind, g, h, params)
        outputs.append(h)
    chosen = [outputs[i - 1] for i in selected_layers(geno)]
    z = layer_aggregate(geno.layer_agg, chosen, model.layer_agg)
    z = T.dropout(z, model.dropout, rng, training)
    return z @ model.classifier["weight"] + model.classifier["bias"]


def _with_loops(g: Graph) -> Graph:
    from .graph import add_self_loops
    return add_self_loops(g)


# ---------------------------------------------------------------- loss and metrics

def loss(logits: Tensor, labels: np.ndarray, mask: np.ndarray | None = None, task: str = "multiclass") -> Tensor:
    """Masked mean softmax cross-entropy, or mean per-label sigmoid BCE for multilabel."""
    if task == "multiclass":
        return T.softmax_cross_entropy(logits, labels, mask)
    if task == "multilabel":
        return T.sigmoid_binary_cross_entropy(logits, labels, mask)
    raise ValueError(f"unknown task {task!r}")


def metric(logits: np.ndarray | Tensor, labels: np.ndarray, mask: np.ndarray | None = None,
           kind: str = "accuracy") -> float:
    """Accuracy (argmax, ties to lowest class) or micro-F1 at probability threshold 0.5."""
    x = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    labels = np.asarray(labels)
    if mask is not None:
        mask = np.asarray(mask, bool)
        if not mask.any():
            raise ValueError("metric: empty mask")
        x, labels = x[mask], labels[mask]
    if len(x) == 0:
        raise ValueError("metric: no rows to score")
    if kind == "accuracy":
        return float(np.mean(np.argmax(x, axis=1) == labels))
    if kind == "micro_f1":
        pred = x > 0.0
        truth = labels > 0.5
        tp = np.sum(pred & truth)
        fp = np.sum(pred & ~truth)
        fn = np.sum(~pred & truth)
        denom = 2 * tp + fp + fn
        return 1.0 if denom == 0 else float(2 * tp / denom)
    raise ValueError(f"unknown metric {kind!r}")
