"""Genotypes: points of the node-aggregator / skip / layer-aggregator space.

Wire format::

    node:<id>{,<id>}*;skip:<bits>;layer:<id>

Bit ``i`` (left to right, 1-based) says whether layer ``i`` feeds the layer
aggregator. The last layer always does and has no bit. In the ablated space
(no layer aggregators) the layer id is ``none``.
"""
from __future__ import annotations

import itertools
import re
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .gnn import LayerAggregatorKind, NodeAggregatorKind

NODE_AGGS: tuple[NodeAggregatorKind, ...] = tuple(NodeAggregatorKind)
LAYER_AGGS: tuple[LayerAggregatorKind, ...] = tuple(LayerAggregatorKind)
NO_LAYER_AGG = "none"
DEFAULT_ENUMERATE_CAP = 100_000


class GenotypeParseError(ValueError):
    def __init__(self, text: str, pos: int, msg: str):
        super().__init__(f"{msg} at position {pos}: {text!r}")
        self.text = text
        self.pos = pos


@dataclass(frozen=True)
class Genotype:
    node_aggs: tuple[NodeAggregatorKind, ...]
    skips: tuple[bool, ...]
    layer_agg: LayerAggregatorKind | None

    def __post_init__(self):
        object.__setattr__(self, "node_aggs", tuple(NodeAggregatorKind(k) for k in self.node_aggs))
        object.__setattr__(self, "skips", tuple(bool(s) for s in self.skips))
        if self.layer_agg is not None:
            object.__setattr__(self, "layer_agg", LayerAggregatorKind(self.layer_agg))
        if len(self.node_aggs) < 1:
            raise ValueError("genotype needs at least one layer")
        if len(self.skips) != len(self.node_aggs) - 1:
            raise ValueError(f"{len(self.node_aggs)} layers need {len(self.node_aggs) - 1} skip bits, "
                             f"got {len(self.skips)}")

    @property
    def num_layers(self) -> int:
        return len(self.node_aggs)

    def __str__(self) -> str:
        return encode(self)


def encode(g: Genotype) -> str:
    layer = g.layer_agg.value if g.layer_agg is not None else NO_LAYER_AGG
    bits = "".join("1" if s else "0" for s in g.skips)
    return f"node:{','.join(k.value for k in g.node_aggs)};skip:{bits};layer:{layer}"


_ID = re.compile(r"[a-z][a-z\-]*")


def decode(text: str) -> Genotype:
    pos = 0

    def expect(literal: str):
        nonlocal pos
        if not text.startswith(literal, pos):
            raise GenotypeParseError(text, pos, f"expected {literal!r}")
        pos += len(literal)

    def ident() -> tuple[str, int]:
        nonlocal pos
        m = _ID.match(text, pos)
        if not m:
            raise GenotypeParseError(text, pos, "expected an identifier")
        pos = m.end()
        return m.group(), m.start()

    expect("node:")
    nodes = []
    while True:
        name, at = ident()
        try:
            nodes.append(NodeAggregatorKind(name))
        except ValueError:
            raise GenotypeParseError(text, at, f"unknown node aggregator {name!r}") from None
        if text.startswith(",", pos):
            pos += 1
            continue
        break
    expect(";skip:")
    bits = []
    while pos < len(text) and text[pos] in "01":
        bits.append(text[pos] == "1")
        pos += 1
    if len(bits) != len(nodes) - 1:
        raise GenotypeParseError(text, pos, f"expected {len(nodes) - 1} skip bits, got {len(bits)}")
    expect(";layer:")
    name, at = ident()
    if name == NO_LAYER_AGG:
        layer = None
        if any(bits):
            raise GenotypeParseError(text, at, "layer 'none' requires all skip bits 0")
    else:
        try:
            layer = LayerAggregatorKind(name)
        except ValueError:
            raise GenotypeParseError(text, at, f"unknown layer aggregator {name!r}") from None
    if pos != len(text):
        raise GenotypeParseError(text, pos, "trailing characters")
    return Genotype(tuple(nodes), tuple(bits), layer)


@dataclass(frozen=True)
class SearchSpaceConfig:
    num_layers: int = 3
    node_aggs: tuple[NodeAggregatorKind, ...] = NODE_AGGS
    layer_aggs: tuple[LayerAggregatorKind, ...] = LAYER_AGGS
    include_layer_aggregators: bool = True

    def __post_init__(self):
        object.__setattr__(self, "node_aggs", tuple(NodeAggregatorKind(k) for k in self.node_aggs))
        object.__setattr__(self, "layer_aggs", tuple(LayerAggregatorKind(k) for k in self.layer_aggs))
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if not self.node_aggs or not self.layer_aggs:
            raise ValueError("allowed aggregator sets must be non-empty")
        if len(set(self.node_aggs)) != len(self.node_aggs) or len(set(self.layer_aggs)) != len(self.layer_aggs):
            raise ValueError("allowed aggregator lists contain duplicates")

    def slots(self) -> list[tuple[str, tuple]]:
        """Decision slots in sampling order: (slot kind, choices)."""
        out = [("node", self.node_aggs)] * self.num_layers
        if self.include_layer_aggregators:
            out += [("skip", (False, True))] * (self.num_layers - 1)
            out += [("layer", self.layer_aggs)]
        return out

    def genotype_from_actions(self, actions) -> Genotype:
        slots = self.slots()
        if len(actions) != len(slots):
            raise ValueError(f"expected {len(slots)} actions, got {len(actions)}")
        k = self.num_layers
        nodes = tuple(self.node_aggs[a] for a in actions[:k])
        if not self.include_layer_aggregators:
            return Genotype(nodes, (False,) * (k - 1), None)
        skips = tuple(bool(a) for a in actions[k:2 * k - 1])
        return Genotype(nodes, skips, self.layer_aggs[actions[-1]])

    def actions_for(self, g: Genotype) -> list[int]:
        if g not in self:
            raise ValueError(f"{encode(g)} is outside the search space")
        acts = [self.node_aggs.index(k) for k in g.node_aggs]
        if self.include_layer_aggregators:
            acts += [int(s) for s in g.skips] + [self.layer_aggs.index(g.layer_agg)]
        return acts

    def __contains__(self, g: Genotype) -> bool:
        if g.num_layers != self.num_layers or any(k not in self.node_aggs for k in g.node_aggs):
            return False
        if not self.include_layer_aggregators:
            return g.layer_agg is None and not any(g.skips)
        return g.layer_agg in self.layer_aggs


def space_size(cfg: SearchSpaceConfig) -> int:
    size = len(cfg.node_aggs) ** cfg.num_layers
    if cfg.include_layer_aggregators:
        size *= 2 ** (cfg.num_layers - 1) * len(cfg.layer_aggs)
    return size


def enumerate_space(cfg: SearchSpaceConfig, cap: int = DEFAULT_ENUMERATE_CAP) -> Iterator[Genotype]:
    """Every genotype once, lexicographic in the configured choice order."""
    size = space_size(cfg)
    if size > cap:
        raise ValueError(f"search space has {size} genotypes, above the enumeration cap {cap}")
    choices = [range(len(c)) for _, c in cfg.slots()]
    return (cfg.genotype_from_actions(a) for a in itertools.product(*choices))


def sample_uniform(cfg: SearchSpaceConfig, rng: np.random.Generator) -> Genotype:
    return cfg.genotype_from_actions([int(rng.integers(len(c))) for _, c in cfg.slots()])


# ---------------------------------------------------------------- human-designed baselines

_SAGE = {"": NodeAggregatorKind.SAGE_MEAN, "-sum": NodeAggregatorKind.SAGE_SUM,
         "-mean": NodeAggregatorKind.SAGE_MEAN, "-max": NodeAggregatorKind.SAGE_MAX}
_BASELINES: dict[str, NodeAggregatorKind] = {
    "gcn": NodeAggregatorKind.GCN,
    "gat": NodeAggregatorKind.GAT,
    # sum aggregation followed by the layer's linear map; no epsilon, one-layer transform
    "gin": NodeAggregatorKind.SAGE_SUM,
    **{f"graphsage{suffix}": kind for suffix, kind in _SAGE.items()},
}
BASELINE_NAMES = tuple(sorted(
    [n.upper().replace("GRAPHSAGE", "GraphSAGE") for n in _BASELINES]
    + [n.upper().replace("GRAPHSAGE", "GraphSAGE") + "-JK" for n in _BASELINES]))


def baseline_genotype(name: str, num_layers: int = 3) -> Genotype:
    """A human-designed GNN as a genotype, e.g. ``GCN`` or ``GAT-JK``.

    Plain models use only the last layer (all skips off, CONCAT over one input).
    JK models feed every layer to a CONCAT layer aggregator.
    """
    key = name.strip().lower()
    jk = key.endswith("-jk")
    base = key[:-3] if jk else key
    if base not in _BASELINES:
        raise ValueError(f"unknown baseline {name!r}; known: {', '.join(BASELINE_NAMES)}")
    return Genotype((_BASELINES[base],) * num_layers, (jk,) * (num_layers - 1), LayerAggregatorKind.CONCAT)


def parse_genotype_or_baseline(text: str, num_layers: int = 3) -> Genotype:
    return decode(text) if text.startswith("node:") else baseline_genotype(text, num_layers)

