"""RL architecture search: LSTM controller, REINFORCE, child training, derivation.

``search`` samples a genotype from the controller, trains it (from scratch, or
starting from a shared :class:`ParamDict` when weight sharing is on), feeds the
validation metric back as reward and records everything in a
:class:`SearchTrace`. ``derive`` then retrains a handful of controller samples
over a small hyperparameter grid and keeps the best on validation.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .gnn import GnnModel, build_model, forward, loss, lstm_cell, metric
from .graph import Graph, InductiveDataset, add_self_loops
from .space import Genotype, SearchSpaceConfig, decode, encode, sample_uniform, space_size
from .tensor import AdamState, Tensor, adam_step, backward

log = logging.getLogger(__name__)

Data = Graph | InductiveDataset


# ---------------------------------------------------------------- datasets as training batches

def prepare(data: Data) -> Data:
    """Add self-loops once so every forward pass can reuse them."""
    if isinstance(data, Graph):
        return add_self_loops(data)
    return InductiveDataset([add_self_loops(g) for g in data.train], [add_self_loops(g) for g in data.val],
                            [add_self_loops(g) for g in data.test], name=data.name)


def split_batches(data: Data, part: str) -> list[tuple[Graph, np.ndarray | None]]:
    if isinstance(data, Graph):
        mask = {"train": data.train_mask, "val": data.val_mask, "test": data.test_mask}[part]
        if not mask.any():
            raise ValueError(f"{part} mask is empty; assign splits first")
        return [(data, mask)]
    return [(g, None) for g in getattr(data, part)]


def task_of(data: Data) -> tuple[str, str]:
    """(loss task, metric kind) for a dataset."""
    multilabel = data.multilabel
    return ("multilabel", "micro_f1") if multilabel else ("multiclass", "accuracy")


def _num_features(data: Data) -> int:
    return data.num_features


def _num_classes(data: Data) -> int:
    if isinstance(data, Graph):
        return data.num_classes
    return max(g.num_classes for g in data.train + data.val + data.test)


# ---------------------------------------------------------------- weight sharing store

class ParamDict:
    """Shared parameters keyed by ``(layer_index, op_name)``."""

    def __init__(self):
        self._store: dict[tuple[int, str], dict[str, np.ndarray]] = {}

    def get(self, layer: int, op_name: str) -> dict[str, np.ndarray] | None:
        """Copy of the stored parameters, or ``None`` when the key is absent."""
        entry = self._store.get((layer, op_name))
        return None if entry is None else {k: v.copy() for k, v in entry.items()}

    def put(self, layer: int, op_name: str, params: dict[str, np.ndarray],
            schema: dict[str, tuple[int, ...]] | None = None) -> None:
        params = {k: np.asarray(v.data if isinstance(v, Tensor) else v, dtype=np.float64) for k, v in params.items()}
        expected = schema or {k: v.shape for k, v in self._store.get((layer, op_name), {}).items()}
        if expected:
            got = {k: v.shape for k, v in params.items()}
            if got != {k: tuple(s) for k, s in expected.items()}:
                raise ValueError(f"shape mismatch for ({layer}, {op_name!r}): expected {expected}, got {got}")
        self._store[(layer, op_name)] = {k: v.copy() for k, v in params.items()}

    def __contains__(self, key) -> bool:
        return key in self._store

    def __len__(self) -> int:
        return len(self._store)

    def keys(self):
        return self._store.keys()


def _shared_groups(model: GnnModel) -> list[tuple[int, str, dict[str, Tensor]]]:
    geno = model.genotype
    k = geno.num_layers
    groups = [(i + 1, kind.value, p) for i, (kind, p) in enumerate(zip(geno.node_aggs, model.layers))]
    if model.layer_agg:
        groups.append((k + 1, geno.layer_agg.value, model.layer_agg))
    groups.append((k + 1, f"classifier-{model.output_width}", model.classifier))
    return groups


def load_shared(model: GnnModel, shared: ParamDict) -> int:
    """Copy matching entries from ``shared`` into the model; returns how many groups loaded."""
    loaded = 0
    for layer, op, params in _shared_groups(model):
        entry = shared.get(layer, op)
        if entry is None or {k: v.shape for k, v in entry.items()} != {k: v.shape for k, v in params.items()}:
            continue
        for name, t in params.items():
            t.data = entry[name]
        loaded += 1
    return loaded


def save_shared(model: GnnModel, shared: ParamDict) -> None:
    for layer, op, params in _shared_groups(model):
        shared.put(layer, op, {k: v.data for k, v in params.items()})


# ---------------------------------------------------------------- child training

@dataclass
class ChildConfig:
    hidden: int = 64
    lr: float = 0.005
    weight_decay: float = 5e-4
    dropout: float = 0.5
    max_epochs: int = 300
    patience: int = 30


@dataclass
class ChildResult:
    genotype: Genotype
    val_metric: float
    test_metric: float
    params: dict[str, np.ndarray]
    epochs: int
    seconds: float
    diverged: bool = False


def evaluate(model: GnnModel, data: Data, parts: Sequence[str] = ("val", "test")) -> dict[str, float]:
    task, kind = task_of(data)
    out = {}
    if isinstance(data, Graph):
        logits = forward(model, data).data
        for part in parts:
            (_, mask), = split_batches(data, part)
            out[part] = metric(logits, data.labels, mask, kind)
        return out
    for part in parts:
        graphs = getattr(data, part)
        logits = np.concatenate([forward(model, g).data for g in graphs])
        labels = np.concatenate([g.labels for g in graphs])
        out[part] = metric(logits, labels, None, kind)
    return out


def train_child(genotype: Genotype, data: Data, cfg: ChildConfig | None = None,
                shared: ParamDict | None = None, seed: int = 0) -> ChildResult:
    """Train one architecture with Adam and early stopping on the validation metric.

    The returned parameters and test metric are those of the best validation
    epoch (epoch 0 is the untrained model). With ``shared`` the model starts
    from any stored parameters and writes its best parameters back.
    """
    cfg = cfg or ChildConfig()
    start = time.perf_counter()
    data = prepare(data)
    task, _ = task_of(data)
    init_ss, drop_ss = np.random.SeedSequence(seed).spawn(2)
    model = build_model(genotype, _num_features(data), _num_classes(data), cfg.hidden,
                        np.random.default_rng(init_ss), cfg.dropout, task == "multilabel")
    if shared is not None:
        load_shared(model, shared)
    initial = model.state()
    drop_rng = np.random.default_rng(drop_ss)
    params = model.parameters()
    adam = AdamState.for_params(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    batches = split_batches(data, "train")
    epoch = 0
    try:
        scores = evaluate(model, data)
        best_val, best_test, best_state = scores["val"], scores["test"], initial
        stale = 0
        for epoch in range(1, cfg.max_epochs + 1):
            for g, mask in batches:
                logits = forward(model, g, training=True, rng=drop_rng)
                labels = g.labels
                batch_loss = loss(logits, labels, mask, task)
                if len(batches) > 1:
                    batch_loss = batch_loss * (1.0 / len(batches))
                backward(batch_loss, wrt=params)
            adam_step(params, adam)
            scores = evaluate(model, data)
            if scores["val"] > best_val:
                best_val, best_test, best_state = scores["val"], scores["test"], model.state()
                stale = 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
    except FloatingPointError as exc:
        log.warning("child %s diverged at epoch %d: %s", encode(genotype), epoch, exc)
        return ChildResult(genotype, 0.0, 0.0, initial, epoch, time.perf_counter() - start, diverged=True)
    model.load_state(best_state)
    if shared is not None:
        save_shared(model, shared)
    return ChildResult(genotype, best_val, best_test, best_state, epoch, time.perf_counter() - start)


# ---------------------------------------------------------------- controller

@dataclass
class ControllerConfig:
    hidden: int = 64
    embed: int = 32
    lr: float = 0.005
    baseline_decay: float = 0.95
    entropy_beta: float = 1e-3
    init_range: float = 0.1


@dataclass
class Episode:
    actions: list[int]
    log_probs: list[Tensor]
    entropy: Tensor
    reward: float = 0.0
    slot_log_softmax: list[Tensor] = field(default_factory=list, repr=False)


class Controller:
    """Autoregressive LSTM policy over the decision slots of a search space.

    Each step feeds the embedding of the previous action (a learned start
    embedding at step 0) through one LSTM cell and a per-slot softmax head.
    Heads start at zero, so a fresh controller is uniform in every slot.
    """

    def __init__(self, space: SearchSpaceConfig, cfg: ControllerConfig | None = None, seed: int = 0):
        self.space = space
        self.cfg = cfg = cfg or ControllerConfig()
        rng = np.random.default_rng(seed)
        r = cfg.init_range
        h, e = cfg.hidden, cfg.embed

        def uniform(*shape):
            return Tensor(rng.uniform(-r, r, size=shape), requires_grad=True)

        self.slot_sizes = [len(choices) for _, choices in space.slots()]
        self.lstm = {"lstm_wx": uniform(e, 4 * h), "lstm_wh": uniform(h, 4 * h),
                     "lstm_b": Tensor(np.zeros(4 * h), requires_grad=True)}
        self.start = uniform(1, e)
        self.embeddings = [uniform(n, e) for n in self.slot_sizes]
        self.heads = [(Tensor(np.zeros((h, n)), requires_grad=True), Tensor(np.zeros(n), requires_grad=True))
                      for n in self.slot_sizes]
        self.baseline = 0.0
        self.adam = AdamState.for_params(self.parameters(), lr=cfg.lr)

    @property
    def num_slots(self) -> int:
        return len(self.slot_sizes)

    def parameters(self) -> list[Tensor]:
        params = list(self.lstm.values()) + [self.start] + list(self.embeddings)
        for w, b in self.heads:
            params += [w, b]
        return params

    def rollout(self, rng: np.random.Generator | None = None, actions: Sequence[int] | None = None) -> Episode:
        """Sample every slot with ``rng``, or score the given ``actions``."""
        if actions is None and rng is None:
            raise ValueError("rollout needs an rng or fixed actions")
        if actions is not None and len(actions) != self.num_slots:
            raise ValueError(f"expected {self.num_slots} actions, got {len(actions)}")
        hs = T.tensor(np.zeros((1, self.cfg.hidden)))
        cs = T.tensor(np.zeros((1, self.cfg.hidden)))
        x = self.start
        chosen, log_probs, entropies, dists = [], [], [], []
        for slot, (w, b) in enumerate(self.heads):
            hs, cs = lstm_cell(x @ self.lstm["lstm_wx"], hs, cs, self.lstm["lstm_wh"], self.lstm["lstm_b"])
            logp = T.log_softmax(hs @ w + b)
            if actions is None:
                p = np.exp(logp.data[0])
                cdf = np.cumsum(p)
                a = int(min(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"), len(p) - 1))
            else:
                a = int(actions[slot])
            chosen.append(a)
            log_probs.append(logp[0, a])
            dists.append(logp[0])
            entropies.append(-T.sum(T.exp(logp) * logp))
            x = T.gather_rows(self.embeddings[slot], [a])
        entropy = entropies[0]
        for ent in entropies[1:]:
            entropy = entropy + ent
        return Episode(chosen, log_probs, entropy, slot_log_softmax=dists)

    def sample(self, rng: np.random.Generator) -> tuple[Genotype, Episode]:
        ep = self.rollout(rng)
        return self.space.genotype_from_actions(ep.actions), ep

    def slot_distributions(self, actions: Sequence[int]) -> list[np.ndarray]:
        """Per-slot action probabilities when following ``actions``."""
        ep = self.rollout(actions=actions)
        return [np.exp(lp.data) for lp in ep.slot_log_softmax]

    def probability(self, genotype: Genotype) -> float:
        acts = self.space.actions_for(genotype)
        ep = self.rollout(actions=acts)
        return float(math.exp(sum(lp.item() for lp in ep.log_probs)))


def surrogate_loss(controller: Controller, episodes: Sequence[Episode], entropy_beta: float | None = None) -> Tensor:
    """Negative REINFORCE objective: -mean(sum log p * (R - b) + beta * H)."""
    beta = controller.cfg.entropy_beta if entropy_beta is None else entropy_beta
    b = controller.baseline
    total = None
    for ep in episodes:
        lp = ep.log_probs[0]
        for x in ep.log_probs[1:]:
            lp = lp + x
        term = lp * (ep.reward - b)
        if beta:
            term = term + ep.entropy * beta
        total = term if total is None else total + term
    return total * (-1.0 / len(episodes))


def reinforce_update(controller: Controller, episodes: Sequence[Episode], entropy_beta: float | None = None) -> None:
    """One Adam step on the REINFORCE surrogate, then move the reward baseline."""
    if not episodes:
        raise ValueError("reinforce_update: no episodes")
    rewards = [ep.reward for ep in episodes]
    if any(not 0.0 <= r <= 1.0 for r in rewards):
        raise ValueError(f"rewards must lie in [0, 1], got {rewards}")
    params = controller.parameters()
    backward(surrogate_loss(controller, episodes, entropy_beta), wrt=params)
    adam_step(params, controller.adam)
    g = controller.cfg.baseline_decay
    controller.baseline = g * controller.baseline + (1.0 - g) * float(np.mean(rewards))


# ---------------------------------------------------------------- traces

TRACE_HEADER = ("iter", "seconds", "genotype", "val_metric", "baseline")


@dataclass
class TraceRecord:
    iteration: int
    seconds: float
    genotype: str
    val_metric: float
    baseline: float
    child_seconds: float = 0.0
    test_metric: float = float("nan")
    diverged: bool = False


@dataclass
class SearchTrace:
    records: list[TraceRecord] = field(default_factory=list)

    def append(self, rec: TraceRecord) -> None:
        if self.records:
            last = self.records[-1]
            if rec.iteration <= last.iteration:
                raise ValueError("trace iterations must increase")
            if rec.seconds < last.seconds:
                raise ValueError("trace wall-clock must not decrease")
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def best(self) -> TraceRecord:
        """Highest validation metric; the earliest wins ties."""
        return max(self.records, key=lambda r: (r.val_metric, -r.iteration))

    def best_so_far(self) -> list[float]:
        return list(np.maximum.accumulate([r.val_metric for r in self.records]))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRACE_HEADER)
            for r in self.records:
                w.writerow([r.iteration, repr(r.seconds), r.genotype, repr(r.val_metric), repr(r.baseline)])

    @classmethod
    def read_csv(cls, path) -> SearchTrace:
        trace = cls()
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = tuple(next(reader))
            if header != TRACE_HEADER:
                raise ValueError(f"{path}: unexpected trace header {header}")
            for row in reader:
                decode(row[2])
                trace.append(TraceRecord(int(row[0]), float(row[1]), row[2], float(row[3]), float(row[4])))
        return trace


# ---------------------------------------------------------------- search loops

@dataclass
class SearchResult:
    trace: SearchTrace
    controller: Controller | None = None
    shared: ParamDict | None = None


def seed_streams(seed: int) -> tuple[int, np.random.Generator, int]:
    """Independent (controller seed, sampling rng, child seed) derived from one run seed."""
    ctrl_ss, sample_ss, child_ss = np.random.SeedSequence(seed).spawn(3)
    return int(ctrl_ss.generate_state(1)[0]), np.random.default_rng(sample_ss), int(child_ss.generate_state(1)[0])


def search(space: SearchSpaceConfig, data: Data, budget: int, ws: bool = False, seed: int = 0,
           child_cfg: ChildConfig | None = None, controller_cfg: ControllerConfig | None = None,
           record_timing: bool = True, callback: Callable[[TraceRecord], None] | None = None) -> SearchResult:
    """Controller-guided search over ``budget`` candidates.

    Every child uses the same init seed, so a genotype's score depends only on
    the genotype (and, with ``ws``, on what the shared store holds).
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    data = prepare(data)
    ctrl_seed, rng, child_seed = seed_streams(seed)
    controller = Controller(space, controller_cfg, seed=ctrl_seed)
    shared = ParamDict() if ws else None
    trace = SearchTrace()
    start = time.perf_counter()
    for it in range(1, budget + 1):
        genotype, ep = controller.sample(rng)
        res = train_child(genotype, data, child_cfg, shared, seed=child_seed)
        ep.reward = res.val_metric
        reinforce_update(controller, [ep])
        rec = TraceRecord(it, time.perf_counter() - start if record_timing else 0.0, encode(genotype),
                          res.val_metric, controller.baseline,
                          res.seconds if record_timing else 0.0, res.test_metric, res.diverged)
        trace.append(rec)
        if callback:
            callback(rec)
    return SearchResult(trace, controller, shared)


def random_search(space: SearchSpaceConfig, data: Data, budget: int, seed: int = 0,
                  child_cfg: ChildConfig | None = None, dedup: bool = False,
                  record_timing: bool = True) -> SearchTrace:
    """Uniformly sampled candidates, each trained from scratch."""
    if budget < 1:
        raise ValueError("budget must be >= 1")
    data = prepare(data)
    _, rng, child_seed = seed_streams(seed)
    if dedup:
        budget = min(budget, space_size(space))
    seen: set[Genotype] = set()
    trace = SearchTrace()
    start = time.perf_counter()
    for it in range(1, budget + 1):
        genotype = sample_uniform(space, rng)
        while dedup and genotype in seen:
            genotype = sample_uniform(space, rng)
        seen.add(genotype)
        res = train_child(genotype, data, child_cfg, seed=child_seed)
        trace.append(TraceRecord(it, time.perf_counter() - start if record_timing else 0.0, encode(genotype),
                                 res.val_metric, float("nan"),
                                 res.seconds if record_timing else 0.0, res.test_metric, res.diverged))
    return trace


# ---------------------------------------------------------------- derivation

DEFAULT_LRS = (0.01, 0.005, 0.001)
DEFAULT_HIDDENS = (32, 64)


@dataclass
class DeriveResult:
    genotype: Genotype
    val_metric: float
    test_metric: float
    candidates: list[dict]

    def to_json(self) -> dict:
        return {"genotype": encode(self.genotype), "val_metric": self.val_metric,
                "test_metric": self.test_metric, "candidates": self.candidates}


def retrain(genotypes: Sequence[Genotype], data: Data, lrs: Sequence[float] = DEFAULT_LRS,
            hiddens: Sequence[int] = DEFAULT_HIDDENS, child_cfg: ChildConfig | None = None,
            seed: int = 0) -> DeriveResult:
    """Train each genotype from scratch over the lr x hidden grid; keep the best on validation.

    Repeated genotypes reuse their grid results. The earliest candidate wins ties.
    """
    if not genotypes:
        raise ValueError("retrain: no genotypes")
    base = child_cfg or ChildConfig()
    data = prepare(data)
    cache: dict[tuple[Genotype, float, int], ChildResult] = {}
    candidates = []
    best = None
    for genotype in genotypes:
        grid = []
        for lr in lrs:
            for hidden in hiddens:
                key = (genotype, lr, hidden)
                if key not in cache:
                    cfg = replace(base, hidden=hidden, lr=lr)
                    cache[key] = train_child(genotype, data, cfg, seed=seed)
                r = cache[key]
                grid.append({"lr": lr, "hidden": hidden, "val_metric": r.val_metric, "test_metric": r.test_metric})
        top = max(grid, key=lambda x: x["val_metric"])
        cand = {"genotype": encode(genotype), "val_metric": top["val_metric"],
                "test_metric": top["test_metric"], "grid": grid}
        candidates.append(cand)
        if best is None or cand["val_metric"] > best["val_metric"]:
            best = cand
    return DeriveResult(decode(best["genotype"]), best["val_metric"], best["test_metric"], candidates)


def derive(controller: Controller, data: Data, n: int = 10, lrs: Sequence[float] = DEFAULT_LRS,
           hiddens: Sequence[int] = DEFAULT_HIDDENS, child_cfg: ChildConfig | None = None,
           seed: int = 0) -> DeriveResult:
    """Sample ``n`` genotypes from the controller and :func:`retrain` them."""
    if n < 1:
        raise ValueError("n must be >= 1")
    sample_ss, child_ss = np.random.SeedSequence(seed).spawn(2)
    rng = np.random.default_rng(sample_ss)
    genotypes = [controller.sample(rng)[0] for _ in range(n)]
    return retrain(genotypes, data, lrs, hiddens, child_cfg, int(child_ss.generate_state(1)[0]))


__all__ = [
    "ChildConfig", "ChildResult", "Controller", "ControllerConfig", "DeriveResult", "Episode", "ParamDict",
    "SearchResult", "SearchTrace", "TraceRecord", "derive", "evaluate", "load_shared", "prepare",
    "random_search", "reinforce_update", "retrain", "save_shared", "search", "seed_streams", "surrogate_loss",
    "task_of", "train_child",
]
