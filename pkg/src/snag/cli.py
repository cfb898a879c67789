"""Command-line entry point: ``snag convert|run|ablate|enumerate``.

Experiments are described by a flat JSON config (see :class:`ExperimentConfig`).
Exit codes: 0 success, 1 runtime failure, 2 config or input validation failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import statistics
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .graph import DatasetError, Graph, from_edges, load_dataset, make_splits, sbm_generate
from .search import (DEFAULT_HIDDENS, DEFAULT_LRS, ChildConfig, ControllerConfig, SearchTrace, TraceRecord,
                     derive, random_search, retrain, search, seed_streams, task_of)
from .space import (Genotype, GenotypeParseError, SearchSpaceConfig, decode, encode, enumerate_space,
                    parse_genotype_or_baseline, space_size)

log = logging.getLogger("snag")

EXIT_OK, EXIT_RUNTIME, EXIT_INVALID = 0, 1, 2
SEARCH_MODES = ("snag", "snag-ws", "random")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- config

@dataclass
class ExperimentConfig:
    """Every key of the JSON config; unknown keys are rejected.

    ``dataset`` is a canonical dataset directory or the literal ``"sbm"`` for a
    synthetic block model described by the ``sbm_*`` keys. Transductive graphs
    are split with ``split_fractions`` under ``split_seed``; the split is the
    same for every run seed.
    """

    dataset: str | None = None
    task: str | None = None
    sbm_blocks: int = 3
    sbm_nodes_per_block: int = 20
    sbm_p_in: float = 0.3
    sbm_p_out: float = 0.05
    sbm_noise: float = 1.0
    sbm_extra_features: int = 0
    sbm_seed: int = 0
    split_seed: int = 0
    split_fractions: list[float] = field(default_factory=lambda: [0.6, 0.2, 0.2])

    mode: str = "snag"
    budget: int = 200
    seeds: list[int] = field(default_factory=lambda: [0])
    num_layers: int = 3
    node_aggs: list[str] | None = None
    layer_aggs: list[str] | None = None
    include_layer_aggregators: bool = True

    hidden: int = 64
    lr: float = 0.005
    weight_decay: float = 5e-4
    dropout: float = 0.5
    max_epochs: int = 300
    patience: int = 30

    controller_hidden: int = 64
    controller_embed: int = 32
    controller_lr: float = 0.005
    baseline_decay: float = 0.95
    entropy_beta: float = 1e-3

    derive_n: int = 10
    derive_lrs: list[float] = field(default_factory=lambda: list(DEFAULT_LRS))
    derive_hiddens: list[int] = field(default_factory=lambda: list(DEFAULT_HIDDENS))
    record_timing: bool = True
    out: str = "runs"

    @classmethod
    def from_dict(cls, raw: dict, base: Path | None = None) -> ExperimentConfig:
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        cfg = cls(**raw)
        if base is not None and cfg.dataset and cfg.dataset != "sbm" and not Path(cfg.dataset).is_absolute():
            cfg.dataset = str(base / cfg.dataset)
        return cfg

    @classmethod
    def read(cls, path) -> ExperimentConfig:
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(raw, base=path.parent)

    # -- derived views

    def space(self) -> SearchSpaceConfig:
        kw = {"num_layers": self.num_layers, "include_layer_aggregators": self.include_layer_aggregators}
        if self.node_aggs is not None:
            kw["node_aggs"] = tuple(self.node_aggs)
        if self.layer_aggs is not None:
            kw["layer_aggs"] = tuple(self.layer_aggs)
        return SearchSpaceConfig(**kw)

    def child(self) -> ChildConfig:
        return ChildConfig(self.hidden, self.lr, self.weight_decay, self.dropout, self.max_epochs, self.patience)

    def controller(self) -> ControllerConfig:
        return ControllerConfig(self.controller_hidden, self.controller_embed, self.controller_lr,
                                self.baseline_decay, self.entropy_beta)

    def fixed_genotype(self) -> Genotype | None:
        if not self.mode.startswith("fixed:"):
            return None
        return parse_genotype_or_baseline(self.mode[len("fixed:"):], self.num_layers)

    def validate(self, need_dataset: bool = True) -> None:
        """Check everything that can be checked before any training starts."""
        if self.mode not in SEARCH_MODES and not self.mode.startswith("fixed:"):
            raise ConfigError(f"mode must be one of {', '.join(SEARCH_MODES)} or fixed:<genotype>, got {self.mode!r}")
        try:
            space = self.space()
            fixed = self.fixed_genotype()
        except GenotypeParseError as exc:
            raise ConfigError(f"mode: {exc}") from None
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if fixed is not None and fixed.num_layers != self.num_layers:
            raise ConfigError(f"fixed genotype has {fixed.num_layers} layers, config says {self.num_layers}")
        if fixed is None and space_size(space) < 1:
            raise ConfigError("empty search space")
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be a non-empty list of distinct integers")
        positive = {"budget": self.budget, "hidden": self.hidden, "derive_n": self.derive_n,
                    "controller_hidden": self.controller_hidden, "controller_embed": self.controller_embed}
        for key, value in positive.items():
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"{key} must be a positive integer, got {value!r}")
        if self.max_epochs < 0 or self.patience < 1:
            raise ConfigError("max_epochs must be >= 0 and patience >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if not self.derive_lrs or not self.derive_hiddens:
            raise ConfigError("derive_lrs and derive_hiddens must be non-empty")
        if len(self.split_fractions) != 3 or abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ConfigError(f"split_fractions must be three numbers summing to 1, got {self.split_fractions}")
        if self.task not in (None, "transductive", "inductive"):
            raise ConfigError(f"task must be transductive or inductive, got {self.task!r}")
        if need_dataset:
            if not self.dataset:
                raise ConfigError("config needs a dataset (a directory or \"sbm\")")
            if self.dataset != "sbm" and not (Path(self.dataset) / "manifest.json").exists():
                raise ConfigError(f"dataset manifest not found: {Path(self.dataset) / 'manifest.json'}")


def load_data(cfg: ExperimentConfig):
    if cfg.dataset == "sbm":
        try:
            g = sbm_generate(cfg.sbm_blocks, cfg.sbm_nodes_per_block, cfg.sbm_p_in, cfg.sbm_p_out,
                             cfg.sbm_noise, cfg.sbm_seed, extra_features=cfg.sbm_extra_features)
        except ValueError as exc:
            raise ConfigError(f"sbm: {exc}") from None
    else:
        g = load_dataset(cfg.dataset)
    kind = "transductive" if isinstance(g, Graph) else "inductive"
    if cfg.task is not None and cfg.task != kind:
        raise ConfigError(f"config task {cfg.task!r} but dataset is {kind}")
    if isinstance(g, Graph):
        g = make_splits(g, tuple(cfg.split_fractions), seed=cfg.split_seed)
    return g


# ---------------------------------------------------------------- running experiments

def run_seed(cfg: ExperimentConfig, data, seed: int, out: Path) -> dict:
    """One repetition: search (or fixed training) then retraining of the finalists."""
    out.mkdir(parents=True, exist_ok=True)
    space = cfg.space()
    child = cfg.child()
    start = time.perf_counter()
    fixed = cfg.fixed_genotype()
    child_seed = seed_streams(seed)[2]
    if fixed is not None:
        final = retrain([fixed], data, cfg.derive_lrs, cfg.derive_hiddens, child, seed=child_seed)
        trace = SearchTrace()
        trace.append(TraceRecord(1, time.perf_counter() - start if cfg.record_timing else 0.0,
                                 encode(fixed), final.val_metric, float("nan")))
    elif cfg.mode == "random":
        trace = random_search(space, data, cfg.budget, seed=seed, child_cfg=child, record_timing=cfg.record_timing)
        ranked = sorted(trace, key=lambda r: (-r.val_metric, r.iteration))
        finalists = list(dict.fromkeys(r.genotype for r in ranked))[:cfg.derive_n]
        final = retrain([decode(g) for g in finalists], data, cfg.derive_lrs,
                        cfg.derive_hiddens, child, seed=child_seed)
    else:
        res = search(space, data, cfg.budget, ws=cfg.mode == "snag-ws", seed=seed, child_cfg=child,
                     controller_cfg=cfg.controller(), record_timing=cfg.record_timing,
                     callback=lambda r: log.info("seed %d iter %d %s val=%.4f", seed, r.iteration, r.genotype,
                                                 r.val_metric))
        trace = res.trace
        final = derive(res.controller, data, cfg.derive_n, cfg.derive_lrs, cfg.derive_hiddens, child, seed=seed)
    seconds = time.perf_counter() - start if cfg.record_timing else 0.0
    trace.write_csv(out / "trace.csv")
    (out / "derive.json").write_text(json.dumps(final.to_json(), indent=2) + "\n", encoding="utf-8")
    child_secs = [r.child_seconds for r in trace]
    return {"seed": seed, "genotype": encode(final.genotype), "val_metric": final.val_metric,
            "test_metric": final.test_metric, "best_search_val": trace.best().val_metric,
            "candidates": len(trace), "seconds": seconds,
            "child_seconds_mean": math.fsum(child_secs) / len(child_secs)}


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Arithmetic mean and sample standard deviation (0 for a single value)."""
    values = [float(v) for v in values]
    mean = math.fsum(values) / len(values)
    return mean, statistics.stdev(values) if len(values) > 1 else 0.0


def run_experiment(cfg: ExperimentConfig, out: Path, data=None) -> dict:
    data = load_data(cfg) if data is None else data
    _, metric_kind = task_of(data)
    runs = [run_seed(cfg, data, s, out / f"seed-{s}") for s in cfg.seeds]
    test_mean, test_std = mean_std([r["test_metric"] for r in runs])
    val_mean, val_std = mean_std([r["val_metric"] for r in runs])
    report = {"mode": cfg.mode, "dataset": cfg.dataset, "metric": metric_kind,
              "space": {"num_layers": cfg.num_layers, "include_layer_aggregators": cfg.include_layer_aggregators,
                        "size": space_size(cfg.space())},
              "seeds": list(cfg.seeds), "runs": runs,
              "test_mean": test_mean, "test_std": test_std, "val_mean": val_mean, "val_std": val_std,
              "seconds": math.fsum(r["seconds"] for r in runs)}
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "report.json", report)
    return report


def run_ablation(cfg: ExperimentConfig, out: Path) -> dict:
    if cfg.fixed_genotype() is not None:
        raise ConfigError("ablate needs a search mode, not a fixed genotype")
    data = load_data(cfg)
    with_cfg = dataclasses.replace(cfg, include_layer_aggregators=True)
    without_cfg = dataclasses.replace(cfg, include_layer_aggregators=False)
    report = {"with": run_experiment(with_cfg, out / "with", data),
              "without": run_experiment(without_cfg, out / "without", data)}
    write_json(out / "ablation.json", report)
    return report


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, allow_nan=False) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- conversion

def _lines(path: Path):
    if not path.exists():
        raise DatasetError(f"missing input file: {path}")
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if line and not line.startswith("#"):
            yield lineno, line


def _split(line: str) -> list[str]:
    return line.replace(",", " ").split()


def _encode_labels(raw: list[str]) -> tuple[np.ndarray, list[str]]:
    """Integer labels pass through; anything else maps to sorted class ids."""
    try:
        return np.array([int(x) for x in raw]), []
    except ValueError:
        classes = sorted(set(raw))
        index = {c: i for i, c in enumerate(classes)}
        return np.array([index[x] for x in raw]), classes


def convert_edgelist(edges_path: Path, features_path: Path, labels_path: Path):
    """Edge list ``u v`` of 0-based ids, one CSV feature row per node, one label per line."""
    feats = []
    for lineno, line in _lines(features_path):
        try:
            feats.append([float(x) for x in line.split(",")])
        except ValueError:
            if not feats and lineno == 1:
                continue  # header row
            raise DatasetError(f"{features_path}:{lineno}: non-numeric feature in {line!r}") from None
        if len(feats[-1]) != len(feats[0]):
            raise DatasetError(f"{features_path}:{lineno}: expected {len(feats[0])} columns, got {len(feats[-1])}")
    labels_raw = [line for _, line in _lines(labels_path)]
    if len(labels_raw) != len(feats):
        raise DatasetError(f"{labels_path}: {len(labels_raw)} labels for {len(feats)} feature rows")
    n = len(feats)
    edges = []
    for lineno, line in _lines(edges_path):
        parts = _split(line)
        try:
            u, v = (int(x) for x in parts)
        except ValueError:
            raise DatasetError(f"{edges_path}:{lineno}: expected two integer node ids, got {line!r}") from None
        if not (0 <= u < n and 0 <= v < n):
            raise DatasetError(f"{edges_path}:{lineno}: node id out of range 0..{n - 1} in {line!r}")
        edges.append((u, v))
    labels, classes = _encode_labels(labels_raw)
    return np.array(edges, dtype=np.int64).reshape(-1, 2), np.array(feats), labels, classes


def convert_linqs(prefix: Path):
    """``<prefix>.content`` (id, features..., class) and ``<prefix>.cites`` (cited citing).

    Citations that mention an id without a content row are dropped with a warning.
    """
    if prefix.is_dir():
        found = sorted(prefix.glob("*.content"))
        if len(found) != 1:
            raise DatasetError(f"{prefix}: expected exactly one *.content file, found {len(found)}")
        prefix = found[0].with_suffix("")
    content, cites = prefix.with_suffix(".content"), prefix.with_suffix(".cites")
    ids, feats, labels_raw = {}, [], []
    for lineno, line in _lines(content):
        parts = line.split()
        if len(parts) < 3:
            raise DatasetError(f"{content}:{lineno}: expected id, features and class")
        try:
            row = [float(x) for x in parts[1:-1]]
        except ValueError:
            raise DatasetError(f"{content}:{lineno}: non-numeric feature") from None
        if feats and len(row) != len(feats[0]):
            raise DatasetError(f"{content}:{lineno}: expected {len(feats[0])} features, got {len(row)}")
        if parts[0] in ids:
            raise DatasetError(f"{content}:{lineno}: duplicate id {parts[0]!r}")
        ids[parts[0]] = len(ids)
        feats.append(row)
        labels_raw.append(parts[-1])
    edges, dropped = [], 0
    for lineno, line in _lines(cites):
        parts = line.split()
        if len(parts) != 2:
            raise DatasetError(f"{cites}:{lineno}: expected two ids, got {line!r}")
        if parts[0] in ids and parts[1] in ids:
            edges.append((ids[parts[1]], ids[parts[0]]))
        else:
            dropped += 1
    if dropped:
        log.warning("dropped %d citations that reference unknown ids", dropped)
    labels, classes = _encode_labels(labels_raw)
    return np.array(edges, dtype=np.int64).reshape(-1, 2), np.array(feats), labels, classes


def write_canonical(out: Path, name: str, edges, feats, labels, classes, undirected: bool,
                    row_normalize: bool) -> Graph:
    g = from_edges(len(feats), edges, feats, labels, undirected=undirected, name=name)
    out.mkdir(parents=True, exist_ok=True)
    pairs = {(min(u, v), max(u, v)) for u, v in g.edge_set()} if undirected else g.edge_set()
    (out / "edges.txt").write_text("".join(f"{u} {v}\n" for u, v in sorted(pairs)), encoding="utf-8")
    np.savetxt(out / "features.csv", feats, delimiter=",", fmt="%.17g")
    np.savetxt(out / "labels.txt", labels, fmt="%d")
    if classes:
        (out / "classes.txt").write_text("".join(f"{c}\n" for c in classes), encoding="utf-8")
    manifest = {"name": name, "task": "transductive", "num_nodes": g.num_nodes, "num_features": g.num_features,
                "num_classes": g.num_classes, "undirected": undirected, "row_normalize": row_normalize}
    write_json(out / "manifest.json", manifest)
    back = load_dataset(out)
    if (back.num_nodes, back.num_entries, back.num_features) != (g.num_nodes, g.num_entries, g.num_features):
        raise DatasetError(f"{out}: round-trip check failed")
    return back


# ---------------------------------------------------------------- argument parsing

def _seed_list(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("no seeds given")
    return seeds


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="snag", description="Graph neural architecture search.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    c = sub.add_parser("convert", parents=[common], help="write a canonical dataset directory")
    c.add_argument("--format", choices=("edgelist", "linqs"), default="edgelist")
    c.add_argument("--edges", type=Path, help="edgelist: file of 'u v' lines")
    c.add_argument("--features", type=Path, help="edgelist: CSV, one row per node")
    c.add_argument("--labels", type=Path, help="edgelist: one label per line")
    c.add_argument("--input", type=Path, help="linqs: path prefix or directory of .content/.cites")
    c.add_argument("--name", default=None)
    c.add_argument("--directed", action="store_true")
    c.add_argument("--no-row-normalize", action="store_true")
    c.add_argument("--out", type=Path, required=True)

    for name, help_ in (("run", "run an experiment"), ("ablate", "compare with and without layer aggregators")):
        r = sub.add_parser(name, parents=[common], help=help_)
        r.add_argument("--config", type=Path, required=True)
        r.add_argument("--out", type=Path)
        r.add_argument("--seed", type=_seed_list, help="comma-separated seeds, overrides the config")
        r.add_argument("--budget", type=int)

    e = sub.add_parser("enumerate", parents=[common], help="list every genotype of a search space")
    e.add_argument("--config", type=Path, help="reads the search-space keys only")
    e.add_argument("--cap", type=int, default=100_000)
    return p


def _experiment_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.read(args.config)
    if args.seed is not None:
        cfg.seeds = args.seed
    if args.budget is not None:
        cfg.budget = args.budget
    if args.out is not None:
        cfg.out = str(args.out)
    cfg.validate()
    return cfg


def _cmd_convert(args) -> int:
    if args.format == "edgelist":
        missing = [f"--{k}" for k in ("edges", "features", "labels") if getattr(args, k) is None]
        if missing:
            raise ConfigError(f"edgelist conversion needs {', '.join(missing)}")
        parsed = convert_edgelist(args.edges, args.features, args.labels)
        name = args.name or args.edges.parent.name or "graph"
    else:
        if args.input is None:
            raise ConfigError("linqs conversion needs --input")
        parsed = convert_linqs(args.input)
        name = args.name or args.input.name
    g = write_canonical(args.out, name, *parsed, undirected=not args.directed,
                        row_normalize=not args.no_row_normalize)
    print(f"wrote {args.out}: {g.num_nodes} nodes, {g.num_entries} entries, {g.num_features} features, "
          f"{g.num_classes} classes")
    return EXIT_OK


def _cmd_run(args) -> int:
    cfg = _experiment_config(args)
    report = run_experiment(cfg, Path(cfg.out))
    print(f"{report['metric']}: {report['test_mean']:.4f} +- {report['test_std']:.4f} over "
          f"{len(report['runs'])} seeds -> {Path(cfg.out) / 'report.json'}")
    return EXIT_OK


def _cmd_ablate(args) -> int:
    cfg = _experiment_config(args)
    report = run_ablation(cfg, Path(cfg.out))
    for key in ("with", "without"):
        r = report[key]
        print(f"{key:>7}: {r['test_mean']:.4f} +- {r['test_std']:.4f}")
    return EXIT_OK


def _cmd_enumerate(args) -> int:
    cfg = ExperimentConfig.read(args.config) if args.config else ExperimentConfig()
    cfg.validate(need_dataset=False)
    space = cfg.space()
    size = space_size(space)
    if size > args.cap:
        print(f"search space has {size} genotypes, above the cap {args.cap}", file=sys.stderr)
        return EXIT_INVALID
    lines = sorted(encode(g) for g in enumerate_space(space, args.cap))
    sys.stdout.write("".join(line + "\n" for line in lines))
    print(f"total {size}")
    return EXIT_OK


COMMANDS = {"convert": _cmd_convert, "run": _cmd_run, "ablate": _cmd_ablate, "enumerate": _cmd_enumerate}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - report any runtime failure as exit 1
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
