"""Command line: generate or load data, attack, train with the defense, report.

Configuration is a single INI file; every key is optional and falls back to
the fixture defaults. Sections and keys::

    [dataset]  source (sbm|files), blocks, p_in, p_out, feature_dim,
               feature_noise, seed, train_fraction, val_fraction,
               edges, features, labels, split, reliable_fraction
    [model]    kind, layer_dims, activation, laplacian, num_heads,
               learning_rate, max_epochs, seed, snapshot_capacity
    [attack]   kind (greedy|random|none), rate, seed, shortlist, retrain_every
    [immune]   enabled, monitor, reliable_source (subgraph|exogenous),
               exogenous_seed, import_detectors, plus any ImmuneConfig field
    [output]   dir, metrics, edges, detectors, figures

Exit codes: 0 success, 1 invalid configuration, 2 failure during the run.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .attack import PerturbationSet, greedy_poison, random_perturb
from .data import SbmSpec, SplitSpec, load_graph, save_graph, sbm_generate, split_reliable, write_edges
from .fixture import FIXTURE_ARCH, FIXTURE_EPOCHS, FIXTURE_LR
from .graph import GraphData
from .models import ConfigError, ModelArch, TrainConfig
from .immune import (DetectorError, ExogenousSource, ImmuneConfig, export_detectors, import_detectors,
                     run_pipeline)

log = logging.getLogger("ftimmune")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
TIME_FIELDS = ("t_train", "t_defense", "t_checkpoint")


def strip_timing(records) -> list[dict]:
    """Records without wall-time fields; identical configs give identical output."""
    return [{k: v for k, v in r.items() if k not in TIME_FIELDS} for r in records]


@dataclass
class DatasetSection:
    source: str = "sbm"
    sbm: SbmSpec = field(default_factory=SbmSpec)
    edges: str | None = None
    features: str | None = None
    labels: str | None = None
    split: str | None = None
    split_spec: SplitSpec = field(default_factory=SplitSpec)
    reliable_fraction: float = 0.1


@dataclass
class AttackSection:
    kind: str = "greedy"
    rate: float = 0.2
    seed: int = 0
    shortlist: int = 8
    retrain_every: int | None = 20


@dataclass
class OutputSection:
    dir: str = "out"
    metrics: str = "metrics.jsonl"
    edges: str = "rectified.edges"
    detectors: str | None = None      # prefix; writes <prefix>.node and <prefix>.edge
    figures: bool = True


@dataclass
class RunConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    arch: ModelArch = FIXTURE_ARCH
    train: TrainConfig = field(default_factory=lambda: TrainConfig(learning_rate=FIXTURE_LR,
                                                                   max_epochs=FIXTURE_EPOCHS))
    attack: AttackSection = field(default_factory=AttackSection)
    immune: ImmuneConfig = field(default_factory=ImmuneConfig)
    monitor: bool = True
    reliable_source: str = "subgraph"
    exogenous_seed: int = 1
    import_detectors: str | None = None
    output: OutputSection = field(default_factory=OutputSection)

    def validate(self) -> None:
        """Cross-section checks; everything here runs before any compute."""
        if self.dataset.source not in ("sbm", "files"):
            raise ConfigError(f"[dataset] source must be 'sbm' or 'files', not {self.dataset.source!r}")
        if self.dataset.source == "files":
            for key in ("edges", "features", "labels"):
                path = getattr(self.dataset, key)
                if not path:
                    raise ConfigError(f"[dataset] {key} is required when source = files")
                if not os.path.exists(path):
                    raise ConfigError(f"[dataset] {key}: no such file {path!r}")
        if not 0 < self.dataset.reliable_fraction < 1:
            raise ConfigError("[dataset] reliable_fraction must be in (0, 1)")
        if self.attack.kind not in ("greedy", "random", "none"):
            raise ConfigError(f"[attack] kind must be greedy, random or none, not {self.attack.kind!r}")
        if not 0 <= self.attack.rate <= 1:
            raise ConfigError("[attack] rate must be in [0, 1]")
        if self.attack.kind == "greedy" and self.attack.rate > 0 and self.arch.kind != "GCN":
            raise ConfigError("[attack] the greedy attack needs a GCN surrogate ([model] kind = GCN)")
        imm = self.immune
        if imm.enabled and self.train.snapshot_capacity < imm.rollback_depth + 1:
            raise ConfigError(f"[model] snapshot_capacity {self.train.snapshot_capacity} < delta + 1 = "
                              f"{imm.rollback_depth + 1}")
        layer = self.arch.penultimate if imm.interface_layer is None else imm.interface_layer
        self.arch.check_interface(layer)
        if self.reliable_source not in ("subgraph", "exogenous"):
            raise ConfigError("[immune] reliable_source must be 'subgraph' or 'exogenous'")
        if self.import_detectors:
            for suffix in (".node", ".edge"):
                if not os.path.exists(self.import_detectors + suffix):
                    raise ConfigError(f"[immune] import_detectors: no such file "
                                      f"{self.import_detectors + suffix!r}")


# ---------------------------------------------------------------- parsing

def _ints(s: str) -> tuple:
    return tuple(int(x) for x in s.replace(",", " ").split())


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _optional(conv):
    def f(s: str):
        return None if s.strip().lower() in ("", "none") else conv(s)
    return f


def _converter(ftype):
    # dataclass field annotations are strings under postponed evaluation
    t = str(ftype).replace(" ", "")
    base = {"int": int, "float": float, "bool": _bool, "str": str}
    if t in base:
        return base[t]
    for name, conv in base.items():
        if t in (f"{name}|None", f"None|{name}"):
            return _optional(conv)
    return None


def _section(parser, name: str, cls, known: dict, defaults: dict | None = None):
    """Build dataclass ``cls`` from section ``name``; ``known`` maps extra keys to converters."""
    kw = dict(defaults or {})
    if not parser.has_section(name):
        return kw, {}
    extra = {}
    types = {f.name: f.type for f in fields(cls)} if cls is not None else {}
    for key, raw in parser.items(name):
        try:
            if key in known:
                extra[key] = known[key](raw)
            elif key in types and _converter(types[key]) is not None:
                kw[key] = _converter(types[key])(raw)
            else:
                raise ConfigError(f"[{name}] unknown key {key!r}")
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"[{name}] {key}: {exc}") from None
    return kw, extra


def parse_config(text: str, base_dir: str = ".") -> RunConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax: {exc}") from None
    allowed = {"dataset", "model", "attack", "immune", "output"}
    for sec in parser.sections():
        if sec not in allowed:
            raise ConfigError(f"unknown section [{sec}]")

    def path(s):
        s = s.strip()
        return s if os.path.isabs(s) else os.path.join(base_dir, s)

    try:
        sbm_kw, ds = _section(parser, "dataset", SbmSpec, {
            "source": str, "blocks": lambda s: list(_ints(s)), "edges": path, "features": path,
            "labels": path, "split": path, "reliable_fraction": float})
        if "blocks" in ds:
            sbm_kw["blocks"] = ds.pop("blocks")
        sbm = SbmSpec(**sbm_kw)
        dataset = DatasetSection(sbm=sbm, split_spec=SplitSpec(sbm.train_fraction, sbm.val_fraction, sbm.seed),
                                 **ds)

        model_kw, extra = _section(parser, "model", None, {
            "kind": str, "layer_dims": _ints, "activation": str, "laplacian": str, "num_heads": int,
            "learning_rate": float, "max_epochs": int, "seed": int, "snapshot_capacity": int})
        arch_keys = ("kind", "layer_dims", "activation", "laplacian", "num_heads")
        arch_kw = {k: extra[k] for k in arch_keys if k in extra}
        if "activation" in arch_kw and "," in arch_kw["activation"]:
            arch_kw["activation"] = tuple(a.strip() for a in arch_kw["activation"].split(","))
        arch = replace(FIXTURE_ARCH, **arch_kw)
        train_kw = {"learning_rate": FIXTURE_LR, "max_epochs": FIXTURE_EPOCHS}
        train_kw.update({k: extra[k] for k in ("learning_rate", "max_epochs", "seed", "snapshot_capacity")
                         if k in extra})
        train = TrainConfig(**train_kw)

        atk_kw, _ = _section(parser, "attack", AttackSection, {})
        attack = AttackSection(**atk_kw)

        imm_kw, imm_extra = _section(parser, "immune", ImmuneConfig, {
            "monitor": _bool, "reliable_source": str, "exogenous_seed": int,
            "import_detectors": _optional(path)})
        imm_kw.setdefault("seed", train.seed)
        immune = ImmuneConfig(**imm_kw)

        out_kw, _ = _section(parser, "output", OutputSection, {})
        if "dir" in out_kw:
            out_kw["dir"] = path(out_kw["dir"])
        output = OutputSection(**out_kw)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None
    cfg = RunConfig(dataset, arch, train, attack, immune, output=output, **imm_extra)
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, os.path.dirname(os.path.abspath(path)))


def with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    """Override every seed in the configuration."""
    ds = replace(cfg.dataset, sbm=replace(cfg.dataset.sbm, seed=seed),
                 split_spec=replace(cfg.dataset.split_spec, seed=seed))
    return replace(cfg, dataset=ds, train=replace(cfg.train, seed=seed),
                   attack=replace(cfg.attack, seed=seed), immune=replace(cfg.immune, seed=seed))


# ---------------------------------------------------------------- stages

def build_graph(cfg: RunConfig) -> GraphData:
    ds = cfg.dataset
    if ds.source == "sbm":
        g = sbm_generate(ds.sbm)
    else:
        g = load_graph(ds.edges, ds.features, ds.labels, ds.split or ds.split_spec)
    if not g.reliable_mask.any():
        g = split_reliable(g, ds.reliable_fraction, seed=ds.sbm.seed)
    return g


def build_attack(g: GraphData, cfg: RunConfig) -> tuple[GraphData, PerturbationSet | None]:
    a = cfg.attack
    if a.kind == "none" or a.rate == 0:
        return g, None
    if a.kind == "random":
        return random_perturb(g, a.rate, seed=a.seed)
    budget = int(round(a.rate * len(g.edges)))
    surrogate = replace(cfg.train, seed=a.seed)
    return greedy_poison(g, cfg.arch, budget, seed=a.seed, train_cfg=surrogate, shortlist=a.shortlist,
                         retrain_every=a.retrain_every)


class MetricsWriter:
    """Line-delimited JSON records, flushed one at a time."""

    def __init__(self, path):
        self.path = path
        self.fh = open(path, "w")
        self.records: list = []

    def __call__(self, rec: dict) -> None:
        self.records.append(rec)
        self.fh.write(json.dumps(rec, default=_json_default) + "\n")
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serialisable: {type(o).__name__}")


def execute(cfg: RunConfig, out_dir: str, detectors=None, export_prefix: str | None = None,
            figures: bool | None = None, monitor: bool | None = None, immune: ImmuneConfig | None = None,
            tag: str = "") -> dict:
    """dataset -> attack -> defended training -> artifacts; returns a summary dict."""
    os.makedirs(out_dir, exist_ok=True)
    immune = immune or cfg.immune
    metrics_path = os.path.join(out_dir, tag + cfg.output.metrics)
    sink = MetricsWriter(metrics_path)
    try:
        g = build_graph(cfg)
        gp, ps = build_attack(g, cfg)
        if ps is not None:
            with open(os.path.join(out_dir, tag + "perturbations.txt"), "w") as fh:
                fh.write(ps.to_text())
        source = "subgraph"
        if cfg.reliable_source == "exogenous":
            gx = sbm_generate(replace(cfg.dataset.sbm, seed=cfg.exogenous_seed))
            source = ExogenousSource(gx, seed=cfg.exogenous_seed)
        if detectors is None and cfg.import_detectors:
            detectors = read_detector_pair(cfg.import_detectors, cfg, immune)
        res = run_pipeline(gp, cfg.arch, cfg.train, immune, reliable_source=source, detectors=detectors,
                           ground_truth=ps, sink=sink, monitor=cfg.monitor if monitor is None else monitor)
    except Exception as exc:
        sink({"type": "error", "error": f"{type(exc).__name__}: {exc}"})
        raise
    finally:
        sink.close()
    write_edges(os.path.join(out_dir, tag + cfg.output.edges), res.graph.sorted_edges())
    prefix = export_prefix or cfg.output.detectors
    if prefix and res.node_detectors is not None:
        prefix = prefix if os.path.isabs(prefix) else os.path.join(out_dir, prefix)
        export_detectors(res.node_detectors, prefix + ".node")
        export_detectors(res.edge_detectors, prefix + ".edge")
    if cfg.output.figures if figures is None else figures:
        from . import report
        report.write_run_report(sink.records, out_dir, tag)
    return {"final": sink.records[-1], "records": sink.records, "result": res, "perturbations": ps}


def read_detector_pair(prefix: str, cfg: RunConfig, immune: ImmuneConfig):
    layer = cfg.arch.penultimate if immune.interface_layer is None else immune.interface_layer
    expect = (layer, immune.varrho, cfg.arch.layer_dims[layer])
    return import_detectors(prefix + ".node", expect), import_detectors(prefix + ".edge", expect)


# ---------------------------------------------------------------- commands

def _prepare(args) -> tuple[RunConfig, str]:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = with_seed(cfg, args.seed)
    cfg.validate()
    out = args.out or cfg.output.dir
    return cfg, out


def cmd_run(args) -> int:
    cfg, out = _prepare(args)
    summary = execute(cfg, out)
    _print_final(summary["final"])
    return EXIT_OK


def cmd_export(args) -> int:
    cfg, out = _prepare(args)
    if not cfg.immune.enabled:
        raise ConfigError("export-detectors needs the defense enabled")
    summary = execute(cfg, out, export_prefix=args.to)
    if summary["result"].node_detectors is None:
        print("no checkpoint produced detectors; nothing exported", file=sys.stderr)
        return EXIT_RUNTIME
    _print_final(summary["final"])
    print(f"detectors written to {args.to}.node and {args.to}.edge")
    return EXIT_OK


def cmd_import(args) -> int:
    cfg, out = _prepare(args)
    if not cfg.immune.enabled:
        raise ConfigError("import-detectors needs the defense enabled")
    for suffix in (".node", ".edge"):
        if not os.path.exists(args.source + suffix):
            raise ConfigError(f"no such detector file {args.source + suffix!r}")
    try:
        detectors = read_detector_pair(args.source, cfg, cfg.immune)
    except DetectorError as exc:
        raise ConfigError(str(exc)) from None
    summary = execute(cfg, out, detectors=detectors)
    _print_final(summary["final"])
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg, out = _prepare(args)
    os.makedirs(out, exist_ok=True)
    g = build_graph(cfg)
    paths = save_graph(g, os.path.join(out, "clean"))
    gp, ps = build_attack(g, cfg)
    if ps is not None:
        paths.update({f"poisoned_{k}": v for k, v in save_graph(gp, os.path.join(out, "poisoned")).items()})
        with open(os.path.join(out, "perturbations.txt"), "w") as fh:
            fh.write(ps.to_text())
    for k, v in sorted(paths.items()):
        print(f"{k}\t{v}")
    return EXIT_OK


def bracket(t: float, base: float) -> str:
    """Relative overhead as ``[+x%]``."""
    pct = 100.0 * (t - base) / base if base > 0 else float("nan")
    return f"[{pct:+.1f}%]"


def bench(cfg: RunConfig, out: str, repeats: int = 1, figures: bool = True) -> list[dict]:
    """Time undefended, monitoring-only and full-defense runs on the same graph."""
    g = build_graph(cfg)
    gp, ps = build_attack(g, cfg)
    variants = [("undefended", replace(cfg.immune, enabled=False), False),
                ("monitoring-only", replace(cfg.immune, enabled=False), True),
                ("defended", replace(cfg.immune, enabled=True), True)]
    rows = []
    for name, imm, mon in variants:
        best = None
        for _ in range(repeats):
            t0 = time.perf_counter()
            res = run_pipeline(gp, cfg.arch, cfg.train, imm, ground_truth=ps, monitor=mon)
            wall = time.perf_counter() - t0
            if best is None or wall < best[0]:
                best = (wall, res)
        wall, res = best
        ep = [r for r in res.records if r["type"] == "epoch"]
        cp = [r for r in res.records if r["type"] == "checkpoint"]
        rows.append({"variant": name, "wall": wall, "train": sum(r["t_train"] for r in ep),
                     "monitor": sum(r["t_defense"] for r in ep),
                     "checkpoints": sum(r.get("t_checkpoint", 0.0) for r in cp),
                     "n_checkpoints": len(cp), "test_acc": res.records[-1]["test_acc"]})
    base = rows[0]["wall"]
    for r in rows:
        r["overhead"] = bracket(r["wall"], base)
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "bench.tsv"), "w") as fh:
        cols = ["variant", "wall", "train", "monitor", "checkpoints", "n_checkpoints", "test_acc", "overhead"]
        fh.write("\t".join(cols) + "\n")
        for r in rows:
            fh.write("\t".join(f"{r[c]:.4f}" if isinstance(r[c], float) else str(r[c]) for c in cols) + "\n")
    if figures:
        from . import report
        report.write_bench_figure(rows, out)
    return rows


def cmd_bench(args) -> int:
    cfg, out = _prepare(args)
    rows = bench(cfg, out, repeats=args.repeats)
    for r in rows:
        print(f"{r['variant']:<16} {r['wall']:8.3f}s {r['overhead']:>10}  train {r['train']:.3f}s  "
              f"monitor {r['monitor']:.3f}s  checkpoints {r['checkpoints']:.3f}s ({r['n_checkpoints']})  "
              f"test_acc {r['test_acc']:.4f}")
    return EXIT_OK


def _print_final(final: dict) -> None:
    keys = ["epoch", "test_acc", "val_acc", "num_edges", "removed", "restored", "precision_inserted",
            "recall_inserted"]
    print("\t".join(k for k in keys if k in final))
    print("\t".join(f"{final[k]:.4f}" if isinstance(final[k], float) else str(final[k]) for k in keys if k in final))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ftimmune", description="Graph training with trajectory-based poisoning defense.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("-c", "--config", help="INI configuration file (defaults: the SBM fixture)")
        sp.add_argument("-s", "--seed", type=int, help="override every seed in the configuration")
        sp.add_argument("-o", "--out", help="output directory (overrides [output] dir)")
        sp.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    sp = sub.add_parser("run", help="attack, train with the defense and write metrics")
    common(sp)
    sp.set_defaults(func=cmd_run)
    sp = sub.add_parser("bench", help="wall-clock overhead of monitoring and of the full defense")
    common(sp)
    sp.add_argument("--repeats", type=int, default=1, help="keep the fastest of this many runs per variant")
    sp.set_defaults(func=cmd_bench)
    sp = sub.add_parser("export-detectors", help="run and export the final detector sets")
    common(sp)
    sp.add_argument("--to", required=True, help="path prefix; writes PREFIX.node and PREFIX.edge")
    sp.set_defaults(func=cmd_export)
    sp = sub.add_parser("import-detectors", help="run with imported detectors instead of producing them")
    common(sp)
    sp.add_argument("--from", dest="source", required=True, help="prefix given to export-detectors")
    sp.set_defaults(func=cmd_import)
    sp = sub.add_parser("gen-data", help="write the clean (and attacked) graph as text files")
    common(sp)
    sp.set_defaults(func=cmd_gen_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DetectorError) as exc:
        print(json.dumps({"error": "config", "message": str(exc)}), file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        log.debug("run failed", exc_info=True)
        print(json.dumps({"error": "runtime", "type": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
