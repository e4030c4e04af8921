"""Config-driven experiment runs: config resolution, per-seed execution, outputs.

A run config is a JSON object::

    {
      "name": "scm_spurious",
      "seeds": [0, 1, 2],
      "output_dir": "runs/scm_spurious",
      "dataset": {"kind": "scm" | "glyphs" | "load", "params": {...}, "path": ...,
                  "train_domains": [...], "test_domains": [...], "val_fraction": 0.2},
      "train": {TrainConfig fields shared by every classifier},
      "phase1": {TrainConfig fields for the contrastive phase},
      "experiments": [{"name": ..., "mode": ..., "train": {...}, "phase1": {...}}],
      "eval": {"match_metrics": true}
    }

Generated datasets use ``params.seed + run seed``; training and the
validation split use the run seed.
"""

from __future__ import annotations

import contextlib
import copy
import csv
import io
import json
import logging
import os
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path

import numpy as np

from . import matchstore, metrics
from .datagen import GlyphConfig, MultiDomainDataset, ScmConfig, generate_glyphs, generate_scm, load_dataset, split
from .trainer import (
    TrainConfig,
    TrainReport,
    fraction_match_experiment,
    train_erm,
    train_matchdg_phase1,
    train_matchdg_phase2,
    train_mdghybrid,
    train_perfmatch,
    train_randmatch,
)

logger = logging.getLogger(__name__)

EXPERIMENT_MODES = ("erm", "randmatch", "perfmatch", "matchdg", "matchdg_phase1", "mdghybrid", "fraction")
PHASE1_MODES = ("matchdg", "matchdg_phase1", "mdghybrid")
REPORT_FORMAT = "cmdg-report/1"
SUMMARY_FORMAT = "cmdg-summary/1"
TRACE_COLUMNS = ("run", "epoch", "loss", "penalty", "train_acc", "val_acc")
SUMMARY_METRICS = ("ood_accuracy_pct", "overlap_pct", "top10_overlap_pct", "mean_rank")
TOP_KEYS = {"name", "seeds", "output_dir", "dataset", "train", "phase1", "experiments", "eval"}
DATASET_KEYS = {"kind", "params", "path", "train_domains", "test_domains", "val_fraction"}


class ConfigError(ValueError):
    """Invalid or unresolvable run configuration."""


# ------------------------------------------------------------------ configs


def preset_names() -> list[str]:
    root = resources.files("cmdg") / "presets"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def load_config(ref: str) -> dict:
    """Read a config file, or a bundled preset when ``ref`` names one."""
    path = Path(ref)
    if path.is_file():
        text, base = path.read_text(), path.resolve().parent
    elif ref in preset_names():
        text, base = (resources.files("cmdg") / "presets" / f"{ref}.json").read_text(), None
    else:
        raise ConfigError(f"no config file or preset named {ref!r}; presets: {preset_names()}")
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{ref}: invalid JSON: {e}") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{ref}: top level must be an object")
    ds = cfg.get("dataset", {})
    if base is not None and isinstance(ds, dict) and ds.get("kind") == "load" and "path" in ds:
        ds["path"] = str((base / ds["path"]).resolve()) if not Path(ds["path"]).is_absolute() else ds["path"]
    return cfg


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: dict, assignments: list[str]) -> dict:
    """Apply ``dotted.key=value`` overrides; values parse as JSON, else as strings.

    Integer path parts index into lists, e.g. ``experiments.0.train.epochs=5``.
    """
    cfg = copy.deepcopy(cfg)
    for item in assignments:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not key=value")
        parts = key.split(".")
        node = cfg
        for p in parts[:-1]:
            if isinstance(node, list):
                try:
                    node = node[int(p)]
                except (ValueError, IndexError):
                    raise ConfigError(f"override {item!r}: bad list index {p!r}") from None
            else:
                node = node.setdefault(p, {})
            if not isinstance(node, (dict, list)):
                raise ConfigError(f"override {item!r}: {p!r} is not a section")
        last = parts[-1]
        if isinstance(node, list):
            try:
                node[int(last)] = _parse_value(raw)
            except (ValueError, IndexError):
                raise ConfigError(f"override {item!r}: bad list index {last!r}") from None
        else:
            node[last] = _parse_value(raw)
    return cfg


def _dataclass_kwargs(cls, params: dict, what: str) -> dict:
    known = {f.name for f in fields(cls)}
    unknown = set(params) - known
    if unknown:
        raise ConfigError(f"unknown {what} keys: {sorted(unknown)}")
    return dict(params)


def _train_config(base: dict, over: dict, **fixed) -> TrainConfig:
    merged = {**base, **over, **fixed}
    try:
        return TrainConfig.from_dict(merged)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None


def resolve_config(raw: dict) -> dict:
    """Fill defaults and validate everything that can be checked without data."""
    cfg = copy.deepcopy(raw)
    unknown = set(cfg) - TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    cfg.setdefault("name", "run")
    cfg.setdefault("seeds", [0])
    cfg.setdefault("output_dir", f"runs/{cfg['name']}")
    cfg.setdefault("train", {})
    cfg.setdefault("phase1", {})
    cfg.setdefault("eval", {})
    cfg["eval"].setdefault("match_metrics", True)
    if set(cfg["eval"]) - {"match_metrics"}:
        raise ConfigError(f"unknown eval keys: {sorted(set(cfg['eval']) - {'match_metrics'})}")

    seeds = cfg["seeds"]
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds):
        raise ConfigError("seeds must be a non-empty list of integers")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds must be distinct")

    ds = cfg.get("dataset")
    if not isinstance(ds, dict):
        raise ConfigError("dataset section is required")
    if set(ds) - DATASET_KEYS:
        raise ConfigError(f"unknown dataset keys: {sorted(set(ds) - DATASET_KEYS)}")
    kind = ds.get("kind")
    ds.setdefault("params", {})
    ds.setdefault("val_fraction", 0.2)
    if kind == "scm":
        try:
            ScmConfig(**_dataclass_kwargs(ScmConfig, ds["params"], "scm"))
        except (TypeError, ValueError) as e:
            raise ConfigError(f"dataset.params: {e}") from None
    elif kind == "glyphs":
        try:
            GlyphConfig(**_dataclass_kwargs(GlyphConfig, ds["params"], "glyph"))
        except (TypeError, ValueError) as e:
            raise ConfigError(f"dataset.params: {e}") from None
    elif kind == "load":
        if "path" not in ds:
            raise ConfigError("dataset kind 'load' needs a path")
    else:
        raise ConfigError(f"dataset.kind must be scm, glyphs or load, got {kind!r}")
    if not 0 <= ds["val_fraction"] < 1:
        raise ConfigError("dataset.val_fraction must be in [0, 1)")

    exps = cfg.get("experiments")
    if not isinstance(exps, list) or not exps:
        raise ConfigError("experiments must be a non-empty list")
    names = set()
    for e in exps:
        if not isinstance(e, dict) or "name" not in e or "mode" not in e:
            raise ConfigError("each experiment needs a name and a mode")
        if set(e) - {"name", "mode", "train", "phase1"}:
            raise ConfigError(f"experiment {e['name']!r}: unknown keys {sorted(set(e) - {'name', 'mode', 'train', 'phase1'})}")
        if e["name"] in names:
            raise ConfigError(f"duplicate experiment name {e['name']!r}")
        names.add(e["name"])
        if e["mode"] not in EXPERIMENT_MODES:
            raise ConfigError(f"experiment {e['name']!r}: mode must be one of {EXPERIMENT_MODES}")
        e.setdefault("train", {})
        e.setdefault("phase1", {})
        # Build every TrainConfig once so bad fields fail before any training.
        if e["mode"] != "matchdg_phase1":
            _train_config(cfg["train"], e["train"], mode=_classifier_mode(e["mode"]), seed=0)
        if e["mode"] in PHASE1_MODES:
            _phase1_config(cfg, e, 0)
    return cfg


def _classifier_mode(mode: str) -> str:
    return "matchdg_phase2" if mode == "matchdg" else mode


def _phase1_config(cfg: dict, exp: dict, seed: int) -> TrainConfig:
    base = {"early_stop_metric": None, **cfg["phase1"]}
    return _train_config(base, exp["phase1"], mode="matchdg_phase1", seed=seed)


# ------------------------------------------------------------------ datasets


def build_dataset(ds_cfg: dict, seed: int) -> MultiDomainDataset:
    kind, params = ds_cfg["kind"], dict(ds_cfg.get("params", {}))
    if kind == "scm":
        params["seed"] = params.get("seed", 0) + seed
        return generate_scm(ScmConfig(**params))
    if kind == "glyphs":
        params["seed"] = params.get("seed", 0) + seed
        return generate_glyphs(GlyphConfig(**params))
    try:
        return load_dataset(ds_cfg["path"])
    except (OSError, KeyError, ValueError) as e:
        raise ConfigError(f"cannot load dataset {ds_cfg['path']!r}: {e}") from None


def domain_split(ds: MultiDomainDataset, ds_cfg: dict) -> tuple[list[str], list[str]]:
    """Resolve train/test domain names; defaults come from the generator config."""
    names = list(ds.domain_names)
    test = ds_cfg.get("test_domains")
    if test is None:
        if ds_cfg["kind"] == "scm":
            test_idx = ScmConfig(**ds_cfg.get("params", {})).test_domain_set()
            test = [names[i] for i in sorted(test_idx)]
        else:
            test = []
    train = ds_cfg.get("train_domains") or [n for n in names if n not in test]
    for n in list(train) + list(test):
        if n not in names:
            raise ConfigError(f"unknown domain {n!r}; have {names}")
    if set(train) & set(test):
        raise ConfigError("train and test domains overlap")
    if len(train) < 1:
        raise ConfigError("need at least one training domain")
    return list(train), list(test)


# ------------------------------------------------------------------- running


@dataclass
class SeedResult:
    seed: int
    report: dict
    trace: list[tuple]
    matches: matchstore.MatchMatrix | None
    timings: dict


def _metrics_dict(m: metrics.MetricsReport) -> dict:
    return m.to_dict()


def run_seed(cfg: dict, seed: int) -> SeedResult:
    """Train and evaluate every experiment of ``cfg`` for one seed."""
    ds = build_dataset(cfg["dataset"], seed)
    train_names, test_names = domain_split(ds, cfg["dataset"])
    train, val, test = split(ds, train_names, test_names, cfg["dataset"]["val_fraction"], seed)
    perfect = matchstore.perfect_matches(train) if train.has_objects() else None
    want_match = cfg["eval"]["match_metrics"] and perfect is not None

    report = {
        "format": REPORT_FORMAT,
        "name": cfg["name"],
        "seed": seed,
        "config": {k: v for k, v in cfg.items() if k != "output_dir"},
        "dataset": {
            "train_domains": train_names,
            "test_domains": test_names,
            "sizes": {"train": train.sizes(), "val": val.sizes(), "test": test.sizes() if test_names else []},
            "random_overlap_pct": metrics.random_overlap_expectation(train, perfect) if perfect is not None else None,
        },
        "experiments": {},
    }
    trace: list[tuple] = []
    timings: dict[str, float] = {}
    phase1_cache: dict[str, object] = {}
    first_matches = inferred_matches = None

    for exp in cfg["experiments"]:
        name, mode = exp["name"], exp["mode"]
        t0 = time.perf_counter()
        entry: dict = {"mode": mode}
        p1 = None
        if mode in PHASE1_MODES:
            p1cfg = _phase1_config(cfg, exp, seed)
            key = json.dumps(p1cfg.to_dict(), sort_keys=True)
            if key not in phase1_cache:
                phase1_cache[key] = train_matchdg_phase1(train, p1cfg, val)
            p1 = phase1_cache[key]
            entry["phase1"] = p1.report.to_dict()
            trace.extend((f"{name}/phase1", *row) for row in p1.report.trace_rows())
            if inferred_matches is None:
                inferred_matches = p1.matches

        rep: TrainReport | None = None
        if mode != "matchdg_phase1":
            tcfg = _train_config(cfg["train"], exp["train"], mode=_classifier_mode(mode), seed=seed)
            if mode == "erm":
                rep = train_erm(train, tcfg, val)
            elif mode == "randmatch":
                rep = train_randmatch(train, tcfg, val)
            elif mode == "perfmatch":
                rep = train_perfmatch(train, tcfg, val)
            elif mode == "fraction":
                rep = fraction_match_experiment(train, tcfg.fraction, tcfg, val)
            elif mode == "matchdg":
                rep = train_matchdg_phase2(train, p1, tcfg, val)
            else:
                rep = train_mdghybrid(train, p1, perfect, tcfg, val)
            entry["train"] = rep.to_dict()
            trace.extend((name, *row) for row in rep.trace_rows())
            if first_matches is None:
                first_matches = rep.matches

        m = metrics.MetricsReport()
        if rep is not None and test_names:
            m.domain_accuracy = metrics.accuracy(rep.net, test)
            m.ood_accuracy = metrics.pooled_accuracy(rep.net, test)
        if want_match:
            # Match quality of the representation that produced the matches:
            # the contrastive network for MatchDG variants, else the classifier.
            net = p1.net if p1 is not None else rep.net
            learned = p1.matches if p1 is not None else None
            q = metrics.match_quality(train, metrics.representations(net, train), perfect, learned)
            m.overlap_pct, m.top10_overlap_pct, m.mean_rank = q.overlap_pct, q.top10_overlap_pct, q.mean_rank
        entry["metrics"] = _metrics_dict(m)
        report["experiments"][name] = entry
        timings[name] = time.perf_counter() - t0
        logger.info("seed %d %s: %s", seed, name, entry["metrics"])

    matches = inferred_matches if inferred_matches is not None else first_matches
    return SeedResult(seed, report, trace, matches, timings)


def summarize(cfg: dict, reports: list[dict]) -> dict:
    """Per-experiment mean/std (population) across seeds."""
    modes = {}
    for exp in cfg["experiments"]:
        name = exp["name"]
        stats = {"mode": exp["mode"]}
        for key in SUMMARY_METRICS:
            src = "ood_accuracy" if key == "ood_accuracy_pct" else key
            vals = [r["experiments"][name]["metrics"][src] for r in reports]
            if any(v is None for v in vals):
                stats[key] = None
                continue
            vals = [100.0 * v for v in vals] if key == "ood_accuracy_pct" else vals
            stats[key] = {"mean": float(np.mean(vals)), "std": float(np.std(vals)), "values": [float(v) for v in vals]}
        modes[name] = stats
    order = [e["name"] for e in cfg["experiments"]]
    return {"format": SUMMARY_FORMAT, "name": cfg["name"], "seeds": [r["seed"] for r in reports], "order": order, "modes": modes}


# ------------------------------------------------------------------- output


@contextlib.contextmanager
def atomic_path(path: Path):
    """Yield a temporary sibling of ``path`` that replaces it on success."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    os.close(fd)
    tmp = Path(tmp)
    try:
        yield tmp
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def atomic_write_text(path: Path, text: str) -> None:
    with atomic_path(path) as tmp:
        tmp.write_text(text)


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def trace_csv(rows: list[tuple]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for row in rows:
        w.writerow(["" if v is None else v for v in row])
    return buf.getvalue()


def write_seed_outputs(out: Path, res: SeedResult) -> None:
    atomic_write_text(out / f"report_{res.seed}.json", dumps(res.report))
    atomic_write_text(out / f"trace_{res.seed}.csv", trace_csv(res.trace))
    if res.matches is not None:
        target = out / f"matches_{res.seed}.csv"
        with tempfile.TemporaryDirectory(dir=out) as tmpdir:
            tmp = Path(tmpdir) / target.name
            matchstore.save_matches(res.matches, tmp)
            os.replace(tmp.with_suffix(".json"), target.with_suffix(".json"))
            os.replace(tmp, target)


def thread_count() -> int:
    raw = os.environ.get("CMDG_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"CMDG_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"CMDG_THREADS must be a positive integer, got {raw!r}")
    return n


def run_config(cfg: dict, out_dir: str | Path | None = None) -> dict:
    """Run every seed (up to ``CMDG_THREADS`` in parallel) and write all outputs.

    Returns the summary.  Reports, traces and summaries are deterministic;
    wall-clock times and timestamps go to ``metadata.json`` only.
    """
    cfg = resolve_config(cfg)
    out = Path(out_dir if out_dir is not None else cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    seeds = cfg["seeds"]
    workers = min(thread_count(), len(seeds))
    started = datetime.now(timezone.utc).isoformat()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_seed, [cfg] * len(seeds), seeds))
    else:
        results = [run_seed(cfg, s) for s in seeds]
    for res in results:
        write_seed_outputs(out, res)
    summary = summarize(cfg, [r.report for r in results])
    atomic_write_text(out / "summary.json", dumps(summary))
    meta = {
        "started": started,
        "finished": datetime.now(timezone.utc).isoformat(),
        "workers": workers,
        "wall_clock": {str(r.seed): r.timings for r in results},
    }
    atomic_write_text(out / "metadata.json", dumps(meta))
    return summary


def generate_dataset(cfg: dict, out_dir: str | Path, seed: int | None = None) -> Path:
    """Write the dataset of ``cfg`` (first seed by default) in the binary layout."""
    from .datagen import save_dataset

    cfg = resolve_config(cfg)
    seed = cfg["seeds"][0] if seed is None else seed
    ds = build_dataset(cfg["dataset"], seed)
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        raise ConfigError(f"{out} exists and is not empty")
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    save_dataset(ds, tmp)
    if out.exists():
        out.rmdir()
    os.replace(tmp, out)
    return out


# ------------------------------------------------------------------ compare


def load_summary(path: str | Path) -> dict:
    try:
        s = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"{path}: cannot read summary: {e}") from None
    if not isinstance(s, dict) or s.get("format") != SUMMARY_FORMAT or not isinstance(s.get("modes"), dict):
        raise ConfigError(f"{path}: not a {SUMMARY_FORMAT} summary")
    for name, stats in s["modes"].items():
        if not isinstance(stats, dict):
            raise ConfigError(f"{path}: mode {name!r} is not an object")
        for key in SUMMARY_METRICS:
            v = stats.get(key)
            if v is not None and not (isinstance(v, dict) and {"mean", "std"} <= set(v)):
                raise ConfigError(f"{path}: mode {name!r} field {key!r} needs mean and std")
    return s


def validate_report(rep: dict) -> None:
    """Raise ``ValueError`` when ``rep`` does not follow the report layout."""
    if rep.get("format") != REPORT_FORMAT:
        raise ValueError(f"not a {REPORT_FORMAT} report")
    for key in ("name", "seed", "config", "dataset", "experiments"):
        if key not in rep:
            raise ValueError(f"report lacks {key!r}")
    metric_keys = set(metrics.MetricsReport().to_dict())
    for name, entry in rep["experiments"].items():
        if entry.get("mode") not in EXPERIMENT_MODES:
            raise ValueError(f"experiment {name!r}: bad mode")
        if set(entry.get("metrics", {})) != metric_keys:
            raise ValueError(f"experiment {name!r}: metrics keys differ from {sorted(metric_keys)}")
        if entry["mode"] != "matchdg_phase1" and "train" not in entry:
            raise ValueError(f"experiment {name!r}: missing train record")
        if entry["mode"] in PHASE1_MODES and "phase1" not in entry:
            raise ValueError(f"experiment {name!r}: missing phase1 record")


def compare_rows(summaries: list[tuple[str, dict]]) -> list[dict]:
    rows = []
    for label, s in summaries:
        names = [n for n in s.get("order", []) if n in s["modes"]]
        names += sorted(n for n in s["modes"] if n not in names)
        for name in names:
            stats = s["modes"][name]
            row = {"summary": label, "mode": name}
            for key in SUMMARY_METRICS:
                v = stats.get(key)
                row[key] = None if v is None else (v["mean"], v["std"])
            rows.append(row)
    return rows


def _cell(v, with_std: bool) -> str:
    if v is None:
        return "-"
    return f"{v[0]:.2f} ± {v[1]:.2f}" if with_std else f"{v[0]:.2f}"


def format_table(rows: list[dict]) -> str:
    header = ["summary", "mode", "ood_acc", "overlap", "top10", "mean_rank"]
    body = [
        [
            r["summary"],
            r["mode"],
            _cell(r["ood_accuracy_pct"], True),
            _cell(r["overlap_pct"], False),
            _cell(r["top10_overlap_pct"], False),
            _cell(r["mean_rank"], False),
        ]
        for r in rows
    ]
    widths = [max(len(x) for x in col) for col in zip(header, *body)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    for b in body:
        cells = [b[0].ljust(widths[0]), b[1].ljust(widths[1])] + [c.rjust(w) for c, w in zip(b[2:], widths[2:])]
        lines.append("  ".join(cells).rstrip())
    return "\n".join(lines) + "\n"


def format_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["summary", "mode", "ood_mean", "ood_std", "overlap", "top10", "mean_rank"])
    for r in rows:
        ood = r["ood_accuracy_pct"]
        w.writerow(
            [r["summary"], r["mode"]]
            + (["-", "-"] if ood is None else [f"{ood[0]:.4f}", f"{ood[1]:.4f}"])
            + ["-" if r[k] is None else f"{r[k][0]:.4f}" for k in ("overlap_pct", "top10_overlap_pct", "mean_rank")]
        )
    return buf.getvalue()
