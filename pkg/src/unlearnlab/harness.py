"""Experiment grid: train once per (scenario, seed), split per rate, run
retrain plus every configured unlearner, evaluate, and emit tables.

The ledger (``ledger.json``) and ``results.csv`` are rewritten atomically
after every cell, so an interrupted run resumes where it stopped.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import time
import traceback
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from . import rng as rngmod
from .data import SCENARIOS, Dataset, generate_synthetic, load_idx_dataset, load_manifest_dataset, split_forget
from .errors import ConfigError, DivergenceError, EmissionError
from .metrics import METRIC_KEYS, MetricsReport, avg_gap, evaluate_all
from .models import Architecture, ModelState, TrainConfig, build_model, load_checkpoint, save_checkpoint, train
from .unlearn import (
    UnlearnConfig,
    compute_saliency_mask,
    gradient_ascent_unlearn,
    random_label_unlearn,
    retrain,
    salun_unlearn,
    save_mask,
)

log = logging.getLogger(__name__)

CSV_COLUMNS = ("method", "dataset", "rate", "seed", "UA", "RA", "TA", "MIA", "AG", "RTE_seconds", "scenario", "forget_accuracy", "status")
FINISHED = ("complete", "diverged")


@dataclass
class ExperimentConfig:
    dataset: dict
    name: str | None = None
    architecture: Architecture = field(default_factory=Architecture)
    train: TrainConfig = field(default_factory=TrainConfig)
    methods: list[UnlearnConfig] = field(default_factory=lambda: [UnlearnConfig("SalUn")])
    rates: list[float] = field(default_factory=lambda: [0.1, 0.5])
    scenarios: list[str] = field(default_factory=lambda: list(SCENARIOS))
    seeds: list[int] = field(default_factory=lambda: [0])
    out: str = "runs/default"
    eval_batch_size: int = 256

    def __post_init__(self):
        if isinstance(self.architecture, dict):
            self.architecture = Architecture.from_dict(self.architecture)
        if isinstance(self.train, dict):
            self.train = TrainConfig.from_dict(self.train)
        self.methods = [UnlearnConfig.from_dict(m) if isinstance(m, dict) else m for m in self.methods]
        self.methods = [m for m in self.methods if m.method != "Retrain"]
        if self.name is None:
            self.name = dataset_id(self.dataset)

    def validate(self) -> "ExperimentConfig":
        if not isinstance(self.dataset, dict) or len(self.dataset) != 1:
            raise ConfigError("dataset must name exactly one source: synthetic, manifest or idx")
        kind = next(iter(self.dataset))
        if kind not in ("synthetic", "manifest", "idx"):
            raise ConfigError(f"unknown dataset source {kind!r}")
        self.train.validate()
        for m in self.methods:
            m.validate()
        for r in self.rates:
            if not 0.0 <= r <= 1.0:
                raise ConfigError(f"forget rate {r} outside [0, 1]")
        for s in self.scenarios:
            if s not in SCENARIOS:
                raise ConfigError(f"unknown augmentation scenario {s!r}")
        if not self.seeds or not self.rates or not self.scenarios:
            raise ConfigError("seeds, rates and scenarios must be non-empty")
        return self

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "name": self.name,
            "architecture": self.architecture.to_dict(),
            "train": self.train.to_dict(),
            "methods": [m.to_dict() for m in self.methods],
            "rates": list(self.rates),
            "scenarios": list(self.scenarios),
            "seeds": list(self.seeds),
            "out": self.out,
            "eval_batch_size": self.eval_batch_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad experiment config: {exc}") from None

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def dataset_id(source: dict) -> str:
    kind, spec = next(iter(source.items()))
    if kind == "synthetic":
        return f"synthetic{spec.get('classes', 3)}"
    if kind == "manifest":
        return Path(spec if isinstance(spec, str) else spec["dir"]).name
    return "idx"


def load_splits(source: dict) -> dict[str, Dataset]:
    kind, spec = next(iter(source.items()))
    if kind == "synthetic":
        tr, va, te = generate_synthetic(
            spec.get("classes", 3),
            spec.get("per_class", 800),
            spec.get("image_size", 16),
            spec.get("noise", 0.3),
            spec.get("seed", 0),
            spec.get("channels", 1),
        )
        return {"train": tr, "val": va, "test": te}
    if kind == "manifest":
        return load_manifest_dataset(spec if isinstance(spec, str) else spec["dir"])
    return {
        split: load_idx_dataset(files["images"], files["labels"], spec["num_classes"], split)
        for split, files in spec["splits"].items()
    }


# ---------------------------------------------------------------- ledger


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def cell_key(dataset: str, scenario: str, seed: int, rate: float, method: str) -> str:
    return f"{dataset}|{scenario}|s{seed}|r{rate:g}|{method}"


class RunLedger:
    """Per-cell status, checkpoint paths and reports, persisted as JSON."""

    def __init__(self, path, config: dict | None = None, cells: dict | None = None):
        self.path = Path(path)
        self.config = config or {}
        self.cells: dict[str, dict] = cells or {}

    @classmethod
    def load(cls, path) -> "RunLedger":
        path = Path(path)
        if path.is_dir():
            path = path / "ledger.json"
        doc = json.loads(path.read_text())
        return cls(path, doc.get("config"), doc.get("cells"))

    def save(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps({"config": self.config, "cells": self.cells}, indent=2))
        os.replace(tmp, self.path)

    def ensure(self, key: str, **meta) -> dict:
        cell = self.cells.get(key)
        if cell is None:
            cell = {"status": "pending", **meta}
            self.cells[key] = cell
        return cell

    def finished(self, key: str) -> bool:
        return self.cells.get(key, {}).get("status") in FINISHED

    def report(self, key: str) -> MetricsReport | None:
        r = self.cells.get(key, {}).get("report")
        return MetricsReport.from_dict(r) if r else None

    def reports(self) -> list[MetricsReport]:
        return [MetricsReport.from_dict(c["report"]) for c in self.cells.values() if c.get("status") in FINISHED and c.get("report")]

    def all_finished(self) -> bool:
        return bool(self.cells) and all(c["status"] in FINISHED for c in self.cells.values())


# ---------------------------------------------------------------- running


def plan_cells(config: ExperimentConfig) -> list[tuple[str, str, int, float, str]]:
    cells = []
    for scenario in config.scenarios:
        for seed in config.seeds:
            for rate in config.rates:
                for method in ["Retrain"] + [m.method for m in config.methods]:
                    cells.append((config.name, scenario, seed, rate, method))
    return cells


class _Runner:
    def __init__(self, config: ExperimentConfig, force: bool):
        self.config = config
        self.force = force
        self.out = Path(config.out)
        self.splits = load_splits(config.dataset)
        self.train_set = self.splits["train"]
        self.test_set = self.splits["test"]
        self.num_classes = self.train_set.num_classes
        self._bases: dict[tuple, ModelState] = {}

    def train_config(self, scenario: str, seed: int) -> TrainConfig:
        base = self.config.train.to_dict()
        base.update(augmentation=scenario, seed=seed)
        return TrainConfig(**base)

    def base_model(self, scenario: str, seed: int) -> ModelState:
        key = (scenario, seed)
        if key in self._bases:
            return self._bases[key]
        ckpt = self.out / "checkpoints" / f"base-{scenario}-s{seed}"
        if (ckpt / "manifest.json").exists() and not self.force:
            state, _ = load_checkpoint(ckpt)
        else:
            cfg = self.train_config(scenario, rngmod.derive_seed(seed, "base-train", scenario))
            init = build_model(self.config.architecture, self.num_classes, rngmod.derive_seed(seed, "base-init", scenario))
            state, seconds = train(init, self.train_set, cfg)
            save_checkpoint(state, ckpt, cfg, extra={"train_seconds": seconds})
        self._bases[key] = state
        return state

    def run_cell(self, scenario: str, seed: int, rate: float, method: str, ledger: RunLedger) -> dict:
        part = split_forget(self.train_set, rate, seed)
        forget, retain = self.train_set.subset(part.forget), self.train_set.subset(part.retain)
        key = cell_key(self.config.name, scenario, seed, rate, method)
        ckpt = self.out / "checkpoints" / key.replace("|", "_")
        bs = self.config.eval_batch_size
        diverged = False
        if method == "Retrain":
            cfg = self.train_config(scenario, rngmod.derive_seed(seed, "retrain-train", scenario, rate))
            state, seconds = retrain(
                retain, cfg, self.config.architecture, self.num_classes, rngmod.derive_seed(seed, "retrain-init", scenario, rate)
            )
            save_checkpoint(state, ckpt, cfg)
        else:
            ucfg = next(m for m in self.config.methods if m.method == method)
            ucfg = UnlearnConfig(**{**ucfg.to_dict(), "seed": rngmod.derive_seed(seed, "unlearn", scenario, rate), "augmentation": scenario})
            base = self.base_model(scenario, seed)
            lr = self.config.train.learning_rate
            if method == "SalUn":
                start = time.perf_counter()
                mask = compute_saliency_mask(base, forget, ucfg.mask_fraction, ucfg.batch_size)
                mask_seconds = time.perf_counter() - start
                state, seconds = salun_unlearn(base, forget, retain, mask, ucfg, lr)
                seconds += mask_seconds
                save_mask(mask, ckpt)
            elif method == "RandomLabel":
                state, seconds = random_label_unlearn(base, forget, retain, ucfg, lr)
            else:
                try:
                    state, seconds = gradient_ascent_unlearn(base, forget, ucfg, lr)
                except DivergenceError as exc:
                    log.warning("%s: %s", key, exc)
                    state, seconds, diverged = exc.state, exc.seconds, True
            save_checkpoint(state, ckpt, self.config.train, extra={"unlearn_config": ucfg.to_dict()})
        report = evaluate_all(
            state, forget, retain, self.test_set,
            method=method, dataset=self.config.name, rate=rate, seed=seed,
            seconds=seconds, scenario=scenario, batch_size=bs,
        )
        report.diverged = diverged
        if method == "Retrain":
            report.AG = 0.0
        else:
            ref = ledger.report(cell_key(self.config.name, scenario, seed, rate, "Retrain"))
            report.AG = avg_gap(report, ref) if ref is not None else None
        return {"report": report.to_dict(), "checkpoint": str(ckpt), "status": "diverged" if diverged else "complete"}


def run_experiment(config: ExperimentConfig, force: bool = False) -> RunLedger:
    """Run every pending cell of the grid; completed cells are skipped unless ``force``."""
    config.validate()
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    ledger_path = out / "ledger.json"
    ledger = RunLedger.load(ledger_path) if ledger_path.exists() else RunLedger(ledger_path)
    ledger.config = config.to_dict()
    runner = _Runner(config, force)
    for dataset, scenario, seed, rate, method in plan_cells(config):
        ledger.ensure(cell_key(dataset, scenario, seed, rate, method), dataset=dataset, scenario=scenario, seed=seed, rate=rate, method=method)
    ledger.save()
    for dataset, scenario, seed, rate, method in plan_cells(config):
        key = cell_key(dataset, scenario, seed, rate, method)
        if ledger.finished(key) and not force:
            continue
        cell = ledger.cells[key]
        cell.update(status="running", started=_now(), error=None)
        ledger.save()
        try:
            cell.update(runner.run_cell(scenario, seed, rate, method, ledger))
        except Exception as exc:  # recorded, the grid continues
            log.error("cell %s failed: %s", key, exc)
            cell.update(status="failed", error=f"{type(exc).__name__}: {exc}", traceback=traceback.format_exc())
        cell["finished"] = _now()
        ledger.save()
        write_csv(ledger, out / "results.csv")
        log.info("cell %s -> %s", key, cell["status"])
    write_csv(ledger, out / "results.csv")
    return ledger


# ---------------------------------------------------------------- emission


def _fmt(v) -> str:
    return "" if v is None else f"{v:.4f}"


def csv_text(ledger: RunLedger) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for key, cell in ledger.cells.items():
        r = cell.get("report")
        if not r:
            continue
        w.writerow([
            r["method"], r["dataset"], f"{r['rate']:g}", r["seed"],
            _fmt(r["UA"]), _fmt(r["RA"]), _fmt(r["TA"]), _fmt(r["MIA"]), _fmt(r["AG"]), _fmt(r["RTE"]),
            r["scenario"], _fmt(r.get("forget_accuracy")), cell["status"],
        ])
    return buf.getvalue()


def write_csv(ledger: RunLedger, path) -> Path:
    path = Path(path)
    tmp = path.with_suffix(".csv.tmp")
    tmp.write_text(csv_text(ledger))
    os.replace(tmp, path)
    return path


def _group(reports: list[MetricsReport]):
    groups: dict[tuple, dict[str, MetricsReport]] = {}
    for r in reports:
        groups.setdefault((r.dataset, r.scenario, r.seed, r.rate), {})[r.method] = r
    return groups


def format_table(rate: float, rows: list[tuple[MetricsReport, MetricsReport]]) -> str:
    header = f"{'Dataset':<14}{'Scenario':<11}{'Seed':>5}  {'Method':<16}{'UA':<17}{'RA':<17}{'TA':<17}{'MIA':<17}{'AG':>7}{'RTE(s)':>10}"
    lines = [f"Forget rate {100 * rate:g}%", header, "-" * len(header)]
    for r, ref in rows:
        cells = [f"{getattr(r, k):.2f} ({abs(getattr(r, k) - getattr(ref, k)):.2f})" for k in METRIC_KEYS]
        ag = avg_gap(r, ref)
        lines.append(
            f"{r.dataset:<14}{r.scenario:<11}{r.seed:>5}  {r.method:<16}"
            + "".join(f"{c:<17}" for c in cells)
            + f"{ag:>7.2f}{r.RTE:>10.2f}"
        )
    return "\n".join(lines) + "\n"


def emit_tables(ledger: RunLedger, out_dir=None) -> list[Path]:
    """One fixed-width table per forget rate plus ``results.csv``."""
    reports = ledger.reports()
    if not reports:
        raise EmissionError("ledger has no completed cells to report")
    out_dir = Path(out_dir or ledger.path.parent)
    out_dir.mkdir(parents=True, exist_ok=True)
    by_rate: dict[float, list] = {}
    for (dataset, scenario, seed, rate), methods in sorted(_group(reports).items(), key=lambda kv: (kv[0][3], kv[0][0], kv[0][1], kv[0][2])):
        ref = methods.get("Retrain")
        if ref is None:
            missing = cell_key(dataset, scenario, seed, rate, "Retrain")
            raise EmissionError(f"retrain cell {missing} is not complete; cannot compute diffs")
        order = ["Retrain"] + sorted(m for m in methods if m != "Retrain")
        by_rate.setdefault(rate, []).extend((methods[m], ref) for m in order)
    paths = []
    for rate, rows in sorted(by_rate.items()):
        p = out_dir / f"table_rate{100 * rate:g}.txt"
        p.write_text(format_table(rate, rows))
        paths.append(p)
    paths.append(write_csv(ledger, out_dir / "results.csv"))
    return paths


def aug_comparison(ledger: RunLedger, method: str = "SalUn") -> tuple[list[tuple], list[str]]:
    """Rows (dataset, rate, scenario, AG averaged over seeds) and one rank line per (dataset, rate)."""
    reports = [r for r in ledger.reports() if r.method == method and r.AG is not None]
    scenarios = sorted({r.scenario for r in reports}, key=lambda s: SCENARIOS.index(s) if s in SCENARIOS else 99)
    if len(scenarios) < 2:
        raise EmissionError(f"augmentation comparison needs {method} cells for at least 2 scenarios, found {scenarios}")
    acc: dict[tuple, list[float]] = {}
    for r in reports:
        acc.setdefault((r.dataset, r.rate, r.scenario), []).append(r.AG)
    rows, ranks = [], []
    for dataset in sorted({k[0] for k in acc}):
        for rate in sorted({k[1] for k in acc if k[0] == dataset}):
            values = {}
            for s in scenarios:
                vals = acc.get((dataset, rate, s))
                if vals is None:
                    raise EmissionError(f"missing {method} cell for {dataset} rate {rate:g} scenario {s}")
                values[s] = round(sum(vals) / len(vals), 4)
                rows.append((dataset, rate, s, values[s]))
            best = min(values.values())
            winners = [s for s, v in values.items() if v == best]
            label = f"{dataset} rate={100 * rate:g}%"
            if len(winners) > 1:
                ranks.append(f"{label}: tie between {', '.join(winners)} (AG {best:.4f})")
            else:
                ranks.append(f"{label}: best={winners[0]} (AG {best:.4f})")
    return rows, ranks


def emit_aug_comparison(ledger: RunLedger, out_dir=None, method: str = "SalUn") -> list[Path]:
    rows, ranks = aug_comparison(ledger, method)
    out_dir = Path(out_dir or ledger.path.parent)
    out_dir.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("dataset", "rate", "scenario", "AG"))
    for dataset, rate, s, ag in rows:
        w.writerow((dataset, f"{rate:g}", s, f"{ag:.4f}"))
    csv_path = out_dir / "aug_comparison.csv"
    csv_path.write_text(buf.getvalue())
    rank_path = out_dir / "aug_ranking.txt"
    rank_path.write_text("\n".join(ranks) + "\n")
    return [csv_path, rank_path]
