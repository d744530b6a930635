import csv
import io
import json

import pytest

from unlearnlab.errors import ConfigError, EmissionError
from unlearnlab.harness import (
    CSV_COLUMNS,
    ExperimentConfig,
    RunLedger,
    aug_comparison,
    cell_key,
    csv_text,
    emit_aug_comparison,
    emit_tables,
    plan_cells,
    run_experiment,
)
from unlearnlab.metrics import MetricsReport, avg_gap_from_diffs
from unlearnlab.unlearn import UnlearnConfig

TINY = {
    "dataset": {"synthetic": {"classes": 3, "per_class": 40, "image_size": 8, "noise": 0.2}},
    "architecture": {"kind": "ResNetS", "image_size": 8, "widths": [4, 8, 8], "blocks_per_stage": 1},
    "train": {"epochs": 6, "batch_size": 16},
    "methods": [
        {"method": "SalUn", "epochs": 1, "batch_size": 16},
        {"method": "RandomLabel", "epochs": 1, "batch_size": 16},
        {"method": "GradientAscent", "epochs": 1, "batch_size": 16},
    ],
    "rates": [0.1, 0.5],
    "scenarios": ["NoAug", "Default"],
}


def tiny_config(out, **over):
    d = json.loads(json.dumps(TINY))
    d.update(over)
    d["out"] = str(out)
    return ExperimentConfig.from_dict(d)


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    return run_experiment(tiny_config(out)), out


def _rows(text):
    return list(csv.DictReader(io.StringIO(text)))


def _strip_rte(text):
    return [{k: v for k, v in r.items() if k != "RTE_seconds"} for r in _rows(text)]


# ---------------------------------------------------------------- grid arithmetic


def test_single_method_single_everything_gives_two_cells(tmp_path):
    cfg = ExperimentConfig({"synthetic": {}}, methods=[UnlearnConfig("SalUn")], rates=[0.1], scenarios=["NoAug"], seeds=[0])
    assert [c[-1] for c in plan_cells(cfg)] == ["Retrain", "SalUn"]


def test_default_grid_has_twelve_cells():
    cfg = ExperimentConfig({"synthetic": {}})
    assert len(plan_cells(cfg)) == 12
    assert len({cell_key(*c) for c in plan_cells(cfg)}) == 12


def test_config_validation():
    with pytest.raises(ConfigError):
        ExperimentConfig({"ftp": {}}).validate()
    with pytest.raises(ConfigError):
        ExperimentConfig({"synthetic": {}}, rates=[1.2]).validate()
    with pytest.raises(ConfigError):
        ExperimentConfig({"synthetic": {}}, scenarios=["Heavy"]).validate()
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"dataset": {"synthetic": {}}, "bogus": 1})


def test_config_roundtrip(tmp_path):
    cfg = tiny_config(tmp_path)
    (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
    assert ExperimentConfig.load(tmp_path / "c.json").to_dict() == cfg.to_dict()


# ---------------------------------------------------------------- end to end


def test_tiny_run_completes(tiny_run):
    ledger, out = tiny_run
    assert len(ledger.cells) == 2 * 2 * 4
    assert ledger.all_finished()
    assert (out / "results.csv").exists() and (out / "ledger.json").exists()
    rows = _rows((out / "results.csv").read_text())
    assert tuple(rows[0].keys())[:10] == CSV_COLUMNS[:10]
    assert len(rows) == 16
    for r in rows:
        for k in ("UA", "RA", "TA", "MIA"):
            assert 0.0 <= float(r[k]) <= 100.0
        assert float(r["AG"]) >= 0.0
        assert float(r["UA"]) + float(r["forget_accuracy"]) == pytest.approx(100.0, abs=1e-3)


def test_retrain_rows_have_zero_gap(tiny_run):
    ledger, _ = tiny_run
    for r in ledger.reports():
        if r.method == "Retrain":
            assert r.AG == 0.0


def test_emitted_ag_matches_recomputed_diffs(tiny_run):
    _, out = tiny_run
    rows = _rows((out / "results.csv").read_text())
    refs = {(r["scenario"], r["seed"], r["rate"]): r for r in rows if r["method"] == "Retrain"}
    for r in rows:
        ref = refs[(r["scenario"], r["seed"], r["rate"])]
        diffs = [float(r[k]) - float(ref[k]) for k in ("UA", "RA", "TA", "MIA")]
        assert abs(avg_gap_from_diffs(diffs) - float(r["AG"])) <= 0.005


def test_unlearners_are_faster_than_retrain(tiny_run):
    ledger, _ = tiny_run
    reports = ledger.reports()
    for r in reports:
        if r.method == "SalUn":
            ref = next(x for x in reports if x.method == "Retrain" and (x.scenario, x.rate) == (r.scenario, r.rate))
            assert r.RTE < ref.RTE


def test_tables_and_aug_comparison(tiny_run, tmp_path):
    ledger, _ = tiny_run
    paths = emit_tables(ledger, tmp_path)
    names = sorted(p.name for p in paths)
    assert names == ["results.csv", "table_rate10.txt", "table_rate50.txt"]
    text = (tmp_path / "table_rate10.txt").read_text()
    assert "(0.00)" in text and "Retrain" in text
    csv_path, rank_path = emit_aug_comparison(ledger, tmp_path)
    rows = _rows(csv_path.read_text())
    assert len(rows) == 1 * 2 * 2
    assert len(rank_path.read_text().strip().splitlines()) == 2


def test_second_run_recomputes_nothing(tiny_run):
    ledger, out = tiny_run
    before = (out / "results.csv").read_text()
    again = run_experiment(tiny_config(out))
    assert csv_text(again) == before


def test_identical_configs_give_identical_csv_modulo_runtime(tiny_run, tmp_path):
    _, out = tiny_run
    cfg = tiny_config(tmp_path / "b", scenarios=["NoAug"], rates=[0.5])
    other = run_experiment(cfg)
    mine = [r for r in _strip_rte((out / "results.csv").read_text()) if r["scenario"] == "NoAug" and r["rate"] == "0.5"]
    assert _strip_rte(csv_text(other)) == mine


def test_cell_isolation_on_resume(tmp_path):
    cfg = tiny_config(tmp_path, scenarios=["NoAug"], rates=[0.5])
    run_experiment(cfg)
    before = _strip_rte((tmp_path / "results.csv").read_text())
    doc = json.loads((tmp_path / "ledger.json").read_text())
    key = next(k for k in doc["cells"] if k.endswith("|RandomLabel"))
    rte_before = {k: c["report"]["RTE"] for k, c in doc["cells"].items()}
    doc["cells"][key] = {"status": "pending"}
    (tmp_path / "ledger.json").write_text(json.dumps(doc))
    ledger = run_experiment(cfg)
    assert _strip_rte(csv_text(ledger)) == before
    for k, c in ledger.cells.items():
        if k != key:
            assert c["report"]["RTE"] == rte_before[k]


def test_failed_cell_is_recorded_and_grid_continues(tmp_path):
    cfg = tiny_config(tmp_path, scenarios=["NoAug"], rates=[0.5])
    cfg.methods[0].batch_size = 0  # passes dataclass construction, fails inside the cell
    cfg.validate = lambda: cfg  # bypass up-front validation to exercise the in-cell path
    ledger = run_experiment(cfg)
    statuses = {k.split("|")[-1]: c["status"] for k, c in ledger.cells.items()}
    assert statuses["SalUn"] == "failed"
    assert statuses["Retrain"] == "complete" and statuses["RandomLabel"] == "complete"
    assert "error" in ledger.cells[cell_key(cfg.name, "NoAug", 0, 0.5, "SalUn")]


# ---------------------------------------------------------------- emission fixtures


def _ledger_with(tmp_path, reports):
    ledger = RunLedger(tmp_path / "ledger.json")
    for r in reports:
        ledger.cells[cell_key(r.dataset, r.scenario, r.seed, r.rate, r.method)] = {"status": "complete", "report": r.to_dict()}
    return ledger


def _rep(method, UA, RA, TA, MIA, RTE, scenario="NoAug", AG=None, rate=0.1):
    return MetricsReport(method, "blood", rate, 0, UA, RA, TA, MIA, RTE, AG=AG, scenario=scenario)


GOLDEN = (
    "Forget rate 10%\n"
    "Dataset       Scenario    Seed  Method          UA               RA               TA               MIA                   AG    RTE(s)\n"
    + "-" * 133
    + "\n"
    "blood         NoAug          0  Retrain         0.84 (0.00)      100.00 (0.00)    98.57 (0.00)     1.59 (0.00)         0.00   1332.00\n"
    "blood         NoAug          0  SalUn           0.00 (0.84)      99.88 (0.12)     98.89 (0.32)     0.00 (1.59)         0.72     66.00\n"
)


def test_golden_table(tmp_path):
    ledger = _ledger_with(
        tmp_path,
        [_rep("Retrain", 0.84, 100.0, 98.57, 1.59, 1332.0, AG=0.0), _rep("SalUn", 0.0, 99.88, 98.89, 0.0, 66.0, AG=0.7175)],
    )
    emit_tables(ledger, tmp_path)
    assert (tmp_path / "table_rate10.txt").read_text() == GOLDEN


def test_empty_ledger_is_an_error(tmp_path):
    with pytest.raises(EmissionError):
        emit_tables(RunLedger(tmp_path / "ledger.json"), tmp_path)
    assert not (tmp_path / "table_rate10.txt").exists()


def test_missing_retrain_cell_is_named(tmp_path):
    ledger = _ledger_with(tmp_path, [_rep("SalUn", 0.0, 99.0, 98.0, 0.0, 1.0)])
    with pytest.raises(EmissionError, match=r"blood\|NoAug\|s0\|r0.1\|Retrain"):
        emit_tables(ledger, tmp_path)


def _aug_ledger(tmp_path, ags):
    reports = []
    for s, ag in zip(["NoAug", "Default", "DefaultRA"], ags):
        reports.append(_rep("SalUn", 0, 0, 0, 0, 1, scenario=s, AG=ag))
    return _ledger_with(tmp_path, reports)


def test_aug_ranking_argmin(tmp_path):
    rows, ranks = aug_comparison(_aug_ledger(tmp_path, [2.0, 1.5, 1.0]))
    assert [r[2] for r in rows] == ["NoAug", "Default", "DefaultRA"]
    assert ranks == ["blood rate=10%: best=DefaultRA (AG 1.0000)"]


def test_aug_ranking_tie_is_explicit(tmp_path):
    _, ranks = aug_comparison(_aug_ledger(tmp_path, [1.0, 1.0, 1.0]))
    assert "tie between NoAug, Default, DefaultRA" in ranks[0]


def test_aug_needs_two_scenarios(tmp_path):
    with pytest.raises(EmissionError):
        aug_comparison(_aug_ledger(tmp_path, [1.0]))
