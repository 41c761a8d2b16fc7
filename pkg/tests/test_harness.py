import csv
import math
from pathlib import Path

import pytest

from fedscope import FedscopeError
from fedscope.cli import main
from fedscope.config import ExperimentConfig, parse_key_values
from fedscope.harness import (
    COLUMNS,
    METRIC_FIELDS,
    aggregate_tables,
    emit_report,
    format_table,
    parse_table,
    run_experiment,
    write_run_artifacts,
)
from fedscope.metrics import EvalReport
from fedscope.strategies import STRATEGY_KINDS

TINY = """
# small enough for unit tests
seeds = 0, 1
n_real = 12
n_synthetic = 12
n_val = 6
n_test = 6
n_unseen = 6
n_background = 4
epochs = 2
transfer_epochs = 1
finetune_epochs = 1
rounds = 2
local_epochs = 1
"""


def tiny(**over) -> ExperimentConfig:
    cfg = ExperimentConfig.from_text(TINY, env={})
    for k, v in over.items():
        setattr(cfg, k, v)
    return cfg


@pytest.fixture(scope="module")
def full_report():
    return run_experiment(tiny())


# -- config ---------------------------------------------------------------------


def test_key_value_parser():
    assert parse_key_values("a = 1\n# note\n\nb-c = x, y  # trailing\n") == {"a": "1", "b_c": "x, y"}
    with pytest.raises(FedscopeError):
        parse_key_values("no equals sign")


def test_config_defaults():
    cfg = ExperimentConfig.from_text("", env={})
    assert cfg.seeds == (0, 1, 2, 3, 4)
    assert cfg.strategies == STRATEGY_KINDS
    assert (cfg.n_real, cfg.n_synthetic, cfg.n_test, cfg.n_unseen + cfg.n_background) == (300, 300, 100, 116)


def test_config_env_override():
    cfg = ExperimentConfig.from_text("epochs = 5", env={"FEDSCOPE_EPOCHS": "7", "FEDSCOPE_SEEDS": "3", "OTHER": "1"})
    assert cfg.epochs == 7 and cfg.seeds == (3,)


def test_config_strategy_list():
    assert ExperimentConfig.from_text("strategies = all", env={}).strategies == STRATEGY_KINDS
    cfg = ExperimentConfig.from_text("strategies = centralized-real, federated", env={})
    assert cfg.strategies == ("centralized-real", "federated")


@pytest.mark.parametrize(
    "text",
    ["seeds = ", "strategies = boosting", "epochs = many", "colour = blue", "strategies = federated, federated"],
)
def test_config_rejects(text):
    with pytest.raises(FedscopeError):
        ExperimentConfig.from_text(text, env={})


def test_config_text_round_trip():
    cfg = tiny()
    assert ExperimentConfig.from_text(cfg.to_text(), env={}) == cfg


# -- tables ---------------------------------------------------------------------


def _report(v):
    return EvalReport(v, v, v, v, v, math.nan, v, 3)


def test_four_decimals_and_na():
    text = format_table([("federated", _report(0.8638))], "csv")
    row = text.splitlines()[1].split(",")
    assert row == ["Federated learning", "0.8638", "0.8638", "0.8638", "0.8638", "0.8638", "n/a", "0.8638", "3"]


def test_header_exact():
    assert ",".join(COLUMNS) == "Algorithm,AP,AP50,AP75,APsmall,APmedium,APlarge,mAP,BackgroundFP"
    md = format_table([("federated", _report(0.5))], "markdown")
    assert md.splitlines()[0] == "| Algorithm | AP | AP50 | AP75 | APsmall | APmedium | APlarge | mAP | BackgroundFP |"


@pytest.mark.parametrize("fmt", ["csv", "markdown"])
def test_table_round_trip(fmt):
    rows = [(k, _report(i / 7)) for i, k in enumerate(STRATEGY_KINDS)]
    parsed = parse_table(format_table(rows, fmt), fmt)
    assert [k for k, _ in parsed] == list(STRATEGY_KINDS)
    for (_, rep), (_, vals) in zip(rows, parsed):
        for f in METRIC_FIELDS:
            want = getattr(rep, f)
            assert (math.isnan(want) and math.isnan(vals[f])) or vals[f] == round(want, 4)


def test_parse_rejects_wrong_header():
    with pytest.raises(FedscopeError):
        parse_table("Model,AP\nx,1\n", "csv")


def test_bad_format():
    with pytest.raises(FedscopeError):
        format_table([], "html")


def test_aggregate_skips_undefined():
    a = [("x", {f: 1.0 for f in METRIC_FIELDS})]
    b = [("x", {**{f: 0.0 for f in METRIC_FIELDS}, "ap_large": math.nan})]
    (_, mean), = aggregate_tables([a, b])
    assert mean["ap"] == 0.5 and mean["ap_large"] == 1.0


# -- experiment -------------------------------------------------------------------


def test_single_strategy_single_seed():
    rep = run_experiment(tiny(seeds=(0,), strategies=("centralized-real",)))
    (seed,) = rep.seeds
    assert seed.error is None and [r.strategy for r in seed.rows] == ["centralized-real"]
    assert len(rep.mean_table("in_distribution")) == len(rep.mean_table("unseen")) == 1


def test_every_strategy_once_per_seed_with_shared_provenance(full_report):
    for seed in full_report.seeds:
        assert seed.error is None
        assert [r.strategy for r in seed.rows] == list(STRATEGY_KINDS)
        assert len({r.init_digest for r in seed.rows}) == 1
        assert len({r.data_digest for r in seed.rows}) == 1
    assert full_report.seeds[0].rows[0].init_digest != full_report.seeds[1].rows[0].init_digest


def test_csv_row_count_and_mean_matches_per_seed_files(full_report, tmp_path):
    emit_report(full_report, "csv", tmp_path)
    for test_set in ("in_distribution", "unseen"):
        per_seed = [list(csv.reader(open(tmp_path / f"seed_{s}" / f"{test_set}.csv"))) for s in (0, 1)]
        assert all(len(rows) == len(STRATEGY_KINDS) + 1 for rows in per_seed)
        mean = list(csv.reader(open(tmp_path / f"mean_{test_set}.csv")))
        for i in range(1, len(mean)):
            for j in range(1, len(COLUMNS)):
                vals = [float(rows[i][j]) for rows in per_seed if rows[i][j] != "n/a"]
                want = "n/a" if not vals else f"{sum(vals) / len(vals):.4f}"
                assert mean[i][j] == want


def test_failed_seed_is_isolated(monkeypatch):
    import fedscope.harness as h

    real = h.make_seed_data

    def flaky(cfg, seed):
        if seed == 1:
            raise FedscopeError("boom", "synthetic failure")
        return real(cfg, seed)

    monkeypatch.setattr(h, "make_seed_data", flaky)
    rep = run_experiment(tiny(strategies=("centralized-real",)))
    assert rep.seeds[0].error is None and "boom" in rep.seeds[1].error
    assert [s.seed for s in rep.completed()] == [0]


def _tree(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_rerun_is_byte_identical(full_report, tmp_path):
    cfg = tiny()
    write_run_artifacts(full_report, cfg, tmp_path / "a")
    write_run_artifacts(run_experiment(cfg), cfg, tmp_path / "b")
    assert _tree(tmp_path / "a") == _tree(tmp_path / "b")


# -- cli ------------------------------------------------------------------------


def test_cli_pipeline(tmp_path, capsys):
    cfg = tmp_path / "tiny.txt"
    cfg.write_text(TINY + "seeds = 0\nstrategies = centralized-real, ensemble\n")
    assert main(["generate-data", "--domain", "unseen", "--n", "4", "--backgrounds", "2", "--out", str(tmp_path / "u")]) == 0
    assert len(list((tmp_path / "u" / "images").iterdir())) == 6
    assert main(["train", "--strategy", "ensemble", "--config", str(cfg), "--out", str(tmp_path / "w.npz")]) == 0
    capsys.readouterr()
    assert main(["evaluate", "--weights", str(tmp_path / "w.npz"), "--testset", str(tmp_path / "u"), "--format", "csv"]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0] == ",".join(COLUMNS)
    assert main(["run-all", "--config", str(cfg), "--out", str(tmp_path / "run")]) == 0
    assert (tmp_path / "run" / "report.md").exists()
    capsys.readouterr()
    assert main(["report", "--run-dir", str(tmp_path / "run"), "--format", "csv"]) == 0
    assert "Real Centralized learning" in capsys.readouterr().out


def test_cli_train_from_directories(tmp_path):
    for domain in ("real", "synthetic"):
        main(["generate-data", "--domain", domain, "--n", "6", "--out", str(tmp_path / domain)])
    cfg = tmp_path / "c.txt"
    cfg.write_text(TINY)
    rc = main(["train", "--strategy", "finetune", "--config", str(cfg), "--real", str(tmp_path / "real"),
               "--synthetic", str(tmp_path / "synthetic"), "--out", str(tmp_path / "f.npz")])
    assert rc == 0 and (tmp_path / "f.npz").exists()


def test_cli_reports_errors(tmp_path, capsys):
    assert main(["report", "--run-dir", str(tmp_path)]) == 2
    assert "no-results" in capsys.readouterr().err
