import json
import math
import os
import re
import subprocess
import sys

import numpy as np
import pytest

from fedlrmc.bench import cli, config, experiments, report
from fedlrmc.bench.config import ExperimentConfig, dump_config, load_config, parse_config
from fedlrmc.errors import FormatError

SMALL = dict(n=60, q=60, r=3, p=0.5, trials=2, master_seed=7, T=200)


def test_config_parse_types_and_comments():
    cfg = parse_config("""
        # comment
        kind = phase_transition
        n = 50   # trailing
        p_grid = 0.1, 0.5, 1.0
        algorithms = altgdmin, altmin
        stall_window = 20
        fresh_ground_truth = true
    """)
    assert cfg.n == 50 and cfg.p_grid == [0.1, 0.5, 1.0] and cfg.algorithms == ["altgdmin", "altmin"]
    assert cfg.stall_window == 20 and cfg.fresh_ground_truth is True
    assert parse_config("stall_window = none").stall_window is None


@pytest.mark.parametrize("text", ["n = abc", "bogus = 1", "n 5", "n = 1\nn = 2", "fresh_ground_truth = yes"])
def test_config_errors(text):
    with pytest.raises(FormatError):
        parse_config(text)


@pytest.mark.parametrize("kw", [dict(trials=0), dict(success_threshold=0.0), dict(kind="x"),
                                dict(kind="phase_transition"), dict(kind="phase_transition", p_grid=[0.5, 0.1]),
                                dict(kind="noisy_floor"), dict(kind="fed_equivalence"), dict(algorithms=[])])
def test_config_invariants(kw):
    with pytest.raises(ValueError):
        ExperimentConfig(**kw)


def test_config_dump_roundtrip_and_hash(tmp_path):
    cfg = ExperimentConfig(kind="noisy_floor", eps_grid=[0.0, 1e-3], algorithms=["altgdmin"], kappa=2.5)
    back = parse_config(dump_config(cfg))
    assert back == cfg and back.hash() == cfg.hash()
    assert cfg.replace(output_dir="elsewhere").hash() == cfg.hash()
    assert cfg.replace(master_seed=1).hash() != cfg.hash()
    path = tmp_path / "c.cfg"
    path.write_text(dump_config(cfg))
    assert load_config(path, master_seed=3).master_seed == 3


@pytest.fixture(scope="module")
def conv_record():
    cfg = ExperimentConfig(kind="convergence", algorithms=["altgdmin", "altmin"], **SMALL)
    return experiments.run_experiment(cfg)


def test_convergence_record(conv_record):
    rec = conv_record
    assert len(rec.trials) == 4 and all(t.ok for t in rec.trials)
    summ = rec.aggregates["algorithms"]
    assert summ["success_rate"] == [1.0, 1.0]
    i_alt, i_min = summ["median_iters_to_threshold"]
    assert i_min < i_alt  # AltMin needs fewer iterations
    assert rec.config_hash == rec.config.hash()


def test_mean_curve_between_min_and_max(conv_record):
    c = conv_record.aggregates["curve"]
    for lo, mean, med, hi in zip(c["min_se_f"], c["mean_se_f"], c["median_se_f"], c["max_se_f"]):
        assert lo <= mean <= hi and lo <= med <= hi


def test_aggregates_recomputable(conv_record):
    again = experiments.aggregate(conv_record.config, conv_record.trials)
    for name, tab in conv_record.aggregates.items():
        assert report.tables_equal(again[name], tab)


def test_same_seed_same_digest_any_threads(conv_record):
    cfg = conv_record.config
    assert experiments.run_experiment(cfg).digest() == conv_record.digest()
    assert experiments.run_experiment(cfg, threads=2).digest() == conv_record.digest()
    assert experiments.run_experiment(cfg.replace(master_seed=8)).digest() != conv_record.digest()


def test_trial_seeds_disjoint_across_kinds():
    a = ExperimentConfig(kind="convergence")
    b = ExperimentConfig(kind="timing")
    seeds_a = {experiments.trial_seed(a, 0, i) for i in range(50)}
    seeds_b = {experiments.trial_seed(b, 0, i) for i in range(50)}
    assert len(seeds_a) == 50 and not seeds_a & seeds_b


def test_failed_trials_are_recorded_not_raised():
    cfg = ExperimentConfig(kind="convergence", algorithms=["altgdmin"], c_eta=50.0, **dict(SMALL, T=30))
    rec = experiments.run_experiment(cfg)
    assert len(rec.trials) == 2
    for t in rec.trials:
        assert t.status in ("ok", "Diverged", "RankDeficient")
        assert t.status != "ok" or t.final_se() > cfg.success_threshold


def test_detect_plateau_and_threshold_p():
    se = np.concatenate([0.5 ** np.arange(20), np.full(15, 1e-3)])
    se[:20] = np.maximum(se[:20], 1e-3)
    idx, level = experiments.detect_plateau(se, 10, 0.01)
    assert level == pytest.approx(1e-3) and idx >= 10
    assert experiments.detect_plateau([1.0, 0.5, 0.25], 10)[0] == -1
    assert experiments.threshold_p([0.1, 0.2, 0.4], [0.0, 0.25, 0.75]) == pytest.approx(0.3)
    assert experiments.threshold_p([0.1, 0.2], [0.6, 1.0]) == 0.1
    assert math.isnan(experiments.threshold_p([0.1, 0.2], [0.0, 0.1]))
    assert np.all(np.diff(experiments.isotonic([0.0, 0.5, 0.3, 1.0])) >= 0)


def test_phase_and_noisy_small():
    ph = ExperimentConfig(kind="phase_transition", p_grid=[0.1, 1.0], algorithms=["altgdmin", "altmin"],
                          stall_window=30, **{k: v for k, v in SMALL.items() if k != "p"})
    rec = experiments.run_experiment(ph)
    grid = rec.aggregates["phase"]
    full = [s for p, s in zip(grid["p"], grid["success_prob"]) if p == 1.0]
    assert full == [1.0, 1.0]
    nf = ExperimentConfig(kind="noisy_floor", eps_grid=[0.0, 1e-3, 2e-3], **SMALL)
    rec = experiments.run_experiment(nf)
    fl = rec.aggregates["noisy_floor"]
    assert fl["plateau_median"][0] <= 1e-10
    assert 1.5 <= rec.aggregates["noisy_fit"]["doubling_factor"][0] <= 2.5


def test_fed_equivalence_small():
    cfg = ExperimentConfig(kind="fed_equivalence", algorithms=["altgdmin", "factgd"], gammas=[1, 3],
                           **dict(SMALL, trials=1, T=5))
    rec = experiments.run_experiment(cfg)
    fed = rec.aggregates["fed"]
    assert max(fed["max_iterate_dev"]) <= 1e-12
    assert fed["iterate_up"][:2] == fed["expected_iterate_up"][:2]
    assert set(rec.ledgers) == {"altgdmin_g1_t0", "altgdmin_g3_t0", "factgd_g1_t0", "factgd_g3_t0"}


@pytest.fixture(scope="module")
def emitted(conv_record, tmp_path_factory):
    return report.emit_report(conv_record, str(tmp_path_factory.mktemp("out")))


def test_report_tree(conv_record, emitted):
    assert os.path.basename(emitted) == conv_record.config_hash
    names = set(os.listdir(emitted))
    assert {"summary.json", "plot.script", "fig_error.png", "aggregate_curve.csv"} <= names
    assert sum(n.startswith("trace_") for n in names) == 4
    meta = json.load(open(os.path.join(emitted, "summary.json")))
    assert meta["config_hash"] == conv_record.config_hash == ExperimentConfig(**meta["config"]).hash()
    assert meta["digest"] == conv_record.digest()
    assert set(meta["files"]) == names


def test_report_csv_roundtrip(conv_record, emitted):
    for name, tab in conv_record.aggregates.items():
        assert report.tables_equal(report.read_table(os.path.join(emitted, f"aggregate_{name}.csv")), tab)


def test_trace_csvs_reproduce_aggregates(conv_record, emitted):
    from fedlrmc.trace import IterationTrace
    for t in conv_record.trials:
        back = IterationTrace.read_csv(os.path.join(emitted, report.trace_name(t)))
        assert repr(back.numeric_rows()) == repr(t.trace.numeric_rows())


def test_plot_script_references_only_emitted_files(emitted):
    script = open(os.path.join(emitted, "plot.script")).read()
    csvs, pngs = report.referenced_files(script)
    for f in csvs:
        assert os.path.exists(os.path.join(emitted, f))
    quoted = set(re.findall(r'"([\w.]+\.csv)"', script))
    assert quoted <= set(os.listdir(emitted))
    os.remove(os.path.join(emitted, pngs[0]))
    subprocess.run([sys.executable, os.path.join(emitted, "plot.script")], check=True, cwd="/")
    assert os.path.exists(os.path.join(emitted, pngs[0]))


@pytest.mark.parametrize("kind", config.KINDS)
def test_every_kind_has_figures(kind):
    assert report.figure_specs(kind)


def test_replay_from_summary_json(conv_record, emitted):
    cfg = load_config(os.path.join(emitted, "summary.json"))
    assert experiments.run_experiment(cfg, threads=2).digest() == conv_record.digest()


def test_cli_end_to_end(tmp_path, capsys):
    cfgfile = tmp_path / "fed.cfg"
    cfgfile.write_text("n = 40\nq = 40\nr = 2\np = 0.6\nalgorithms = altgdmin\ngammas = 1, 2\ntrials = 1\nT = 4\n")
    rc = cli.main(["fed-equiv", "--config", str(cfgfile), "--out", str(tmp_path / "o"), "--seed", "3"])
    assert rc == 0
    out = capsys.readouterr().out
    h = re.search(r"config_hash=(\w+)", out).group(1)
    d = tmp_path / "o" / h
    assert (d / "ledger.csv").exists() and (d / "summary.json").exists() and (d / "plot.script").exists()
    meta = json.loads((d / "summary.json").read_text())
    assert meta["config"]["kind"] == "fed_equivalence" and meta["master_seed"] == 3
    assert cli.main(["fed-equiv", "--config", str(tmp_path / "missing.cfg")]) == 2
    assert cli.main(["fed-equiv", "--config", str(cfgfile), "--threads", "0"]) == 2
    with pytest.raises(SystemExit):
        cli.main(["bogus"])
