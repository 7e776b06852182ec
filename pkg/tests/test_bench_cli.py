import csv
import io
from pathlib import Path

import numpy as np
import pytest

from dynbatch import bench
from dynbatch.bench import (
    COLUMNS,
    BenchConfig,
    BenchReport,
    BenchRow,
    ConfigError,
    ManualPlan,
    check_report,
    fill_ratios,
    make_model,
    make_trees,
    measure,
    run_benchmark,
    run_manual_baseline,
)
from dynbatch.cli import main
from dynbatch.models import bench_tree_reference
from dynbatch.runtime import ExecutionStats, run_backward, run_forward

from _helpers import max_rel_err

DATA = Path(__file__).resolve().parent.parent / "data"


def run_cli(*argv):
    out = io.StringIO()
    rc = main(list(argv), out=out)
    return rc, out.getvalue()


# -- config ---------------------------------------------------------------------------


@pytest.mark.parametrize("kwargs", [
    {"tree_size": 0}, {"batch_size": 0}, {"repeats": 2}, {"mode": "static"},
    {"phase": "eval"}, {"mode": "manual", "shape_mode": "random"},
])
def test_config_errors(kwargs):
    with pytest.raises(ConfigError):
        BenchConfig(**kwargs)


def test_config_defaults_and_aliases():
    cfg = BenchConfig(mode="full_dynamic")
    assert cfg.mode == "full-dynamic" and cfg.shapes == "random"
    assert (cfg.tree_size, cfg.state_size, cfg.repeats) == (128, 64, 5)
    assert BenchConfig(mode="dynamic").shapes == "fixed"


def test_fixed_batches_share_one_shape_and_random_ones_do_not():
    from dynbatch.data import tree_shape

    fixed = make_trees(BenchConfig(batch_size=6, tree_size=16, mode="dynamic"))
    assert len({tree_shape(t) for t in fixed}) == 1
    assert len({t for t in fixed}) > 1  # tokens still differ
    rand = make_trees(BenchConfig(batch_size=6, tree_size=16, mode="full-dynamic"))
    assert len({tree_shape(t) for t in rand}) > 1


def test_manual_rejects_mixed_shapes():
    cfg = BenchConfig(batch_size=4, tree_size=8, state_size=4, mode="full-dynamic")
    model, _, params = make_model(cfg)
    with pytest.raises(ConfigError):
        run_manual_baseline(model, make_trees(cfg), params)


# -- cross-mode equivalence ------------------------------------------------------


def equivalence_case(dtype):
    cfg = BenchConfig(batch_size=5, tree_size=16, state_size=6, mode="dynamic", dtype=dtype)
    model, compiler, params = make_model(cfg)
    return cfg, model, compiler, params, make_trees(cfg)


def test_manual_dynamic_and_reference_agree():
    cfg, model, compiler, params, trees = equivalence_case("float32")
    manual = run_manual_baseline(model, trees, params)
    dynamic, _ = run_forward(compiler.compile_batch(trees), params)
    for m, d, t in zip(manual, dynamic, trees):
        assert max_rel_err(d, m) < 1e-6
        assert max_rel_err(m, bench_tree_reference(t, params)) < 1e-6


def test_manual_at_batch_one_is_the_recursive_evaluation():
    cfg, model, compiler, params, trees = equivalence_case("float64")
    (root,) = run_manual_baseline(model, trees[:1], params)
    assert max_rel_err(root, bench_tree_reference(trees[0], params)) < 1e-12


def test_full_dynamic_matches_per_tree_reference():
    cfg = BenchConfig(batch_size=6, tree_size=20, state_size=5, mode="full-dynamic")
    model, compiler, params = make_model(cfg)
    trees = make_trees(cfg)
    got, _ = run_forward(compiler.compile_batch(trees), params)
    for g, t in zip(got, trees):
        assert max_rel_err(g, bench_tree_reference(t, params)) < 1e-6


def test_manual_and_dynamic_gradients_agree():
    cfg, model, compiler, params, trees = equivalence_case("float64")
    b, s = len(trees), cfg.state_size
    plan = ManualPlan(model, trees[0])
    (h, _), caches = plan.forward(params, ManualPlan.tokens(trees), keep=True)
    gh, gc = bench._root_grads(b, s, h.dtype)
    manual = plan.backward(params, caches, (gh, gc))
    sch = compiler.compile_batch(trees)
    _, tape = run_forward(sch, params, "train")
    dynamic = run_backward(tape, sch, params, list(zip(gh, gc)))
    for name in params:
        np.testing.assert_allclose(dynamic[name], manual[name], rtol=1e-10, atol=1e-14)


def test_kernel_call_counts():
    cfg = BenchConfig(batch_size=1, tree_size=128, state_size=4, mode="dynamic")
    model, compiler, params = make_model(cfg)
    trees = make_trees(cfg)
    dyn, man = ExecutionStats(), ExecutionStats()
    run_forward(compiler.compile_batch(trees), params, stats=dyn)
    run_manual_baseline(model, trees, params, stats=man)
    assert dyn[model.cell.name] == 7 and dyn[model.embedding.name] == 1
    assert man[model.cell.name] == 127 and man[model.embedding.name] == 128


# -- reports --------------------------------------------------------------------------


def small(mode, batch, phase="infer", **kw):
    return BenchConfig(batch_size=batch, tree_size=8, state_size=4, mode=mode, phase=phase,
                       repeats=3, **kw)


def test_measure_reports_per_tree_time():
    row = measure(small("dynamic", 4))
    assert row.batch_time_s > 0 and row.tree_time_s == pytest.approx(row.batch_time_s / 4)
    assert row.kernel_calls > 0


def test_run_benchmark_adds_reference_rows_and_fills_ratios(tmp_path):
    out = tmp_path / "r.csv"
    report = run_benchmark([small("dynamic", 4, out=str(out)), small("full-dynamic", 4),
                            small("full-dynamic", 4, phase="train")])
    keys = {(r.mode, r.phase, r.batch_size) for r in report.rows}
    assert ("manual", "infer", 4) in keys and ("manual", "infer", 1) in keys
    assert ("manual", "train", 1) in keys
    full = report.find("full-dynamic", "infer", 4)
    assert full.speedup_ratio == pytest.approx(
        report.find("manual", "infer", 1).tree_time_s / full.tree_time_s)
    dyn = report.find("dynamic", "infer", 4)
    assert dyn.cost_ratio == pytest.approx(dyn.tree_time_s / report.find("manual", "infer", 4).tree_time_s)
    rows = check_report(out)
    assert len(rows) == len(report.rows)
    with open(out, newline="") as f:
        assert tuple(next(csv.reader(f))) == COLUMNS


def write_rows(path, rows):
    BenchReport(rows).write_csv(path)


def test_check_report_catches_bad_ratios_and_schema(tmp_path):
    rows = [BenchRow("manual", "infer", 1, 8, 4, 0.01, 0.01),
            BenchRow("full-dynamic", "infer", 4, 8, 4, 0.008, 0.002)]
    report = BenchReport(rows)
    fill_ratios(report)
    good = tmp_path / "good.csv"
    write_rows(good, report.rows)
    assert check_report(good)[1].speedup_ratio == pytest.approx(5.0)

    report.rows[1].speedup_ratio = 7.0
    bad = tmp_path / "bad.csv"
    write_rows(bad, report.rows)
    with pytest.raises(ValueError, match="speedup_ratio"):
        check_report(bad)

    text = good.read_text().replace("tree_time_s", "per_tree")
    renamed = tmp_path / "renamed.csv"
    renamed.write_text(text)
    with pytest.raises(ValueError, match="columns"):
        check_report(renamed)

    report.rows[1].speedup_ratio = 5.0
    report.rows[1].tree_time_s = 0.003
    inconsistent = tmp_path / "inc.csv"
    write_rows(inconsistent, report.rows)
    with pytest.raises(ValueError, match="batch time"):
        check_report(inconsistent)


@pytest.mark.slow
def test_batching_benefit_is_monotone():
    times = {b: measure(BenchConfig(batch_size=b, mode="dynamic", repeats=5)).tree_time_s
             for b in (1, 8, 32, 64)}
    sizes = sorted(times)
    for a, b in zip(sizes, sizes[1:]):
        assert times[b] <= 1.10 * times[a], times
    manual1 = measure(BenchConfig(batch_size=1, mode="manual", repeats=5)).tree_time_s
    for b in (32, 64):
        full = measure(BenchConfig(batch_size=b, mode="full-dynamic", repeats=5)).tree_time_s
        assert manual1 / full > 1


# -- CLI -----------------------------------------------------------------------------------


def test_cli_bench_and_check_report(tmp_path):
    out = tmp_path / "bench.csv"
    rc, text = run_cli("bench", "--mode", "dynamic", "full-dynamic", "--batch-size", "1", "4",
                       "--tree-size", "8", "--state-size", "4", "--repeats", "3",
                       "--out", str(out))
    assert rc == 0 and "wrote" in text
    assert text.splitlines()[0].split() == list(COLUMNS)
    rc, text = run_cli("check-report", str(out))
    assert rc == 0 and "rows ok" in text


def test_cli_bench_dumps_schedule():
    rc, text = run_cli("bench", "--mode", "dynamic", "--batch-size", "1", "--tree-size", "4",
                       "--state-size", "2", "--repeats", "3", "--dump-schedule", "--dump-block")
    assert rc == 0
    assert "d=1 op=bench/leaf_state in0=[0,1,2,3]" in text
    assert "Function(bench/cell)" in text


def test_cli_rejects_manual_random(capsys):
    rc, _ = run_cli("bench", "--mode", "manual", "--shape-mode", "random", "--batch-size", "2",
                    "--tree-size", "4", "--state-size", "2", "--repeats", "3")
    assert rc == 2
    assert "error:" in capsys.readouterr().err


def test_cli_demo_pipeline():
    rc, text = run_cli("demo", "pipeline", "--input", str(DATA / "sentences.tsv"))
    assert rc == 0 and "mean loss" in text


def test_cli_demo_attention():
    rc, text = run_cli("demo", "attention", "--input", str(DATA / "attention.jsonl"))
    assert rc == 0 and text.count("T=") == 4


def test_cli_demo_treelstm_trains():
    rc, text = run_cli("demo", "treelstm", "--input", str(DATA / "trees.txt"), "--train", "60",
                       "--state-size", "8")
    assert rc == 0
    assert text.strip().splitlines()[-1] == "root accuracy 1.0000"


def test_cli_demo_weave_with_dumps():
    rc, text = run_cli("demo", "weave", "--input", str(DATA / "molecules.jsonl"),
                       "--dump-schedule")
    assert rc == 0 and "molecule 2" in text and "result" in text


def test_cli_demo_errors(tmp_path, capsys):
    rc, _ = run_cli("demo", "treelstm", "--input", str(tmp_path / "missing.txt"))
    assert rc == 2
    bad = tmp_path / "bad.txt"
    bad.write_text("3:(a b\n")
    rc, _ = run_cli("demo", "treelstm", "--input", str(bad))
    assert rc == 2
    rc, _ = run_cli("demo", "attention", "--input", str(DATA / "attention.jsonl"), "--train", "2")
    assert rc == 2
    assert capsys.readouterr().err.count("error:") == 3
