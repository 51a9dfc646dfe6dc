"""Experiment harness: grid shape, resume, sweeps, the supervised
comparison, output round-trips, and the CLI surface."""

import json
import os

import numpy as np
import pytest

from ssllab import cli
from ssllab.bench import (
    BenchError,
    DatasetSpec,
    ExperimentSpec,
    ResultsTable,
    RunRecord,
    SweepSpec,
    compare_supervised,
    load_dataset,
    parse_results,
    report,
    run_grid,
    run_sensitivity,
)
from ssllab.trainer import TrainConfig

FAST_TRAIN = TrainConfig(total_iterations=3, labeled_batch=4, unlabeled_ratio=2, eval_every=8, seed=0)


def fast_spec(out, **kw):
    defaults = dict(
        dataset=DatasetSpec(kind="synthetic", n_per_class=24, n_classes=3, image_size=16),
        methods=("supervised-only", "fixmatch"),
        n_labels=(2, 4),
        seeds=(0,),
        output_dir=str(out),
        train=FAST_TRAIN,
        encoder_widths=(4,),
    )
    defaults.update(kw)
    return ExperimentSpec(**defaults)


class TestSpecValidation:
    def test_unknown_method_rejected(self, tmp_path):
        with pytest.raises(BenchError):
            fast_spec(tmp_path, methods=("fixmatch", "mystery"))

    def test_unknown_override_rejected(self, tmp_path):
        with pytest.raises(BenchError):
            fast_spec(tmp_path, method_overrides={"not_a_param": 1})

    def test_at_least_one_seed(self, tmp_path):
        with pytest.raises(BenchError):
            fast_spec(tmp_path, seeds=())

    def test_sweep_parameter_whitelist(self):
        with pytest.raises(BenchError):
            SweepSpec(parameter="k", values=(1, 2))
        SweepSpec(parameter="p_cutoff", values=(0.5,))

    def test_config_roundtrip(self, tmp_path):
        spec = fast_spec(tmp_path, sweep=SweepSpec("p_cutoff", (0.5, 0.95), "fixmatch", 2))
        path = tmp_path / "config.json"
        spec.save(path)
        loaded = ExperimentSpec.load(path)
        assert loaded.to_dict() == spec.to_dict()

    def test_dataset_path_required_for_file_kinds(self):
        with pytest.raises(BenchError):
            DatasetSpec(kind="fer-csv")


class TestRunGrid:
    def test_grid_produces_one_row_per_cell(self, tmp_path):
        spec = fast_spec(tmp_path / "out")
        table = run_grid(spec)
        assert len(table.records) == 2 * 2 * 1
        assert all(r.status == "ok" for r in table.records)
        assert all(0.0 <= r.accuracy <= 1.0 for r in table.records)

    def test_rerun_resumes_without_retraining(self, tmp_path):
        spec = fast_spec(tmp_path / "out")
        table1 = run_grid(spec)
        mtimes = {
            r.run_dir: os.path.getmtime(os.path.join(r.run_dir, "result.json")) for r in table1.records
        }
        table2 = run_grid(spec)
        assert len(table2.records) == len(table1.records)
        for r in table2.records:
            assert os.path.getmtime(os.path.join(r.run_dir, "result.json")) == mtimes[r.run_dir]
        assert {(r.method, r.n_labels, r.seed, r.accuracy) for r in table1.records} == {
            (r.method, r.n_labels, r.seed, r.accuracy) for r in table2.records
        }

    def test_every_record_carries_full_resolved_config(self, tmp_path):
        spec = fast_spec(tmp_path / "out")
        table = run_grid(spec)
        for r in table.records:
            assert r.config["train"]["total_iterations"] == 3
            assert r.config["method"]["method"] == r.method
            assert r.config["train"]["seed"] == r.seed
            assert "p_cutoff" in r.config["method"]

    def test_run_dirs_contain_history_and_confusion(self, tmp_path):
        spec = fast_spec(tmp_path / "out", methods=("fixmatch",), n_labels=(2,))
        table = run_grid(spec)
        run_dir = table.records[0].run_dir
        assert os.path.exists(os.path.join(run_dir, "history.tsv"))
        assert os.path.exists(os.path.join(run_dir, "confusion.txt"))
        with open(os.path.join(run_dir, "confusion.json")) as fh:
            confusion = json.load(fh)
        counts = np.array(confusion["counts"])
        ds = load_dataset(spec.dataset)
        from ssllab.data import make_splits

        splits = make_splits(ds, 2, spec.dataset.validation_fraction, seed=0)
        assert counts.sum() == len(splits.validation)
        rec_acc = table.records[0].accuracy
        assert np.trace(counts) / counts.sum() == pytest.approx(rec_acc)

    def test_failed_cell_recorded_without_aborting(self, tmp_path):
        # n_labels larger than any class's pool forces a per-cell failure
        spec = fast_spec(tmp_path / "out", n_labels=(2, 9999))
        table = run_grid(spec)
        ok = [r for r in table.records if r.status == "ok"]
        failed = [r for r in table.records if r.status == "error"]
        assert len(ok) == 2 and len(failed) == 2
        assert all("examples" in r.error for r in failed)

    def test_results_roundtrip_through_files(self, tmp_path):
        spec = fast_spec(tmp_path / "out")
        table = run_grid(spec)
        parsed = parse_results(os.path.join(spec.output_dir, "results.json"))
        assert parsed == table

    def test_aggregate_mean_and_stdev(self, tmp_path):
        spec = fast_spec(tmp_path / "out", seeds=(0, 1), methods=("supervised-only",), n_labels=(2,))
        table = run_grid(spec)
        agg = table.aggregate()
        accs = [r.accuracy for r in table.records]
        mean, std, count = agg[("supervised-only", 2)]
        assert count == 2
        assert mean == pytest.approx(np.mean(accs))
        assert std == pytest.approx(np.std(accs))

    def test_parallel_execution_matches_serial(self, tmp_path):
        spec_a = fast_spec(tmp_path / "serial")
        spec_b = fast_spec(tmp_path / "parallel")
        t1 = run_grid(spec_a, parallel=1)
        t2 = run_grid(spec_b, parallel=2)
        key = lambda t: {(r.method, r.n_labels, r.seed): r.accuracy for r in t.records}
        assert key(t1) == key(t2)


class TestSweep:
    def test_sweep_rows_sorted_with_exact_configs(self, tmp_path):
        spec = fast_spec(tmp_path / "out", sweep=SweepSpec("p_cutoff", (0.95, 0.5, 0.99, 0.75), "fixmatch", 2))
        rows = run_sensitivity(spec)
        assert [r["value"] for r in rows] == [0.5, 0.75, 0.95, 0.99]
        for row in rows:
            assert len(row["runs"]) == 1
            assert row["runs"][0]["config"]["method"]["p_cutoff"] == row["value"]

    def test_record_count_is_values_times_seeds(self, tmp_path):
        spec = fast_spec(
            tmp_path / "out", seeds=(0, 1), sweep=SweepSpec("ema_m", (0.9, 0.99, 0.999), "mean-teacher", 2)
        )
        rows = run_sensitivity(spec)
        assert len(rows) == 3
        assert all(len(r["runs"]) == 2 for r in rows)

    def test_missing_sweep_section_rejected(self, tmp_path):
        with pytest.raises(BenchError):
            run_sensitivity(fast_spec(tmp_path / "out"))


class TestCompareSupervised:
    def test_three_columns_shape(self, tmp_path):
        spec = fast_spec(tmp_path / "out")
        comparison = compare_supervised(spec, n_labels=2)
        cols = comparison["columns"]
        assert [c["column"] for c in cols] == ["supervised-all", "supervised-partial", "semi-supervised"]
        assert cols[0]["n_labels"] is None
        assert cols[1]["n_labels"] == 2 and cols[2]["n_labels"] == 2
        assert cols[2]["method"] == "fixmatch"
        for c in cols:
            assert c["mean_accuracy"] is not None

    def test_reported_accuracies_present_in_run_histories(self, tmp_path):
        from ssllab.trainer import MetricsHistory

        spec = fast_spec(tmp_path / "out")
        comparison = compare_supervised(spec, n_labels=2)
        for col in comparison["columns"]:
            for run in col["runs"]:
                history = MetricsHistory.load(os.path.join(run["run_dir"], "history.tsv"))
                assert history.final_accuracy() == pytest.approx(run["accuracy"])


class TestReportAndCli:
    def test_report_renders_saved_outputs(self, tmp_path):
        spec = fast_spec(tmp_path / "out")
        run_grid(spec)
        text = report(spec.output_dir)
        assert "fixmatch" in text and "n=2" in text

    def test_report_empty_dir(self, tmp_path):
        assert "no results" in report(str(tmp_path))

    def test_cli_run_grid_and_report(self, tmp_path, capsys):
        out = tmp_path / "out"
        rc = cli.main(
            [
                "run-grid", "--out", str(out),
                "--methods", "supervised-only",
                "--n-labels", "2",
                "--seeds", "0",
                "--iterations", "3",
            ]
        )
        # the default synthetic dataset is larger; this exercises the real path
        assert rc == 0
        assert (out / "results.json").exists()
        assert (out / "config.json").exists()
        cli.main(["report", "--out", str(out)])
        captured = capsys.readouterr()
        assert "supervised-only" in captured.out

    def test_cli_config_file_overrides(self, tmp_path):
        cfg_path = tmp_path / "config.json"
        fast_spec(tmp_path / "ignored").save(cfg_path)
        out = tmp_path / "out2"
        rc = cli.main(["run-grid", "--config", str(cfg_path), "--out", str(out),
                       "--methods", "supervised-only", "--n-labels", "2"])
        assert rc == 0
        saved = ExperimentSpec.load(out / "config.json")
        assert saved.methods == ("supervised-only",)
        assert saved.output_dir == str(out)

    def test_cli_sweep_verb(self, tmp_path):
        cfg_path = tmp_path / "config.json"
        fast_spec(tmp_path / "sweepout").save(cfg_path)
        rc = cli.main(
            ["run-sweep", "--config", str(cfg_path), "--param", "p_cutoff",
             "--values", "0.5,0.95", "--method", "fixmatch", "--sweep-n-labels", "2"]
        )
        assert rc == 0
        assert (tmp_path / "sweepout" / "sweep.json").exists()

    def test_cli_compare_verb(self, tmp_path):
        cfg_path = tmp_path / "config.json"
        fast_spec(tmp_path / "cmpout").save(cfg_path)
        rc = cli.main(["compare-supervised", "--config", str(cfg_path), "--n-labels", "2"])
        assert rc == 0
        assert (tmp_path / "cmpout" / "comparison.json").exists()


class TestResultsTableFormat:
    def test_rejects_unknown_format_tag(self, tmp_path):
        path = tmp_path / "results.json"
        path.write_text(json.dumps({"format": "something-else", "records": []}))
        with pytest.raises(BenchError):
            ResultsTable.load(path)

    def test_render_text_has_table_one_shape(self):
        records = [
            RunRecord(m, n, 0, "ok", 0.5, "", {})
            for m in ("pi-model", "fixmatch")
            for n in (10, 25, 100, 250)
        ]
        text = ResultsTable(records).render_text()
        lines = text.splitlines()
        assert len(lines) == 3  # header + 2 methods
        assert all(f"n={n}" in lines[0] for n in (10, 25, 100, 250))
