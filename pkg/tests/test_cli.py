"""Command-line pipeline: simulate -> fit -> summarize, resume, error
surfaces, and serialization round-trips."""

import csv
import json
from pathlib import Path

import numpy as np
import pytest

from stbs import state_io
from stbs.cli import main
from stbs.errors import ConfigError, SchemaError
from stbs.inference import FitConfig, Hyperparams

from conftest import make_state


def run_cli(*argv):
    return main([str(a) for a in argv])


@pytest.fixture
def sim_dir(tmp_path):
    out = tmp_path / "sim"
    # the unshrunk hierarchy is heavy-tailed; this seed draws a usable corpus
    code = run_cli("simulate", "--d", 40, "--v", 25, "--k", 2, "--a", 6,
                   "--seed", 26, "--out", out)
    assert code == 0
    return out


class TestSimulate:
    def test_writes_consistent_files(self, sim_dir):
        for name in ("counts.csv", "authors.csv", "covariates.csv", "truth", "manifest"):
            assert (sim_dir / name).exists()
        truth = state_io.load_truth(sim_dir / "truth")
        assert truth.ideal.shape == (6, 2)
        with open(sim_dir / "authors.csv") as fh:
            rows = list(csv.reader(fh))[1:]
        assert len(rows) == 40

    def test_same_seed_byte_identical(self, tmp_path):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            run_cli("simulate", "--d", 20, "--v", 10, "--k", 2, "--a", 4,
                    "--seed", 9, "--out", out)
            outs.append(out)
        for fname in ("counts.csv", "authors.csv", "covariates.csv", "truth"):
            assert (outs[0] / fname).read_bytes() == (outs[1] / fname).read_bytes()

    def test_pinned_positions(self, tmp_path):
        anchors = tmp_path / "anchors.csv"
        with open(anchors, "w") as fh:
            fh.write("author_id,anchor\n")
            for a in range(4):
                fh.write(f"{a},{1.0 if a % 2 else -1.0}\n")
        out = tmp_path / "sim"
        run_cli("simulate", "--d", 12, "--v", 8, "--k", 3, "--a", 4,
                "--seed", 1, "--pin-positions", anchors, "--out", out)
        truth = state_io.load_truth(out / "truth")
        expected = np.repeat(np.array([-1.0, 1.0, -1.0, 1.0])[:, None], 3, axis=1)
        np.testing.assert_array_equal(truth.ideal, expected)


class TestFit:
    def test_contract_files(self, sim_dir, tmp_path):
        run = tmp_path / "run1"
        code = run_cli("fit", "--counts", sim_dir / "counts.csv",
                       "--authors", sim_dir / "authors.csv",
                       "--covariates", sim_dir / "covariates.csv",
                       "--formula", "~ group", "--baseline", "group=g0",
                       "--k", 2, "--epochs", 2, "--batch", 16, "--seed", 7,
                       "--hpf-iters", 5, "--out", run)
        assert code == 0
        assert (run / "state").exists()
        assert (run / "trace.csv").exists()
        assert (run / "manifest").exists()
        with open(run / "trace.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["step", "epoch", "elbo"]
        assert len(rows) - 1 == 2 * 3  # ceil(40/16) batches per epoch

    def test_missing_formula_usage_error(self, sim_dir, tmp_path):
        with pytest.raises(SystemExit) as err:
            run_cli("fit", "--counts", sim_dir / "counts.csv",
                    "--authors", sim_dir / "authors.csv",
                    "--covariates", sim_dir / "covariates.csv",
                    "--out", tmp_path / "x")
        assert err.value.code != 0

    def test_resume_continues_counter(self, sim_dir, tmp_path):
        run = tmp_path / "run1"
        base_args = ["fit", "--counts", sim_dir / "counts.csv",
                     "--authors", sim_dir / "authors.csv",
                     "--covariates", sim_dir / "covariates.csv",
                     "--formula", "~ group", "--baseline", "group=g0",
                     "--k", 2, "--batch", 16, "--seed", 7, "--hpf-iters", 5]
        run_cli(*base_args, "--epochs", 2, "--out", run)
        t_first = state_io.load_state(run / "state").state.t
        run2 = tmp_path / "run2"
        run_cli(*base_args, "--epochs", 1, "--resume", run / "state", "--out", run2)
        t_second = state_io.load_state(run2 / "state").state.t
        assert t_first == 6
        assert t_second == 9

    def test_bad_corpus_surfaces_one_line_error(self, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text("doc_id,term_id,count\n0,0,-3\n")
        code = run_cli("fit", "--counts", bad, "--authors", bad,
                       "--covariates", bad, "--formula", "~ x",
                       "--out", tmp_path / "o")
        assert code == 1
        assert "error:" in capsys.readouterr().err


class TestSummarize:
    @pytest.fixture
    def fitted(self, sim_dir, tmp_path):
        run = tmp_path / "run"
        run_cli("fit", "--counts", sim_dir / "counts.csv",
                "--authors", sim_dir / "authors.csv",
                "--covariates", sim_dir / "covariates.csv",
                "--formula", "~ group", "--baseline", "group=g0",
                "--k", 2, "--epochs", 2, "--batch", 16, "--seed", 7,
                "--hpf-iters", 5, "--out", run)
        return sim_dir, run

    def test_polarity_rows(self, fitted, tmp_path):
        sim_dir, run = fitted
        out = tmp_path / "sum"
        code = run_cli("summarize", "--model", run / "state", "--what", "polarity",
                       "--out", out)
        assert code == 0
        with open(out / "polarity.csv") as fh:
            rows = list(csv.reader(fh))
        assert len(rows) - 1 == 2

    def test_terms_dispatch(self, fitted, tmp_path):
        sim_dir, run = fitted
        out = tmp_path / "sum"
        run_cli("summarize", "--model", run / "state", "--what", "terms",
                "--ideology", "-1", "--top-n", 5, "--out", out)
        with open(out / "top_terms.csv") as fh:
            rows = list(csv.reader(fh))[1:]
        assert len(rows) == 2 * 5
        assert all(row[1] == "-1.0" for row in rows)

    def test_regression_dispatch_with_main(self, fitted, tmp_path):
        sim_dir, run = fitted
        out = tmp_path / "sum"
        run_cli("summarize", "--model", run / "state", "--what", "regression",
                "--main", "group", "--out", out)
        with open(out / "histograms.csv") as fh:
            rows = list(csv.reader(fh))[1:]
        cats = {row[1] for row in rows}
        assert cats == {"(all)", "g0", "g1"}

    def test_full_report(self, fitted, tmp_path):
        sim_dir, run = fitted
        out = tmp_path / "sum"
        code = run_cli("summarize", "--model", run / "state", "--what", "all",
                       "--counts", sim_dir / "counts.csv", "--pool", 10,
                       "--top-docs", 3, "--out", out)
        assert code == 0
        report = state_io.load_report(out / "report")
        for section in ("polarity", "positions", "top_terms", "regression", "influence"):
            assert section in report
        assert (out / "influence.csv").exists()
        assert (out / "weighted_positions.csv").exists()

    def test_state_schema_mismatch(self, tmp_path):
        bogus = tmp_path / "bogus"
        bogus.write_text('{"schema":"other_v9"}\n')
        code = run_cli("summarize", "--model", bogus, "--out", tmp_path / "s")
        assert code == 1


class TestStateIO:
    def test_state_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        state = make_state(rng, 4, 5, 2, 3, 2)
        state.t = 17
        hyper = Hyperparams()
        cfg = FitConfig(num_topics=2)
        path = tmp_path / "state"
        state_io.save_state(path, state, hyper, cfg, rng_state={"k": 1})
        bundle = state_io.load_state(path)
        assert bundle.state.t == 17
        assert bundle.cfg == cfg
        assert bundle.hyper == hyper
        np.testing.assert_array_equal(bundle.state.eta_loc, state.eta_loc)
        np.testing.assert_array_equal(bundle.state.iota_chol, state.iota_chol)
        assert bundle.rng_state == {"k": 1}

    def test_unknown_config_key(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text('{"num_topics": 3, "bogus_key": 1}\n')
        with pytest.raises(ConfigError, match="bogus_key"):
            state_io.load_run_config(path)

    def test_run_config_roundtrip(self, tmp_path):
        path = tmp_path / "cfg.json"
        data = state_io.config_to_dict(Hyperparams(a_theta=0.4), FitConfig(num_topics=7))
        path.write_text(json.dumps(data))
        hyper, cfg = state_io.load_run_config(path)
        assert hyper.a_theta == 0.4
        assert cfg.num_topics == 7

    def test_report_schema_error(self, tmp_path):
        path = tmp_path / "r"
        path.write_text('{"schema":"wrong"}\n')
        with pytest.raises(SchemaError):
            state_io.load_report(path)
