"""Tests for the sparsefactor command line."""

import json

import numpy as np
import pandas as pd
import pytest
from shared.storage import read_metrics, write_matrix

from cli import pipeline
from cli.main import EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION, _prior, build_parser, main

FAST_GIBBS = ["--iterations", "30", "--burn-in", "10", "--pi", "0.5", "0.9", "--gamma", "1"]
FAST_CAVI = ["--max-sweeps", "15", "--pi", "0.5", "0.9", "--gamma", "1"]


@pytest.fixture
def simulated(tmp_path, clean_env):
    out = tmp_path / "sim"
    code = main(["simulate", "--g", "10", "--n", "6", "--pi", "0.5", "1.0", "--seed", "3", "--out", str(out)])
    assert code == EXIT_OK
    return out


class TestSimulate:
    """Tests for `sparsefactor simulate`."""

    def test_writes_data_and_truth(self, simulated):
        assert (simulated / "y.tsv").exists()
        assert (simulated / "y_mask.tsv").exists()
        for block in ("l", "f", "z", "tau", "alpha"):
            assert (simulated / "truth" / f"{block}.tsv").exists()
        spec = json.loads((simulated / "simulation.json").read_text())
        assert spec["g"] == 10 and spec["k"] == 2

    def test_seed_reproducible(self, simulated, tmp_path):
        again = tmp_path / "again"
        main(["simulate", "--g", "10", "--n", "6", "--pi", "0.5", "1.0", "--seed", "3", "--out", str(again)])
        assert (again / "y.tsv").read_bytes() == (simulated / "y.tsv").read_bytes()

    def test_snr_series_shares_truth(self, tmp_path, clean_env):
        out = tmp_path / "series"
        code = main(["simulate", "--g", "8", "--n", "4", "--pi", "1.0", "--snrs", "1", "25", "--out", str(out)])
        assert code == EXIT_OK
        assert (out / "snr_1" / "truth" / "l.tsv").read_bytes() == (
            out / "snr_25" / "truth" / "l.tsv"
        ).read_bytes()
        assert (out / "snr_1" / "y.tsv").read_bytes() != (out / "snr_25" / "y.tsv").read_bytes()

    def test_missing_design_is_validation_error(self, tmp_path, clean_env):
        assert main(["simulate", "--g", "10", "--out", str(tmp_path)]) == EXIT_VALIDATION

    def test_invalid_pi_is_validation_error(self, tmp_path, clean_env):
        code = main(["simulate", "--g", "10", "--n", "4", "--pi", "1.5", "--out", str(tmp_path)])
        assert code == EXIT_VALIDATION


class TestInferenceCommands:
    """gibbs, relabel, cavi, evaluate and fillin on a simulated dataset."""

    def test_gibbs_relabel_evaluate(self, simulated, tmp_path):
        data = str(simulated / "y.tsv")
        chains = tmp_path / "chains"
        assert main(["gibbs", "--data", data, *FAST_GIBBS, "--chains", "2", "--out", str(chains)]) == EXIT_OK
        assert (chains / "chain_1" / "manifest.json").exists()

        aligned = tmp_path / "aligned"
        code = main(
            ["relabel", "--chains", str(chains / "chain_0"), str(chains / "chain_1"), "--out", str(aligned)]
        )
        assert code == EXIT_OK
        assert (aligned / "chain_1" / "f.tsv").exists()

        scored = tmp_path / "scored"
        code = main(
            ["evaluate", "--chains", str(aligned / "chain_0"), str(aligned / "chain_1"),
             "--truth", str(simulated / "truth"), "--out", str(scored)]
        )
        assert code == EXIT_OK
        assert 0.0 <= read_metrics(scored / "metrics.tsv")["z_accuracy"] <= 1.0

    def test_cavi_then_fill_in_evaluation(self, simulated, tmp_path):
        split = tmp_path / "split"
        assert main(["fillin", "--data", str(simulated / "y.tsv"), "--out", str(split)]) == EXIT_OK
        heldout = np.loadtxt(split / "heldout.tsv", dtype=int, ndmin=2)
        assert heldout.shape == (6, 2)
        split_metrics = read_metrics(split / "metrics.tsv")
        assert split_metrics["heldout_count"] == 6
        assert split_metrics["observed_count"] == 60
        assert split_metrics["heldout_fraction"] == pytest.approx(0.1)
        assert split_metrics["train_observed_count"] == 54

        fit = tmp_path / "fit"
        code = main(
            ["cavi", "--data", str(split / "train.tsv"), "--mask", str(split / "train_mask.tsv"),
             *FAST_CAVI, "--trials", "2", "--out", str(fit)]
        )
        assert code == EXIT_OK
        assert (fit / "trials.tsv").read_text().splitlines()[0].startswith("trial\tseed\telbo")

        scored = tmp_path / "scored"
        code = main(
            ["evaluate", "--cavi-state", str(fit / "best_state"), "--data", str(simulated / "y.tsv"),
             "--heldout", str(split / "heldout.tsv"), "--residuals", "--out", str(scored)]
        )
        assert code == EXIT_OK
        assert read_metrics(scored / "metrics.tsv")["fill_in_rrmse"] >= 0.0
        residuals = (scored / "residuals.tsv").read_text().splitlines()
        assert residuals[0] == "row\tcol\tobserved\tpredicted\tresidual"
        assert len(residuals) == 1 + 6

    def test_prior_is_required(self, simulated, tmp_path):
        code = main(["gibbs", "--data", str(simulated / "y.tsv"), "--iterations", "5", "--out", str(tmp_path)])
        assert code == EXIT_VALIDATION

    def test_missing_data_file(self, tmp_path, clean_env):
        code = main(["cavi", "--data", str(tmp_path / "absent.tsv"), *FAST_CAVI, "--out", str(tmp_path)])
        assert code == EXIT_VALIDATION

    def test_evaluate_needs_one_source(self, simulated, tmp_path):
        code = main(["evaluate", "--truth", str(simulated / "truth"), "--out", str(tmp_path)])
        assert code == EXIT_VALIDATION

    def test_residuals_over_every_observed_entry(self, simulated, tmp_path):
        fit = tmp_path / "fit"
        assert main(["cavi", "--data", str(simulated / "y.tsv"), *FAST_CAVI, "--out", str(fit)]) == EXIT_OK
        scored = tmp_path / "scored"
        code = main(
            ["evaluate", "--cavi-state", str(fit / "best_state"), "--truth", str(simulated / "truth"),
             "--data", str(simulated / "y.tsv"), "--residuals", "--out", str(scored)]
        )
        assert code == EXIT_OK
        assert len((scored / "residuals.tsv").read_text().splitlines()) == 1 + 60

    def test_residuals_need_data(self, simulated, tmp_path):
        fit = tmp_path / "fit"
        assert main(["cavi", "--data", str(simulated / "y.tsv"), *FAST_CAVI, "--out", str(fit)]) == EXIT_OK
        code = main(
            ["evaluate", "--cavi-state", str(fit / "best_state"), "--truth", str(simulated / "truth"),
             "--residuals", "--out", str(tmp_path / "scored")]
        )
        assert code == EXIT_VALIDATION

    def test_early_stop_sweeps(self, simulated, tmp_path):
        fit = tmp_path / "fit"
        code = main(
            ["cavi", "--data", str(simulated / "y.tsv"), *FAST_CAVI, "--trials", "2",
             "--early-stop-sweeps", "5", "--out", str(fit)]
        )
        assert code == EXIT_OK
        trials = pd.read_csv(fit / "trials.tsv", sep="\t")
        assert (trials["sweeps"] <= 5).sum() == 1


class TestPriorFlags:
    """Hyperparameters assembled from the prior flags."""

    def _args(self, *flags):
        return build_parser().parse_args(["gibbs", "--data", "y.tsv", "--iterations", "5", *flags])

    def test_gamma_sets_every_prior(self):
        hyper = _prior(self._args("--pi", "0.5", "--gamma", "2"))
        assert (hyper.a_tau, hyper.b_tau, hyper.a_alpha, hyper.b_alpha) == (2.0, 2.0, 2.0, 2.0)

    def test_individual_flags_override_gamma(self):
        hyper = _prior(
            self._args("--pi", "0.5", "--gamma", "2", "--a-tau", "3", "--b-alpha", "0.5")
        )
        assert (hyper.a_tau, hyper.b_tau, hyper.a_alpha, hyper.b_alpha) == (3.0, 2.0, 2.0, 0.5)

    def test_split_with_individual_flags(self):
        hyper = _prior(self._args("--sparse", "2", "--dense", "1", "--b-tau", "4"))
        assert hyper.pi == [0.1, 0.1, 0.9]
        assert hyper.b_tau == 4.0
        assert hyper.a_tau == 1e-3

    def test_early_stop_alias(self):
        for flag in ("--early-stop-sweeps", "--early-stop"):
            args = build_parser().parse_args(["cavi", "--data", "y.tsv", "--pi", "0.5", flag, "7"])
            assert args.early_stop_sweeps == 7


class TestRun:
    """Tests for `sparsefactor run`."""

    def test_config_file(self, tiny_config, tmp_path, clean_env):
        path = tmp_path / "config.json"
        path.write_text(tiny_config.model_dump_json())
        out = tmp_path / "flagged"
        code = main(["run", "--config", str(path), "--method", "cavi", "--out", str(out)])
        assert code == EXIT_OK
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config"]["method"] == "cavi"
        assert manifest["status"] == "completed"

    def test_environment_fills_unset_fields(self, tiny_spec, tiny_hyper, tmp_path, clean_env):
        config = {
            "simulation": tiny_spec.model_dump(),
            "hyper": tiny_hyper.model_dump(),
            "method": "cavi",
            "cavi": {"max_sweeps": 10},
        }
        path = tmp_path / "config.json"
        path.write_text(json.dumps(config))
        clean_env.setenv("SPARSEFACTOR_OUT", str(tmp_path / "from_env"))
        assert main(["run", "--config", str(path)]) == EXIT_OK
        assert (tmp_path / "from_env" / "manifest.json").exists()

    def test_snr_override(self, tiny_config, tmp_path, clean_env):
        path = tmp_path / "config.json"
        path.write_text(tiny_config.model_dump_json())
        out = tmp_path / "snr25"
        code = main(["run", "--config", str(path), "--method", "cavi", "--snr", "25", "--out", str(out)])
        assert code == EXIT_OK
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config"]["simulation"]["snr"] == 25.0

    def test_config_and_preset_are_exclusive(self, tmp_path, clean_env):
        path = tmp_path / "config.json"
        path.write_text("{}")
        assert main(["run", "--config", str(path), "--preset", "simulation"]) == EXIT_VALIDATION
        assert main(["run"]) == EXIT_VALIDATION

    def test_invalid_config_is_validation_error(self, tmp_path, clean_env):
        path = tmp_path / "config.json"
        path.write_text(json.dumps({"method": "cavi"}))
        assert main(["run", "--config", str(path)]) == EXIT_VALIDATION

    def test_stage_failure_is_runtime_error(self, tiny_config, tmp_path, clean_env, monkeypatch):
        def broken(*args, **kwargs):
            raise RuntimeError("boom")

        monkeypatch.setattr(pipeline, "run_multi_trial", broken)
        path = tmp_path / "config.json"
        path.write_text(tiny_config.model_dump_json())
        assert main(["run", "--config", str(path), "--method", "cavi"]) == EXIT_RUNTIME
        manifest = json.loads((tiny_config.out / "manifest.json").read_text())
        assert manifest["failed_stage"] == "cavi"


class TestUsage:
    def test_unknown_command(self, clean_env):
        with pytest.raises(SystemExit) as excinfo:
            main(["transmogrify"])
        assert excinfo.value.code == EXIT_VALIDATION

    def test_bad_flag_value(self, clean_env):
        with pytest.raises(SystemExit) as excinfo:
            main(["simulate", "--g", "ten"])
        assert excinfo.value.code == EXIT_VALIDATION

    def test_bad_environment(self, clean_env):
        clean_env.setenv("SPARSEFACTOR_THREADS", "many")
        assert main(["simulate", "--preset", "reference"]) == EXIT_VALIDATION


def test_write_matrix_input_accepted(tmp_path, clean_env):
    path = write_matrix(tmp_path / "y.tsv", np.arange(12.0).reshape(4, 3) + 1.0)
    out = tmp_path / "split"
    assert main(["fillin", "--data", str(path), "--fraction", "0.25", "--out", str(out)]) == EXIT_OK
    assert np.loadtxt(out / "heldout.tsv", dtype=int, ndmin=2).shape == (3, 2)
