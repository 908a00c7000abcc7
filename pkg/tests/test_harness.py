"""Tests for experiment configs, runners, output writing, and the CLI."""

import dataclasses
import json
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner
from numpy.testing import assert_allclose

from starlab.harness.cli import main
from starlab.harness.config import (
    ClosedFormParams,
    ConfigError,
    ExperimentConfig,
    GeneralizeEvalParams,
    MetricTable,
    NqmMetaTrainParams,
    RunRecord,
    StabilityCheckParams,
    StarMetaTrainParams,
    VarianceSweepParams,
    load_config,
    parse_arm,
    write_csv,
    write_run,
)
from starlab.harness.experiments import (
    RUNNERS,
    alpha_ceiling,
    default_2d_task,
    run_closed_form,
    run_generalize_eval,
    run_nqm_meta_train,
    run_stability_check,
    run_star_meta_train,
    run_variance_sweep,
)
from starlab.harness.figures import render_figures


def small_star_params(**kw):
    defaults = dict(
        arms=("star_wd0.5", "blackbox"),
        n_seeds=1,
        meta_steps=2,
        horizon=10,
        truncation=5,
        n_pairs=2,
        checkpoint_every=1,
    )
    defaults.update(kw)
    return StarMetaTrainParams(**defaults)


class TestParseArm:
    def test_known_labels(self):
        assert parse_arm("blackbox") == ("blackbox", 0.0)
        assert parse_arm("hyperparam") == ("hyperparam", 0.0)
        assert parse_arm("star") == ("star", 0.0)
        assert parse_arm("star_wd0.5") == ("star", 0.5)
        assert parse_arm("star_wd0.1") == ("star", 0.1)

    def test_bad_labels(self):
        with pytest.raises(ConfigError):
            parse_arm("star_wdx")
        with pytest.raises(ConfigError):
            parse_arm("adam")


class TestParamsValidation:
    def test_stability_params(self):
        with pytest.raises(ConfigError, match="certificate"):
            StabilityCheckParams(certificate="lyapunov")
        with pytest.raises(ConfigError, match="upper_gains"):
            StabilityCheckParams(certificate="robust")

    def test_closed_form_params(self):
        with pytest.raises(ConfigError):
            ClosedFormParams(alpha_multipliers=())
        with pytest.raises(ConfigError):
            ClosedFormParams(mc_seeds=1)
        assert ClosedFormParams(mc_seeds=0).mc_seeds == 0

    def test_variance_params(self):
        with pytest.raises(ConfigError):
            VarianceSweepParams(n_alphas=1)
        with pytest.raises(ConfigError):
            VarianceSweepParams(n_seeds=1)
        with pytest.raises(ConfigError):
            VarianceSweepParams(fd_step=0.0)

    def test_star_params(self):
        with pytest.raises(ConfigError):
            StarMetaTrainParams(arms=())
        with pytest.raises(ConfigError):
            StarMetaTrainParams(arms=("sgd",))

    def test_generalize_params(self):
        with pytest.raises(ConfigError):
            GeneralizeEvalParams(arms=("nope",))
        with pytest.raises(ConfigError):
            GeneralizeEvalParams(horizon_multiplier=0)


class TestExperimentConfig:
    def test_unknown_experiment(self):
        with pytest.raises(ConfigError, match="experiment"):
            ExperimentConfig(experiment="mystery")

    def test_default_params_fill_in(self):
        cfg = ExperimentConfig(experiment="nqm-closed-form")
        assert isinstance(cfg.params, ClosedFormParams)

    def test_params_type_checked(self):
        with pytest.raises(ConfigError, match="params"):
            ExperimentConfig(experiment="nqm-closed-form", params=StabilityCheckParams())

    def test_bool_seed_rejected(self):
        with pytest.raises(ConfigError, match="seed"):
            ExperimentConfig(experiment="nqm-closed-form", seed=True)

    def test_json_round_trip(self):
        cfg = ExperimentConfig(
            experiment="nqm-closed-form",
            seed=7,
            params=ClosedFormParams(alpha_multipliers=(0.3, 0.5), t_grid=(1, 5), mc_seeds=0),
            out_dir="somewhere",
        )
        back = ExperimentConfig.from_json_dict(json.loads(json.dumps(cfg.to_json_dict())))
        assert back == cfg
        assert back.params.t_grid == (1, 5)

    def test_from_json_rejects_unknown_keys(self):
        with pytest.raises(ConfigError, match="unknown config keys"):
            ExperimentConfig.from_json_dict({"experiment": "nqm-closed-form", "extra": 1})
        with pytest.raises(ConfigError, match="unknown parameters"):
            ExperimentConfig.from_json_dict(
                {"experiment": "nqm-closed-form", "params": {"bogus": 3}}
            )

    def test_from_json_requires_experiment(self):
        with pytest.raises(ConfigError, match="experiment"):
            ExperimentConfig.from_json_dict({"seed": 1})

    def test_from_json_wraps_bad_values(self):
        with pytest.raises(ConfigError, match="bad parameters"):
            ExperimentConfig.from_json_dict(
                {"experiment": "nqm-closed-form", "params": {"mc_seeds": 1}}
            )

    def test_fingerprint_excludes_out_dir(self):
        a = ExperimentConfig(experiment="nqm-closed-form", seed=3, out_dir="x")
        b = ExperimentConfig(experiment="nqm-closed-form", seed=3, out_dir="y")
        c = ExperimentConfig(experiment="nqm-closed-form", seed=4)
        assert a.fingerprint() == b.fingerprint()
        assert a.fingerprint() != c.fingerprint()

    def test_load_config_errors(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            load_config(tmp_path / "missing.json")
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        with pytest.raises(ConfigError, match="valid JSON"):
            load_config(bad)


class TestMetricTable:
    def test_first_column_must_be_step(self):
        table = MetricTable(name="t", header=("loss",))
        with pytest.raises(ValueError, match="step"):
            table.validate()

    def test_row_width_checked(self):
        table = MetricTable(name="t", header=("step", "loss"))
        table.rows.append((0,))
        with pytest.raises(ValueError, match="width"):
            table.validate()

    def test_steps_strictly_increasing(self):
        table = MetricTable(name="t", header=("step", "loss"))
        table.rows.extend([(0, 1.0), (0, 2.0)])
        with pytest.raises(ValueError, match="increasing"):
            table.validate()

    def test_duplicate_table_rejected(self):
        record = RunRecord(config=ExperimentConfig(experiment="nqm-closed-form"))
        record.add_table("x", ("step",))
        with pytest.raises(ValueError, match="duplicate"):
            record.add_table("x", ("step",))


class TestCsvWriting:
    def test_formatting_and_line_endings(self, tmp_path):
        table = MetricTable(name="t", header=("step", "value", "flag", "label"))
        table.rows.append((0, 0.1, True, "arm"))
        table.rows.append((1, float("inf"), False, "other"))
        path = tmp_path / "t.csv"
        write_csv(path, table)
        raw = path.read_bytes()
        assert b"\r" not in raw
        assert raw.endswith(b"\n")
        lines = raw.decode().splitlines()
        assert lines[0] == "step,value,flag,label"
        assert lines[1] == "0,0.1,1,arm"
        assert lines[2] == "1,inf,0,other"

    def test_comma_in_cell_refused(self, tmp_path):
        table = MetricTable(name="t", header=("step", "label"))
        table.rows.append((0, "a,b"))
        with pytest.raises(ValueError, match="quoting"):
            write_csv(tmp_path / "t.csv", table)

    def test_rewrite_is_byte_identical(self, tmp_path):
        table = MetricTable(name="t", header=("step", "value"))
        table.rows.append((0, 1.0 / 3.0))
        write_csv(tmp_path / "a.csv", table)
        write_csv(tmp_path / "b.csv", table)
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


class TestWriteRun:
    def test_outputs_ignore_out_dir(self, tmp_path):
        params = ClosedFormParams(alpha_multipliers=(0.3,), t_grid=(1, 5), mc_seeds=0)
        cfg_a = ExperimentConfig("nqm-closed-form", seed=3, params=params, out_dir="a")
        cfg_b = ExperimentConfig("nqm-closed-form", seed=3, params=params, out_dir="b")
        rec_a = run_closed_form(cfg_a)
        rec_b = run_closed_form(cfg_b)
        write_run(rec_a, tmp_path / "a", threads=1)
        write_run(rec_b, tmp_path / "b", threads=2)
        for name in ("config.json", "loss_vs_horizon.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        meta = json.loads((tmp_path / "a" / "meta.json").read_text())
        assert meta["config_fingerprint"] == cfg_a.fingerprint()
        assert meta["threads"] == 1


class TestRunners:
    def test_stability_check_default(self):
        cfg = ExperimentConfig(experiment="stability-check")
        record = run_stability_check(cfg)
        report = record.reports["report"]
        assert report["certified"] is True
        assert report["empirical_verdict"] == "stable"
        assert len(record.tables["eigenvalues"].rows) == 2

    def test_stability_check_robust(self):
        cfg = ExperimentConfig(
            experiment="stability-check",
            params=StabilityCheckParams(
                certificate="robust",
                alpha=0.2,
                precond=((0.1, 0.0), (0.0, 0.1)),
                upper_gains=(1.0, 1.0),
            ),
        )
        record = run_stability_check(cfg)
        assert "gain_cap" in record.reports["report"]["notes"]

    def test_closed_form_values(self):
        cfg = ExperimentConfig(
            experiment="nqm-closed-form",
            seed=3,
            params=ClosedFormParams(alpha_multipliers=(0.5,), t_grid=(1, 10), mc_seeds=100),
        )
        record = run_closed_form(cfg)
        rows = record.tables["loss_vs_horizon"].rows
        assert len(rows) == 2
        task = default_2d_task()
        for row in rows:
            _, mult, alpha, horizon, loss, mc_mean, mc_stderr, mc_div = row
            assert alpha == 0.5 * alpha_ceiling(task)
            assert np.isfinite(loss)
            assert abs(mc_mean - loss) < 5 * mc_stderr
            assert mc_div == 0.0
        assert not record.all_diverged

    def test_variance_sweep_structure(self):
        cfg = ExperimentConfig(
            experiment="variance-sweep",
            params=VarianceSweepParams(n_alphas=3, t_grid=(1, 5), n_seeds=12),
        )
        record = run_variance_sweep(cfg)
        rows = record.tables["variance"].rows
        assert len(rows) == 6
        assert all(row[6] == 12 for row in rows if row[5] == 0.0)
        assert not record.all_diverged

    def test_variance_sweep_threads_parity(self):
        cfg = ExperimentConfig(
            experiment="variance-sweep",
            params=VarianceSweepParams(n_alphas=3, t_grid=(1, 5), n_seeds=8),
        )
        serial = run_variance_sweep(cfg, threads=1)
        threaded = run_variance_sweep(cfg, threads=3)
        assert serial.tables["variance"].rows == threaded.tables["variance"].rows

    def test_nqm_meta_train_structure(self):
        cfg = ExperimentConfig(
            experiment="nqm-meta-train",
            params=NqmMetaTrainParams(
                alpha_multipliers=(0.3,),
                n_seeds=1,
                horizon=10,
                meta_steps=3,
                checkpoint_every=2,
                n_pairs=2,
                oracle_iters=50,
            ),
        )
        record = run_nqm_meta_train(cfg)
        summary = record.tables["summary"].rows
        assert len(summary) == 1
        assert summary[0][1] == "mult0.3"
        assert np.isfinite(summary[0][3])
        curve = record.tables["curve_mult0.3_seed0"]
        assert len(curve.rows) == 3
        assert curve.header[-2:] == ("eig_mag_large", "eig_mag_small")
        assert not record.all_diverged

    def test_star_meta_train_structure(self):
        cfg = ExperimentConfig(
            experiment="star-meta-train", seed=1, params=small_star_params()
        )
        record = run_star_meta_train(cfg)
        assert len(record.tables["summary"].rows) == 2
        assert len(record.tables["curve_star_wd0.5_seed0"].rows) == 2
        expected_keys = {
            "star_wd0.5_seed0_step0",
            "star_wd0.5_seed0_step1",
            "star_wd0.5_seed0_step2",
            "star_wd0.5_seed0_final",
            "blackbox_seed0_step0",
            "blackbox_seed0_step1",
            "blackbox_seed0_step2",
            "blackbox_seed0_final",
        }
        assert set(record.star_checkpoints) == expected_keys
        assert record.star_checkpoints["star_wd0.5_seed0_final"].kind == "star"
        assert not record.all_diverged

    def test_star_meta_train_threads_parity(self):
        cfg = ExperimentConfig(
            experiment="star-meta-train", seed=1, params=small_star_params()
        )
        serial = run_star_meta_train(cfg, threads=1)
        threaded = run_star_meta_train(cfg, threads=2)
        for name, table in serial.tables.items():
            assert table.rows == threaded.tables[name].rows

    def test_generalize_eval_chain(self, tmp_path):
        train_cfg = ExperimentConfig(
            experiment="star-meta-train", seed=1, params=small_star_params()
        )
        train_record = run_star_meta_train(train_cfg)
        source = tmp_path / "train"
        write_run(train_record, source, threads=1)

        eval_cfg = ExperimentConfig(
            experiment="generalize-eval",
            seed=2,
            params=GeneralizeEvalParams(
                source_run=str(source),
                arms=("star_wd0.5", "blackbox"),
                n_seeds=1,
                meta_horizon=10,
                horizon_multiplier=2,
                record_every=5,
            ),
        )
        record = run_generalize_eval(eval_cfg)
        summary = record.tables["summary"].rows
        assert len(summary) == 10  # 5 tasks x 2 arms x 1 seed
        horizons = {row[1]: row[4] for row in summary}
        assert horizons["mlp-base"] == 20
        assert horizons["mlp-long-horizon"] == 100
        assert len(record.tables["aggregate"].rows) == 10
        assert not record.all_diverged

        threaded = run_generalize_eval(eval_cfg, threads=3)
        assert threaded.tables["summary"].rows == summary

    def test_generalize_eval_errors(self, tmp_path):
        with pytest.raises(ConfigError, match="source_run"):
            run_generalize_eval(
                ExperimentConfig(experiment="generalize-eval", params=GeneralizeEvalParams())
            )
        with pytest.raises(ConfigError, match="checkpoints"):
            run_generalize_eval(
                ExperimentConfig(
                    experiment="generalize-eval",
                    params=GeneralizeEvalParams(source_run=str(tmp_path / "nope")),
                )
            )
        empty = tmp_path / "empty"
        (empty / "checkpoints").mkdir(parents=True)
        with pytest.raises(ConfigError, match="missing checkpoint"):
            run_generalize_eval(
                ExperimentConfig(
                    experiment="generalize-eval",
                    params=GeneralizeEvalParams(source_run=str(empty)),
                )
            )

    def test_every_experiment_has_runner_and_figure(self):
        from starlab.harness.config import EXPERIMENT_IDS
        from starlab.harness.figures import _RENDERERS

        assert set(RUNNERS) == set(EXPERIMENT_IDS)
        assert set(_RENDERERS) == set(EXPERIMENT_IDS)


class TestFigures:
    def test_stability_figure_rendered(self, tmp_path):
        record = run_stability_check(ExperimentConfig(experiment="stability-check"))
        paths = render_figures(record, tmp_path)
        assert len(paths) == 1
        assert paths[0].name == "fig_spectrum.png"
        assert paths[0].stat().st_size > 1000

    def test_closed_form_figure_rendered(self, tmp_path):
        cfg = ExperimentConfig(
            experiment="nqm-closed-form",
            params=ClosedFormParams(alpha_multipliers=(0.3,), t_grid=(1, 5), mc_seeds=0),
        )
        record = run_closed_form(cfg)
        paths = render_figures(record, tmp_path)
        assert paths[0].name == "fig_loss_vs_horizon.png"
        assert paths[0].stat().st_size > 1000


class TestCli:
    def test_success_exit_zero(self, tmp_path):
        runner = CliRunner()
        out = tmp_path / "run"
        result = runner.invoke(
            main, ["stability-check", "--out", str(out), "--no-figures"]
        )
        assert result.exit_code == 0, result.output
        assert "wrote" in result.output
        assert (out / "config.json").is_file()
        assert (out / "report.json").is_file()

    def test_figures_written_by_default(self, tmp_path):
        runner = CliRunner()
        out = tmp_path / "run"
        result = runner.invoke(main, ["stability-check", "--out", str(out)])
        assert result.exit_code == 0, result.output
        assert (out / "figures" / "fig_spectrum.png").is_file()

    def test_config_mismatch_exit_two(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({"experiment": "stability-check"}))
        runner = CliRunner()
        result = runner.invoke(
            main, ["nqm-closed-form", "--config", str(cfg_path), "--no-figures"]
        )
        assert result.exit_code == 2
        assert "config error" in result.output

    def test_bad_config_exit_two(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({"experiment": "stability-check", "bogus": 1}))
        runner = CliRunner()
        result = runner.invoke(
            main, ["stability-check", "--config", str(cfg_path), "--no-figures"]
        )
        assert result.exit_code == 2

    def test_missing_config_exit_two(self, tmp_path):
        runner = CliRunner()
        result = runner.invoke(
            main,
            ["stability-check", "--config", str(tmp_path / "nope.json"), "--no-figures"],
        )
        assert result.exit_code == 2

    def test_bad_threads_exit_two(self, tmp_path):
        runner = CliRunner()
        result = runner.invoke(
            main, ["stability-check", "--out", str(tmp_path / "x"), "--threads", "0"]
        )
        assert result.exit_code == 2

    def test_all_diverged_exit_three(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(
            json.dumps(
                {
                    "experiment": "nqm-closed-form",
                    "params": {
                        "alpha_multipliers": [2.0],
                        "t_grid": [500, 1000],
                        "mc_seeds": 0,
                    },
                }
            )
        )
        out = tmp_path / "run"
        runner = CliRunner()
        result = runner.invoke(
            main,
            ["nqm-closed-form", "--config", str(cfg_path), "--out", str(out), "--no-figures"],
        )
        assert result.exit_code == 3
        assert "diverged" in result.output
        assert (out / "loss_vs_horizon.csv").is_file()

    def test_rerun_byte_identical_including_threads(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(
            json.dumps(
                {
                    "experiment": "nqm-closed-form",
                    "seed": 3,
                    "params": {
                        "alpha_multipliers": [0.3, 0.5],
                        "t_grid": [1, 5, 10],
                        "mc_seeds": 50,
                    },
                }
            )
        )
        runner = CliRunner()
        outs = []
        for name, threads in (("a", "1"), ("b", "1"), ("c", "4")):
            out = tmp_path / name
            result = runner.invoke(
                main,
                [
                    "nqm-closed-form", "--config", str(cfg_path),
                    "--out", str(out), "--threads", threads, "--no-figures",
                ],
            )
            assert result.exit_code == 0, result.output
            outs.append(out)
        ref_csv = (outs[0] / "loss_vs_horizon.csv").read_bytes()
        ref_cfg = (outs[0] / "config.json").read_bytes()
        for out in outs[1:]:
            assert (out / "loss_vs_horizon.csv").read_bytes() == ref_csv
            assert (out / "config.json").read_bytes() == ref_cfg

    def test_seed_override(self, tmp_path):
        runner = CliRunner()
        out = tmp_path / "run"
        result = runner.invoke(
            main, ["stability-check", "--seed", "9", "--out", str(out), "--no-figures"]
        )
        assert result.exit_code == 0
        cfg = json.loads((out / "config.json").read_text())
        assert cfg["seed"] == 9
