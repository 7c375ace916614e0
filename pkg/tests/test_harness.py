import json
import math

import numpy as np
import pytest

from sirpdoa import cli
from sirpdoa import harness as h
from sirpdoa.estimators import EstimatorError


@pytest.fixture(scope="module")
def small_config():
    return h.paper_experiment(
        "k", sweep_values=(20.0, 30.0), trials=3,
        estimators=("gaussian_white", "music"), iterations=(1,))


class TestMatchPermutation:
    def test_swapped_targets_zero_error(self):
        truth = np.array([[18.0, 20.0], [45.0, 40.0]])
        swapped = truth[::-1]
        assert np.allclose(h.match_permutation(swapped, truth), 0.0)

    def test_single_target_plain_difference(self):
        errs = h.match_permutation(np.array([[11.0, 19.0]]),
                                   np.array([[10.0, 21.0]]))
        assert np.allclose(errs, [1.0, 4.0])

    def test_uniform_offset_hand_value(self):
        truth = np.array([[18.0, 20.0], [45.0, 40.0]])
        est = truth + 1.0
        errs = h.match_permutation(est, truth)
        assert errs.sum() == pytest.approx(4.0)
        # hand enumeration: the crossed assignment costs far more
        crossed = ((truth[::-1] + 1.0 - truth) ** 2).sum()
        assert crossed > 4.0

    def test_count_mismatch(self):
        with pytest.raises(ValueError):
            h.match_permutation(np.array([[1.0, 2.0]]),
                                np.array([[1.0, 2.0], [3.0, 4.0]]))


class TestAggregate:
    def test_unit_errors(self):
        # Documented convention: per-trial sum over the 2K angles, so four
        # angles at 1 deg^2 each aggregate to 10*log10(4).
        trials = [np.ones(4), np.ones(4)]
        mse_db, used, failed = h.aggregate(trials)
        assert mse_db == pytest.approx(10 * math.log10(4.0), abs=1e-12)
        assert (used, failed) == (2, 0)

    def test_tenth_errors(self):
        mse_db, _, _ = h.aggregate([0.1 * np.ones(4)])
        assert mse_db == pytest.approx(10 * math.log10(0.4), abs=1e-12)

    def test_three_trial_fixture_hand_value(self):
        trials = [np.array([1.0, 2.0, 3.0, 4.0]),
                  None,
                  np.array([0.5, 0.5, 0.5, 0.5])]
        mse_db, used, failed = h.aggregate(trials)
        assert used == 2 and failed == 1
        assert mse_db == pytest.approx(10 * math.log10((10.0 + 2.0) / 2))

    def test_permutation_invariance(self):
        rng = np.random.default_rng(50)
        trials = [rng.uniform(0.1, 2.0, size=4) for _ in range(10)]
        a1, _, _ = h.aggregate(trials)
        a2, _, _ = h.aggregate(trials[::-1])
        assert a1 == a2

    def test_all_failed(self):
        with pytest.raises(EstimatorError):
            h.aggregate([None, None])


class TestRunTrial:
    def test_deterministic(self, small_config):
        r1 = h.run_trial(small_config, 20.0, 0)
        r2 = h.run_trial(small_config, 20.0, 0)
        for name in r1:
            for it in r1[name]:
                assert np.array_equal(r1[name][it], r2[name][it])

    def test_high_scr_hook(self):
        cfg = h.paper_experiment("k", sweep_values=(60.0,), trials=1,
                                 estimators=("gaussian_white",),
                                 iterations=(1,))
        res = h.run_trial(cfg, 60.0, 0)
        errs = res["gaussian_white"][1]
        assert np.max(errs) < cfg.estimator_config.refine_tol ** 2


class TestSweep:
    def test_rows_and_accounting(self, small_config):
        res = h.sweep(small_config)
        assert len(res.rows) == 2 * 2  # 2 sweep values x 2 single-shot rows
        values = [r.sweep_value for r in res.rows]
        assert values == sorted(values)
        for r in res.rows:
            assert r.trials_used + r.failures == small_config.trials

    def test_crb_consistent_across_estimators(self, small_config):
        res = h.sweep(small_config)
        for sv in (20.0, 30.0):
            dbs = {r.crb_db for r in res.rows if r.sweep_value == sv}
            assert len(dbs) == 1

    def test_crb_matches_standalone_curve(self, small_config):
        res = h.sweep(small_config)
        curve = dict(h.crb_curve(small_config))
        for r in res.rows:
            assert r.crb_db == curve[r.sweep_value]

    def test_jobs_do_not_change_results(self, small_config):
        seq = h.sweep(small_config, jobs=1)
        par = h.sweep(small_config, jobs=3)
        assert seq.to_csv() == par.to_csv()

    def test_csv_deterministic(self, small_config):
        assert h.sweep(small_config).to_csv() == h.sweep(small_config).to_csv()

    def test_csv_header(self, small_config):
        text = h.sweep(small_config).to_csv()
        assert text.splitlines()[0] == h.CSV_HEADER

    def test_pulse_sweep_axis(self):
        cfg = h.paper_experiment(
            "k", sweep_axis="pulses", sweep_values=(13, 15),
            fixed_scr_db=25.0, trials=2, estimators=("music",),
            iterations=(1,))
        res = h.sweep(cfg)
        assert {r.sweep_value for r in res.rows} == {13.0, 15.0}
        # more pulses cannot raise the bound
        crbs = {r.sweep_value: r.crb_db for r in res.rows}
        assert crbs[15.0] < crbs[13.0]


class TestConfigIO:
    def test_load_reference_config(self):
        cfg = h.load_config("configs/paper_k.json")
        assert cfg.geometry.virtual_size == 12
        assert cfg.scene.pulses == 15
        assert cfg.texture.shape == 2.0
        assert cfg.sweep_values[0] == -5.0

    def test_missing_file_names_path(self, tmp_path):
        missing = str(tmp_path / "nope.json")
        with pytest.raises(h.ConfigError) as err:
            h.load_config(missing)
        assert "nope.json" in str(err.value)

    def test_malformed_json_has_location(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{ not json }")
        with pytest.raises(h.ConfigError) as err:
            h.load_config(str(p))
        assert "line" in str(err.value)

    def test_missing_field_named(self):
        doc = {"geometry": {"tx_positions": [0.0], "rx_positions": [0.0]}}
        with pytest.raises(h.ConfigError) as err:
            h.config_from_dict(doc)
        assert "wavelength" in str(err.value)

    def test_unknown_estimator_rejected(self):
        with pytest.raises(h.ConfigError):
            h.paper_experiment("k", estimators=("bogus",))

    def test_bad_rcs_entry(self):
        doc = json.loads(open("configs/paper_k.json").read())
        doc["scene"]["rcs"] = ["x", [1, 2]]
        with pytest.raises(h.ConfigError):
            h.config_from_dict(doc)

    def test_estimator_config_overrides(self):
        doc = json.loads(open("configs/paper_k.json").read())
        doc["estimator_config"] = {"coarse_grid_step": 2.0, "refine_tol": 0.05}
        cfg = h.config_from_dict(doc)
        assert cfg.estimator_config.coarse_grid_step == 2.0

    def test_estimator_config_unknown_field(self):
        doc = json.loads(open("configs/paper_k.json").read())
        doc["estimator_config"] = {"not_a_field": 1}
        with pytest.raises(h.ConfigError):
            h.config_from_dict(doc)


def _write_tiny_config(path):
    doc = {
        "geometry": {"wavelength": 1.0,
                     "tx_positions": [0.0, 0.5, 1.0],
                     "rx_positions": [0.0, 0.5, 1.0, 1.5]},
        "scene": {"dod_deg": [18.0, 45.0], "doa_deg": [20.0, 40.0],
                  "rcs": [[2.0, 3.0], [1.0, -0.5]], "doppler": [0.3, 0.8],
                  "pulses": 15, "snapshots_per_pulse": 5},
        "clutter": {"family": "k", "shape": 2.0, "scale": 10.0},
        "sweep": {"axis": "scr", "values": [25.0]},
        "trials": 2,
        "base_seed": 7,
        "estimators": ["music"],
        "iterations": [1],
    }
    path.write_text(json.dumps(doc))


class TestCli:
    def test_crb_subcommand(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        _write_tiny_config(cfg)
        out = tmp_path / "crb.csv"
        rc = cli.cli_main(["crb", "--config", str(cfg), "--out", str(out),
                           "--quiet"])
        assert rc == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "sweep_value,crb_db"
        assert len(lines) == 2

    def test_missing_config_exit_one(self, tmp_path, capsys):
        rc = cli.cli_main(["crb", "--config", str(tmp_path / "gone.json"),
                           "--out", str(tmp_path / "o.csv")])
        assert rc == 1
        assert "gone.json" in capsys.readouterr().err

    def test_sweep_deterministic_bytes(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        _write_tiny_config(cfg)
        out1, out2 = tmp_path / "a.csv", tmp_path / "b.csv"
        assert cli.cli_main(["sweep", "--config", str(cfg), "--out",
                             str(out1), "--quiet"]) == 0
        assert cli.cli_main(["sweep", "--config", str(cfg), "--out",
                             str(out2), "--quiet"]) == 0
        assert out1.read_bytes() == out2.read_bytes()
        header = out1.read_text().splitlines()[0]
        assert header == h.CSV_HEADER

    def test_sweep_trials_seed_overrides(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        _write_tiny_config(cfg)
        out1, out2 = tmp_path / "a.csv", tmp_path / "b.csv"
        cli.cli_main(["sweep", "--config", str(cfg), "--out", str(out1),
                      "--trials", "3", "--seed", "11", "--quiet"])
        cli.cli_main(["sweep", "--config", str(cfg), "--out", str(out2),
                      "--trials", "3", "--seed", "12", "--quiet"])
        assert out1.read_text() != out2.read_text()

    def test_bad_estimator_override_exit_one(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        _write_tiny_config(cfg)
        rc = cli.cli_main(["sweep", "--config", str(cfg), "--out",
                           str(tmp_path / "o.csv"), "--estimators", "bogus"])
        assert rc == 1

    def test_simulate_dump(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        _write_tiny_config(cfg)
        out = tmp_path / "dump.json"
        rc = cli.cli_main(["simulate", "--config", str(cfg), "--out",
                           str(out), "--quiet"])
        assert rc == 0
        doc = json.loads(out.read_text())
        assert "music" in doc["estimators"]
        assert doc["truth_deg"] == [[18.0, 20.0], [45.0, 40.0]]
