import json
import shutil
import subprocess

import numpy as np
import pytest

from tpat.cli import main
from tpat.core import image_from_png, load_tensor, save_tensor


def run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def read_json(path):
    return json.loads(path.read_text())


def strip_timestamp(path):
    body = read_json(path)
    body.pop("timestamp")
    return body


GEN_RING = ("gen", "--kernel", "ring", "--r-in", "1.5", "--r-out", "2.5",
            "--size", "32", "--steps", "8")

ATTACK_SMALL = ("attack", "--classifier", "builtin:0", "--images", "6",
                "--input-size", "16", "--tiles", "2", "--filter-size", "5",
                "--queries", "12", "--population", "6", "--steps", "8")


class TestGen:
    def test_ring_run_artifacts(self, tmp_path, capsys):
        code, out, err = run(capsys, *GEN_RING, "--seed", "3",
                             "--out-dir", str(tmp_path))
        assert code == 0 and err == ""
        assert "pattern.tpat" in out
        cells = load_tensor(tmp_path / "pattern.tpat")
        assert cells.shape == (1, 32, 32)
        assert set(np.unique(cells)) <= {-1.0, 1.0}
        png = image_from_png((tmp_path / "pattern.png").read_bytes())
        assert png.shape == (3, 32, 32)
        report = read_json(tmp_path / "report.json")
        assert {"steps_taken", "converged", "dominant_wavelength",
                "timestamp", "config"} <= set(report)
        assert report["config"]["seed"] == 3

    def test_repeat_is_byte_identical(self, tmp_path, capsys):
        run(capsys, *GEN_RING, "--seed", "4", "--out-dir", str(tmp_path))
        first = {name: (tmp_path / name).read_bytes()
                 for name in ("pattern.tpat", "pattern.png")}
        first_report = strip_timestamp(tmp_path / "report.json")
        run(capsys, *GEN_RING, "--seed", "4", "--out-dir", str(tmp_path))
        for name, payload in first.items():
            assert (tmp_path / name).read_bytes() == payload
        assert strip_timestamp(tmp_path / "report.json") == first_report

    def test_inverted_radii_fail_validation(self, tmp_path, capsys):
        code, _, err = run(capsys, "gen", "--kernel", "ring", "--r-in", "3.0",
                           "--r-out", "2.0", "--out-dir", str(tmp_path))
        assert code == 2
        assert "inner_radius < outer_radius" in err

    def test_missing_rect_sides_fail(self, tmp_path, capsys):
        code, _, err = run(capsys, "gen", "--kernel", "rect",
                           "--out-dir", str(tmp_path))
        assert code == 2 and "--l1" in err

    def test_free_kernel_from_elements(self, tmp_path, capsys):
        elems = ",".join(str(v) for v in range(9))
        code, _, _ = run(capsys, "gen", "--kernel", "free", "--filter-size", "3",
                         "--elements", elems, "--size", "16", "--steps", "4",
                         "--out-dir", str(tmp_path))
        assert code == 0
        assert load_tensor(tmp_path / "pattern.tpat").shape == (1, 16, 16)

    def test_indivisible_tiling_fails(self, tmp_path, capsys):
        code, _, err = run(capsys, *GEN_RING, "--tiles", "7", "--size", "30",
                           "--out-dir", str(tmp_path))
        assert code == 2 and "divisible" in err


class TestEval:
    def test_zero_perturbation_scores_zero(self, tmp_path, capsys):
        eps_path = tmp_path / "zero.tpat"
        save_tensor(np.zeros((3, 16, 16)), eps_path)
        code, out, _ = run(capsys, "eval", "--perturbation", str(eps_path),
                           "--classifier", "builtin:0", "--images", "8",
                           "--out-dir", str(tmp_path))
        assert code == 0
        result = read_json(tmp_path / "report.json")["result"]
        assert result["fooling_rate"] == 0.0
        assert result["n_images"] == 8
        assert "wall_time_s" not in result
        assert "0.0000" in out

    def test_missing_file_is_io_error(self, tmp_path, capsys):
        code, _, err = run(capsys, "eval", "--perturbation",
                           str(tmp_path / "nope.tpat"),
                           "--out-dir", str(tmp_path))
        assert code == 4 and "i/o error" in err

    def test_unreachable_classifier_is_exit_3(self, tmp_path, capsys):
        eps_path = tmp_path / "zero.tpat"
        save_tensor(np.zeros((3, 8, 8)), eps_path)
        code, _, err = run(capsys, "eval", "--perturbation", str(eps_path),
                           "--classifier", "remote:http://127.0.0.1:9",
                           "--images", "1", "--timeout", "2",
                           "--out-dir", str(tmp_path))
        assert code == 3 and "classifier error" in err


class TestAttack:
    def test_artifacts_and_budget(self, tmp_path, capsys):
        code, out, _ = run(capsys, *ATTACK_SMALL, "--seed", "1",
                           "--out-dir", str(tmp_path))
        assert code == 0
        assert "after 12 queries" in out
        eps = load_tensor(tmp_path / "perturbation.tpat")
        assert eps.shape == (3, 16, 16)
        assert set(np.unique(np.abs(eps))) == {10.0}
        theta = read_json(tmp_path / "theta.json")
        assert theta["variant"] == "simple"
        assert len(theta["encoded"]) == 2 + 3 * 4
        assert theta["space"]["tiles"] == 2
        trace = [json.loads(line)
                 for line in (tmp_path / "trace.jsonl").read_text().splitlines()]
        assert trace[-1]["evaluations_used"] == 12
        result = read_json(tmp_path / "report.json")["result"]
        assert result["queries_used"] == 12
        assert "wall_time_s" not in result

    def test_reproducible_across_runs_and_threads(self, tmp_path, capsys):
        dirs = [tmp_path / name for name in ("a", "b", "c")]
        for out_dir, threads in zip(dirs, ("1", "1", "4")):
            code, _, _ = run(capsys, *ATTACK_SMALL, "--seed", "2",
                             "--threads", threads, "--out-dir", str(out_dir))
            assert code == 0
        ref = dirs[0]
        for other in dirs[1:]:
            for name in ("perturbation.tpat", "perturbation.png",
                         "theta.json", "trace.jsonl"):
                assert (ref / name).read_bytes() == (other / name).read_bytes()
            a = strip_timestamp(ref / "report.json")
            b = strip_timestamp(other / "report.json")
            a["config"].pop("threads"), b["config"].pop("threads")
            a["config"].pop("out_dir"), b["config"].pop("out_dir")
            assert a == b

    def test_bad_variant_rejected_by_parser(self, capsys):
        with pytest.raises(SystemExit):
            main(["attack", "--variant", "nope"])


class TestTransfer:
    def test_matrix_csv(self, tmp_path, capsys):
        rng_eps = 10.0 * np.sign(np.linspace(-1, 1, 3 * 16 * 16)).reshape(3, 16, 16)
        p1, p2 = tmp_path / "p1.tpat", tmp_path / "p2.tpat"
        save_tensor(rng_eps, p1)
        save_tensor(-rng_eps, p2)
        code, _, _ = run(capsys, "transfer", "--perturbations", str(p1), str(p2),
                         "--classifiers", "builtin:0,builtin:1",
                         "--images", "6", "--out-dir", str(tmp_path))
        assert code == 0
        lines = (tmp_path / "transfer.csv").read_text().splitlines()
        assert lines[0] == "perturbation,builtin:0,builtin:1"
        assert len(lines) == 3
        for line in lines[1:]:
            cells = line.split(",")
            assert cells[0].endswith(".tpat")
            assert all(0.0 <= float(v) <= 1.0 for v in cells[1:])

    def test_shape_mismatch_fails(self, tmp_path, capsys):
        p1, p2 = tmp_path / "p1.tpat", tmp_path / "p2.tpat"
        save_tensor(np.zeros((3, 16, 16)), p1)
        save_tensor(np.zeros((3, 8, 8)), p2)
        code, _, err = run(capsys, "transfer", "--perturbations", str(p1),
                           str(p2), "--classifiers", "builtin:0",
                           "--out-dir", str(tmp_path))
        assert code == 2 and "shape" in err


class TestFourier:
    def test_rule_rows_and_filtered_tensors(self, tmp_path, capsys):
        run(capsys, *GEN_RING, "--seed", "5", "--out-dir", str(tmp_path))
        code, _, _ = run(capsys, "fourier", "--pattern",
                         str(tmp_path / "pattern.tpat"),
                         "--classifier", "builtin:0", "--images", "4",
                         "--out-dir", str(tmp_path))
        assert code == 0
        report = read_json(tmp_path / "report.json")
        assert len(report["rows"]) == 3
        assert report["n_images"] == 4
        assert 0.0 <= report["fooling_rate_original"] <= 1.0
        labels = [row["rule"] for row in report["rows"]]
        for label in labels:
            filt = load_tensor(tmp_path / f"filtered-{label}.tpat")
            assert filt.shape == (3, 32, 32)

    def test_log_scale_adds_a_rule(self, tmp_path, capsys):
        run(capsys, *GEN_RING, "--seed", "5", "--out-dir", str(tmp_path))
        code, _, _ = run(capsys, "fourier", "--pattern",
                         str(tmp_path / "pattern.tpat"), "--log-scale",
                         "--classifier", "builtin:0", "--images", "4",
                         "--out-dir", str(tmp_path))
        assert code == 0
        report = read_json(tmp_path / "report.json")
        assert len(report["rows"]) == 4
        assert any(r["rule"] == "max-minus-one-log" for r in report["rows"])


class TestBoyd:
    def test_diagnostics_run(self, tmp_path, capsys):
        code, out, _ = run(capsys, "boyd", "--layers", "1", "--batch", "2",
                           "--samples", "2000", "--theorem-n", "8",
                           "--out-dir", str(tmp_path))
        assert code == 0 and "L1=" in out
        pattern = load_tensor(tmp_path / "boyd-layer1.tpat")
        assert pattern.shape == (1, 32, 32)
        assert set(np.unique(pattern)) <= {-1.0, 1.0}
        report = read_json(tmp_path / "report.json")
        assert report["net"]["depth"] == 3
        assert report["layers"][0]["layer"] == 1
        assert report["layers"][0]["wavelength"] > 0
        assert len(report["theorem1"]) == 3
        assert all("within_bound" in entry for entry in report["theorem1"])

    def test_bad_layer_fails_validation(self, tmp_path, capsys):
        code, _, err = run(capsys, "boyd", "--layers", "7",
                           "--out-dir", str(tmp_path))
        assert code == 2 and "layers" in err


class TestSweep:
    def test_csv_contract(self, tmp_path, capsys):
        code, _, _ = run(capsys, "sweep", "--classifier", "builtin:0",
                         "--images", "6", "--input-size", "16", "--tiles", "2",
                         "--sizes", "3", "--queries", "13",
                         "--out-dir", str(tmp_path))
        assert code == 0
        lines = (tmp_path / "sweep.csv").read_text().splitlines()
        assert lines[0] == ("filter_size,fr_kernel_init,fr_kernel_only_min,"
                            "fr_kernel_only_mean,fr_kernel_only_max")
        assert len(lines) == 2
        row = lines[1].split(",")
        assert row[0] == "3"
        lo, mean, hi = (float(v) for v in row[2:])
        assert lo <= mean <= hi


class TestConfigFile:
    def test_config_supplies_defaults(self, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("steps = 4\nsize = 16  # trailing comment\n")
        code, _, _ = run(capsys, "gen", "--kernel", "ring", "--r-in", "1.5",
                         "--r-out", "2.5", "--config", str(cfg),
                         "--out-dir", str(tmp_path))
        assert code == 0
        report = read_json(tmp_path / "report.json")
        assert report["config"]["steps"] == 4
        assert report["config"]["size"] == 16

    def test_explicit_flags_beat_config(self, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("steps = 4\n")
        code, _, _ = run(capsys, "gen", "--kernel", "ring", "--r-in", "1.5",
                         "--r-out", "2.5", "--size", "16", "--steps", "2",
                         "--config", str(cfg), "--out-dir", str(tmp_path))
        assert code == 0
        assert read_json(tmp_path / "report.json")["config"]["steps"] == 2

    def test_unknown_config_key_fails(self, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("bogus = 1\n")
        code, _, err = run(capsys, "gen", "--kernel", "ring", "--r-in", "1.5",
                           "--r-out", "2.5", "--config", str(cfg),
                           "--out-dir", str(tmp_path))
        assert code == 2 and "bogus" in err

    def test_missing_config_file_is_io_error(self, tmp_path, capsys):
        code, _, _ = run(capsys, "gen", "--kernel", "ring", "--r-in", "1.5",
                         "--r-out", "2.5", "--config", str(tmp_path / "no.cfg"),
                         "--out-dir", str(tmp_path))
        assert code == 4


class TestEntryPoint:
    def test_installed_script_responds(self):
        exe = shutil.which("tpat")
        assert exe is not None
        proc = subprocess.run([exe, "--help"], capture_output=True, text=True)
        assert proc.returncode == 0
        assert "gen" in proc.stdout and "attack" in proc.stdout
