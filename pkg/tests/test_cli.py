import json
from pathlib import Path

import pytest

from cflat.cli import load_config, main, read_phases_csv
from cflat.errors import ConfigError


def write_config(path: Path, **overrides) -> Path:
    config = {
        "dataset": {
            "synthetic": {
                "class_count": 4,
                "per_class": 20,
                "dim": 6,
                "cluster_spread": 0.6,
                "inter_class_distance": 8.0,
                "seed": 1,
            }
        },
        "protocol": "B0_Inc2",
        "family": "replay",
        "optimizer": "cflat",
        "cflat": {"rho": 0.1, "lam": 1.0, "eta": 0.3},
        "epochs": 2,
        "batch_size": 16,
        "hidden_dims": [6],
        "memory_budget": 4,
        "seeds": [3],
        "output_dir": str(path.parent / "out"),
    }
    config.update(overrides)
    path.write_text(json.dumps(config))
    return path


class TestConfigValidation:
    def test_unknown_key_rejected_with_name(self, tmp_path):
        cfg = write_config(tmp_path / "c.json")
        blob = json.loads(cfg.read_text())
        blob["typo_key"] = 1
        cfg.write_text(json.dumps(blob))
        with pytest.raises(ConfigError) as err:
            load_config(cfg)
        assert "typo_key" in str(err.value)

    def test_nested_unknown_key_rejected(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", cflat={"rho": 0.1, "rho_typo": 2})
        with pytest.raises(ConfigError) as err:
            load_config(cfg)
        assert "rho_typo" in str(err.value)

    def test_missing_required_key(self, tmp_path):
        cfg = write_config(tmp_path / "c.json")
        blob = json.loads(cfg.read_text())
        del blob["protocol"]
        cfg.write_text(json.dumps(blob))
        with pytest.raises(ConfigError) as err:
            load_config(cfg)
        assert "protocol" in str(err.value)

    def test_missing_dataset_path_exit_2(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        write_config(cfg, dataset={"idx": {"images": str(tmp_path / "nope.idx"),
                                           "labels": str(tmp_path / "nope2.idx")}})
        code = main(["run", "--config", str(cfg)])
        assert code == 2
        assert "dataset.idx.images" in capsys.readouterr().err

    def test_bad_json_exit_2(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text("{not json")
        assert main(["run", "--config", str(cfg)]) == 2


class TestRun:
    def test_run_writes_expected_phase_rows(self, tmp_path):
        cfg = write_config(tmp_path / "c.json")
        assert main(["run", "--config", str(cfg)]) == 0
        rows = read_phases_csv(tmp_path / "out" / "seed_3" / "phases.csv")
        assert [r.phase for r in rows] == [1, 2]
        assert (tmp_path / "out" / "config.json").exists()
        assert (tmp_path / "out" / "seed_3" / "checkpoint_phase2.json").exists()

    def test_identical_runs_byte_identical(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", landscape=True)
        assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "r1")]) == 0
        assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "r2")]) == 0
        for name in ("phases.csv", "steps.csv", "landscape_phase2.json"):
            a = (tmp_path / "r1" / "seed_3" / name).read_bytes()
            b = (tmp_path / "r2" / "seed_3" / name).read_bytes()
            assert a == b, name

    def test_ratio_flag_gates_steps(self, tmp_path):
        cfg = write_config(tmp_path / "c.json")
        assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "r"),
                     "--ratio", "0.0"]) == 0
        steps = (tmp_path / "r" / "seed_3" / "steps.csv").read_text().strip().splitlines()
        assert all(line.endswith(",0") for line in steps[1:])

    def test_seed_override(self, tmp_path):
        cfg = write_config(tmp_path / "c.json")
        assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "r"),
                     "--seeds", "5,6"]) == 0
        assert (tmp_path / "r" / "seed_5").is_dir()
        assert (tmp_path / "r" / "seed_6").is_dir()


class TestCompare:
    def test_equal_runs_zero_deltas(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json")
        main(["run", "--config", str(cfg), "--out", str(tmp_path / "a")])
        main(["run", "--config", str(cfg), "--out", str(tmp_path / "b")])
        out_json = tmp_path / "cmp.json"
        assert main(["compare", str(tmp_path / "a"), str(tmp_path / "b"),
                     "--out", str(out_json)]) == 0
        report = json.loads(out_json.read_text())
        assert report["average_return"] == 0.0
        assert report["maximum_return"] == 0.0

    def test_seed_mismatch_rejected(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json")
        main(["run", "--config", str(cfg), "--out", str(tmp_path / "a")])
        main(["run", "--config", str(cfg), "--out", str(tmp_path / "b"),
              "--seeds", "9"])
        code = main(["compare", str(tmp_path / "a"), str(tmp_path / "b")])
        assert code == 2
        assert "seed mismatch" in capsys.readouterr().err

    def test_compare_is_read_only(self, tmp_path):
        cfg = write_config(tmp_path / "c.json")
        main(["run", "--config", str(cfg), "--out", str(tmp_path / "a")])
        main(["run", "--config", str(cfg), "--out", str(tmp_path / "b")])
        before = {p: p.read_bytes() for p in sorted((tmp_path / "a").rglob("*")) if p.is_file()}
        main(["compare", str(tmp_path / "a"), str(tmp_path / "b")])
        after = {p: p.read_bytes() for p in sorted((tmp_path / "a").rglob("*")) if p.is_file()}
        assert before == after


class TestAnalyze:
    def test_analyze_writes_report_and_surface(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json")
        main(["run", "--config", str(cfg)])
        ckpt = tmp_path / "out" / "seed_3" / "checkpoint_phase2.json"
        out_dir = tmp_path / "analysis"
        assert main(["analyze", "--checkpoint", str(ckpt), "--config", str(cfg),
                     "--out", str(out_dir), "--extent", "0.1", "--resolution", "3",
                     "--subsample", "32", "--directions", "8", "--ascent-steps", "3",
                     "--trace-probes", "8"]) == 0
        report = json.loads((out_dir / "landscape.json").read_text())
        assert report["format_version"] == 1
        assert report["r0_hat"] <= report["r1_hat"] + 1e-6
        surface = (out_dir / "surface.csv").read_text().strip().splitlines()
        assert surface[0] == "alpha,beta,loss"
        assert len(surface) == 1 + 9

    def test_extent_zero_single_cell(self, tmp_path):
        cfg = write_config(tmp_path / "c.json")
        main(["run", "--config", str(cfg)])
        ckpt = tmp_path / "out" / "seed_3" / "checkpoint_phase1.json"
        out_dir = tmp_path / "analysis0"
        assert main(["analyze", "--checkpoint", str(ckpt), "--config", str(cfg),
                     "--out", str(out_dir), "--extent", "0", "--subsample", "16",
                     "--directions", "4", "--ascent-steps", "2",
                     "--trace-probes", "4"]) == 0
        report = json.loads((out_dir / "landscape.json").read_text())
        assert len(report["surface"]) == 1  # extent 0 gives the 1x1 grid

    def test_analyze_deterministic(self, tmp_path):
        cfg = write_config(tmp_path / "c.json")
        main(["run", "--config", str(cfg)])
        ckpt = tmp_path / "out" / "seed_3" / "checkpoint_phase1.json"
        for name in ("x", "y"):
            main(["analyze", "--checkpoint", str(ckpt), "--config", str(cfg),
                  "--out", str(tmp_path / name), "--extent", "0", "--subsample", "16",
                  "--directions", "4", "--ascent-steps", "2", "--trace-probes", "4",
                  "--seed", "2"])
        a = (tmp_path / "x" / "landscape.json").read_bytes()
        b = (tmp_path / "y" / "landscape.json").read_bytes()
        assert a == b


class TestGenData:
    def test_gen_data_round_trips(self, tmp_path):
        out = tmp_path / "data"
        assert main(["gen-data", "--out", str(out), "--classes", "3",
                     "--per-class", "5", "--dim", "4", "--seed", "2"]) == 0
        from cflat.data import read_idx_pair

        ds = read_idx_pair(out / "images.idx", out / "labels.idx")
        assert len(ds) == 15
        assert ds.class_count == 3


def craft_run_dir(root: Path, seed: int, rows: list[str]) -> None:
    d = root / f"seed_{seed}"
    d.mkdir(parents=True)
    header = "phase,acc_overall,acc_old,acc_new,loss_old,forgetting,lambda_max,hessian_trace,wall_ms"
    (d / "phases.csv").write_text("\n".join([header] + rows) + "\n")


class TestCompareReferenceValues:
    def test_reference_relative_returns_from_crafted_rows(self, tmp_path, capsys):
        # two-phase histories whose old/new means equal the reference inputs
        base = tmp_path / "base"
        treat = tmp_path / "treat"
        craft_run_dir(base, 1, [
            "1,58.0,,80.25,,,,,",
            "2,56.0,36.36,80.25,1.0,5.0,,,",
        ])
        craft_run_dir(treat, 1, [
            "1,59.0,,82.20,,,,,",
            "2,57.0,37.12,82.20,0.9,4.0,,,",
        ])
        out = tmp_path / "cmp.json"
        assert main(["compare", str(base), str(treat), "--out", str(out)]) == 0
        report = json.loads(out.read_text())
        assert abs(report["bt_relative_return"] - 2.10) <= 0.01
        assert abs(report["ft_relative_return"] - 2.43) <= 0.01

    def test_reference_average_and_maximum_return(self, tmp_path):
        # seven paired seeds whose avg-accuracy deltas equal the reference column
        deltas = [1.15, 0.47, 2.34, 1.65, 1.12, 0.43, 0.14]
        base = tmp_path / "base"
        treat = tmp_path / "treat"
        for seed, delta in enumerate(deltas):
            craft_run_dir(base, seed, ["1,60.0,,60.0,,,,,"])
            craft_run_dir(treat, seed, [f"1,{60.0 + delta},,{60.0 + delta},,,,,"])
        out = tmp_path / "cmp.json"
        assert main(["compare", str(base), str(treat), "--out", str(out)]) == 0
        report = json.loads(out.read_text())
        assert abs(report["average_return"] - 1.04) <= 0.01
        assert report["maximum_return"] == pytest.approx(2.34, abs=1e-9)


class TestRuntimeFailure:
    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_diverging_run_exits_1_preserving_artifacts(self, tmp_path, capsys):
        # validation passes, but a huge learning rate with relu blows the loss
        # up mid-training; the run must exit 1 and keep partial outputs
        cfg = write_config(tmp_path / "c.json", cflat={"rho": 0.1, "lam": 1.0, "eta": 1e12},
                           activation="relu", epochs=3)
        code = main(["run", "--config", str(cfg)])
        assert code == 1
        assert (tmp_path / "out" / "seed_3" / "phases.csv").exists()
