import csv
import json
import shutil
from pathlib import Path

import jsonschema
import numpy as np
import pytest

from gctaf import cli
from gctaf.checkpoint import load_checkpoint
from gctaf.data import SynthSpec, generate_partitions
from gctaf.errors import (ConfigError, FormatError, LeakageError, NonFiniteError, NumericAbort,
                          ParseError, ValidationError)
from gctaf.model import ModelConfig
from gctaf.pipeline import map_jobs, mean_tss, prepare_pairs, run_ablation, run_sweep, train_pairs
from gctaf.training import TrainConfig

SCHEMAS = Path(__file__).resolve().parent.parent / "docs" / "schemas"

TINY = ["--set", "model.global_tokens=2", "--set", "model.head_size=4", "--set", "model.heads=2",
        "--set", "model.mlp_units=[8]", "--set", "train.batch_size=16"]


def schema(name):
    return json.loads((SCHEMAS / f"{name}.schema.json").read_text())


def validate(obj, name):
    jsonschema.validate(obj, schema(name))


def read_rows(path):
    def cell(v):
        if v == "":
            return None
        try:
            return json.loads(v)
        except json.JSONDecodeError:
            return v
    with open(path, newline="") as fh:
        return [{k: cell(v) for k, v in row.items()} for row in csv.DictReader(fh)]


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    rc = cli.main(["synth", "--out", str(root), "--seed", "5", "--n", "60", "--tau", "8",
                   "--features", "4", "--m", "2", "--signal-features", "2", "--amplitude", "3",
                   "--missing", "0.02", "--partitions", "3"])
    assert rc == 0
    return root


def parts(synth_dir, k=3):
    return [str(synth_dir / f"P{i + 1}") for i in range(k)]


@pytest.fixture(scope="module")
def trained(synth_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    rc = cli.main(["train", "--out", str(out), "--data", *parts(synth_dir), "--epochs", "2", *TINY])
    assert rc == 0
    return out


class TestSynth:
    def test_layout(self, synth_dir):
        for k in (1, 2, 3):
            lines = (synth_dir / f"P{k}" / "manifest.jsonl").read_text().splitlines()
            validate(json.loads(lines[0]), "manifest_header")
            for line in lines[1:]:
                validate(json.loads(line), "manifest_instance")
            assert len(lines) == 61
        validate(json.loads((synth_dir / "effective_config.json").read_text()), "effective_config")

    def test_replay_is_byte_identical(self, synth_dir, tmp_path):
        cfg = synth_dir / "effective_config.json"
        assert cli.main(["synth", "--config", str(cfg), "--out", str(tmp_path)]) == 0
        for f in (synth_dir / "P2").rglob("*"):
            if f.is_file():
                assert f.read_bytes() == (tmp_path / "P2" / f.relative_to(synth_dir / "P2")).read_bytes()

    def test_infeasible_spec(self, tmp_path):
        assert cli.main(["synth", "--out", str(tmp_path), "--tau", "5", "--m", "4"]) == cli.EXIT_CONFIG


class TestTrain:
    def test_outputs(self, trained):
        assert sorted(p.name for p in trained.iterdir() if p.is_dir()) == ["P1-P2", "P2-P3"]
        eff = json.loads((trained / "effective_config.json").read_text())
        validate(eff, "effective_config")
        assert eff["model"]["seed"] == eff["train"]["seed"] == eff["seed"]
        assert (eff["model"]["tau"], eff["model"]["n_features"]) == (8, 4)
        rows = read_rows(trained / "P1-P2" / "report.csv")
        assert [r["epoch"] for r in rows] == [1, 2]
        for row in rows:
            validate(row, "report_row")

    def test_checkpoint_carries_normalisation(self, trained):
        cfg, params, extras = load_checkpoint(trained / "P2-P3" / "checkpoint.gctaf")
        assert cfg.global_tokens == 2
        assert extras["zscore.mean"].shape == (4,) and np.all(extras["zscore.std"] > 0)

    def test_replay_reproduces_bytes(self, trained, tmp_path):
        rc = cli.main(["train", "--config", str(trained / "effective_config.json"), "--out", str(tmp_path)])
        assert rc == 0
        for pair in ("P1-P2", "P2-P3"):
            for name in ("checkpoint.gctaf", "report.csv"):
                assert (trained / pair / name).read_bytes() == (tmp_path / pair / name).read_bytes()
        assert (trained / "effective_config.json").read_bytes() == \
            (tmp_path / "effective_config.json").read_bytes()

    def test_flags_override_file(self, trained, tmp_path):
        rc = cli.main(["train", "--config", str(trained / "effective_config.json"), "--out", str(tmp_path),
                       "--epochs", "1", "--seed", "9"])
        assert rc == 0
        eff = json.loads((tmp_path / "effective_config.json").read_text())
        assert eff["train"]["epochs"] == 1 and eff["seed"] == 9 and eff["model"]["seed"] == 9
        assert eff["model"]["global_tokens"] == 2


class TestEval:
    def test_run_directory(self, trained, tmp_path):
        assert cli.main(["eval", "--run", str(trained), "--out", str(tmp_path)]) == 0
        for pair in ("P1-P2", "P2-P3"):
            validate(json.loads((tmp_path / "metrics" / f"{pair}.json").read_text()), "metrics_report")
        agg = json.loads((tmp_path / "aggregate.json").read_text())
        validate(agg, "aggregate")
        assert agg["pair_names"] == ["P1-P2", "P2-P3"]
        tss = [p["tss"] for p in agg["pairs"]]
        assert agg["tss"]["mean"] == pytest.approx(np.mean(tss))

    def test_single_checkpoint_has_no_aggregate(self, trained, synth_dir, tmp_path):
        rc = cli.main(["eval", "--checkpoint", str(trained / "P1-P2" / "checkpoint.gctaf"),
                       "--test", str(synth_dir / "P2"), "--out", str(tmp_path)])
        assert rc == 0
        assert (tmp_path / "metrics" / "P1-P2.json").exists()
        assert not (tmp_path / "aggregate.json").exists()

    def test_shape_mismatch(self, trained, tmp_path):
        other = tmp_path / "other"
        assert cli.main(["synth", "--out", str(other), "--n", "10", "--tau", "6", "--features", "4",
                         "--m", "2", "--signal-features", "1"]) == 0
        rc = cli.main(["eval", "--checkpoint", str(trained / "P1-P2" / "checkpoint.gctaf"),
                       "--test", str(other / "P1"), "--out", str(tmp_path / "o")])
        assert rc == cli.EXIT_VALIDATION

    def test_corrupt_checkpoint(self, trained, synth_dir, tmp_path):
        bad = tmp_path / "bad.gctaf"
        bad.write_bytes((trained / "P1-P2" / "checkpoint.gctaf").read_bytes()[:100])
        rc = cli.main(["eval", "--checkpoint", str(bad), "--test", str(synth_dir / "P2"),
                       "--out", str(tmp_path / "o")])
        assert rc == cli.EXIT_PARSE

    def test_report_command(self, trained, tmp_path, capsys):
        cli.main(["eval", "--run", str(trained), "--out", str(tmp_path)])
        capsys.readouterr()
        assert cli.main(["report", str(tmp_path / "aggregate.json")]) == 0
        out = capsys.readouterr().out
        assert "pairs: 2" in out and "tss" in out and "+-" in out


class TestBaseline:
    def test_outputs(self, synth_dir, tmp_path):
        assert cli.main(["baseline", "--data", *parts(synth_dir), "--out", str(tmp_path)]) == 0
        validate(json.loads((tmp_path / "aggregate.json").read_text()), "aggregate")
        eff = json.loads((tmp_path / "effective_config.json").read_text())
        assert eff["vlt"] == {"learning_rate": 0.05, "epochs": 300, "seed": 0}


class TestAblate:
    def test_table(self, synth_dir, tmp_path):
        rc = cli.main(["ablate", "--data", *parts(synth_dir, 2), "--out", str(tmp_path), "--epochs", "1",
                       "--seeds", "0", "1", *TINY])
        assert rc == 0
        rows = read_rows(tmp_path / "ablation.csv")
        assert [r["label"] for r in rows] == ["GCTAF", "no global tokens", "no cross-attention",
                                             "no layer normalization"]
        for row in rows:
            validate(row, "ablation_row")
            assert row["n_runs"] == 2
        runs = read_rows(tmp_path / "ablation_runs.csv")
        assert len(runs) == 8
        full = [r["tss"] for r in runs if r["variant"] == "none"]
        assert rows[0]["mean_tss"] == pytest.approx(np.mean(full), abs=1e-12)

    def test_unknown_variant(self, synth_dir, tmp_path):
        rc = cli.main(["ablate", "--data", *parts(synth_dir, 2), "--out", str(tmp_path),
                       "--set", 'ablate.variants=["none","no_heads"]'])
        assert rc == cli.EXIT_CONFIG


class TestSweep:
    def test_grid(self, synth_dir, tmp_path):
        rc = cli.main(["sweep", "--data", *parts(synth_dir, 2), "--out", str(tmp_path), "--epochs", "1",
                       *TINY, "--grid", "heads=1,2", "--grid", "mlp_units=[4];[8,4]"])
        assert rc == 0
        rows = read_rows(tmp_path / "sweep.csv")
        assert len(rows) == 4
        for row in rows:
            validate(row, "sweep_row")
        assert {(r["heads"], tuple(r["mlp_units"])) for r in rows} == {(1, (4,)), (1, (8, 4)),
                                                                       (2, (4,)), (2, (8, 4))}

    def test_global_token_mode(self, synth_dir, tmp_path):
        rc = cli.main(["sweep", "--data", *parts(synth_dir, 2), "--out", str(tmp_path), "--epochs", "1",
                       *TINY, "--global-tokens", "1", "3"])
        assert rc == 0
        assert [r["global_tokens"] for r in read_rows(tmp_path / "global_tokens.csv")] == [1, 3]

    def test_invalid_point_fails_before_training(self, synth_dir, tmp_path):
        rc = cli.main(["sweep", "--data", *parts(synth_dir, 2), "--out", str(tmp_path),
                       "--grid", "heads=2,0"])
        assert rc == cli.EXIT_CONFIG
        assert not (tmp_path / "sweep.csv").exists()

    def test_unknown_axis(self, synth_dir, tmp_path):
        rc = cli.main(["sweep", "--data", *parts(synth_dir, 2), "--out", str(tmp_path), "--grid", "tau=4"])
        assert rc == cli.EXIT_CONFIG


class TestErrors:
    def test_usage(self, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.main(["train", "--bogus"])
        assert exc.value.code == cli.EXIT_CONFIG

    def test_missing_command(self):
        with pytest.raises(SystemExit) as exc:
            cli.main([])
        assert exc.value.code == cli.EXIT_CONFIG

    def test_one_partition(self, synth_dir, tmp_path):
        assert cli.main(["train", "--data", parts(synth_dir)[0], "--out", str(tmp_path)]) == cli.EXIT_CONFIG

    def test_reversed_partitions_leak(self, synth_dir, tmp_path):
        p = parts(synth_dir)
        assert cli.main(["train", "--data", p[1], p[0], "--out", str(tmp_path)]) == cli.EXIT_LEAKAGE

    def test_config_dimension_mismatch(self, synth_dir, tmp_path):
        rc = cli.main(["train", "--data", *parts(synth_dir, 2), "--out", str(tmp_path),
                       "--set", "model.tau=9"])
        assert rc == cli.EXIT_VALIDATION

    def test_bad_config_value(self, synth_dir, tmp_path):
        rc = cli.main(["train", "--data", *parts(synth_dir, 2), "--out", str(tmp_path),
                       "--set", "train.learning_rate=-1"])
        assert rc == cli.EXIT_CONFIG

    def test_bad_config_file(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text('{"seed": 1,\n "model": }')
        assert cli.main(["train", "--config", str(path), "--out", str(tmp_path)]) == cli.EXIT_PARSE

    def test_unknown_section(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text('{"optimizer": {}}')
        assert cli.main(["train", "--config", str(path), "--out", str(tmp_path)]) == cli.EXIT_CONFIG

    def test_negative_seed(self, synth_dir, tmp_path):
        assert cli.main(["train", "--data", *parts(synth_dir, 2), "--seed", "-1",
                         "--out", str(tmp_path)]) == cli.EXIT_CONFIG

    def test_corrupt_instance(self, synth_dir, tmp_path):
        copy = tmp_path / "P1"
        shutil.copytree(synth_dir / "P1", copy)
        victim = sorted((copy / "instances").glob("*.csv"))[0]
        lines = victim.read_text().splitlines()
        lines[1] = lines[1].replace(",", ",x", 1)
        victim.write_text("\n".join(lines) + "\n")
        rc = cli.main(["train", "--data", str(copy), str(synth_dir / "P2"), "--out", str(tmp_path / "o")])
        assert rc == cli.EXIT_PARSE

    @pytest.mark.parametrize("exc, code", [
        (NumericAbort("x"), 6), (NonFiniteError("x"), 6), (LeakageError("x"), 5),
        (ValidationError("x"), 4), (ParseError("x"), 3), (FormatError("x"), 3), (ConfigError("x"), 2),
        (RuntimeError("x"), 1)])
    def test_exit_codes(self, exc, code):
        assert cli.exit_code(exc) == code


@pytest.fixture(scope="module")
def prepared():
    spec = SynthSpec(n_instances=50, tau=6, n_features=3, m=2, signal_features=1)
    return prepare_pairs(generate_partitions(spec, seed=2, count=3))


class TestDrivers:
    CFG = ModelConfig(tau=6, n_features=3, global_tokens=2, heads=1, head_size=4, ff_dim=3,
                      mlp_units=(4,), dropout=0.0)
    TCFG = TrainConfig(epochs=1, batch_size=16)

    def test_pair_names(self, prepared):
        assert [p.name for p in prepared] == ["P1-P2", "P2-P3"]

    def test_map_jobs_pool_matches_serial(self):
        assert map_jobs(abs, [-3, 2, -1], threads=2) == map_jobs(abs, [-3, 2, -1]) == [3, 2, 1]

    def test_threads_do_not_change_results(self, prepared):
        serial = train_pairs(self.CFG, self.TCFG, prepared, threads=1)
        pooled = train_pairs(self.CFG, self.TCFG, prepared, threads=2)
        for (pa, ra, ta), (pb, rb, tb) in zip(serial, pooled):
            assert ta == tb and ra.epochs == rb.epochs
            for (_, a), (_, b) in zip(pa.named_parameters(), pb.named_parameters()):
                np.testing.assert_array_equal(a.data, b.data)

    def test_ablation_runs(self, prepared):
        runs = run_ablation(self.CFG, self.TCFG, prepared, seeds=[0, 1], variants=("none", "no_global_tokens"))
        assert [(r["seed"], r["pair"]) for r in runs["none"]] == [(0, "P1-P2"), (0, "P2-P3"),
                                                                  (1, "P1-P2"), (1, "P2-P3")]
        stats = mean_tss(runs["none"])
        defined = [r["report"]["tss"] for r in runs["none"] if r["report"]["tss"] is not None]
        assert stats["mean"] == pytest.approx(np.mean(defined))

    def test_sweep_rows(self, prepared):
        rows = run_sweep(self.CFG, self.TCFG, prepared, [{"heads": 1}, {"learning_rate": 1e-2}])
        assert rows[0]["model"].heads == 1 and rows[1]["train"].learning_rate == 1e-2
        assert rows[1]["model"] == self.CFG
