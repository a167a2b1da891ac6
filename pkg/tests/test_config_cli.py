import json

import numpy as np
import pytest

from htan_spd import cli
from htan_spd.checkpoint import save_tensors
from htan_spd.config import (
    ConfigError,
    apply_override,
    parse_config_text,
    render_documented_default,
    render_resolved,
    resolve,
)
from htan_spd.data import load_dataset

SMALL_OVERRIDES = [
    "--override", "train_sequences=30", "--override", "test_sequences=12",
    "--override", "epochs=2", "--override", "hidden=10",
    "--override", "aux_hidden=5", "--override", "basis=2",
    "--override", "seq_len=6", "--override", "batch_size=15",
]


def run_cli(*argv):
    return cli.main(list(argv))


class TestConfigParsing:
    def test_defaults_resolve(self):
        setup = resolve()
        assert setup.train.tasks == 2
        assert setup.train.reg_lambda == 0.01
        assert setup.data_spec.seq_len == 40
        assert setup.data_spec.seed == 1000       # train seed 0 + 1000

    def test_unknown_key_reports_line(self):
        with pytest.raises(ConfigError, match="cfg:3: unknown key"):
            parse_config_text("[model]\ntasks = 2\nbogus = 1\n", source="cfg")

    def test_unknown_section(self):
        with pytest.raises(ConfigError, match="unknown section"):
            parse_config_text("[nope]\n", source="cfg")

    def test_duplicate_key(self):
        with pytest.raises(ConfigError, match="duplicate"):
            parse_config_text("[model]\ntasks = 2\ntasks = 3\n")

    def test_key_outside_section(self):
        with pytest.raises(ConfigError, match="outside"):
            parse_config_text("tasks = 2\n")

    def test_bad_value_reports_location(self):
        with pytest.raises(ConfigError, match="cfg:2"):
            parse_config_text("[model]\ntasks = banana\n", source="cfg")

    def test_comments_and_blanks_ignored(self):
        values = parse_config_text("# hi\n\n[model]\n# doc\ntasks = 4\n")
        assert values[("model", "tasks")] == 4

    def test_override_bare_and_qualified(self):
        values = {}
        apply_override(values, "lambda=0")
        assert values[("train", "lambda")] == 0.0
        apply_override(values, "model.tasks=3")
        assert values[("model", "tasks")] == 3

    def test_override_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown key"):
            apply_override({}, "nonsense=1")

    def test_override_ambiguous_is_impossible_in_schema(self):
        # all schema keys are unique across sections today; guard the rule
        from htan_spd.config import SCHEMA
        seen = {}
        for section, fields in SCHEMA.items():
            for key in fields:
                assert key not in seen, f"{key} duplicated in {seen.get(key)}/{section}"
                seen[key] = section

    def test_resolved_render_round_trip(self):
        setup = resolve(overrides=("lambda=0.5", "regime_rhos=0.8,0.2",
                                   "regime_dwell=5,20"))
        text = render_resolved(setup)
        setup2 = resolve(parse_config_text(text))
        assert setup2.train.reg_lambda == 0.5
        np.testing.assert_array_equal(setup2.data_spec.rhos, [0.8, 0.2])
        np.testing.assert_allclose(setup2.data_spec.transition,
                                   setup.data_spec.transition)

    def test_documented_default_parses(self):
        values = parse_config_text(render_documented_default())
        setup = resolve(values)
        assert setup.train.epochs == 5

    def test_transition_matrix_overrides_dwell(self):
        setup = resolve(overrides=(
            "transition_matrix=0.5 0.5; 0.25 0.75",))
        np.testing.assert_allclose(setup.data_spec.transition,
                                   [[0.5, 0.5], [0.25, 0.75]])

    def test_mismatched_regimes_rejected(self):
        with pytest.raises(ConfigError, match="regime_dwell"):
            resolve(overrides=("regime_rhos=0.9,0.5,0.1",))

    def test_invalid_train_values_rejected(self):
        with pytest.raises(ConfigError):
            resolve(overrides=("lambda=-1",))
        with pytest.raises(ConfigError):
            resolve(overrides=("epochs=0",))

    def test_attention_requires_matching_widths(self):
        with pytest.raises(ConfigError, match="attention"):
            resolve(overrides=("encoder=attention",))
        setup = resolve(overrides=("encoder=attention", "hidden=8"))
        assert setup.train.encoder == "attention"


class TestTrainCommand:
    def test_run_directory_contents(self, tmp_path, capsys):
        out = tmp_path / "run"
        assert run_cli("train", "--out", str(out), *SMALL_OVERRIDES) == 0
        lines = (out / "metrics.csv").read_text().strip().splitlines()
        assert lines[0] == cli.METRICS_HEADER
        assert len(lines) == 1 + 2 * 2          # epochs x tasks rows
        assert (out / "resolved.cfg").exists()
        assert (out / "seed.txt").read_text() == "0\n"
        assert (out / "checkpoint_final.bin").exists()
        summary = json.loads((out / "summary.json").read_text())
        assert summary["monitor"]["metric_violations"] == 0
        assert summary["monitor"]["checksum_failures"] == 0

    def test_byte_identical_reruns(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert run_cli("train", "--out", str(a), "--seed", "5", *SMALL_OVERRIDES) == 0
        assert run_cli("train", "--out", str(b), "--seed", "5", *SMALL_OVERRIDES) == 0
        assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
        assert ((a / "checkpoint_final.bin").read_bytes()
                == (b / "checkpoint_final.bin").read_bytes())

    def test_lambda_override_changes_run(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert run_cli("train", "--out", str(a), *SMALL_OVERRIDES) == 0
        assert run_cli("train", "--out", str(b), "--override", "lambda=0",
                       *SMALL_OVERRIDES) == 0
        resolved = (b / "resolved.cfg").read_text()
        assert "lambda = 0.0" in resolved
        assert ((a / "metrics.csv").read_bytes()
                != (b / "metrics.csv").read_bytes())

    def test_refuses_nonempty_out_dir(self, tmp_path, capsys):
        out = tmp_path / "run"
        out.mkdir()
        (out / "junk.txt").write_text("x")
        assert run_cli("train", "--out", str(out), *SMALL_OVERRIDES) == 1

    def test_numerical_failure_exit_and_diagnostics(self, tmp_path):
        out = tmp_path / "run"
        code = run_cli("train", "--out", str(out), "--override",
                       "lr_phi=1e308", *SMALL_OVERRIDES)
        assert code == 2
        diag = json.loads((out / "diagnostics.json").read_text())
        assert diag["error"]

    def test_config_file_and_parse_error(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("[train]\nepochs = 1\n[model]\nhidden = 8\n"
                       "aux_hidden = 4\nbasis = 2\n")
        out = tmp_path / "run"
        assert run_cli("train", "--config", str(cfg), "--out", str(out),
                       "--override", "train_sequences=20",
                       "--override", "test_sequences=8",
                       "--override", "seq_len=5") == 0
        bad = tmp_path / "bad.cfg"
        bad.write_text("[train]\nnot a key value line\n")
        assert run_cli("train", "--config", str(bad), "--out",
                       str(tmp_path / "x")) == 1

    def test_usage_error_exit_code(self):
        assert run_cli("train", "--no-such-flag") == 1
        assert run_cli() == 1

    def test_attention_encoder_trains(self, tmp_path):
        out = tmp_path / "run"
        assert run_cli(
            "train", "--out", str(out),
            "--override", "encoder=attention", "--override", "hidden=6",
            "--override", "input_dim=6", "--override", "aux_hidden=4",
            "--override", "basis=2", "--override", "seq_len=5",
            "--override", "train_sequences=20", "--override",
            "test_sequences=8", "--override", "epochs=1",
            "--override", "batch_size=10") == 0
        assert (out / "summary.json").exists()


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_run")
    out = root / "run"
    data = root / "data"
    assert run_cli("train", "--out", str(out), *SMALL_OVERRIDES) == 0
    assert run_cli("gen-data", "--out", str(data), *SMALL_OVERRIDES) == 0
    return out, data


class TestEvalCommand:
    def test_round_trip_matches_summary(self, trained_run, capsys):
        out, data = trained_run
        assert run_cli("eval", "--checkpoint", str(out / "checkpoint_final.bin"),
                       "--data", str(data / "test.bin")) == 0
        payload = json.loads(capsys.readouterr().out)
        summary = json.loads((out / "summary.json").read_text())
        assert payload["tasks"] == summary["final_test"]

    def test_json_out_file(self, trained_run, tmp_path, capsys):
        out, data = trained_run
        dest = tmp_path / "eval.json"
        assert run_cli("eval", "--checkpoint", str(out / "checkpoint_final.bin"),
                       "--data", str(data / "train.bin"),
                       "--json-out", str(dest)) == 0
        printed = capsys.readouterr().out
        assert json.loads(dest.read_text()) == json.loads(printed)

    def test_corrupted_magic_rejected(self, trained_run, tmp_path, capsys):
        out, data = trained_run
        bad = tmp_path / "bad.bin"
        raw = bytearray((out / "checkpoint_final.bin").read_bytes())
        raw[0] ^= 0xFF
        bad.write_bytes(bytes(raw))
        assert run_cli("eval", "--checkpoint", str(bad),
                       "--data", str(data / "test.bin"),
                       "--config", str(out / "resolved.cfg")) == 3

    def test_dim_mismatch_names_tensor(self, trained_run, capsys):
        out, data = trained_run
        code = run_cli("eval", "--checkpoint", str(out / "checkpoint_final.bin"),
                       "--data", str(data / "test.bin"),
                       "--config", str(out / "resolved.cfg"),
                       "--override", "hidden=16")
        assert code == 3
        assert "block0" in capsys.readouterr().err

    def test_missing_dataset_file(self, trained_run):
        out, _ = trained_run
        assert run_cli("eval", "--checkpoint", str(out / "checkpoint_final.bin"),
                       "--data", "/nonexistent/data.bin") == 3


class TestAnalyzeCommand:
    def test_csv_structure(self, trained_run, tmp_path, capsys):
        out, data = trained_run
        dest = tmp_path / "analysis.csv"
        assert run_cli("analyze", "--checkpoint",
                       str(out / "checkpoint_final.bin"),
                       "--data", str(data / "test.bin"),
                       "--out", str(dest)) == 0
        lines = dest.read_text().strip().splitlines()
        assert lines[0] == cli.ANALYSIS_HEADER
        # blocks(2) x slots(6) x one pair
        assert len(lines) == 1 + 2 * 6
        printed = capsys.readouterr().out
        assert "spearman_dsq_vs_coupling=" in printed

    def test_identical_embedding_model_zero_distances(self, trained_run,
                                                      tmp_path):
        out, data = trained_run
        from htan_spd.config import parse_config_file
        setup = resolve(parse_config_file(out / "resolved.cfg"))
        from htan_spd.training import build_model, state_tensors
        model, spdnets = build_model(setup.train, setup.data_spec.input_dim,
                                     setup.data_spec.classes)
        for block in model.blocks:
            for e in block.task_embeddings[1:]:
                e.data[...] = block.task_embeddings[0].data
        ckpt = tmp_path / "tied.bin"
        save_tensors(ckpt, state_tensors(model, spdnets))
        dest = tmp_path / "tied.csv"
        assert run_cli("analyze", "--checkpoint", str(ckpt),
                       "--data", str(data / "test.bin"),
                       "--config", str(out / "resolved.cfg"),
                       "--out", str(dest)) == 0
        rows = dest.read_text().strip().splitlines()[1:]
        d_sq = np.array([float(r.split(",")[4]) for r in rows])
        np.testing.assert_array_equal(d_sq, np.zeros_like(d_sq))

    def test_single_task_rows(self, tmp_path):
        out = tmp_path / "run1"
        data = tmp_path / "data1"
        overrides = [o for o in SMALL_OVERRIDES]
        args = ["--override", "tasks=1"] + overrides
        assert run_cli("train", "--out", str(out), *args) == 0
        assert run_cli("gen-data", "--out", str(data), *args) == 0
        dest = tmp_path / "analysis.csv"
        assert run_cli("analyze", "--checkpoint",
                       str(out / "checkpoint_final.bin"),
                       "--data", str(data / "test.bin"),
                       "--out", str(dest)) == 0
        rows = dest.read_text().strip().splitlines()[1:]
        assert len(rows) == 2 * 6
        for row in rows:
            fields = row.split(",")
            assert fields[2] == fields[3] == "0"
            assert float(fields[4]) == 0.0
            assert float(fields[5]) >= 1.0  # condition number still reported


class TestCovarianceCommand:
    def test_full_coupling_matches_identity(self, tmp_path, capsys):
        data = tmp_path / "data"
        args = ["--override", "regime_rhos=1.0,1.0", "--override",
                "train_sequences=400", "--override", "test_sequences=10",
                "--override", "seq_len=5"]
        assert run_cli("gen-data", "--out", str(data), *args) == 0
        dest = tmp_path / "cov.csv"
        assert run_cli("covariance", "--data", str(data / "train.bin"),
                       "--out", str(dest)) == 0
        batch = load_dataset(data / "train.bin")
        rows = dest.read_text().strip().splitlines()
        assert rows[0] == cli.COVARIANCE_HEADER
        for row in rows[1:]:
            slot, ti, tj, a, b, cov, abs_cov = row.split(",")
            if a == b:
                p = float((batch.labels[0][:, int(slot)] == int(a)).mean())
                assert float(cov) == pytest.approx(p - p * p, abs=1e-12)

    def test_zero_coupling_within_bound(self, tmp_path):
        data = tmp_path / "data"
        args = ["--override", "regime_rhos=0.0,0.0", "--override",
                "train_sequences=2500", "--override", "test_sequences=10",
                "--override", "seq_len=40"]
        assert run_cli("gen-data", "--out", str(data), *args) == 0
        dest = tmp_path / "cov.csv"
        assert run_cli("covariance", "--data", str(data / "train.bin"),
                       "--out", str(dest)) == 0
        rows = dest.read_text().strip().splitlines()[1:]
        abs_cov = np.array([float(r.split(",")[6]) for r in rows])
        assert abs_cov.max() < 0.02


class TestGenDataAndParamCount:
    def test_gen_data_round_trip(self, trained_run):
        _, data = trained_run
        batch = load_dataset(data / "train.bin")
        assert batch.n_sequences == 30
        assert batch.seq_len == 6

    def test_gen_data_matches_train_internal_split(self, trained_run):
        out, data = trained_run
        summary = json.loads((out / "summary.json").read_text())
        assert summary["train_sequences"] == 30
        batch = load_dataset(data / "train.bin")
        assert batch.spec.seed == 1000

    def test_param_count_prints_crossover(self, capsys):
        assert run_cli("param-count") == 0
        printed = capsys.readouterr().out
        assert "crossover_T=" in printed
        assert "htan_total=" in printed
