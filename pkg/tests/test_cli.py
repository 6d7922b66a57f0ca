import json

import numpy as np
import pytest

from mclq.cli import main
from mclq.config import PRESETS, ConfigError, load_config
from mclq.oracles import codebook_from_json
from mclq.processes import Trajectory, read_trajectory_csv, write_trajectory_csv

TINY_TRAIN = ["--set", "train.n_iter=3", "--set", "train.batch_size=16", "--set", "model.hidden_width=8"]


class TestConfig:
    def test_file_and_override_priority(self, tmp_path):
        f = tmp_path / "run.cfg"
        f.write_text("preset = toy-bm\n# comment\nmodel.K = 4\ntrain.lr = 0.01  # inline\n", encoding="utf-8")
        cfg = load_config(f, overrides={"model.K": "6"})
        assert cfg.get("model.K") == 6
        assert cfg.get("train.lr") == 0.01
        assert cfg.get("loss.epsilon") == 0.05

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="bogus"):
            load_config(overrides={"bogus": "1"})

    def test_missing_required_key_is_named(self):
        cfg = load_config()
        with pytest.raises(ConfigError, match="window.ctx_len"):
            cfg.get("window.ctx_len")

    def test_bad_type(self):
        with pytest.raises(ConfigError, match="model.K"):
            load_config(overrides={"model.K": "ten"})

    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            load_config(preset="toy-xyz")

    def test_resolved_text_reloads(self, tmp_path):
        cfg = load_config(preset="toy-ar5", overrides={"seed": "9"})
        f = tmp_path / "r.cfg"
        f.write_text(cfg.resolved_text(), encoding="utf-8")
        again = load_config(f)
        assert again.resolved_text() == cfg.resolved_text()

    def test_presets(self):
        bm = load_config(preset="toy-bm")
        assert (bm.get("model.K"), bm.get("loss.variant"), bm.get("loss.epsilon")) == (10, "relaxed", 0.05)
        assert (bm.get("train.n_iter"), bm.get("train.batch_size"), bm.get("model.score_heads")) == (500, 4096, False)
        an = load_config(preset="toy-bm-annealed")
        assert (an.get("loss.T0"), an.get("loss.rho"), an.get("loss.T_lim")) == (10.0, 0.95, 5e-4)
        assert load_config(preset="bm-10").get("oracle.levels_per_coord") == (5, 2)
        assert load_config(preset="ar5-lloyd").get("oracle.n_samples") == 100_000
        assert set(PRESETS) >= {"toy-bm", "toy-bridge", "toy-ar5", "bm-10", "ar5-lloyd"}


@pytest.fixture
def bm_paths(tmp_path):
    out = tmp_path / "paths"
    assert main(["synth", "--preset", "toy-bm", "--set", "process.n_paths=4", "--out", str(out)]) == 0
    return out


class TestSynth:
    def test_brownian_files(self, bm_paths):
        files = sorted(bm_paths.glob("path_*.csv"))
        assert len(files) == 4
        t = read_trajectory_csv(files[0])
        assert t.length == 500 and t.values[0, 0] == 0.0
        assert t.times[-1] == pytest.approx(499 / 500)
        manifest = json.loads((bm_paths / "manifest.json").read_text(encoding="utf-8"))
        assert manifest["process"] == "brownian_motion" and len(manifest["paths"]) == 4

    def test_zero_paths_creates_nothing(self, tmp_path):
        out = tmp_path / "none"
        assert main(["synth", "--preset", "toy-bm", "--set", "process.n_paths=0", "--out", str(out)]) == 2
        assert not out.exists()

    def test_rerun_byte_identical(self, tmp_path, bm_paths):
        again = tmp_path / "again"
        main(["synth", "--preset", "toy-bm", "--set", "process.n_paths=4", "--out", str(again)])
        for f in sorted(bm_paths.glob("*.csv")):
            assert (again / f.name).read_bytes() == f.read_bytes()

    def test_seed_flag_changes_paths(self, tmp_path, bm_paths):
        other = tmp_path / "other"
        main(["synth", "--preset", "toy-bm", "--set", "process.n_paths=4", "--seed", "5", "--out", str(other)])
        assert (other / "path_00001.csv").read_bytes() != (bm_paths / "path_00001.csv").read_bytes()

    def test_bridge_and_ar(self, tmp_path):
        assert main(["synth", "--preset", "toy-bridge", "--set", "process.n_paths=2", "--out",
                     str(tmp_path / "b")]) == 0
        t = read_trajectory_csv(tmp_path / "b" / "path_00000.csv")
        assert t.values[0, 0] == 1.0 and t.values[0, -1] == 1.0
        assert main(["synth", "--preset", "toy-ar5", "--set", "process.n_paths=2", "--out", str(tmp_path / "a")]) == 0


class TestOracle:
    def test_bm10(self, tmp_path):
        out = tmp_path / "o"
        assert main(["oracle", "--preset", "bm-10", "--set", "oracle.eval_samples=500", "--out", str(out)]) == 0
        doc = json.loads((out / "codebook.json").read_text(encoding="utf-8"))
        assert doc["D"] == 1 and doc["Lp"] == 500 and len(doc["codevectors"]) == 10
        assert doc["mc_distortion"] > 0

    def test_lloyd_single_cell_is_grand_mean(self, tmp_path, bm_paths):
        out = tmp_path / "o"
        assert main(["oracle", "--set", "oracle.kind=lloyd", "--set", "process.kind=brownian_motion",
                     "--set", f"data.path={bm_paths}", "--set", "oracle.K=1", "--out", str(out)]) == 0
        book = codebook_from_json((out / "codebook.json").read_text(encoding="utf-8"))
        paths = np.stack([read_trajectory_csv(f).values for f in sorted(bm_paths.glob("*.csv"))])
        np.testing.assert_allclose(book.codevectors[0], paths.mean(axis=0), atol=1e-14)

    def test_ar_lloyd_small(self, tmp_path):
        out = tmp_path / "o"
        assert main(["oracle", "--preset", "ar5-lloyd", "--set", "oracle.n_samples=300", "--set",
                     "oracle.eval_samples=100", "--set", "window.pred_len=20", "--out", str(out)]) == 0
        doc = json.loads((out / "codebook.json").read_text(encoding="utf-8"))
        assert len(doc["context"][0]) == 100
        hist = doc["mse_history"]
        assert all(b <= a for a, b in zip(hist, hist[1:]))
        assert (out / "history.csv").exists()

    def test_eval_reproduces_lloyd_distortion(self, tmp_path, bm_paths):
        out = tmp_path / "o"
        main(["oracle", "--set", "oracle.kind=lloyd", "--set", "process.kind=brownian_motion", "--set",
              f"data.path={bm_paths}", "--set", "oracle.K=2", "--out", str(out)])
        stored = json.loads((out / "codebook.json").read_text(encoding="utf-8"))["distortion"]
        ev = tmp_path / "e"
        assert main(["eval", "--codebook", str(out / "codebook.json"), "--data", str(bm_paths), "--out", str(ev)]) == 0
        got = json.loads((ev / "metrics.json").read_text(encoding="utf-8"))["distortion"]
        assert abs(got - stored) < 1e-9

    def test_unknown_kind(self, tmp_path):
        assert main(["oracle", "--set", "oracle.kind=magic", "--set", "process.kind=ar", "--out",
                     str(tmp_path / "o")]) == 2


@pytest.fixture
def checkpoint(tmp_path):
    out = tmp_path / "t"
    assert main(["train", "--preset", "toy-bm", *TINY_TRAIN, "--out", str(out)]) == 0
    return out / "checkpoint.json"


class TestTrainPredictEval:
    def test_train_outputs(self, checkpoint):
        d = checkpoint.parent
        lines = (d / "history.csv").read_text(encoding="utf-8").splitlines()
        assert lines[0] == "step,wta_term,score_term,temperature,total" and len(lines) == 4
        assert "model.K = 10" in (d / "resolved_config.txt").read_text(encoding="utf-8")

    def test_train_reproducible_from_resolved_config(self, tmp_path, checkpoint):
        out = tmp_path / "again"
        assert main(["train", "--config", str(checkpoint.parent / "resolved_config.txt"), "--out", str(out)]) == 0
        assert (out / "checkpoint.json").read_bytes() == checkpoint.read_bytes()

    def test_missing_key_is_usage_error(self, tmp_path, capsys):
        assert main(["train", "--set", "window.ctx_len=1", "--out", str(tmp_path / "x")]) == 2
        assert "window.pred_len" in capsys.readouterr().err

    def test_divergence_exit_code(self, tmp_path):
        code = main(["train", "--preset", "toy-ar5", *TINY_TRAIN, "--set", "process.sigma=1e9",
                     "--out", str(tmp_path / "x")])
        assert code == 3

    def test_bad_flag_is_usage_error(self):
        assert main(["train", "--bogus"]) == 2

    def test_predict(self, tmp_path, checkpoint):
        ctx = tmp_path / "ctx.csv"
        write_trajectory_csv(Trajectory([[0.3]], dt=1 / 500), ctx)
        outs = []
        for name in ("p1", "p2"):
            assert main(["predict", "--checkpoint", str(checkpoint), "--context", str(ctx), "--out",
                         str(tmp_path / name)]) == 0
            outs.append((tmp_path / name / "forecast.json").read_text(encoding="utf-8"))
        assert outs[0] == outs[1]
        doc = json.loads(outs[0])
        assert np.asarray(doc["hypotheses"]).shape == (10, 1, 249)
        assert sum(doc["scores"]) == pytest.approx(1.0)
        assert doc["t_start"] == pytest.approx(1 / 500)

    def test_predict_shape_mismatch(self, tmp_path, checkpoint, capsys):
        ctx = tmp_path / "ctx.csv"
        write_trajectory_csv(Trajectory(np.zeros((1, 3)), dt=0.1), ctx)
        assert main(["predict", "--checkpoint", str(checkpoint), "--context", str(ctx), "--out",
                     str(tmp_path / "p")]) == 2
        assert "expects (1, 1)" in capsys.readouterr().err

    def test_single_hypothesis_scores_one(self, tmp_path):
        out = tmp_path / "t"
        main(["train", "--preset", "toy-bm", *TINY_TRAIN, "--set", "model.K=1", "--out", str(out)])
        ctx = tmp_path / "ctx.csv"
        write_trajectory_csv(Trajectory([[0.0]]), ctx)
        main(["predict", "--checkpoint", str(out / "checkpoint.json"), "--context", str(ctx), "--out",
              str(tmp_path / "p")])
        doc = json.loads((tmp_path / "p" / "forecast.json").read_text(encoding="utf-8"))
        assert doc["scores"] == [1.0] and len(doc["hypotheses"]) == 1

    def test_eval_and_compare(self, tmp_path, checkpoint, bm_paths):
        ev = tmp_path / "e"
        assert main(["eval", "--checkpoint", str(checkpoint), "--data", str(bm_paths), "--out", str(ev)]) == 0
        rep = json.loads((ev / "metrics.json").read_text(encoding="utf-8"))
        assert set(rep) == {"distortion", "rmse", "crps_sum", "total_variation"}
        header = (ev / "plot.csv").read_text(encoding="utf-8").splitlines()[0]
        assert header == "window,time,dimension,hypothesis,value,score,target"
        book = tmp_path / "o"
        main(["oracle", "--preset", "bm-10-window", "--set", "oracle.eval_samples=100", "--out", str(book)])
        cmp_dir = tmp_path / "c"
        assert main(["eval", "--checkpoint", str(checkpoint), "--codebook", str(book / "codebook.json"),
                     "--data", str(bm_paths), "--out", str(cmp_dir)]) == 0
        doc = json.loads((cmp_dir / "metrics.json").read_text(encoding="utf-8"))
        assert doc["model"]["distortion"] == rep["distortion"]
        assert doc["distortion_ratio"] == pytest.approx(doc["model"]["distortion"] / doc["oracle"]["distortion"])
        assert (cmp_dir / "plot_oracle.csv").exists()

    def test_perfect_codebook_scores_zero(self, tmp_path, bm_paths):
        from mclq.oracles import Codebook, codebook_to_json

        target = read_trajectory_csv(sorted(bm_paths.glob("*.csv"))[0])
        data = tmp_path / "one"
        data.mkdir()
        write_trajectory_csv(target, data / "x.csv")
        book = tmp_path / "book.json"
        book.write_text(codebook_to_json(Codebook(target.values[None], target.dt)), encoding="utf-8")
        assert main(["eval", "--codebook", str(book), "--data", str(data), "--out", str(tmp_path / "e")]) == 0
        rep = json.loads((tmp_path / "e" / "metrics.json").read_text(encoding="utf-8"))
        assert rep["distortion"] == 0.0 and rep["rmse"] == 0.0

    def test_missing_checkpoint(self, tmp_path):
        assert main(["predict", "--checkpoint", str(tmp_path / "nope.json"), "--context", "x.csv", "--out",
                     str(tmp_path / "p")]) == 2
