import json
import subprocess
import sys

import pytest

from moretool import cli, parallel
from moretool.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from moretool.data import read_dataset
from moretool.training import TrainingDivergence

SUBCOMMANDS = ["gen-data", "train", "eval", "infer", "ensemble", "grad-check"]

SMALL_SYNTH = {"num_videos": 60, "C": 6, "d": 5, "num_latent_concepts": 6, "T_range": [4, 8],
               "cooccurrence_strength": 0.5}
FAST_TRAIN = {"base_lr": 0.05, "batch_size": 16, "epochs": 2}


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return path


@pytest.fixture
def corpus(tmp_path):
    cfg = write_json(tmp_path / "synth.json", SMALL_SYNTH)
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "train.jsonl"),
                 "--val-out", str(tmp_path / "val.jsonl"), "--seed", "3"]) == EXIT_OK
    return tmp_path


def train_model(root, name, spec, seed=0):
    spec_path = write_json(root / f"{name}.spec.json", spec)
    cfg = write_json(root / "train.cfg.json", FAST_TRAIN)
    code = main(["train", "--spec", str(spec_path), "--data", str(root / "train.jsonl"), "--val", str(root / "val.jsonl"),
                 "--config", str(cfg), "--out", str(root / name), "--seed", str(seed)])
    assert code == EXIT_OK
    return root / name / "model.ckpt"


class TestHelp:
    @pytest.mark.parametrize("command", SUBCOMMANDS)
    def test_help_exits_zero(self, command, capsys):
        assert main([command, "--help"]) == EXIT_OK
        assert "usage: moretool " + command in capsys.readouterr().out

    def test_top_level_help(self, capsys):
        assert main(["--help"]) == EXIT_OK
        out = capsys.readouterr().out
        assert all(c in out for c in SUBCOMMANDS)

    def test_no_command(self):
        assert main([]) == EXIT_USAGE

    def test_unknown_flag(self, capsys):
        assert main(["eval", "--pred", "p.csv", "--data", "d.jsonl", "--bogus"]) == EXIT_USAGE
        assert "--bogus" in capsys.readouterr().err

    def test_module_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "moretool", "grad-check", "--help"], capture_output=True, text=True)
        assert proc.returncode == 0 and "--tolerance" in proc.stdout


class TestGradCheck:
    def test_small_more_spec(self, tmp_path, capsys):
        spec = write_json(tmp_path / "more.json", {"kind": "MoRE", "num_classes": 3, "input_dim": 4,
                                                   "num_experts": 3, "expert_hidden": 7})
        assert main(["grad-check", "--spec", str(spec), "--seed", "1"]) == EXIT_OK
        out = capsys.readouterr().out
        assert out.startswith("max relative error") and "(ok" in out

    def test_impossible_tolerance_is_numeric_failure(self, tmp_path, capsys):
        spec = write_json(tmp_path / "moe.json", {"kind": "MoE", "num_classes": 3, "input_dim": 4, "num_experts": 2})
        assert main(["grad-check", "--spec", str(spec), "--tolerance", "1e-30"]) == EXIT_NUMERIC
        assert "FAILED" in capsys.readouterr().out

    def test_invalid_spec_is_usage_error(self, tmp_path, capsys):
        spec = write_json(tmp_path / "bad.json", {"kind": "MoRE", "num_classes": 3, "input_dim": 4, "experts": 3})
        assert main(["grad-check", "--spec", str(spec)]) == EXIT_USAGE
        assert "bad.json" in capsys.readouterr().err


class TestErrors:
    def test_missing_data_file(self, tmp_path, capsys):
        spec = write_json(tmp_path / "s.json", {"kind": "MoE", "num_classes": 3, "input_dim": 4, "num_experts": 2})
        missing = tmp_path / "nowhere" / "train.jsonl"
        assert main(["train", "--spec", str(spec), "--data", str(missing), "--out", str(tmp_path / "o")]) == EXIT_DATA
        assert str(missing) in capsys.readouterr().err

    def test_malformed_record_names_line(self, tmp_path, capsys):
        data = tmp_path / "d.jsonl"
        data.write_text('{"kind": "video", "d": 1, "C": 2}\n{"id": "a", "labels": [5], "features": [0.0]}\n')
        pred = tmp_path / "p.csv"
        pred.write_text("video_id,class_id,score\na,0,0.5\n")
        assert main(["eval", "--pred", str(pred), "--data", str(data)]) == EXIT_DATA
        assert "d.jsonl:2" in capsys.readouterr().err

    def test_unknown_config_key(self, tmp_path, capsys):
        cfg = write_json(tmp_path / "c.json", {"videos": 10})
        assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "x.jsonl")]) == EXIT_USAGE
        assert "videos" in capsys.readouterr().err

    def test_bad_set_syntax(self, tmp_path):
        assert main(["gen-data", "--set", "novalue", "--out", str(tmp_path / "x.jsonl")]) == EXIT_USAGE

    def test_corrupt_checkpoint(self, corpus, capsys):
        ckpt = corpus / "broken.ckpt"
        ckpt.write_bytes(b"garbage")
        code = main(["infer", "--ckpt", str(ckpt), "--data", str(corpus / "val.jsonl"), "--out", str(corpus / "p.csv")])
        assert code == EXIT_DATA
        assert "broken.ckpt" in capsys.readouterr().err

    def test_divergence_is_numeric(self, corpus, monkeypatch, capsys):
        def diverge(*args, **kwargs):
            raise TrainingDivergence("loss became nan at epoch 1, step 4")

        monkeypatch.setattr(cli, "train", diverge)
        spec = write_json(corpus / "s.json", {"kind": "MoE", "num_classes": 6, "input_dim": 5, "num_experts": 2})
        code = main(["train", "--spec", str(spec), "--data", str(corpus / "train.jsonl"), "--out", str(corpus / "m")])
        assert code == EXIT_NUMERIC
        assert "step 4" in capsys.readouterr().err


class TestPipeline:
    def test_gen_data_echo_and_override(self, tmp_path):
        cfg = write_json(tmp_path / "synth.json", SMALL_SYNTH)
        out = tmp_path / "d.bin"
        assert main(["gen-data", "--config", str(cfg), "--set", "num_videos=12", "--seed", "9", "--out", str(out)]) == 0
        echoed = json.loads((tmp_path / "d.bin.config.json").read_text())
        assert echoed["num_videos"] == 12 and echoed["seed"] == 9 and echoed["C"] == 6
        assert len(read_dataset(out)) == 12

    def test_train_infer_eval_ensemble(self, corpus, capsys):
        more = {"kind": "MoRE", "num_classes": 6, "input_dim": 5, "num_experts": 2, "expert_hidden": 4}
        moe = {"kind": "MoE", "num_classes": 6, "input_dim": 5, "num_experts": 2}
        ckpts = [train_model(corpus, "more", more), train_model(corpus, "moe", moe, seed=1)]
        echoed = json.loads((corpus / "more" / "config.json").read_text())
        assert echoed["train"]["seed"] == 0 and echoed["spec"]["kind"] == "MoRE"
        assert (corpus / "more" / "metrics.csv").read_text().startswith("epoch,loss,gap,map,perr,lr")

        preds = []
        for i, ckpt in enumerate(ckpts):
            out = corpus / f"p{i}.csv"
            assert main(["infer", "--ckpt", str(ckpt), "--data", str(corpus / "val.jsonl"), "--out", str(out)]) == 0
            preds.append(out)
        seg = corpus / "seg.csv"
        assert main(["infer", "--ckpt", str(ckpts[0]), "--data", str(corpus / "val.jsonl"), "--segmented",
                     "--out", str(seg)]) == 0

        capsys.readouterr()
        assert main(["eval", "--pred", str(preds[0]), "--data", str(corpus / "val.jsonl"), "--k", "5"]) == 0
        metrics = json.loads(capsys.readouterr().out)
        assert set(metrics) == {"GAP", "mAP", "PERR", "k"}

        report = corpus / "ens.json"
        assert main(["ensemble", "--preds", *map(str, preds), seg.as_posix(), "--names", "more", "moe", "seg",
                     "--data", str(corpus / "val.jsonl"), "--out", str(report),
                     "--fused-out", str(corpus / "fused.csv")]) == 0
        body = json.loads(report.read_text())
        assert [m["name"] for m in body["models"]] == ["more", "moe", "seg"]
        assert sum(m["weight"] for m in body["models"]) == pytest.approx(1.0, abs=1e-9)
        assert (corpus / "ens.json.config.json").exists() and (corpus / "fused.csv").exists()

    def test_segmented_on_frame_model_rejected(self, corpus):
        spec = {"kind": "MoE", "num_classes": 6, "input_dim": 5, "num_experts": 2,
                "pooling": {"kind": "attentive_dbof", "code_dim": 4}}
        ckpt = train_model(corpus, "frame", spec)
        code = main(["infer", "--ckpt", str(ckpt), "--data", str(corpus / "val.jsonl"), "--segmented",
                     "--out", str(corpus / "x.csv")])
        assert code == EXIT_USAGE


class TestDeterminism:
    def run_all(self, root):
        root.mkdir()
        cfg = write_json(root / "synth.json", SMALL_SYNTH)
        main(["gen-data", "--config", str(cfg), "--out", str(root / "train.jsonl"), "--val-out", str(root / "val.jsonl"),
              "--seed", "5"])
        spec = {"kind": "MoRE", "num_classes": 6, "input_dim": 5, "num_experts": 2, "expert_hidden": 4}
        ckpt = train_model(root, "m", spec, seed=7)
        main(["infer", "--ckpt", str(ckpt), "--data", str(root / "val.jsonl"), "--out", str(root / "a.csv")])
        main(["infer", "--ckpt", str(ckpt), "--data", str(root / "val.jsonl"), "--segmented", "--out", str(root / "b.csv")])
        main(["ensemble", "--preds", str(root / "a.csv"), str(root / "b.csv"), "--data", str(root / "val.jsonl"),
              "--out", str(root / "ens.json")])
        return root

    def test_bit_identical_outputs(self, tmp_path):
        a = self.run_all(tmp_path / "a")
        b = self.run_all(tmp_path / "b")
        names = ["train.jsonl", "val.jsonl", "m/model.ckpt", "m/epoch_001.ckpt", "m/metrics.csv", "a.csv", "b.csv",
                 "ens.json"]
        for name in names:
            assert (a / name).read_bytes() == (b / name).read_bytes(), name

    def test_thread_count_does_not_change_outputs(self, tmp_path, monkeypatch):
        monkeypatch.setenv(parallel.ENV_VAR, "1")
        a = self.run_all(tmp_path / "a")
        monkeypatch.setenv(parallel.ENV_VAR, "4")
        b = self.run_all(tmp_path / "b")
        for name in ["a.csv", "b.csv", "ens.json", "m/model.ckpt"]:
            assert (a / name).read_bytes() == (b / name).read_bytes(), name


class TestWorkerCount:
    def test_env_var(self, monkeypatch):
        monkeypatch.setenv(parallel.ENV_VAR, "3")
        assert parallel.worker_count() == 3

    @pytest.mark.parametrize("value", ["0", "-2", "many"])
    def test_invalid_env_var(self, monkeypatch, value):
        monkeypatch.setenv(parallel.ENV_VAR, value)
        with pytest.raises(ValueError, match=parallel.ENV_VAR):
            parallel.worker_count()

    def test_map_ordered(self):
        assert parallel.map_ordered(lambda x: x * x, range(10), workers=4) == [x * x for x in range(10)]
