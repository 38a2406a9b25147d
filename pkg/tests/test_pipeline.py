import json
import shutil
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from tripletrank.cli import main
from tripletrank.evaluation import METRICS
from tripletrank.pipeline import (TABLE_ORDER, Experiment, ExperimentConfig, StageError, emit_report,
                                  load_config, parse_system, read_profile, run_experiment)

ROOT = Path(__file__).resolve().parents[1]
SMOKE = ROOT / "configs" / "smoke.json"


def tree_bytes(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def smoke_cfg():
    return load_config(SMOKE)


@pytest.fixture(scope="module")
def smoke_run(smoke_cfg, tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    report = run_experiment(smoke_cfg, out)
    return out, report


class TestConfig:
    def test_defaults_are_documented_constants(self):
        cfg = ExperimentConfig()
        assert cfg.training.margin == 0.5 and cfg.training.batch_triplets == 42
        assert (cfg.mining.n_positives, cfg.mining.n_negatives) == (15, 250)
        assert (cfg.eval.k, cfg.eval.n_relevant, cfg.eval_patches) == (20, 5, 8)
        assert cfg.split == (0.6, 0.2, 0.2)
        assert cfg.systems == TABLE_ORDER

    def test_round_trip(self, smoke_cfg):
        again = ExperimentConfig.from_dict(json.loads(json.dumps(smoke_cfg.to_dict())))
        assert again == smoke_cfg

    @pytest.mark.parametrize("patch", [
        {"model": {"n_tags": 5}},
        {"oracle": {"weights": [1.0, 2.0]}},
        {"mining": {"n_positives": 6}},
        {"eval": {"k": 2, "n_relevant": 3}},
        {"systems": ["tl-hardest"]},
        {"bogus": {}},
    ])
    def test_inconsistent_config_rejected(self, patch, smoke_cfg, tmp_path):
        d = smoke_cfg.to_dict()
        for k, v in patch.items():
            d[k] = {**d[k], **v} if isinstance(d.get(k), dict) else v
        with pytest.raises(ValueError):
            ExperimentConfig.from_dict(d)
        assert not any(tmp_path.iterdir())

    def test_parse_system(self):
        assert parse_system("tl-random-uniform").key == "tl-uniform"
        s = parse_system("tl-autopool")
        assert (s.mode, s.temporal_pool, s.strategy) == ("embed", "autopool", "distance")
        assert parse_system("at").mode == "tag"
        with pytest.raises(ValueError):
            parse_system("svm")


class TestRun:
    def test_stage_outputs(self, smoke_run):
        out, report = smoke_run
        for rel in ["corpus/manifest.json", "corpus/patches.f32", "corpus/split.json",
                    "rankings/test.json", "mining/distance/train.csv", "models/at/params.f32",
                    "models/tl-autopool/params.json", "outputs/tl-uniform/vectors.json",
                    "eval/at/metrics.json", "profile/similarity_profile.csv",
                    "report/table.txt", "report/metrics.csv", "report/loss_curves.csv",
                    "report/similarity_profile.csv", "report/report.json",
                    "report/similarity_profile.png", "report/loss_curves.png", "report/metrics.png"]:
            assert (out / rel).is_file(), rel
        assert not list(out.rglob("FAILED"))

    def test_report_rows_in_table_order(self, smoke_run):
        out, report = smoke_run
        assert [r["key"] for r in report["rows"]] == list(TABLE_ORDER)
        lines = (out / "report" / "table.txt").read_text().splitlines()
        assert lines[0].split()[1:] == [f"{m}@3" for m in METRICS]
        assert len(lines) == 2 + len(TABLE_ORDER)
        for row in report["rows"]:
            assert row["params_file"].startswith("models/") and row["seed"]
            for m in METRICS:
                assert 0 <= row["summary"][m]["mean"] <= 100
        assert "mean_auc" in report["rows"][0]
        assert report["config"] == load_config(SMOKE).to_dict()

    def test_two_decimal_cells(self, smoke_run):
        out, _ = smoke_run
        for line in (out / "report" / "metrics.csv").read_text().splitlines()[1:]:
            mean, ci = line.split(",")[-2:]
            assert len(mean.split(".")[1]) == 2 and len(ci.split(".")[1]) == 2

    def test_profile_non_increasing(self, smoke_run):
        out, report = smoke_run
        prof = read_profile(out / "report" / "similarity_profile.csv")
        assert len(prof) == 29 and np.all(np.diff(prof) <= 0)

    def test_loss_curve_rows(self, smoke_run):
        out, report = smoke_run
        lines = (out / "report" / "loss_curves.csv").read_text().splitlines()
        assert lines[0] == "system,epoch,train,val"
        n = sum(len(c["train"]) for c in report["loss_curves"].values())
        assert len(lines) == n + 1

    def test_rerun_is_byte_identical(self, smoke_cfg, smoke_run, tmp_path):
        out, _ = smoke_run
        run_experiment(smoke_cfg, tmp_path)
        assert tree_bytes(tmp_path) == tree_bytes(out)

    def test_resume_after_deleting_stage(self, smoke_cfg, smoke_run, tmp_path):
        out, _ = smoke_run
        shutil.copytree(out, tmp_path / "run")
        shutil.rmtree(tmp_path / "run" / "models" / "tl-distance")
        shutil.rmtree(tmp_path / "run" / "report")
        run_experiment(smoke_cfg, tmp_path / "run")
        assert tree_bytes(tmp_path / "run") == tree_bytes(out)

    def test_up_to_date_stages_are_skipped(self, smoke_cfg, smoke_run, tmp_path):
        out, _ = smoke_run
        shutil.copytree(out, tmp_path / "run")
        marker = tmp_path / "run" / "models" / "at" / "params.f32"
        before = marker.stat().st_mtime_ns
        run_experiment(smoke_cfg, tmp_path / "run")
        assert marker.stat().st_mtime_ns == before

    def test_config_change_invalidates_downstream(self, smoke_cfg, smoke_run, tmp_path):
        out, _ = smoke_run
        shutil.copytree(out, tmp_path / "run")
        cfg = replace(smoke_cfg, eval=replace(smoke_cfg.eval, k=4))
        report = run_experiment(cfg, tmp_path / "run")
        assert "MAP@4" in (tmp_path / "run" / "report" / "table.txt").read_text()
        assert report["config"]["eval"]["k"] == 4
        # training is upstream of evaluation and must not have been redone
        assert (tmp_path / "run" / "models" / "at" / "params.f32").read_bytes() == \
            (out / "models" / "at" / "params.f32").read_bytes()

    def test_stage_failure_leaves_marker(self, smoke_cfg, smoke_run, tmp_path):
        out, _ = smoke_run
        shutil.copytree(out, tmp_path / "run")
        (tmp_path / "run" / "mining" / "uniform" / "train.csv").write_text("garbage\n")
        exp = Experiment(smoke_cfg, tmp_path / "run")
        with pytest.raises(StageError, match="train"):
            exp.train(parse_system("tl-uniform"), force=True)
        assert (tmp_path / "run" / "models" / "tl-uniform" / "FAILED").exists()
        # the corpus, rankings and other models are untouched
        assert (tmp_path / "run" / "models" / "at" / "params.f32").exists()
        with pytest.raises(StageError, match="missing stages"):
            exp.report(force=True)

    def test_missing_upstream(self, smoke_cfg, tmp_path):
        with pytest.raises(StageError, match="rank|corpus"):
            Experiment(smoke_cfg, tmp_path).rank()

    def test_emit_report_incomplete(self, tmp_path):
        with pytest.raises(ValueError, match="rows"):
            emit_report({"rows": [], "loss_curves": {"a": {}}, "similarity_profile": [1.0], "config": {"x": 1}},
                        tmp_path)

    def test_single_system_table(self, smoke_cfg, tmp_path):
        cfg = replace(smoke_cfg, systems=("tl-uniform",))
        report = run_experiment(cfg, tmp_path)
        assert len(report["rows"]) == 1
        assert len((tmp_path / "report" / "table.txt").read_text().splitlines()) == 3


class TestCLI:
    def run(self, tmp_path, *argv):
        return main(["--config", str(SMOKE), "--out", str(tmp_path), *argv])

    def test_stepwise(self, tmp_path, capsys):
        assert self.run(tmp_path, "generate") == 0
        assert "train 18, validation 6, test 6" in capsys.readouterr().out
        assert self.run(tmp_path, "rank") == 0
        assert self.run(tmp_path, "profile-similarity") == 0
        assert (tmp_path / "profile" / "similarity_profile.png").exists()
        assert self.run(tmp_path, "mine", "--strategy", "neighbors", "--np", "2", "--nn", "3") == 0
        assert "mined 108 training triplets" in capsys.readouterr().out
        assert self.run(tmp_path, "train", "--mode", "triplet", "--strategy", "neighbors",
                        "--max-epochs", "1", "--lr", "0.01") == 0
        assert "TL Neighbors: best epoch 1 of 1" in capsys.readouterr().out
        assert self.run(tmp_path, "embed", "--system", "tl-neighbors") == 0
        assert (tmp_path / "outputs" / "tl-neighbors" / "vectors.json").exists()
        assert self.run(tmp_path, "train", "--mode", "tagger", "--max-epochs", "1") == 0
        assert self.run(tmp_path, "estimate-tags", "--system", "at") == 0
        capsys.readouterr()
        assert self.run(tmp_path, "evaluate", "--system", "at", "--k", "4") == 0
        out = capsys.readouterr().out
        assert "MAP@4" in out and "mean AUC" in out

    def test_stage_error_exit_code(self, tmp_path, capsys):
        assert self.run(tmp_path, "rank") == 2
        assert "stage" in capsys.readouterr().err

    def test_bad_config_exit_code(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"eval": {"k": 2, "n_relevant": 5}}))
        assert main(["--config", str(bad), "--out", str(tmp_path), "generate"]) == 1
        assert "n_relevant" in capsys.readouterr().err

    def test_seed_flag_changes_corpus(self, tmp_path):
        assert main(["--config", str(SMOKE), "--out", str(tmp_path / "a"), "--seed", "1", "generate"]) == 0
        assert main(["--config", str(SMOKE), "--out", str(tmp_path / "b"), "--seed", "2", "generate"]) == 0
        a = (tmp_path / "a" / "corpus" / "manifest.json").read_bytes()
        b = (tmp_path / "b" / "corpus" / "manifest.json").read_bytes()
        assert a != b

    def test_run_and_report(self, tmp_path, capsys):
        assert self.run(tmp_path, "run") == 0
        assert "TL Autopool" in capsys.readouterr().out
        assert self.run(tmp_path, "report") == 0
        assert "AT Baseline" in capsys.readouterr().out
