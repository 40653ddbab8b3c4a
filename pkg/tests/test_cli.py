"""End-to-end exercises of the command-line interface.

Commands run in-process through ``cli.main`` so failures surface as
ordinary assertions and the slow subprocess spin-up is avoided.
"""

import json
import os
import shutil

import numpy as np
import pytest

from npmca import cli, ops
from npmca.datagen import load_sequence
from npmca.metrics import EvalReport, evaluate_sequence
from npmca.model import ModelConfig, init_model_params, load_checkpoint
from npmca.netpbm import read_pgm, write_pgm
from npmca.tensor import Tensor
from npmca.training import TrainingDiverged


def run_cli(argv):
    try:
        return cli.main([str(a) for a in argv])
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 0


def tree_bytes(root):
    """All file contents under root keyed by relative path, run.cfg excluded.

    run.cfg embeds absolute output paths, so two otherwise identical runs
    into different directories would differ on that one file.
    """
    out = {}
    for dirpath, _, files in os.walk(root):
        for fname in sorted(files):
            if fname == "run.cfg":
                continue
            path = os.path.join(dirpath, fname)
            with open(path, "rb") as fh:
                out[os.path.relpath(path, root)] = fh.read()
    return out


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = str(tmp_path_factory.mktemp("clidata") / "seqs")
    code = run_cli(["gen", "--n", 4, "--out", root, "--seed", 11, "--resolution", "32x48", "--frames", 6])
    assert code == 0
    return root


@pytest.fixture(scope="module")
def trained(tmp_path_factory, dataset):
    out = str(tmp_path_factory.mktemp("clitrain"))
    code = run_cli(
        ["train", "--data", dataset, "--out", out, "--stage", "pretrain", "--iterations", 2, "--batch", 2, "--seed", 3]
    )
    assert code == 0
    return out


class TestGen:
    def test_rerun_is_bitwise_identical(self, tmp_path):
        a, b = str(tmp_path / "a"), str(tmp_path / "b")
        for out in (a, b):
            assert run_cli(["gen", "--n", 2, "--out", out, "--seed", 5, "--resolution", "32x48", "--frames", 4]) == 0
        assert tree_bytes(a) == tree_bytes(b)

    def test_config_reproduces_tree(self, dataset, tmp_path):
        again = str(tmp_path / "again")
        assert run_cli(["gen", "--config", os.path.join(dataset, "run.cfg"), "--out", again]) == 0
        assert tree_bytes(again) == tree_bytes(dataset)

    def test_zero_count_is_usage_error(self, tmp_path):
        assert run_cli(["gen", "--n", 0, "--out", str(tmp_path / "x")]) == 2

    def test_missing_required_flag_is_usage_error(self):
        assert run_cli(["gen", "--n", 2]) == 2

    def test_env_seed_overrides_flag(self, tmp_path, monkeypatch):
        plain = str(tmp_path / "plain")
        assert run_cli(["gen", "--n", 1, "--out", plain, "--seed", 99, "--resolution", "32x48", "--frames", 4]) == 0
        monkeypatch.setenv("NPMCA_SEED", "99")
        overridden = str(tmp_path / "env")
        assert run_cli(["gen", "--n", 1, "--out", overridden, "--seed", 7, "--resolution", "32x48", "--frames", 4]) == 0
        assert tree_bytes(overridden) == tree_bytes(plain)
        cfg = open(os.path.join(overridden, "run.cfg"), encoding="utf-8").read()
        assert "seed=99" in cfg.splitlines()

    def test_run_cfg_records_resolved_arguments(self, dataset):
        lines = open(os.path.join(dataset, "run.cfg"), encoding="utf-8").read().splitlines()
        assert "command=gen" in lines
        assert "n=4" in lines
        assert "resolution=32x48" in lines
        assert "preset=default" in lines


class TestTrain:
    def test_smoke_run_writes_loadable_checkpoint(self, trained):
        params = init_model_params(0, ModelConfig())
        load_checkpoint(os.path.join(trained, "model.ckpt"), params)
        rows = open(os.path.join(trained, "loss.csv"), encoding="utf-8").read().splitlines()
        assert rows[0] == "iter,loss"
        assert len(rows) == 3
        assert all(np.isfinite(float(r.split(",")[1])) for r in rows[1:])

    def test_run_cfg_records_resolved_lr(self, trained):
        lines = open(os.path.join(trained, "run.cfg"), encoding="utf-8").read().splitlines()
        assert "stage=pretrain" in lines
        assert "lr=0.0001" in lines

    def test_finetune_without_init_is_usage_error(self, dataset, tmp_path, capsys):
        code = run_cli(["train", "--data", dataset, "--out", str(tmp_path / "x"), "--stage", "finetune", "--iterations", 1])
        assert code == 2
        assert "--init-checkpoint" in capsys.readouterr().err

    def test_config_reproduces_loss_log(self, trained, tmp_path):
        again = str(tmp_path / "again")
        assert run_cli(["train", "--config", os.path.join(trained, "run.cfg"), "--out", again]) == 0
        assert open(os.path.join(again, "loss.csv")).read() == open(os.path.join(trained, "loss.csv")).read()
        with open(os.path.join(again, "model.ckpt"), "rb") as fh_a, open(os.path.join(trained, "model.ckpt"), "rb") as fh_b:
            assert fh_a.read() == fh_b.read()

    def test_loss_drops_by_iteration_200(self, dataset, tmp_path):
        """Median over three seeds of the final loss sits below the median
        first loss. Run at 32x48 to keep the loop short."""
        first, last = [], []
        for seed in (1, 2, 3):
            out = str(tmp_path / f"run{seed}")
            code = run_cli(
                ["train", "--data", dataset, "--out", out, "--stage", "pretrain",
                 "--iterations", 200, "--batch", 2, "--seed", seed]
            )
            assert code == 0
            rows = open(os.path.join(out, "loss.csv"), encoding="utf-8").read().splitlines()[1:]
            losses = [float(r.split(",")[1]) for r in rows]
            first.append(losses[0])
            last.append(losses[-1])
        assert np.median(last) < np.median(first)

    def test_diverged_loss_exits_three(self, dataset, tmp_path, monkeypatch, capsys):
        def explode(*args, **kwargs):
            raise TrainingDiverged(5, float("nan"))

        monkeypatch.setattr(cli, "train_loop", explode)
        code = run_cli(["train", "--data", dataset, "--out", str(tmp_path / "x"), "--stage", "pretrain", "--iterations", 1])
        assert code == 3
        assert "iteration 5" in capsys.readouterr().err


class TestInfer:
    def test_frame_count_and_first_frame_passthrough(self, dataset, trained, tmp_path):
        out = str(tmp_path / "preds")
        code = run_cli(
            ["infer", "--data", dataset, "--checkpoint", os.path.join(trained, "model.ckpt"),
             "--out", out, "--sequence", "seq00000", "--scales", "1.0"]
        )
        assert code == 0
        video = load_sequence(dataset, "seq00000")
        written = sorted(os.listdir(os.path.join(out, "seq00000")))
        assert len(written) == len(video.frames)
        first = read_pgm(os.path.join(out, "seq00000", "00000.pgm"))
        np.testing.assert_array_equal(first.astype(np.int64), video.masks[0])

    def test_rerun_is_bitwise_identical(self, dataset, trained, tmp_path):
        ckpt = os.path.join(trained, "model.ckpt")
        a, b = str(tmp_path / "a"), str(tmp_path / "b")
        for out in (a, b):
            code = run_cli(["infer", "--data", dataset, "--checkpoint", ckpt, "--out", out,
                            "--sequence", "seq00001", "--scales", "1.0"])
            assert code == 0
        assert tree_bytes(a) == tree_bytes(b)

    def test_default_and_single_scale_both_run(self, dataset, trained, tmp_path):
        ckpt = os.path.join(trained, "model.ckpt")
        for tag, extra in (("multi", []), ("single", ["--scales", "1.0"])):
            out = str(tmp_path / tag)
            code = run_cli(["infer", "--data", dataset, "--checkpoint", ckpt, "--out", out,
                            "--sequence", "seq00002"] + extra)
            assert code == 0
            assert len(os.listdir(os.path.join(out, "seq00002"))) == 6

    def test_missing_first_mask_is_data_error(self, dataset, trained, tmp_path, capsys):
        bare = tmp_path / "bare" / "seq00000"
        shutil.copytree(os.path.join(dataset, "seq00000", "frames"), bare / "frames")
        code = run_cli(["infer", "--data", str(tmp_path / "bare"), "--checkpoint",
                        os.path.join(trained, "model.ckpt"), "--out", str(tmp_path / "x")])
        assert code == 2
        assert "00000.pgm" in capsys.readouterr().err


class TestEval:
    def copy_gt_as_predictions(self, dataset, pred_root):
        for name in sorted(os.listdir(dataset)):
            mask_dir = os.path.join(dataset, name, "masks")
            if not os.path.isdir(mask_dir):
                continue
            os.makedirs(os.path.join(pred_root, name), exist_ok=True)
            for fname in os.listdir(mask_dir):
                shutil.copy(os.path.join(mask_dir, fname), os.path.join(pred_root, name, fname))

    def test_self_evaluation_is_perfect(self, dataset, tmp_path, capsys):
        pred = str(tmp_path / "pred")
        self.copy_gt_as_predictions(dataset, pred)
        out = str(tmp_path / "report")
        assert run_cli(["eval", "--pred", pred, "--data", dataset, "--out", out]) == 0
        payload = json.loads(open(os.path.join(out, "report.json"), encoding="utf-8").read())
        assert payload["mean_j"] == 1.0
        assert payload["mean_f"] == 1.0
        assert "J: 1.000 F: 1.000" in capsys.readouterr().out

    def test_matches_direct_metric_calls(self, dataset, tmp_path):
        pred = str(tmp_path / "pred")
        self.copy_gt_as_predictions(dataset, pred)
        names = sorted(os.listdir(pred))
        shifted = {}
        for name in names:
            video = load_sequence(dataset, name)
            rolled = [np.roll(m, (1, 2), axis=(0, 1)) for m in video.masks]
            shifted[name] = rolled
            for t, mask in enumerate(rolled):
                write_pgm(os.path.join(pred, name, f"{t:05d}.pgm"), mask.astype(np.uint8))
        out = str(tmp_path / "report")
        assert run_cli(["eval", "--pred", pred, "--data", dataset, "--out", out]) == 0
        payload = json.loads(open(os.path.join(out, "report.json"), encoding="utf-8").read())

        direct = EvalReport([])
        for name in names:
            video = load_sequence(dataset, name)
            direct = direct.merged(evaluate_sequence(shifted[name], video.masks, name))
        assert payload["mean_j"] == pytest.approx(direct.mean_j, abs=1e-12)
        assert payload["mean_f"] == pytest.approx(direct.mean_f, abs=1e-12)

    def test_missing_frames_listed(self, dataset, tmp_path, capsys):
        pred = str(tmp_path / "pred")
        self.copy_gt_as_predictions(dataset, pred)
        victim = os.path.join(pred, "seq00001", "00003.pgm")
        os.remove(victim)
        assert run_cli(["eval", "--pred", pred, "--data", dataset, "--out", str(tmp_path / "r")]) == 2
        assert victim in capsys.readouterr().err

    def test_empty_prediction_dir(self, dataset, tmp_path):
        pred = str(tmp_path / "empty")
        os.makedirs(pred)
        assert run_cli(["eval", "--pred", pred, "--data", dataset, "--out", str(tmp_path / "r")]) == 2


class TestVerify:
    def test_fresh_suite_passes(self, capsys):
        assert run_cli(["verify"]) == 0
        out = capsys.readouterr().out
        checks = [line for line in out.splitlines() if line.startswith("[ok  ]")]
        assert len(checks) >= 12
        assert "checks passed" in out

    def test_corrupted_softmax_fails_stochasticity(self, monkeypatch, capsys):
        def naive(x):
            with np.errstate(over="ignore", invalid="ignore"):
                e = np.exp(x.array)
                return Tensor(e / e.sum(axis=0, keepdims=True))

        monkeypatch.setattr(ops, "softmax_columns", naive)
        assert run_cli(["verify"]) == 1
        out = capsys.readouterr().out
        bad = [line for line in out.splitlines() if line.startswith("[FAIL]")]
        assert any("softmax_column_stochastic" in line for line in bad)
