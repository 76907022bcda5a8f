"""CLI subcommands end to end: exit codes, artifacts, 8-bit identity path."""

import numpy as np
import pytest

from deblur import dataio
from deblur.cli import main
from deblur.model import TOY_CONFIG, build, save


@pytest.fixture
def toy_dataset(rng, tmp_path):
    root = tmp_path / "data"
    (root / "blur").mkdir(parents=True)
    (root / "sharp").mkdir(parents=True)
    for i in range(3):
        blur = rng.random((3, 16, 16)).astype(np.float32)
        sharp = rng.random((3, 16, 16)).astype(np.float32)
        dataio.save_image(blur, root / "blur" / f"img{i}.ppm")
        dataio.save_image(sharp, root / "sharp" / f"img{i}.ppm")
    return root


@pytest.fixture
def zero_residual_ckpt(tmp_path):
    store = build(TOY_CONFIG, seed=0)
    store["output.weight"].data[...] = 0.0
    store["output.bias"].data[...] = 0.0
    path = tmp_path / "zero.ckpt"
    save(store, path)
    return path


def _toy_train_config(root):
    return f"""
[model]
preset = toy

[schedule]
total_iters = 4
lr_start = 1e-3
ladder = 0:16:2

[train]
val_interval = 2
checkpoint_interval = 2

[data]
root = {root}
"""


class TestTrain:
    def test_happy_path_writes_artifacts(self, toy_dataset, tmp_path):
        cfg = tmp_path / "train.cfg"
        cfg.write_text(_toy_train_config(toy_dataset))
        out = tmp_path / "run"
        code = main(["train", "--config", str(cfg), "--seed", "1", "--out", str(out)])
        assert code == 0
        assert (out / "checkpoint_last.ckpt").exists()
        assert (out / "train_log.csv").exists()
        assert (out / "config_effective.cfg").exists()

    def test_missing_dataset_is_exit_2(self, tmp_path, capsys):
        cfg = tmp_path / "train.cfg"
        cfg.write_text(_toy_train_config(tmp_path / "nope"))
        code = main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")])
        assert code == 2
        assert "nope" in capsys.readouterr().err

    def test_override_echoed(self, toy_dataset, tmp_path):
        cfg = tmp_path / "train.cfg"
        cfg.write_text(_toy_train_config(toy_dataset))
        out = tmp_path / "run"
        code = main(["train", "--config", str(cfg), "--out", str(out),
                     "--override", "loss.lambda_freq=0"])
        assert code == 0
        echoed = (out / "config_effective.cfg").read_text()
        assert "lambda_freq = 0.0" in echoed

    def test_unknown_key_is_exit_1(self, toy_dataset, tmp_path, capsys):
        cfg = tmp_path / "train.cfg"
        cfg.write_text(_toy_train_config(toy_dataset) + "\n[loss]\nbogus = 1\n")
        code = main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")])
        assert code == 1
        assert "bogus" in capsys.readouterr().err


class TestNumericAbort:
    def test_numeric_abort_is_exit_3(self, toy_dataset, tmp_path, monkeypatch, capsys):
        from deblur import trainer

        def blow_up(*args, **kwargs):
            raise trainer.NumericAbort("non-finite loss at iteration 0")

        monkeypatch.setattr(trainer, "train", blow_up)
        cfg = tmp_path / "train.cfg"
        cfg.write_text(_toy_train_config(toy_dataset))
        code = main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")])
        assert code == 3
        assert "numeric abort" in capsys.readouterr().err


class TestInfer:
    def test_zero_residual_is_byte_identity(self, rng, zero_residual_ckpt, tmp_path):
        in_dir = tmp_path / "in"
        in_dir.mkdir()
        for i, (h, w) in enumerate([(16, 16), (24, 32)]):
            dataio.save_image(rng.random((3, h, w)).astype(np.float32),
                              in_dir / f"img{i}.ppm")
        out_dir = tmp_path / "out"
        code = main(["infer", str(zero_residual_ckpt), str(in_dir), str(out_dir)])
        assert code == 0
        for p in in_dir.iterdir():
            assert (out_dir / p.name).read_bytes() == p.read_bytes()

    def test_non_divisible_input_padded(self, rng, zero_residual_ckpt, tmp_path):
        in_dir = tmp_path / "in"
        in_dir.mkdir()
        dataio.save_image(rng.random((3, 15, 13)).astype(np.float32),
                          in_dir / "odd.ppm")
        out_dir = tmp_path / "out"
        assert main(["infer", str(zero_residual_ckpt), str(in_dir), str(out_dir)]) == 0
        restored = dataio.load_image(out_dir / "odd.ppm")
        assert restored.data.shape == (3, 15, 13)
        assert (out_dir / "odd.ppm").read_bytes() == (in_dir / "odd.ppm").read_bytes()

    def test_name_preservation_and_count(self, rng, zero_residual_ckpt, tmp_path):
        in_dir = tmp_path / "in"
        in_dir.mkdir()
        names = ["b.ppm", "a.ppm"]
        for n in names:
            dataio.save_image(rng.random((3, 16, 16)).astype(np.float32), in_dir / n)
        out_dir = tmp_path / "out"
        assert main(["infer", str(zero_residual_ckpt), str(in_dir), str(out_dir)]) == 0
        assert sorted(p.name for p in out_dir.iterdir()) == sorted(names)

    def test_corrupt_checkpoint_is_exit_2(self, rng, tmp_path, capsys):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"NOTACKPT" + bytes(64))
        in_dir = tmp_path / "in"
        in_dir.mkdir()
        dataio.save_image(rng.random((3, 16, 16)), in_dir / "x.ppm")
        assert main(["infer", str(bad), str(in_dir), str(tmp_path / "o")]) == 2


class TestEval:
    def test_identical_dirs(self, rng, tmp_path, capsys):
        a_dir = tmp_path / "a"
        b_dir = tmp_path / "b"
        a_dir.mkdir(), b_dir.mkdir()
        for i in range(2):
            img = rng.random((3, 16, 16)).astype(np.float32)
            dataio.save_image(img, a_dir / f"i{i}.ppm")
            dataio.save_image(img, b_dir / f"i{i}.ppm")
        out = tmp_path / "report"
        assert main(["eval", str(a_dir), str(b_dir), "--out", str(out)]) == 0
        rows = (out / "report.csv").read_text().splitlines()
        assert len(rows) == 3
        for row in rows[1:]:
            cells = row.split(",")
            assert cells[1] == "inf"
            assert float(cells[2]) == 1.0      # ssim
            assert float(cells[3]) == 0.0      # mae
            assert float(cells[4]) == 0.0      # deltaE00
        summary = (out / "summary.txt").read_text()
        assert "NA" in summary

    def test_row_count_matches_pairs(self, rng, tmp_path):
        a_dir, b_dir = tmp_path / "a", tmp_path / "b"
        a_dir.mkdir(), b_dir.mkdir()
        for i in range(4):
            dataio.save_image(rng.random((3, 16, 16)), a_dir / f"i{i}.ppm")
            dataio.save_image(rng.random((3, 16, 16)), b_dir / f"i{i}.ppm")
        out = tmp_path / "rep"
        assert main(["eval", str(a_dir), str(b_dir), "--out", str(out)]) == 0
        assert len((out / "report.csv").read_text().splitlines()) == 5

    def test_unmatched_files_is_exit_2(self, rng, tmp_path, capsys):
        a_dir, b_dir = tmp_path / "a", tmp_path / "b"
        a_dir.mkdir(), b_dir.mkdir()
        dataio.save_image(rng.random((3, 16, 16)), a_dir / "x.ppm")
        dataio.save_image(rng.random((3, 16, 16)), b_dir / "y.ppm")
        assert main(["eval", str(a_dir), str(b_dir), "--out", str(tmp_path / "o")]) == 2


class TestMine:
    def _report(self, tmp_path, psnrs):
        path = tmp_path / "report.csv"
        rows = ["id,psnr,ssim,mae,deltaE00,label"]
        rows += [f"img{i},{p},0.9,0.01,1.0,neither" for i, p in enumerate(psnrs)]
        path.write_text("\n".join(rows) + "\n")
        return path

    def test_counts(self, tmp_path, capsys):
        report = self._report(tmp_path, [15.0, 25.0, 35.0])
        assert main(["mine", str(report), "--out", str(tmp_path / "m")]) == 0
        out = capsys.readouterr().out
        assert "hard_positives 1" in out
        assert "hard_negatives 1" in out
        assert "total 3" in out
        assert (tmp_path / "m" / "hard_positives.txt").read_text() == "img2\n"
        assert (tmp_path / "m" / "hard_negatives.txt").read_text() == "img0\n"

    def test_empty_report(self, tmp_path, capsys):
        report = self._report(tmp_path, [])
        assert main(["mine", str(report)]) == 0
        out = capsys.readouterr().out
        assert "total 0" in out

    def test_partition(self, tmp_path, capsys, rng):
        psnrs = list(rng.uniform(5, 45, size=20))
        report = self._report(tmp_path, psnrs)
        assert main(["mine", str(report)]) == 0
        out = capsys.readouterr().out
        pos = int(out.split("hard_positives ")[1].split()[0])
        neg = int(out.split("hard_negatives ")[1].split()[0])
        total = int(out.split("total ")[1].split()[0])
        neither = sum(1 for p in psnrs if 20.0 <= p <= 30.0)
        assert pos + neg + neither == total == 20

    def test_malformed_report_is_exit_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text("not,a,report\n")
        assert main(["mine", str(bad)]) == 2


class TestArch:
    def test_identical_configs_zero_delta(self, capsys):
        assert main(["arch", "baseline", "baseline"]) == 0
        out = capsys.readouterr().out
        assert "+0.00%" in out

    def test_baseline_vs_improved_deltas(self, capsys):
        assert main(["arch", "baseline", "improved"]) == 0
        out = capsys.readouterr().out
        param_delta = float(out.split("total params")[1].split("delta: ")[1].split("%")[0])
        block_delta = float(out.split("total blocks")[1].split("delta: ")[1].split("%")[0])
        size_ratio = float(out.split("ratio: ")[1].split()[0])
        assert abs(param_delta - (-18.4)) <= 1.0
        assert abs(block_delta - (-30.0)) <= 2.0 + 1e-9
        assert abs(size_ratio - 0.816) <= 0.01

    def test_unknown_config_is_exit_1(self, capsys):
        assert main(["arch", "baseline", "nonexistent"]) == 1
