import csv
import dataclasses
import io
import subprocess
import sys

import numpy as np
import pytest

import attanet.nn
from attanet import __version__
from attanet.cli import main
from attanet.data_io import decode_checkpoint, gen_toy_dataset, read_pgm, write_ppm
from attanet.model import TOY_MODEL, init_model
from attanet.nn import named_tensors


def run(capsys, *argv: str) -> tuple[int, str, str]:
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def save_sample_image(path, sample) -> None:
    rgb = np.rint(sample.image.data[0].transpose(1, 2, 0) * 255).astype(np.uint8)
    write_ppm(path, rgb)


class TestParser:
    def test_version(self, capsys):
        with pytest.raises(SystemExit) as info:
            main(["--version"])
        assert info.value.code == 0
        assert __version__ in capsys.readouterr().out

    @pytest.mark.parametrize("argv", [[], ["bogus"], ["train-toy"], ["flops", "--height", "x"]])
    def test_usage_errors_exit_2(self, argv):
        with pytest.raises(SystemExit) as info:
            main(argv)
        assert info.value.code == 2

    def test_console_script_runs_as_module(self):
        proc = subprocess.run(
            [sys.executable, "-m", "attanet.cli", "flops", "--height", "4", "--width", "4", "--channels", "16", "--cprime", "2"],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 0
        assert "SAM-vertical" in proc.stdout


class TestFlops:
    def test_ordering_in_csv(self, capsys):
        code, out, _ = run(capsys, "flops", "--height", "32", "--width", "32", "--channels", "512", "--cprime", "64")
        assert code == 0
        text = out[out.index("mechanism,C,"):]
        totals = {row["mechanism"]: int(row["total"]) for row in csv.DictReader(io.StringIO(text))}
        assert totals["SAM-vertical"] < totals["RCCA"] < totals["NL"]

    def test_csv_file(self, capsys, tmp_path):
        path = tmp_path / "f.csv"
        code, out, _ = run(capsys, "flops", "--csv", str(path))
        assert code == 0
        assert path.read_text().startswith("mechanism,C,Cprime,H,W,projection,map,aggregation,total,map_elements\n")
        assert "mechanism,C," not in out

    def test_bad_dimension(self, capsys):
        code, _, err = run(capsys, "flops", "--height", "0")
        assert code == 2 and "error" in err

    def test_identical_runs_identical_output(self, capsys):
        assert run(capsys, "flops") == run(capsys, "flops")

    def test_timestamps_only_on_request(self, capsys):
        _, plain, _ = run(capsys, "flops")
        _, stamped, _ = run(capsys, "--timestamps", "flops", "--csv", "/dev/null")
        assert plain.splitlines()[0].startswith("C=512")
        assert stamped.splitlines()[0][:2] == "20"


class TestChecks:
    def test_oracle_check(self, capsys):
        code, out, _ = run(capsys, "oracle-check", "--cases", "10")
        assert code == 0
        assert out.count("PASS") == 2

    def test_gradcheck_deterministic(self, capsys):
        first = run(capsys, "gradcheck", "--trials", "1", "--seed", "7")
        second = run(capsys, "gradcheck", "--trials", "1", "--seed", "7")
        assert first == second
        code, out, _ = first
        assert code == 0
        for op in ("sigmoid", "conv2d_3x3", "sam_vertical", "afm", "full_model"):
            assert f"\n{op} " in "\n" + out

    def test_corrupted_backward_is_named(self, capsys, monkeypatch):
        monkeypatch.setattr(attanet.nn, "_sigmoid_backward", lambda g, y: g * y)
        code, out, _ = run(capsys, "gradcheck", "--trials", "1", "--seed", "7")
        assert code == 1
        failing = out.strip().splitlines()[-1]
        assert failing.startswith("gradcheck FAILED") and "sigmoid" in failing
        assert "relu" not in failing


class TestTrainInferEval:
    def test_zero_iterations_saves_initial_model(self, capsys, tmp_path):
        ckpt = tmp_path / "init.ckpt"
        code, _, _ = run(capsys, "train-toy", "--iters", "0", "--seed", "5", "--out", str(ckpt), "--n-train", "2")
        assert code == 0
        stored = decode_checkpoint(ckpt.read_bytes())
        fresh = init_model(dataclasses.replace(TOY_MODEL, seed=5))
        for name, t, _ in named_tensors(fresh):
            assert np.array_equal(stored[name].data, t.data.astype(np.float32)), name

    def test_short_run_is_reproducible(self, capsys, tmp_path):
        outputs = []
        for tag in "ab":
            args = ["train-toy", "--iters", "4", "--seed", "1", "--n-train", "4", "--out", str(tmp_path / f"{tag}.ckpt"),
                    "--metrics", str(tmp_path / f"{tag}.csv")]
            code, out, _ = run(capsys, *args)
            assert code == 0
            outputs.append(out.replace(tag + ".ckpt", ""))
        assert outputs[0] == outputs[1]
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
        assert (tmp_path / "a.csv").read_text() == (tmp_path / "b.csv").read_text()
        assert (tmp_path / "a.csv").read_text().splitlines()[0] == "iter,loss,pixel_acc"

    def test_missing_checkpoint_exit_2(self, capsys, tmp_path):
        image = tmp_path / "x.ppm"
        save_sample_image(image, gen_toy_dataset(1, 0)[0])
        code, _, err = run(capsys, "infer", "--ckpt", str(tmp_path / "nope"), "--image", str(image), "--out", str(tmp_path / "o.pgm"))
        assert code == 2 and "error" in err

    def test_corrupt_checkpoint_exit_2(self, capsys, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"ATTC\x01\x00")
        code, _, err = run(capsys, "eval", "--ckpt", str(bad), "--n", "1")
        assert code == 2 and "offset" in err

    def test_bad_config_exit_2(self, capsys, tmp_path):
        cfg = tmp_path / "c.txt"
        cfg.write_text("lambda = -1\n")
        code, _, err = run(capsys, "train-toy", "--iters", "0", "--out", str(tmp_path / "x"), "--config", str(cfg))
        assert code == 2 and "line 1" in err

    def test_image_size_must_divide(self, capsys, tmp_path):
        ckpt = tmp_path / "init.ckpt"
        run(capsys, "train-toy", "--iters", "0", "--out", str(ckpt), "--n-train", "1")
        image = tmp_path / "odd.ppm"
        write_ppm(image, np.zeros((20, 20, 3), np.uint8))
        code, _, _ = run(capsys, "infer", "--ckpt", str(ckpt), "--image", str(image), "--out", str(tmp_path / "o.pgm"))
        assert code == 2

    @pytest.mark.slow
    def test_trained_model_segments_training_image(self, capsys, tmp_path):
        ckpt = tmp_path / "toy.ckpt"
        code, out, _ = run(capsys, "train-toy", "--seed", "0", "--out", str(ckpt))
        assert code == 0 and "iter 2000" in out

        sample = gen_toy_dataset(1, 1)[0]  # first training image
        image = tmp_path / "train0.ppm"
        save_sample_image(image, sample)
        code, _, _ = run(capsys, "infer", "--ckpt", str(ckpt), "--image", str(image),
                         "--out", str(tmp_path / "pred.pgm"), "--color", str(tmp_path / "pred.ppm"))
        assert code == 0
        pred = read_pgm(tmp_path / "pred.pgm")
        assert (pred == sample.labels[0]).mean() >= 0.90
        assert (tmp_path / "pred.ppm").read_bytes()[:2] == b"P6"

        code, out, _ = run(capsys, "eval", "--ckpt", str(ckpt), "--n", "20")
        assert code == 0
        assert out.strip().splitlines()[-1].startswith("mIoU ")
