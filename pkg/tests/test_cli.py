import os

import numpy as np
import pytest
from PIL import Image

from halobuild import audit
from halobuild.cli import main


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def rows(out):
    return [line.split("\t") for line in out.strip().splitlines()]


@pytest.fixture
def data(tmp_path, capsys):
    root = tmp_path / "data"
    code, _, _ = run(capsys, "synth", "--n_scenes", "10", "--data_dir", str(root))
    assert code == 0
    return root


def test_synth_split_and_determinism(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    code, out, _ = run(capsys, "synth", "--n_scenes", "10", "--data_dir", str(a))
    assert code == 0
    table = {r[0]: int(r[1]) for r in rows(out)[1:]}
    assert table == {"train": 7, "val": 1, "test": 2}
    run(capsys, "synth", "--n_scenes=10", "--data_dir", str(b))
    for split in ("train", "val", "test"):
        names = sorted(os.listdir(a / split))
        assert names == sorted(os.listdir(b / split))
        for n in names:
            assert (a / split / n).read_bytes() == (b / split / n).read_bytes()
    assert (a / "config.txt").exists()


def test_synth_haze_is_brighter(tmp_path, capsys):
    run(capsys, "synth", "--n_scenes", "10", "--data_dir", str(tmp_path / "c"))
    run(capsys, "synth", "--n_scenes", "10", "--data_dir", str(tmp_path / "h"), "--degradation", "haze")
    mean = lambda d: np.mean([np.asarray(Image.open(p), float).mean()
                              for p in sorted((tmp_path / d / "train").glob("*_img.png"))])
    assert mean("h") > mean("c")


def test_eval_with_perfect_predictions(data, capsys):
    code, out, _ = run(capsys, "eval", "--data_dir", str(data), "--pred_dir", str(data / "test"))
    assert code == 0
    assert out.splitlines()[0].split() == ["IoU", "1.0000"]


def test_train_then_eval_and_errormap(data, tmp_path, capsys):
    out_dir = tmp_path / "run"
    common = ["--data_dir", str(data), "--out_dir", str(out_dir), "--channels", "8,8,8,8"]
    code, out, _ = run(capsys, "train", *common, "--epochs", "1", "--batch", "4")
    assert code == 0
    assert rows(out)[0] == ["epoch", "loss", "iou", "f1", "precision", "recall"]
    assert (out_dir / "best.halo").exists() and (out_dir / "training.png").exists()
    code, out, _ = run(capsys, "eval", *common)
    assert code == 0 and out.startswith("IoU")
    code, out, _ = run(capsys, "errormap", *common)
    assert code == 0
    table = rows(out)
    assert table[0][:5] == ["scene", "tp", "fp", "fn", "tn"] and len(table) == 3
    assert sum(int(x) for x in table[1][1:5]) == 64 * 64
    assert (out_dir / "errormaps" / "panel.png").exists()


def test_kde_orders_modes(tmp_path, capsys):
    code, out, _ = run(capsys, "kde", "--n_scenes", "20", "--degradation", "haze", "--out_dir", str(tmp_path))
    assert code == 0
    modes = {r[0]: float(r[1]) for r in rows(out)[1:3]}
    assert modes["haze"] > modes["clear"]
    assert (tmp_path / "kde.png").exists() and (tmp_path / "kde_haze.txt").exists()


def test_bad_key_exits_one(capsys):
    code, _, err = run(capsys, "synth", "--learning_rate", "1")
    assert code == 1 and "learning_rate" in err and "valid keys" in err


def test_missing_checkpoint_exits_one(data, tmp_path, capsys):
    code, _, err = run(capsys, "eval", "--data_dir", str(data), "--checkpoint", str(tmp_path / "none.halo"))
    assert code == 1 and "none.halo" in err


def test_gradcheck_exit_codes(monkeypatch, capsys):
    def fake(err):
        def suite(seeds, report):
            row = audit.AuditRow("demo", err, seeds, 0.0)
            report(row)
            return [row]
        return suite

    monkeypatch.setattr(audit, "run_suite", fake(5e-2))
    code, out, _ = run(capsys, "gradcheck")
    assert code == 2 and "FAIL" in out
    monkeypatch.setattr(audit, "run_suite", fake(1e-6))
    code, out, _ = run(capsys, "gradcheck", "--audit_seeds", "2")
    assert code == 0 and "1/1 passed" in out and "\t2\t" in out
