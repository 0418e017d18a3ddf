import csv
import io
import json

import numpy as np
import pytest
import torch

from sqpf.cli import RUN_MANIFEST, RunManifest, main, read_config
from sqpf.io import load_mask, read_dataset
from sqpf.training import Checkpoint, binarize, dice_score, run_episode, upsample_nearest

INI = """\
[synthetic]
n_cases = 20
image_size = 64
seed = 7
held_out = "crescent"

[train]
episodes_per_epoch = 150
epochs = 1
learning_rate = 0.01
setting = "Setting2"

[encoder]
width = 16

[ablate]
folds = [0]
"""


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "run.ini").write_text(INI)
    assert main(["prepare", "--kind", "synthetic", "--config", str(root / "run.ini"), "--output-dir", str(root / "ds")]) == 0
    rc = main([
        "train", "--config", str(root / "run.ini"), "--dataset-dir", str(root / "ds"),
        "--output-dir", str(root / "train"), "--setting", "2",
    ])
    assert rc == 0
    return root


def args(work, *extra):
    return ["--config", str(work / "run.ini"), "--dataset-dir", str(work / "ds"), *extra]


def manifest(path):
    return RunManifest.from_json((path / RUN_MANIFEST).read_text())


# ---------------------------------------------------------------------------
# prepare


def test_prepare_synthetic_is_deterministic(work, tmp_path):
    out = tmp_path / "again"
    assert main(["prepare", "--kind", "synthetic", "--config", str(work / "run.ini"), "--output-dir", str(out)]) == 0
    a, b = read_dataset(work / "ds"), read_dataset(out)
    assert (work / "ds" / "folds.json").read_text() == (out / "folds.json").read_text()
    assert all(x.image.tobytes() == y.image.tobytes() for x, y in zip(a.samples, b.samples))
    assert manifest(out).config_hash == manifest(work / "ds").config_hash


def test_prepare_cmr_axial_rejected(tmp_path):
    assert main(["prepare", "--kind", "cmr_like", "--plane", "axial", "--input-dir", str(tmp_path), "--output-dir", str(tmp_path / "o")]) == 2


def test_prepare_missing_input(tmp_path):
    assert main(["prepare", "--kind", "sabs_like", "--input-dir", str(tmp_path / "none"), "--output-dir", str(tmp_path / "o")]) == 2


def test_prepare_sabs_like_resizes(tmp_path):
    import nibabel as nib

    (tmp_path / "in" / "images").mkdir(parents=True)
    (tmp_path / "in" / "labels").mkdir()
    rng = np.random.default_rng(0)
    for i in range(5):
        lab = np.zeros((96, 96, 4), np.int16)
        lab[20:50, 20:50, 1:3] = 6  # liver
        lab[60:80, 60:80, 2] = 3  # left kidney
        lab[5:9, 5:9, 0] = 8  # aorta, dropped
        nib.save(nib.Nifti1Image(rng.normal(50, 60, lab.shape).astype(np.float32), np.eye(4)), tmp_path / "in" / "images" / f"ct{i}.nii.gz")
        nib.save(nib.Nifti1Image(lab, np.eye(4)), tmp_path / "in" / "labels" / f"ct{i}.nii.gz")
    out = tmp_path / "out"
    rc = main(["prepare", "--kind", "sabs_like", "--input-dir", str(tmp_path / "in"), "--output-dir", str(out)])
    assert rc == 0
    ds = read_dataset(out)
    assert all(s.image.shape == (256, 256) for s in ds.samples)
    assert {s.class_label for s in ds.samples} == {"Liver", "LK"}
    assert len(ds.samples) == 5 * 3


# ---------------------------------------------------------------------------
# run directories


def test_train_writes_manifest_and_logs_exclusion(work):
    run = work / "train"
    m = manifest(run)
    assert m.command == "train" and m.verify()
    assert set(m.artifacts) == {"checkpoint.pt", "history.json", "train.log"}
    assert "excluded ['crescent']" in (run / "train.log").read_text()
    assert m.config["setting"] == "Setting2" and m.config["encoder"]["width"] == 16
    assert m.started <= m.finished


def test_manifest_hash_roundtrip(work):
    m = manifest(work / "train")
    again = RunManifest.from_json(m.to_json())
    assert again == m and again.verify()
    again.config["alpha"] = 0.9
    assert not again.verify()


def test_refuses_to_clobber(work):
    rc = main(["train", *args(work, "--output-dir", str(work / "train"))])
    assert rc == 1


def test_overwrite_is_idempotent(work, tmp_path):
    out = tmp_path / "t0"
    base = ["train", *args(work, "--output-dir", str(out), "--epochs", "0")]
    assert main(base) == 0
    first = Checkpoint.load(out / "checkpoint.pt")
    assert main(base + ["--overwrite"]) == 0
    second = Checkpoint.load(out / "checkpoint.pt")
    assert all(torch.equal(first.params[k], second.params[k]) for k in first.params)
    assert second.history == [] and len(list(out.glob(RUN_MANIFEST))) == 1


def test_overwrite_refuses_foreign_directory(work, tmp_path):
    (tmp_path / "mine").mkdir()
    (tmp_path / "mine" / "thesis.tex").write_text("x")
    rc = main(["train", *args(work, "--output-dir", str(tmp_path / "mine"), "--overwrite")])
    assert rc == 1 and (tmp_path / "mine" / "thesis.tex").exists()


def test_output_root_env(work, tmp_path, monkeypatch):
    monkeypatch.setenv("SQPF_OUTPUT_ROOT", str(tmp_path / "root"))
    assert main(["train", *args(work, "--epochs", "0")]) == 0
    runs = list((tmp_path / "root").iterdir())
    assert len(runs) == 1 and runs[0].name.startswith("train-")


def test_epochs_zero_checkpoint(work, tmp_path):
    assert main(["train", *args(work, "--epochs", "0", "--output-dir", str(tmp_path / "z"))]) == 0
    assert Checkpoint.load(tmp_path / "z" / "checkpoint.pt").epoch == 0


# ---------------------------------------------------------------------------
# usage and error codes


def test_missing_config_file(work, tmp_path, capsys):
    rc = main(["train", "--config", str(tmp_path / "nope.ini"), "--dataset-dir", str(work / "ds")])
    assert rc == 2
    assert "nope.ini" in capsys.readouterr().err


def test_usage_errors(work, tmp_path):
    assert main([]) == 1
    assert main(["train"]) == 1
    assert main(["train", *args(work, "--setting", "7", "--output-dir", str(tmp_path / "s"))]) == 1
    bad = tmp_path / "bad.ini"
    bad.write_text("[train]\nwarp_factor = 9\n")
    assert main(["train", "--config", str(bad), "--dataset-dir", str(work / "ds"), "--output-dir", str(tmp_path / "b")]) == 1


def test_numerical_failure_exit_code(work, tmp_path, monkeypatch):
    import sqpf.training as training

    monkeypatch.setattr(training, "episode_loss", lambda *a, **k: torch.tensor(float("nan"), requires_grad=True))
    assert main(["train", *args(work, "--output-dir", str(tmp_path / "n"))]) == 3


def test_invalid_checkpoint_version(work, tmp_path, capsys):
    torch.save({"version": 0}, tmp_path / "old.pt")
    rc = main(["eval", "--checkpoint", str(tmp_path / "old.pt"), "--dataset-dir", str(work / "ds"), "--output-dir", str(tmp_path / "e")])
    assert rc == 2
    err = capsys.readouterr().err
    assert "0" in err and "expected 1" in err


# ---------------------------------------------------------------------------
# eval


def test_eval_reports_identical(work, tmp_path):
    ck = str(work / "train" / "checkpoint.pt")
    for name in ("e1", "e2"):
        assert main(["eval", "--checkpoint", ck, "--dataset-dir", str(work / "ds"), "--output-dir", str(tmp_path / name)]) == 0
    for f in ("report.json", "report.csv"):
        assert (tmp_path / "e1" / f).read_bytes() == (tmp_path / "e2" / f).read_bytes()
    rows = list(csv.reader(io.StringIO((tmp_path / "e1" / "report.csv").read_text())))
    assert rows[0][-1] == "Mean" and [r[0] for r in rows[1:]] == ["crescent"]


# ---------------------------------------------------------------------------
# ablate


def test_ablate_three_modes_single_alpha(work, tmp_path, capsys):
    out = tmp_path / "ab"
    rc = main(["ablate", *args(work, "--modes", "SSP,MSP,MSP+QP", "--alpha-grid", "1.0", "--output-dir", str(out))])
    assert rc == 0
    rows = list(csv.reader(io.StringIO((out / "ablation.csv").read_text())))
    assert rows[0] == ["SSP", "MSP", "QP", "Fold1", "Mean"]
    assert [r[:3] for r in rows[1:]] == [["x", "", ""], ["", "x", ""], ["", "x", "x"]]
    sweep = list(csv.reader(io.StringIO((out / "alpha_sweep.csv").read_text())))
    assert len(sweep) == 2 and sweep[1][0] == "1"
    # alpha=1 with the base region count is the MSP row
    assert sweep[1][-1] == rows[2][-1]
    assert (out / "alpha_sweep.png").stat().st_size > 0
    # SSP, MSP and MSP+QP trained once each; the sweep point came from the cache
    assert len(list((out / "runs").glob("*.json"))) == 3


def test_ablate_empty_modes(work, tmp_path):
    assert main(["ablate", *args(work, "--modes", "", "--output-dir", str(tmp_path / "x"))]) == 1
    assert main(["ablate", *args(work, "--modes", "XYZ", "--output-dir", str(tmp_path / "y"))]) == 1


def test_read_config_types(work):
    sec = read_config(work / "run.ini")
    assert sec["train"]["learning_rate"] == 0.01 and sec["ablate"]["folds"] == [0]
    assert sec["synthetic"]["held_out"] == "crescent"


# ---------------------------------------------------------------------------
# predict


def _predict(work, tmp_path, sup, query, *extra):
    out = tmp_path / "pred.png"
    rc = main([
        "predict", "--checkpoint", str(work / "train" / "checkpoint.pt"),
        "--support-image", str(sup.with_suffix(".tiff")), "--support-mask", str(sup.with_suffix(".png")),
        "--query-image", str(query), "--out-mask", str(out), *extra,
    ])
    return rc, out


def test_predict_trace(work, tmp_path):
    stem = sorted((work / "ds" / "samples").glob("*_crescent_*.tiff"))[0].with_suffix("")
    rc, out = _predict(work, tmp_path, stem, stem.with_suffix(".tiff"), "--trace")
    assert rc == 0 and load_mask(out).shape == (64, 64)
    diag = json.loads(out.with_suffix(".trace.json").read_text())
    assert {"T_f", "selected_fg", "selected_bg"} <= set(diag)
    assert out.with_suffix(".trace.png").stat().st_size > 0
    rc, _ = _predict(work, tmp_path, stem, stem.with_suffix(".tiff"))
    assert rc == 1  # existing output without --overwrite


def test_predict_size_mismatch(work, tmp_path):
    from PIL import Image

    stem = sorted((work / "ds" / "samples").glob("*.tiff"))[0].with_suffix("")
    Image.fromarray(np.zeros((32, 32), np.float32), mode="F").save(tmp_path / "small.tiff")
    rc, _ = _predict(work, tmp_path, stem, tmp_path / "small.tiff")
    assert rc == 2


def test_self_query_final_not_worse_than_coarse(work):
    ckpt = Checkpoint.load(work / "train" / "checkpoint.pt")
    ds = read_dataset(work / "ds")
    model = ckpt.build_model()
    gains = []
    for s in [x for x in ds.samples if x.class_label == "crescent"][:20]:
        with torch.no_grad():
            out, _ = run_episode(model, [s], s, ckpt.config.sqpf)
        final = dice_score(upsample_nearest(binarize(out.final), s.mask.shape), s.mask)
        coarse = dice_score(upsample_nearest(binarize(out.coarse), s.mask.shape), s.mask)
        gains.append(final - coarse)
    assert np.mean(gains) >= 0.0
