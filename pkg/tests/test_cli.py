import json
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from dagan.cli import main
from dagan.data import image_to_array, make_synthetic_dataset, save_dataset


@pytest.fixture(scope="module")
def synth_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--out", str(root), "--n", "16", "--size", "64", "--seed", "0",
                 "--split", "[1, 0, 0]"]) == 0
    return root


@pytest.fixture(scope="module")
def trained(synth_root, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = main(["train", "--data", str(synth_root), "--variant", "MC", "--seed", "0",
                 "--out", str(out), "train.augment=false", "train.rounds=0"])
    assert code == 0
    return out


def test_synth_layout(synth_root):
    for sub in ("A", "B", "label"):
        assert len(list((synth_root / sub).glob("*.png"))) == 16
    lines = (synth_root / "manifest.jsonl").read_text().splitlines()
    assert len(lines) == 16 and all(json.loads(x)["split"] == "train" for x in lines)


def test_train_outputs(trained):
    report = json.loads((trained / "report.json").read_text())
    assert report["train"]["f1"] >= 0.95
    assert report["params_generator"] > 0
    for name in ("checkpoint.pt", "config.json", "losses.jsonl", "manifest.jsonl"):
        assert (trained / name).exists()


def test_eval_after_overfit(trained, synth_root, tmp_path):
    out = tmp_path / "eval"
    code = main(["eval", "--checkpoint", str(trained / "checkpoint.pt"), "--data", str(synth_root),
                 "--manifest", str(synth_root / "manifest.jsonl"), "--split", "train",
                 "--maps", "--out", str(out)])
    assert code == 0
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["f1"] >= 0.95
    assert len((out / "per_image.csv").read_text().splitlines()) == 17
    # pool every color map: with hundreds of edge pixels all four outcomes occur
    colors = set()
    for png in (out / "maps").glob("*.png"):
        colors |= {tuple(c) for c in np.asarray(Image.open(png)).reshape(-1, 3)}
    assert colors <= {(255, 255, 255), (255, 0, 0), (0, 0, 255), (0, 0, 0)}
    assert {(255, 255, 255), (0, 0, 0)} <= colors


def test_eval_empty_manifest(trained, synth_root, tmp_path):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    code = main(["eval", "--checkpoint", str(trained / "checkpoint.pt"), "--data", str(synth_root),
                 "--manifest", str(empty), "--out", str(tmp_path / "e")])
    assert code == 3


def test_eval_fingerprint_mismatch(trained, synth_root, tmp_path):
    code = main(["eval", "--checkpoint", str(trained / "checkpoint.pt"), "--data", str(synth_root),
                 "--variant", "R", "--out", str(tmp_path / "e")])
    assert code == 2


def _write_rgb(path, array):
    Image.fromarray((np.clip(array.transpose(1, 2, 0), 0, 1) * 255).round().astype(np.uint8)).save(path)


def test_predict_identical_pair(trained, tmp_path):
    (s,) = make_synthetic_dataset(1, 64, seed=99)
    _write_rgb(tmp_path / "t.png", s.image_t1)
    code = main(["predict", "--checkpoint", str(trained / "checkpoint.pt"), "--t1", str(tmp_path / "t.png"),
                 "--t2", str(tmp_path / "t.png"), "--out", str(tmp_path / "p")])
    assert code == 0
    mask = np.asarray(Image.open(tmp_path / "p" / "change_mask.png"))
    prob = np.load(tmp_path / "p" / "probability.npy")
    assert set(np.unique(mask)) <= {0, 255}
    assert prob.min() >= 0 and prob.max() <= 1
    assert (mask == 255).mean() < 0.05


def test_predict_training_pair(trained, synth_root, tmp_path):
    # the overfit model only knows its 16 training pairs; it does not generalise to new ones
    name = sorted((synth_root / "A").glob("*.png"))[0].name
    assert main(["predict", "--checkpoint", str(trained / "checkpoint.pt"), "--t1", str(synth_root / "A" / name),
                 "--t2", str(synth_root / "B" / name), "--out", str(tmp_path / "p")]) == 0
    mask = np.asarray(Image.open(tmp_path / "p" / "change_mask.png")) > 0
    label = np.asarray(Image.open(synth_root / "label" / name)) > 0
    assert mask[label].mean() > 0.8


def test_predict_size_mismatch(trained, tmp_path):
    _write_rgb(tmp_path / "a.png", np.zeros((3, 64, 64)))
    _write_rgb(tmp_path / "b.png", np.zeros((3, 128, 128)))
    assert main(["predict", "--checkpoint", str(trained / "checkpoint.pt"), "--t1", str(tmp_path / "a.png"),
                 "--t2", str(tmp_path / "b.png"), "--out", str(tmp_path / "p")]) == 3


def test_train_rerun_reproduces_report(synth_root, tmp_path):
    args = ["train", "--data", str(synth_root), "--variant", "R", "--seed", "4",
            "train.max_iter=6", "train.rounds=1", "train.tau=0.0"]
    reports = []
    for k in range(2):
        assert main(args + ["--out", str(tmp_path / str(k))]) == 0
        reports.append((tmp_path / str(k) / "report.json").read_text())
    assert reports[0] == reports[1]
    assert (tmp_path / "0" / "checkpoint.pt").read_bytes() == (tmp_path / "1" / "checkpoint.pt").read_bytes()


def test_variants_differ_in_size(synth_root, tmp_path):
    code = main(["ablate", "--data", str(synth_root), "--variants", "R", "full", "--out", str(tmp_path),
                 "train.max_iter=2", "train.rounds=0"])
    assert code == 0
    summary = json.loads((tmp_path / "ablation.json").read_text())
    assert summary["R"]["params_generator"] < summary["full"]["params_generator"]


@pytest.mark.parametrize("argv, code", [
    (["train", "--data", "{root}", "train.bogus=1"], 2),
    (["train", "--data", "{root}", "train.max_iter=0"], 2),
    (["train", "--data", "{missing}"], 3),
    (["train", "--data", "{root}", "train.base_lr=1e30", "train.max_iter=3", "train.rounds=0"], 4),
])
def test_exit_codes(argv, code, synth_root, tmp_path):
    argv = [a.format(root=synth_root, missing=tmp_path / "nope") for a in argv]
    assert main(argv + ["--out", str(tmp_path / "o")]) == code


def test_data_error_on_bad_tile(tmp_path):
    save_dataset(make_synthetic_dataset(3, 48, seed=0), tmp_path)
    assert main(["train", "--data", str(tmp_path), "--out", str(tmp_path / "o"), "data.split=[1,1,1]"]) == 3


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "dagan", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "synth" in res.stdout


def test_png_roundtrip_helper(tmp_path):
    arr = np.random.default_rng(0).random((3, 8, 8))
    _write_rgb(tmp_path / "x.png", arr)
    assert np.abs(image_to_array(np.asarray(Image.open(tmp_path / "x.png"))) - arr).max() <= 0.5 / 255 + 1e-6
