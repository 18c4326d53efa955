import json

import pytest

from dagan.config import ConfigError, ExperimentConfig, apply_overrides, profile


@pytest.mark.parametrize("name", ["desk", "paper"])
def test_canonical_roundtrip(name, tmp_path):
    cfg = profile(name)
    text = cfg.to_json()
    assert ExperimentConfig.from_dict(json.loads(text)).to_json() == text
    # key order and whitespace in the input do not matter
    shuffled = json.dumps(dict(reversed(list(json.loads(text).items()))))
    assert ExperimentConfig.from_dict(json.loads(shuffled)).to_json() == text
    cfg.save(tmp_path / "c.json")
    assert (tmp_path / "c.json").read_text() == text
    assert ExperimentConfig.load(tmp_path / "c.json").to_json() == text


def test_profiles():
    desk, paper = profile("desk"), profile("paper")
    assert (desk.train.max_iter, desk.train.batch_size, desk.model.backbone) == (300, 4, "tiny")
    assert (paper.train.max_iter, paper.train.batch_size, paper.model.backbone) == (80000, 16, "resnet50")
    assert paper.train.base_lr == desk.train.base_lr == 5e-4
    assert (paper.train.beta1, paper.train.beta2, paper.train.weight_decay) == (0.9, 0.99, 1e-4)
    with pytest.raises(ConfigError):
        profile("laptop")


def test_overrides():
    cfg = apply_overrides(profile("desk"), ["train.max_iter=12", "model.variant=R", "seed=3",
                                            "data.split=[0.5,0.25,0.25]", "train.base_lr=1e-3"])
    assert cfg.train.max_iter == 12 and cfg.model.variant == "R" and cfg.seed == 3
    assert cfg.data.split == [0.5, 0.25, 0.25] and cfg.train.base_lr == 1e-3
    assert not cfg.model.aggregate


@pytest.mark.parametrize("bad", ["train.max_itr=5", "nonsense.key=1", "model=3", "train.max_iter",
                                 "train.max_iter=0", "train.base_lr=-1", "train.beta1=1.0",
                                 "model.variant=X", "train.augment=1", "train.max_iter=2.5"])
def test_rejected_overrides(bad):
    with pytest.raises(ConfigError):
        apply_overrides(profile("desk"), [bad])


def test_fingerprint_tracks_model_only():
    a, b = profile("desk"), profile("desk")
    b.train.base_lr = 1e-2
    assert a.fingerprint() == b.fingerprint()
    b.model.variant = "R"
    assert a.fingerprint() != b.fingerprint()
    c = profile("paper")
    d = profile("paper")
    d.model.weights = None
    assert c.fingerprint() == d.fingerprint()


def test_load_errors(tmp_path):
    (tmp_path / "x.json").write_text("{not json")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(tmp_path / "x.json")
    (tmp_path / "y.json").write_text(json.dumps({"train": {"bogus": 1}}))
    with pytest.raises(ConfigError):
        ExperimentConfig.load(tmp_path / "y.json")
