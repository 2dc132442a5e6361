import hashlib
import json
import math

import numpy as np
import pytest

from sharelora import config as config_mod
from sharelora.check import run_checks, verdict
from sharelora.cli import main
from sharelora.config import ExperimentConfig
from sharelora.errors import ConfigError
from sharelora.reward import grad_log_likelihood, load_checkpoint

SMALL = {
    "dims": {"d1": 4, "d2": 2, "n_users": 3, "k_true": 2, "k_model": 2},
    "spectrum": {"leading": [3.0, 2.0]},
    "mdp": {"n_states": 3, "n_actions": 2, "horizon": 2},
    "data": {"n_pairs": 20},
    "train": {"epochs": 30},
}


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(SMALL))
    return str(path)


def test_defaults_validate():
    cfg = ExperimentConfig()
    assert cfg.dims.k_model == 2 and math.isinf(cfg.model.frob_bound)


def test_round_trip():
    cfg = config_mod.from_dict(SMALL).replace(**{"seed": 9, "plan.zeta_scale": 0.5})
    doc = config_mod.to_dict(cfg)
    assert json.loads(json.dumps(doc)) == doc
    assert config_mod.from_dict(doc) == cfg
    assert doc["model"]["frob_bound"] is None


@pytest.mark.parametrize("doc, path", [
    ({"dims": {"k_model": 9}}, "dims.k_model"),
    ({"dims": {"d1": 0}}, "dims.d1"),
    ({"spectrum": {"leading": [1.0]}}, "spectrum.leading"),
    ({"data": {"mu0": "greedy"}}, "data.mu0"),
    ({"plan": {"delta": 0.0}}, "plan.delta"),
    ({"train": {"epochs": -1}}, "train.epochs"),
    ({"train": {"variant": "XX"}}, "train"),
    ({"dims": {"bogus": 1}}, "dims.bogus"),
    ({"extra": {}}, "extra"),
    ({"seed": -1}, "seed"),
])
def test_validation_names_the_field(doc, path):
    with pytest.raises(ConfigError) as exc:
        config_mod.from_dict(doc)
    assert exc.value.path == path
    assert path in str(exc.value)


def test_malformed_json():
    with pytest.raises(ConfigError, match="line 1"):
        config_mod.loads("{nope")


def _digest(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


def test_synth_is_reproducible(small_config, tmp_path, capsys):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert main(["synth", "--config", small_config, "--seed", "4", "--out", str(a)]) == 0
    assert json.loads(capsys.readouterr().out)["nu"] > 0
    assert main(["synth", "--config", small_config, "--seed", "4", "--out", str(b)]) == 0
    assert _digest(a) == _digest(b)
    c = tmp_path / "c.json"
    main(["synth", "--config", small_config, "--seed", "5", "--out", str(c)])
    assert _digest(a) != _digest(c)


def test_out_dir_env(small_config, tmp_path, monkeypatch):
    monkeypatch.setenv("SHARELORA_OUT_DIR", str(tmp_path / "outs"))
    assert main(["synth", "--config", small_config, "--out", "ds.json"]) == 0
    assert (tmp_path / "outs" / "ds.json").exists()


def test_train_and_plan(small_config, tmp_path, capsys):
    ds, ck = tmp_path / "ds.json", tmp_path / "model.json"
    assert main(["synth", "--config", small_config, "--out", str(ds)]) == 0
    for algo in ("share-left", "local", "full"):
        assert main(["train", str(ds), "--config", small_config, "--algo", algo, "--out", str(ck)]) == 0
    assert main(["train", str(ds), "--config", small_config, "--variant", "wu", "--out", str(ck)]) == 0
    report = json.loads((tmp_path / "model.report.json").read_text())
    assert report["epochs_run"] <= 30
    model = load_checkpoint(str(ck))
    assert model.n_users == 3
    capsys.readouterr()
    out = tmp_path / "plan.json"
    assert main(["plan", str(ds), str(ck), "--config", small_config, "--zeta-scale", "0.1",
                 "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["diversity_source"] == "truth"
    assert doc["zeta_scale"] == 0.1 and doc["zeta"] > 0
    assert len(doc["users"]) == 3
    for user in doc["users"]:
        assert user["value_gap"] >= -1e-12
        assert user["gap_flagged"] == (user["fw_gap"] > 1e-6)


def test_exit_codes(small_config, tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"dims": {"k_model": 9}}))
    assert main(["synth", "--config", str(bad), "--out", str(tmp_path / "x.json")]) == 1
    assert "dims.k_model" in capsys.readouterr().err
    assert main(["synth", "--config", str(tmp_path / "missing.json"), "--out", "x"]) == 3
    garbage = tmp_path / "garbage.json"
    garbage.write_text("{\"kind\": 1")
    assert main(["train", str(garbage), "--out", str(tmp_path / "m.json")]) == 3
    huge = dict(SMALL, mdp=dict(SMALL["mdp"], feature_scale=1e200),
                train={"epochs": 5, "learning_rate": 1e200})
    cfg = tmp_path / "huge.json"
    cfg.write_text(json.dumps(huge))
    ds = tmp_path / "ds.json"
    assert main(["synth", "--config", str(cfg), "--out", str(ds)]) == 0
    with pytest.warns(RuntimeWarning):
        code = main(["train", str(ds), "--config", str(cfg), "--algo", "full", "--out",
                     str(tmp_path / "m.json")])
    assert code == 2
    assert "epoch" in capsys.readouterr().err


def test_check_command(capsys):
    assert main(["check"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["passed"]
    assert {c["name"] for c in report["checks"]} >= {"gradient", "eckart_young", "fw_certificates"}


def test_check_catches_gradient_bug():
    def buggy(model, ds):
        grads = grad_log_likelihood(model, ds)
        wrong = {k: np.array(v, copy=True) for k, v in grads.items()}
        name = next(iter(wrong))
        wrong[name].flat[1] += 0.5
        return wrong

    report = verdict(run_checks(grad_fn=buggy))
    assert not report["passed"]
    grad = next(c for c in report["checks"] if c["name"] == "gradient")
    assert not grad["passed"]
    assert "coordinate 1" in grad["detail"]
    others = [c for c in report["checks"] if c["name"] != "gradient"]
    assert all(c["passed"] for c in others)
