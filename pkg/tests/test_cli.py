import json
from importlib import resources
from pathlib import Path

import numpy as np
import pytest

from rewardcert.cli import FILES, config_from_dict, dumps17, main, parse_config

DATA = resources.files("rewardcert") / "data"
MINIMAL = {"env": "contract1d", "policy": str(DATA / "contract1d_policy.json"), "noise": {"kind": "uniform", "r": 0.1}}


def write_cfg(tmp_path, **extra):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({**MINIMAL, **extra}), encoding="utf-8")
    return p


def test_defaults_from_empty_overrides(tmp_path):
    rc = parse_config(write_cfg(tmp_path))
    cfg = rc.train_config("URS")
    assert (cfg.lr, cfg.weight_decay, cfg.K, cfg.K_prime, cfg.k_cells) == (1e-3, 1.5e-3, -0.01, 0.01, 10)
    assert rc.xi == 0.002 and rc.timeout_min == 60.0 and rc.episodes == 200


def test_tau_must_exceed_xi(tmp_path):
    with pytest.raises(ValueError, match="tau > xi"):
        parse_config(write_cfg(tmp_path, tau=0.001, xi=0.002))


@pytest.mark.parametrize("bad", [{"colour": 1}, {"train": {"lrr": 0.1}}, {"kinds": ["XYZ"]},
                                 {"kind_overrides": {"URS": {"K_prim": 1.0}}}])
def test_strict_config(tmp_path, bad):
    with pytest.raises(ValueError):
        parse_config(write_cfg(tmp_path, **bad))


def test_missing_files(tmp_path):
    with pytest.raises(FileNotFoundError):
        parse_config(tmp_path / "nope.json")
    rc = parse_config(write_cfg(tmp_path, policy="missing.json"))
    with pytest.raises(FileNotFoundError):
        rc.make_policy(rc.make_env())


def test_round_trip(tmp_path):
    rc = parse_config(write_cfg(tmp_path, tau=0.05, kinds=["RSM"], train={"hidden": [8, 8]}))
    again = config_from_dict(json.loads(json.dumps(rc.to_json())), base_dir=rc.base_dir)
    assert again == rc


def test_dumps17_is_bit_faithful():
    x = {"a": [0.1 + 0.2, 1 / 3, np.float64(2.0) / 7], "b": None, "c": "s", "d": 3}
    back = json.loads(dumps17(x))
    assert back["a"] == [0.1 + 0.2, 1 / 3, 2.0 / 7] and back["d"] == 3


def test_cli_overrides_take_precedence(tmp_path):
    rc = parse_config(write_cfg(tmp_path, seed=1), seed=9, out=str(tmp_path / "o"), timeout_min=0.0)
    assert rc.seed == 9 and rc.timeout_min == 0.0


def test_unknown_outcome_report(tmp_path, capsys):
    out = tmp_path / "run"
    cfg = write_cfg(tmp_path, kinds=["URS"], tau=0.01, initial_states=[[0.7]], episodes=5)
    code = main(["run", "--config", str(cfg), "--out", str(out), "--timeout-min", "0"])
    assert code == 1
    summary = (out / FILES["summary"]).read_text(encoding="utf-8")
    assert summary.splitlines()[0] == "status: UNKNOWN"
    printed = capsys.readouterr().out.split()
    assert str(out / FILES["summary"]) in printed
    timing = json.loads((out / FILES["timing"]).read_text(encoding="utf-8"))
    assert set(timing) == {"train_s", "validate_s", "total_s"}


def test_unknown_outcome_dumps_counterexamples(tmp_path):
    out = tmp_path / "run"
    cfg = write_cfg(tmp_path, kinds=["URS"], tau=0.05, xi=0.01, initial_states=[[0.7]], episodes=5,
                    train={"hidden": [4], "epochs": 1, "max_rounds": 1})
    assert main(["run", "--config", str(cfg), "--out", str(out)]) == 1
    summary = (out / FILES["summary"]).read_text(encoding="utf-8")
    assert summary.startswith("status: UNKNOWN") and "last counterexamples" in summary
    certs = json.loads((out / FILES["certificate"]).read_text(encoding="utf-8"))
    assert certs["URS"]["counterexamples"]


def test_bad_config_exit_code(tmp_path, capsys):
    cfg = write_cfg(tmp_path, tau=0.001)
    assert main(["train", "--config", str(cfg)]) == 2
    assert "tau" in capsys.readouterr().err


def test_toy_run_end_to_end(tmp_path, capsys):
    out = tmp_path / "toy"
    code = main(["run", "--config", str(DATA / "contract1d_run.json"), "--out", str(out)])
    for key in ("certificate", "bounds", "tail", "timing", "summary"):
        assert (out / FILES[key]).exists(), key
    summary = (out / FILES["summary"]).read_text(encoding="utf-8")
    assert summary.splitlines()[0] == "status: Validated"
    assert "enclosure: 1/1 states pass" in summary
    assert code == 0
    printed = capsys.readouterr().out.split()
    assert all(str(out / FILES[k]) in printed for k in ("certificate", "bounds", "tail", "timing", "summary"))
    # stored certificates revalidate from scratch
    assert main(["validate", "--config", str(DATA / "contract1d_run.json"), "--out", str(out)]) == 0
