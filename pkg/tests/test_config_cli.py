import json

import pytest

from turntaking.cli import main
from turntaking.config import ConfigError, PipelineConfig, config_from_dict, load_config

TINY_CFG = {
    "seed": 3,
    "generator": {"session_len_frames": 300},
    "model": {"hidden": 8, "proj_dim": 4, "head_hidden": 4},
    "train": {"batch_size": 2, "crop_frames": 32, "steps_per_epoch": 2, "max_epochs_stage1": 1,
              "max_epochs_stage2": 1},
    "corpus": {"n_sessions": 5},
}


def test_config_round_trip_and_hash():
    cfg = config_from_dict(TINY_CFG)
    back = config_from_dict(json.loads(cfg.to_json()))
    assert back == cfg and back.hash() == cfg.hash()
    assert cfg.model.seed == cfg.train.seed == cfg.generator.seed == 3
    assert PipelineConfig().hash() != cfg.hash()


@pytest.mark.parametrize("bad", [{"bogus": 1}, {"model": {"width": 3}}, {"train": {"seed": 1}},
                                 {"seed": -1}, {"fusion": {"policy": "magic"}}, {"train": {"lr_stage1": 0}}])
def test_config_rejects(bad):
    with pytest.raises(ConfigError):
        config_from_dict(bad)


def test_config_env_fallback(tmp_path, monkeypatch):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"seed": 9}))
    monkeypatch.setenv("TURNTAKING_CONFIG", str(p))
    assert load_config().seed == 9
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "cfg.json").write_text(json.dumps(TINY_CFG))
    return d


def run(workdir, *args):
    return main(["--config", str(workdir / "cfg.json"), *map(str, args)])


def test_cli_pipeline(workdir, capsys):
    d = workdir
    assert run(d, "synth", "--out", d / "corpus") == 0
    assert run(d, "--jobs", 2, "label", "--corpus", d / "corpus") == 0
    assert (d / "corpus" / "labels" / "actions.csv").exists()
    assert run(d, "run", "--oracle", "--corpus", d / "corpus", "--out", d / "run") == 0
    for proto in ("actions", "vap", "word", "anticipation"):
        assert run(d, "eval", "--corpus", d / "corpus", "--run", d / "run", "--protocol", proto,
                   "--out", d / f"{proto}.json") == 0
    rep = json.loads((d / "actions.json").read_text())
    assert rep["wf1"] == 1.0 and rep["config_hash"] == config_from_dict(TINY_CFG).hash()
    assert (d / "anticipation.csv").read_text().startswith("delta_ms,auc,n")
    assert run(d, "eval", "--corpus", d / "corpus", "--decisions", d / "corpus" / "events.csv",
               "--out", d / "planted.json") == 0
    assert json.loads((d / "planted.json").read_text())["wf1"] == 1.0


def test_cli_training_and_probe(workdir):
    d = workdir
    if not (d / "corpus").exists():
        assert run(d, "synth", "--out", d / "corpus") == 0
    assert run(d, "train", "--corpus", d / "corpus", "--stage", "1", "--out", d / "s1.json") == 0
    assert run(d, "train", "--corpus", d / "corpus", "--stage", "2", "--init", d / "s1.json",
               "--out", d / "s2.json") == 0
    assert (d / "s2.log.csv").exists()
    assert run(d, "fit-probe", "--oracle", "--corpus", d / "corpus", "--out", d / "probe.json") == 0
    assert run(d, "run", "--checkpoint", d / "s2.json", "--policy", d / "probe.json", "--corpus", d / "corpus",
               "--agent", "B", "--out", d / "run_lr") == 0
    timing = json.loads((d / "run_lr" / "timing.json").read_text())
    assert timing["mean_real_time_factor"] > 0


def test_cli_errors(workdir, capsys):
    d = workdir
    assert run(d, "label", "--corpus", d / "nope") == 2
    assert run(d, "train", "--corpus", d / "corpus", "--stage", "2", "--out", d / "x.json") == 2
    assert not (d / "x.json").exists()
    bad = d / "bad.json"
    bad.write_text('{"model": {"hidden": "big", "oops": 1}}')
    assert main(["--config", str(bad), "synth", "--out", str(d / "c2")]) == 2
    assert "error" in capsys.readouterr().err
