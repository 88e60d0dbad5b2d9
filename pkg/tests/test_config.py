import pytest

from signface.config import ABLATIONS, RunConfig, config_from_dict, load_config
from signface.errors import ConfigError


def test_defaults():
    cfg = load_config()
    assert cfg.glo.iterations == 2000 and cfg.glo.loss == "l1"
    assert cfg.sampler.batch_size == 32 and cfg.sampler.lr == 1e-4
    assert cfg.ablation.active() == []
    assert ABLATIONS == ("wo_sem", "wo_sent", "wo_sn", "wo_glo", "wo_gcn", "wo_knn")


def test_toml_round_trip(tmp_path):
    cfg = config_from_dict({"glo": {"iterations": 10, "lr_theta": 1}, "ablation": {"wo_sent": True}})
    assert cfg.glo.lr_theta == 1.0 and isinstance(cfg.glo.lr_theta, float)
    cfg.write_snapshot(tmp_path / "c.toml")
    back = load_config(tmp_path / "c.toml")
    assert back.to_dict() == cfg.to_dict()


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="bogus"):
        config_from_dict({"glo": {"bogus": 1}})
    with pytest.raises(ConfigError, match="extra"):
        config_from_dict({"extra": {}})


def test_type_errors_rejected():
    with pytest.raises(ConfigError):
        config_from_dict({"glo": {"iterations": "many"}})
    with pytest.raises(ConfigError):
        config_from_dict({"ablation": {"wo_sem": 1}})


def test_invalid_values_become_config_errors():
    with pytest.raises(ConfigError):
        config_from_dict({"glo": {"batch_size": 0}})


def test_ablation_flags_propagate():
    cfg = config_from_dict({"ablation": {"wo_sem": True, "wo_gcn": True}})
    assert cfg.sampler.wo_sem and not cfg.sampler.wo_sent
    assert cfg.glo.decoder == "mlp"
    assert cfg.ablation.active() == ["wo_sem", "wo_gcn"]


def test_wo_sn_with_wo_glo_rejected():
    with pytest.raises(ConfigError):
        config_from_dict({"ablation": {"wo_sn": True, "wo_glo": True}})


def test_environment_overrides_endpoint_only(monkeypatch):
    monkeypatch.setenv("SIGNFACE_BACKEND_URL", "http://env:1234")
    cfg = config_from_dict({"backend": {"kind": "http", "endpoint": "http://file:1"}, "glo": {"seed": 4}})
    assert cfg.backend.endpoint == "http://env:1234"
    assert cfg.glo.seed == 4


def test_unreadable_config(tmp_path):
    (tmp_path / "bad.toml").write_text("this is = = not toml")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.toml")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.toml")


def test_set_seed_and_artifacts(tmp_path):
    cfg = RunConfig()
    cfg.set_seed(9)
    assert cfg.glo.seed == cfg.sampler.seed == cfg.fed.seed == 9
    cfg.paths.output_dir = str(tmp_path)
    assert cfg.artifact("glo") == tmp_path / "glo.safetensors"
    cfg.paths.glo_checkpoint = "/x/y.safetensors"
    assert str(cfg.artifact("glo")) == "/x/y.safetensors"
