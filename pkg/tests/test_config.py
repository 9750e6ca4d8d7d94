"""Guidance configuration, task defaults, profiles, service settings."""
import pytest

from dragedit.config import (
    GuidanceConfig,
    TASK_DEFAULTS,
    apply_overrides,
    config_for_task,
    load_profiles,
    make_backend,
    service_settings,
)
from dragedit.errors import ContractError


def test_defaults_match_method_constants():
    cfg = GuidanceConfig()
    assert cfg.alpha == 1.0
    assert cfg.beta == 4.0
    assert cfg.w_inpaint == 2.5
    assert cfg.n_gated == 30
    assert cfg.steps == 50
    assert cfg.layers == (2, 3)
    assert cfg.cfg_scale == 5.0


def test_validation_rejects_bad_values():
    with pytest.raises(ContractError):
        GuidanceConfig(alpha=0.0)
    with pytest.raises(ContractError):
        GuidanceConfig(beta=-1.0)
    with pytest.raises(ContractError):
        GuidanceConfig(n_gated=51, steps=50)
    with pytest.raises(ContractError):
        GuidanceConfig(n_gated=-1)
    with pytest.raises(ContractError):
        GuidanceConfig(layers=())
    with pytest.raises(ContractError):
        GuidanceConfig(layers=(0, 2))
    with pytest.raises(ContractError):
        GuidanceConfig(layers=(2, 5))
    with pytest.raises(ContractError):
        GuidanceConfig(cfg_scale=0.5)
    with pytest.raises(ContractError):
        GuidanceConfig(similarity_mode="fuzzy")


def test_config_round_trip():
    cfg = GuidanceConfig(eta=17.0, layers=(1, 4), n_gated=9, steps=20)
    wire = cfg.to_config()
    assert wire["v"] == 1
    assert GuidanceConfig.from_config(wire) == cfg


def test_task_defaults_eta_calibration_frozen():
    assert TASK_DEFAULTS["moving"]["eta"] == 2000.0
    assert TASK_DEFAULTS["resizing"]["eta"] == 7000.0
    assert TASK_DEFAULTS["replacing"]["eta"] == 5000.0
    assert TASK_DEFAULTS["pasting"]["eta"] == 1500.0
    assert TASK_DEFAULTS["dragging"]["eta"] == 2000.0


def test_config_for_task_layering():
    cfg = config_for_task("moving", {"eta": 42.0})
    assert cfg.eta == 42.0
    assert cfg.w_opt == 1.0
    assert config_for_task("moving").eta == 2000.0


def test_w_opt_forced_zero_for_tasks_without_inpainting():
    for kind in ("replacing", "pasting", "dragging"):
        assert config_for_task(kind).w_opt == 0.0
        assert config_for_task(kind, {"w_opt": 5.0}).w_opt == 0.0
    assert config_for_task("moving", {"w_opt": 5.0}).w_opt == 5.0


def test_gate_clamped_for_short_runs():
    cfg = config_for_task("moving", {"steps": 10})
    assert cfg.n_gated == 10
    # explicit n_gated is still validated strictly
    with pytest.raises(ContractError):
        config_for_task("moving", {"steps": 10, "n_gated": 30})


def test_reconstruct_task_has_no_guidance():
    cfg = config_for_task("reconstruct")
    assert cfg.n_gated == 0
    assert cfg.w_edit == cfg.w_content == cfg.w_opt == 0.0


def test_unknown_kind_and_field_rejected():
    with pytest.raises(ContractError):
        config_for_task("sharpen")
    with pytest.raises(ContractError):
        config_for_task("moving", {"momentum": 0.9})


def test_apply_overrides():
    cfg = GuidanceConfig()
    out = apply_overrides(cfg, {"eta": 3.0, "cfg_scale": 2.0})
    assert out.eta == 3.0 and out.cfg_scale == 2.0
    with pytest.raises(ContractError):
        apply_overrides(cfg, {"nope": 1})


def test_profiles_and_backend_factory():
    profiles = load_profiles()
    assert "toy" in profiles["profiles"]
    backend = make_backend("toy", profiles, seed=123)
    assert backend.profile.latent_size == (16, 16)
    with pytest.raises(ContractError):
        make_backend("missing-profile", profiles)


def test_service_settings_env_overrides(monkeypatch):
    base = service_settings()
    assert base["port"] == 8639
    assert base["backend_profile"] == "toy"
    assert base["workers"] == 1
    monkeypatch.setenv("DRAGEDIT_PORT", "9001")
    monkeypatch.setenv("DRAGEDIT_STORAGE", "/tmp/elsewhere")
    monkeypatch.setenv("DRAGEDIT_WORKERS", "3")
    monkeypatch.setenv("DRAGEDIT_BACKEND_PROFILE", "toy")
    got = service_settings()
    assert got["port"] == 9001
    assert got["storage_dir"] == "/tmp/elsewhere"
    assert got["workers"] == 3
