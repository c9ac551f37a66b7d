import json

import pytest

from exceptions import ConfigurationError
from settings import (ExperimentSettings, MeshSettings, SettingsManager, parse_override,
                      settings_from_dict)


def test_defaults():
    settings = ExperimentSettings()
    assert settings.optimizer.max_iters == 200
    assert settings.optimizer.memory == 10
    assert settings.solver.newton_tol == 1e-9
    assert settings.recon_mesh is None
    assert settings.workers == 1
    assert settings.optimizer.preconditioner == "gauss_newton"
    assert settings.icp.surface == "matching"
    assert settings.icp.transform_path is None


def test_settings_from_dict_builds_sections():
    settings = settings_from_dict({
        "mesh": {"generator": "ellipsoid", "cells": [5, 5, 5]},
        "recon_mesh": {"generator": "box"},
        "optimizer": {"regularizer": "tikhonov", "regularizer_weight": 0.1},
        "workers": 3,
    })
    assert settings.mesh.generator == "ellipsoid"
    assert isinstance(settings.recon_mesh, MeshSettings)
    assert settings.optimizer.regularizer_weight == 0.1
    assert settings.workers == 3
    assert settings.case.steps == 50


@pytest.mark.parametrize("data", [
    {"bogus": 1},
    {"optimizer": {"learning_rate": 0.1}},
    {"mesh": [1, 2, 3]},
])
def test_unknown_or_malformed_keys_are_errors(data):
    with pytest.raises(ConfigurationError):
        settings_from_dict(data)


@pytest.mark.parametrize("text, expected", [
    ("optimizer.max_iters=50", ("optimizer.max_iters", 50)),
    ("mesh.generator=ellipsoid", ("mesh.generator", "ellipsoid")),
    ("optimizer.cap=null", ("optimizer.cap", None)),
    ("mesh.cells=[3, 3, 3]", ("mesh.cells", [3, 3, 3])),
    ("icp.enabled=false", ("icp.enabled", False)),
])
def test_parse_override(text, expected):
    assert parse_override(text) == expected


def test_parse_override_requires_equals():
    with pytest.raises(ConfigurationError):
        parse_override("optimizer.max_iters")


def test_manager_get_and_set():
    manager = SettingsManager()
    manager.set("optimizer.grad_rtol", 1e-6)
    assert manager.get("optimizer.grad_rtol") == 1e-6
    assert manager.get("optimizer.unknown", "fallback") == "fallback"
    manager.set("recon_mesh.generator", "ellipsoid")
    assert manager.settings.recon_mesh.generator == "ellipsoid"
    with pytest.raises(ConfigurationError):
        manager.set("bogus.key", 1)
    with pytest.raises(ConfigurationError):
        manager.set("optimizer.bogus", 1)


def test_overrides_skip_missing_flags():
    manager = SettingsManager()
    manager.apply_overrides({"case.steps": None, "case.seed": 4})
    assert manager.settings.case.steps == 50
    assert manager.settings.case.seed == 4


def test_config_file_round_trip(tmp_path):
    manager = SettingsManager()
    manager.set("case.noise_sd", 1e-4)
    path = tmp_path / "config.json"
    manager.save_settings(path)
    reloaded = SettingsManager(path)
    assert reloaded.settings == manager.settings


def test_bad_config_files(tmp_path):
    with pytest.raises(ConfigurationError):
        SettingsManager(tmp_path / "missing.json")
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    with pytest.raises(ConfigurationError):
        SettingsManager(broken)
    unknown = tmp_path / "unknown.json"
    unknown.write_text(json.dumps({"solver": {"tolerance": 1}}))
    with pytest.raises(ConfigurationError):
        SettingsManager(unknown)
