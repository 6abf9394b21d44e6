import json
import math

import numpy as np
import pytest

import pcav


def test_toy_pattern_points_along_signal():
    x, y_c, y_s = pcav.generate_toy(45.0, n=4000, seed=2)
    assert x.shape == (4000, 2)
    a = y_c == 0
    pat = pcav.fit_pattern_cav(x[a], y_s[a])
    fil = pcav.fit_filter_cav(x[a], y_s[a])
    assert math.degrees(math.acos(abs(pat["v"][0]))) < 2.0
    assert math.degrees(math.acos(abs(fil["v"][0]))) > 30.0


def test_pattern_matches_numpy_slope():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(300, 7))
    y = np.where(rng.random(300) < 0.4, 1, -1)
    x[:, 2] += 0.8 * y
    raw = pcav.fit_pattern_cav(x, y)["raw"]
    yc = y - y.mean()
    want = (x - x.mean(0)).T @ yc / (yc @ yc)
    np.testing.assert_allclose(raw, want, atol=1e-10)


def test_projection_pins_component():
    rng = np.random.default_rng(1)
    v = rng.normal(size=16)
    v /= np.linalg.norm(v)
    x, z = rng.normal(size=16), rng.normal(size=16)
    y = pcav.pclarc_map(x, v, z)
    assert abs(v @ y - v @ z) < 1e-9
    np.testing.assert_allclose(pcav.pclarc_map(y, v, z), y, atol=1e-12)
    np.testing.assert_allclose(pcav.aclarc_map(x, v, z), y, atol=1e-12)


def test_errors_surface_as_exceptions():
    with pytest.raises(pcav.PcavError):
        pcav.fit_pattern_cav(np.ones((3, 2)), [1, 1, 1])
    with pytest.raises(pcav.PcavError):
        pcav.pclarc_map(np.ones(2), np.array([2.0, 0.0]), np.zeros(2))


def test_toy_figure_report():
    r = pcav.run_toy_figure([0.0, 45.0], [0], n=500)
    assert r["kind"] == "toy"
    assert len(r["toy"]) == 2
    assert "tau" in pcav.render_report(json.dumps(r), "csv").splitlines()[0]


def test_tiny_suite_runs():
    cfg = {
        "data": {"classes": 3, "shape": [1, 8, 8], "n_per_class": 30, "contrast": 0.3},
        "test_per_class": 10,
        "artifact": {"kind": "box", "box_size": 2},
        "targets": [1],
        "seeds": [0],
        "cavs": ["pattern_gt"],
        "hooks": ["input"],
        "network": {"conv1_channels": 2, "conv2_channels": 2, "hidden": 8},
        "optimizer": {"epochs": 1},
        "finetune_epochs": 1,
    }
    r = pcav.run_suite(cfg)
    assert len(r["cells"]) == 3
    assert all(0.0 <= c["poisoned"] <= 1.0 for c in r["cells"])
