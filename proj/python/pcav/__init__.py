"""Pattern concept vectors and class artifact compensation."""

import json

import numpy as np

from . import _pcav
from ._pcav import PcavError, aclarc_map, pclarc_map, render_report

__all__ = [
    "PcavError",
    "aclarc_map",
    "fit_filter_cav",
    "fit_pattern_cav",
    "generate_toy",
    "pclarc_map",
    "render_report",
    "run_suite",
    "run_toy_figure",
]


def _concept(text):
    c = json.loads(text)
    for key in ("v", "raw", "z_plus", "z_minus"):
        c[key] = np.asarray(c[key])
    return c


def generate_toy(tau_deg, sigma2=0.15, n=1000, seed=0):
    """Returns (x, y_c, y_s) with x of shape (n, 2)."""
    x, y_c, y_s = _pcav.generate_toy(tau_deg, sigma2, n, seed)
    return x, np.asarray(y_c), np.asarray(y_s)


def fit_pattern_cav(x, y_s):
    return _concept(_pcav.fit_pattern_cav(x, list(map(int, y_s))))


def fit_filter_cav(x, y_s, svm_lambda=1e-3, epochs=200, seed=0):
    return _concept(_pcav.fit_filter_cav(x, list(map(int, y_s)), svm_lambda, epochs, seed))


def run_toy_figure(taus_deg=(0.0, 45.0, 135.0), seeds=(0,), sigma2=0.15, n=1000):
    return json.loads(_pcav.run_toy_figure(list(taus_deg), list(seeds), sigma2, n))


def run_suite(config=None):
    """Runs the controlled suite; config uses the keys of the report's config block."""
    return json.loads(_pcav.run_suite(json.dumps(config or {})))
