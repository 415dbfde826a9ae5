"""Named cascade configurations used by the benchmark experiments."""

from __future__ import annotations

import re

from .generator import CascadeConfig

SWEEP_LEVELS = (2, 15, 50)
# final-stage minimum sampling frequency for the two-stage sweep-style presets
SWEEP_FINAL_MIN_FREQUENCY = 0.15

_SWEEP_RE = re.compile(r"^sweep[(_]\s*(\d+)\s*[,_]\s*(\d+)\s*\)?$")


def demo2d() -> CascadeConfig:
    return CascadeConfig("demo2d", x_dims=(1, 1), h_dims=(1, 1), seed_sizes=(8, 2))


def sweep(a: int, b: int) -> CascadeConfig:
    return CascadeConfig(f"sweep({a},{b})", x_dims=(4, 2), h_dims=(2, 1), seed_sizes=(a, b),
                         min_stage_frequency=(0.0, SWEEP_FINAL_MIN_FREQUENCY))


def three_stage() -> CascadeConfig:
    return CascadeConfig("three_stage", x_dims=(4, 2, 2), h_dims=(2, 2, 1), seed_sizes=(15, 15, 5))


def three_stage_masked() -> CascadeConfig:
    # only part of each intermediate state is measured; the residual layout
    # gives the downstream GPs the upstream parameters back
    return CascadeConfig("three_stage_masked", x_dims=(4, 2, 1), h_dims=(4, 2, 1), seed_sizes=(50, 15, 2),
                         observed=((0, 1), (0,), (0,)), surrogate_mode="residual")


def noisy2() -> CascadeConfig:
    return CascadeConfig("noisy2", x_dims=(4, 2), h_dims=(2, 1), seed_sizes=(50, 2),
                         process_noise_std=(0.05, 0.1),
                         min_stage_frequency=(0.0, SWEEP_FINAL_MIN_FREQUENCY))


_FIXED = {
    "demo2d": demo2d,
    "three_stage": three_stage,
    "three_stage_masked": three_stage_masked,
    "noisy2": noisy2,
}


def preset(name: str) -> CascadeConfig:
    """Look up a preset by name; sweep cells are written ``sweep(a,b)`` or ``sweep_a_b``."""
    key = name.strip()
    if key in _FIXED:
        return _FIXED[key]()
    match = _SWEEP_RE.match(key)
    if match:
        return sweep(int(match.group(1)), int(match.group(2)))
    raise KeyError(f"unknown preset {name!r}; known: {', '.join(preset_names())}")


def preset_names() -> list[str]:
    names = list(_FIXED)
    names += [f"sweep({a},{b})" for a in SWEEP_LEVELS for b in SWEEP_LEVELS]
    return names
