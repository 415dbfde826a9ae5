"""Synthetic multi-stage benchmark functions."""

from functools import lru_cache

from .generator import (CascadeConfig, SyntheticCascade, evaluate_chunked, find_ground_truth_optimum,
                        generate_cascade, generate_stage)
from .mlp import MlpFunction
from .presets import preset, preset_names
from .weights import export_weights, import_weights


@lru_cache(maxsize=32)
def cached_preset_cascade(name: str, master_seed: int) -> SyntheticCascade:
    """Generate (once per process) the cascade for a preset and master seed, optimum included."""
    return generate_cascade(preset(name), master_seed)


__all__ = [
    "CascadeConfig", "MlpFunction", "SyntheticCascade", "cached_preset_cascade", "evaluate_chunked",
    "export_weights", "find_ground_truth_optimum", "generate_cascade", "generate_stage", "import_weights",
    "preset", "preset_names",
]
