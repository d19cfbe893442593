"""Feature-level compression replay engine for continual learning.

Thin re-export of the pybind11 core: compressors with MAML adaptation, the
dual-memory exemplar bank, full experiment runs from JSON configs, and the
gradient self-check oracles.
"""

from ._core import (
    Compressor,
    ConfigError,
    FeatureRecord,
    MemoryBank,
    __version__,
    default_config_json,
    derive_seed,
    forgetting,
    gradient_checks,
    importance,
    run_experiment,
)

__all__ = [
    "Compressor",
    "ConfigError",
    "FeatureRecord",
    "MemoryBank",
    "__version__",
    "default_config_json",
    "derive_seed",
    "forgetting",
    "gradient_checks",
    "importance",
    "run_experiment",
]
