"""End-to-end toy pipeline: model, training, sampling, calibration, metrics."""

from .model import (
    MODEL_MAGIC,
    QUANTIZABLE_LAYERS,
    SITE_LAYER,
    DatasetSpec,
    ModelArch,
    ToyDenoiser,
    load_model,
    sample_dataset,
    save_model,
)
from .training import TrainConfig, train_toy
from .sampling import (
    SamplerConfig,
    CacheState,
    RunResult,
    StaleCorrectionsError,
    record_cache_features,
    run_cost,
    sample_accelerated,
    sample_reference,
)
from .quantize import QuantPack, build_quant_pack, pack_from_dict, pack_to_dict, resolve_scope
from .analysis import (
    ErrorReport,
    StepRecord,
    calibration_pass,
    fit_correction_set,
    group_monotonic_fraction,
    report_to_dict,
    track_errors,
    write_error_csv,
)
from .metrics import sliced_wasserstein
from .experiments import (
    CONFIG_NAMES,
    ConfigOutcome,
    QuadrantResult,
    QuadrantSettings,
    run_quadrant,
)

__all__ = [
    "CONFIG_NAMES",
    "ConfigOutcome",
    "QuadrantResult",
    "QuadrantSettings",
    "run_quadrant",
    "MODEL_MAGIC",
    "QUANTIZABLE_LAYERS",
    "SITE_LAYER",
    "DatasetSpec",
    "ModelArch",
    "ToyDenoiser",
    "load_model",
    "sample_dataset",
    "save_model",
    "TrainConfig",
    "train_toy",
    "SamplerConfig",
    "CacheState",
    "RunResult",
    "StaleCorrectionsError",
    "record_cache_features",
    "run_cost",
    "sample_accelerated",
    "sample_reference",
    "QuantPack",
    "build_quant_pack",
    "pack_from_dict",
    "pack_to_dict",
    "resolve_scope",
    "ErrorReport",
    "StepRecord",
    "calibration_pass",
    "fit_correction_set",
    "group_monotonic_fraction",
    "report_to_dict",
    "track_errors",
    "write_error_csv",
    "sliced_wasserstein",
]
