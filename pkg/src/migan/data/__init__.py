from .samples import (AugmentSpec, DatasetKind, DatasetSplit, FundusSample,
                      PreprocessedSample, augment, load_dataset, preprocess,
                      restore_original, scale_to_unit, split_train_val,
                      unscale_from_unit, zscore_channels)
from .synthetic import (VesselParams, export_dataset, make_synthetic_dataset,
                        synthesize_to_disk)

__all__ = [
    "AugmentSpec", "DatasetKind", "DatasetSplit", "FundusSample", "PreprocessedSample",
    "VesselParams", "augment", "export_dataset", "load_dataset", "make_synthetic_dataset",
    "preprocess", "restore_original", "scale_to_unit", "split_train_val",
    "synthesize_to_disk", "unscale_from_unit", "zscore_channels",
]
