"""Instance ingestion, preprocessing, partitioning and synthetic data."""
from .dataset import (FIVE_CLASSES, FLARE, NON_FLARE, BinaryDataset, Dataset, MvtsInstance,
                      binary_label, consolidate, load_dataset, write_dataset)
from .partitions import ChronoPair, check_order, chronological_pairs, split_validation
from .preprocess import (filter_training_nf_to_fq, impute_fpcknn, undersample, zscore_apply,
                         zscore_fit, zscore_invert)
from .synthetic import SynthSpec, generate_partitions, generate_synthetic, write_synthetic

__all__ = [
    "FIVE_CLASSES", "FLARE", "NON_FLARE", "BinaryDataset", "Dataset", "MvtsInstance",
    "binary_label", "consolidate", "load_dataset", "write_dataset", "ChronoPair", "check_order",
    "chronological_pairs", "split_validation", "filter_training_nf_to_fq", "impute_fpcknn",
    "undersample", "zscore_apply", "zscore_fit", "zscore_invert", "SynthSpec",
    "generate_partitions", "generate_synthetic", "write_synthetic",
]
