"""Phantom cohorts, the simulated annotator, label utilities and dataset files."""

from .dataset import AnnotationCost, Dataset, Sample, oracle_annotate, sample_id
from .io import read_dataset, read_manifest, write_dataset
from .labels import whole_tumour_label, zscore_normalize
from .phantoms import SITE_PARAMS, generate_phantom_dataset

__all__ = [
    "AnnotationCost",
    "Dataset",
    "SITE_PARAMS",
    "Sample",
    "generate_phantom_dataset",
    "oracle_annotate",
    "read_dataset",
    "read_manifest",
    "sample_id",
    "whole_tumour_label",
    "write_dataset",
    "zscore_normalize",
]
