"""Dermatology diagnosis pipeline: retrieve, re-rank, align, evaluate."""

from .cases import ConditionName, Dataset, DermCase, load_dataset, normalize_condition

__version__ = "0.1.0"

__all__ = ["ConditionName", "Dataset", "DermCase", "load_dataset", "normalize_condition", "__version__"]
