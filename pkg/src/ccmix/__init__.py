"""Model-based clustering of categorical data with conditionally correlated blocks."""
from .data import Dataset, DataError, load_csv, cramers_v, pairwise_v_matrix
from .model import (BlockPartition, BlockParams, CcmModel, MaxDepParams, nu_ccm, nu_cim,
                    read_model, write_model)
from .estim import StoppingRules, cim_fit, gem_fit

__version__ = "0.1.0"

__all__ = [
    "Dataset", "DataError", "load_csv", "cramers_v", "pairwise_v_matrix",
    "BlockPartition", "BlockParams", "CcmModel", "MaxDepParams", "nu_ccm", "nu_cim",
    "read_model", "write_model", "StoppingRules", "cim_fit", "gem_fit",
]
