"""Bayesian hierarchical regression models specified with formulas."""

from .design import DesignError, DesignSet, assemble
from .density import Model, ParamSpace
from .families import Family, get_family
from .formula import FormulaSyntaxError, parse_formula
from .modelspec import (
    CheckedSpec,
    ModelSpec,
    SpecError,
    UnsupportedFeatureError,
    ValidationError,
    bf,
    build_spec,
    parse_prior,
    prior,
    validate,
)
from .tabular import Dataset, read_csv, sim_multi_mem, write_csv

__version__ = "0.1.0"

__all__ = [
    "CheckedSpec", "Dataset", "DesignError", "DesignSet", "Family", "FormulaSyntaxError", "Model",
    "ModelSpec", "ParamSpace", "SpecError", "UnsupportedFeatureError", "ValidationError", "assemble",
    "bf", "build_spec", "get_family", "parse_formula", "parse_prior", "prior", "read_csv",
    "sim_multi_mem", "validate", "write_csv",
]
