"""Drivers: specification, expression parser, regularizations, presets, validators."""
from .epstein_zin import EpsteinZinParams, aggregator, epstein_zin, monotonicity_case, require_case
from .expr import compile_expr, parse, to_text
from .regularize import (
    InfConvolution,
    RegularizationParams,
    exp_transform,
    inf_convolve,
    inverse_transform_solution,
    project,
    regularize_spec,
    transform_solution,
    truncate,
    truncate_spec,
)
from .spec import PRESETS, GeneratorSpec, linear, neg_sqrt, parse_generator, preset, zero
from .validate import AssumptionReport, EvaluationBox, validate_assumptions
