"""Probability primitives: type distributions, value models, integration."""
from .distributions import (ParetoWeight, Power, Reflected, Tabulated, TypeDistribution, Uniform,
                            distribution_from_dict, weight_from_dict)
from .quadrature import (FallbackToMonteCarlo, Integrator, parallel_map, spawn_seeds,
                         stieltjes)
from .values import (ValueModel, expect, expect_max_surplus, expect_with_error, mask_members,
                     value_model_from_dict)

__all__ = [
    "FallbackToMonteCarlo", "Integrator", "ParetoWeight", "Power", "Reflected", "Tabulated",
    "TypeDistribution", "Uniform", "ValueModel", "distribution_from_dict", "expect",
    "expect_max_surplus", "expect_with_error", "mask_members", "parallel_map", "spawn_seeds",
    "stieltjes", "value_model_from_dict", "weight_from_dict",
]
