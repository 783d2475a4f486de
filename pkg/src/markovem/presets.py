"""Bundled scenarios.

``fem-mini``: smoking, six chronic diseases and mortality with the
dependency graph of the health microsimulation application, 15 annual
steps, waves every second year plus 5% item nonresponse.
"""

from __future__ import annotations

import numpy as np

from .datagen import CoarseSpacing, InitialDistribution, ItemNonresponse, MissingnessPlan
from .model import CovariateDef, ModelSpec, OutcomeDef, ParamSet, validate_spec

DISEASES = ("cancer", "diabetes", "heart", "hypertension", "lung", "stroke")


def fem_mini_spec(time_steps: int = 15) -> ModelSpec:
    outcomes = (
        OutcomeDef("smoking", "transient", DISEASES + ("smoking",)),
        OutcomeDef("cancer", "absorbing", ("smoking",)),
        OutcomeDef("diabetes", "absorbing", ("smoking",)),
        OutcomeDef("heart", "absorbing", ("diabetes", "hypertension", "smoking")),
        OutcomeDef("hypertension", "absorbing", ("diabetes", "smoking")),
        OutcomeDef("lung", "absorbing", ("smoking",)),
        OutcomeDef("stroke", "absorbing", ("cancer", "diabetes", "heart", "hypertension", "smoking")),
        OutcomeDef("mortality", "mortality", DISEASES + ("smoking",)),
    )
    covariates = (CovariateDef("age", "age", "birth_year"), CovariateDef("male"),
                  CovariateDef("hispanic"), CovariateDef("black"))
    return validate_spec(ModelSpec(outcomes, covariates, time_steps, "year", 1998))


# intercept, age, male, hispanic, black, then lags in dependency order
_FEM_MINI_BETA = {
    "smoking": [-2.1, -0.01, 0.10, -0.10, 0.05, 0.10, 0.00, -0.10, 0.00, -0.20, -0.10, 4.30],
    "cancer": [-4.3, 0.030, 0.10, -0.10, 0.00, 0.25],
    "diabetes": [-3.5, 0.020, 0.10, 0.20, 0.25, 0.10],
    "heart": [-4.5, 0.035, 0.20, -0.10, 0.00, 0.20, 0.25, 0.20],
    "hypertension": [-3.5, 0.025, 0.00, 0.10, 0.30, 0.30, 0.10],
    "lung": [-4.3, 0.025, 0.00, -0.10, -0.10, 0.45],
    "stroke": [-4.9, 0.035, 0.10, 0.00, 0.15, 0.10, 0.20, 0.20, 0.25, 0.20],
    "mortality": [-5.2, 0.040, 0.20, -0.10, 0.10, 0.45, 0.25, 0.30, 0.05, 0.35, 0.30, 0.25],
}


def fem_mini_params(spec: ModelSpec | None = None) -> ParamSet:
    spec = spec or fem_mini_spec()
    return ParamSet(tuple(np.array(_FEM_MINI_BETA[nm], float) for nm in spec.names)).check(spec)


def fem_mini_initial() -> InitialDistribution:
    return InitialDistribution(
        prevalence={"smoking": 0.22, "cancer": 0.06, "diabetes": 0.12, "heart": 0.15,
                    "hypertension": 0.35, "lung": 0.06, "stroke": 0.04},
        birth_years=(1933, 1948),
        indicator_prob={"male": 0.45, "hispanic": 0.10, "black": 0.15},
    )


def fem_mini_plan() -> MissingnessPlan:
    return MissingnessPlan([CoarseSpacing(2), ItemNonresponse(0.05)])


PRESETS = {
    "fem-mini": (fem_mini_spec, fem_mini_params, fem_mini_initial, fem_mini_plan),
}
