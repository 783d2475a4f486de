"""Small shared instances for the test suite."""

import numpy as np

from markovem.datagen import InitialDistribution, ItemNonresponse, MissingnessPlan, apply_missingness, generate_panel
from markovem.model import CovariateDef, ModelSpec, OutcomeDef, ParamSet, validate_spec


def two_outcome_spec(T=3, covariates=()):
    """One transient outcome and mortality, both depending on the transient lag."""
    return validate_spec(ModelSpec(
        (OutcomeDef("smk", "transient", ("smk",)), OutcomeDef("dead", "mortality", ("smk",))),
        tuple(covariates), T, "year", 2000))


def two_outcome_params():
    return ParamSet((np.array([-0.6, 1.4]), np.array([-1.2, 0.5])))


def three_outcome_spec(T=4):
    """Transient, absorbing and mortality with an age and a fixed covariate."""
    return validate_spec(ModelSpec(
        (OutcomeDef("smk", "transient", ("smk", "dis")),
         OutcomeDef("dis", "absorbing", ("smk",)),
         OutcomeDef("dead", "mortality", ("smk", "dis"))),
        (CovariateDef("age", "age", "birth_year"), CovariateDef("male")), T, "year", 2000))


def three_outcome_params():
    return ParamSet((np.array([-1.0, 0.004, 0.1, 1.6, 0.2]),
                     np.array([-2.6, 0.02, 0.1, 0.4]),
                     np.array([-3.2, 0.03, 0.2, 0.3, 0.5])))


INIT = InitialDistribution(prevalence={"smk": 0.4, "dis": 0.2}, birth_years=(1940, 1950))

# Instance shared by the oracle-equivalence, ascent and importance-sampling checks.
ORACLE_SEED = 17
ORACLE_MISSING_RATE = 0.3


def oracle_instance():
    spec = two_outcome_spec(3)
    truth = generate_panel(spec, two_outcome_params(), 10, InitialDistribution({"smk": 0.5}), ORACLE_SEED)
    panel, _ = apply_missingness(truth, spec, MissingnessPlan([ItemNonresponse(ORACLE_MISSING_RATE)]),
                                 ORACLE_SEED)
    return spec, panel


def total_variation(replicates, posterior):
    """TV distance between weighted replicate paths and an exact posterior over completions."""
    K = posterior.trajectories.shape[0]
    keys = {posterior.trajectories[k].tobytes(): k for k in range(K)}
    emp = np.zeros(K)
    outside = 0.0
    for traj, w in zip(replicates.trajectories, replicates.norm_weight):
        k = keys.get(np.ascontiguousarray(traj).tobytes())
        if k is None:
            outside += w
        else:
            emp[k] += w
    return 0.5 * (np.abs(emp - posterior.probs).sum() + outside)
