"""The seeded scenario configurations behind the acceptance suite and the pinned fixtures."""

from decoylab.harness import scenario_defaults

SUITE = {
    "community": ("community-sweep", dict(strategies=("universal", "random-lookup", "mean"), eps_grid=(0.06,),
                                          ratios=(0.0, 4.0), k_grid=(1, 10, 100))),
    "loss-profile": ("loss-profile", {}),
    "solo": ("solo-subsample", {}),
    "multi-round": ("multi-round", {}),
    "transfer": ("transfer", dict(eps_grid=(0.5,), ratios=(0.0, 8.0), n_protected=5)),
    "determinism": ("loss-profile", dict(profile_jobs=6, eps_grid=(0.0, 0.06, 0.2))),
}


def config(name, **overrides):
    scenario, kw = SUITE[name]
    return scenario_defaults(scenario, **dict(kw, **overrides))
