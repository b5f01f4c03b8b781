"""A small simulation comparing the four model variants on held-out strides.

    python demos/simulation_trend.py [replicates]
"""
import sys

from mvlfmm.sim import ScenarioConfig, default_params, run_scenario

reps = int(sys.argv[1]) if len(sys.argv) > 1 else 3
params = default_params()
for strength in (1.0, 3.0):
    scen = ScenarioConfig(name=f"strength{strength:g}", n_subjects=40, n_per_side=20, strength=strength,
                          replicates=reps, n_restarts=1, seed=3)
    metrics = run_scenario(params, scen)
    summary = metrics.groupby("model")[["mean_ispe", "ise_beta1", "ise_beta2", "fit_s"]].mean()
    print(f"\nlongitudinal strength {strength:g}, {reps} replicates")
    print(summary.round(3).to_string())
