"""Track a fast-moving 13-node feeder with GO, GD and SGD for ten minutes."""

from odsse.feeder import template
from odsse.metrics import summarize
from odsse.scenario import Scenario, run_online

profile = {"pv_fraction": 0.6, "pv_peak_ratio": 1.0, "cloud_sigma": 0.4, "cloud_rho": 0.8,
           "volatility": 0.1, "ar_rho": 0.95}
trace = run_online(Scenario(template("13node"), horizon=600, seed=0, profile=profile))
print(f"{'estimator':>9}  {'avg err':>9}  {'avg max':>9}  {'step (s)':>9}")
for name, m in summarize(trace).items():
    print(f"{name:>9}  {m.avg_error_per_node_pu:9.2e}  {m.avg_max_error_per_sample_pu:9.2e}  "
          f"{m.median_step_time_s:9.2e}")
