"""Importance scores of samples that stay in client 0's buffer across a window of iterations.

Prints the first and last score of a few long-lived residents next to the
buffer's min and mean over the same window.
"""
import numpy as np

from streamfcl import fed
from streamfcl.config import parse_config
from streamfcl.eval import score_trend

cfg = parse_config(preset="desk", overrides=[{"training": {"rounds": 4}, "log_scores": True}])
run = fed.run(cfg, probe=False)

window, start = 30, 40
trend = score_trend(run.archive, None, window, start=start)
print(f"{len(trend['series'])} samples resident for iterations {start}..{start + window - 1}")
for sid, series in list(trend["series"].items())[:8]:
    print(f"sample {sid:5d}: {series[0]:.3f} -> {series[-1]:.3f}")
env = trend["envelope"]
print(f"buffer min {env['min'][0]:.3f} -> {env['min'][-1]:.3f}, "
      f"mean {np.nanmean(env['mean'][:5]):.3f} -> {np.nanmean(env['mean'][-5:]):.3f}")
