"""Cost and accuracy of lazy rescoring at several intervals on a single-client stream."""
import numpy as np

from streamfcl import fed
from streamfcl.config import parse_config

base = None
for T in (None, 10, 50):
    cfg = parse_config(preset="desk", overrides=[{
        "stream": {"num_clients": 1},
        "policy": {"lazy_interval": T},
        "training": {"rounds": 5},
        "probe": {"label_fractions": [0.1]},
    }])
    run = fed.run(cfg)
    arc = run.archive
    seconds = float(np.mean(arc.series("seconds")))
    base = base or seconds
    frac = arc.series("rescored_count").sum() / max(1.0, arc.series("resident_count").sum())
    print(f"T={str(T):4s} accuracy {arc.probes[0]['accuracy']:.3f}  rescoring fraction {frac:.4f}  "
          f"relative batch time {seconds / base:.2f}")
