"""Smoothed per-iteration eviction ratio for importance scoring versus random replacement.

Writes eviction_trace.csv (iteration, is, rr) to the current directory.
"""
import sys

from streamfcl import fed
from streamfcl.config import parse_config
from streamfcl.eval import eviction_trace, write_csv

rounds = int(sys.argv[1]) if len(sys.argv) > 1 else 10
window = 20

traces = {}
for policy in ("is", "rr"):
    cfg = parse_config(preset="desk", overrides=[{"policy": {"name": policy}, "training": {"rounds": rounds}}])
    run = fed.run(cfg, probe=False)
    traces[policy] = eviction_trace(run.archive, window)["pooled"]

rows = [{"iteration": i, "is": a, "rr": b} for i, (a, b) in enumerate(zip(traces["is"], traces["rr"]))]
write_csv("eviction_trace.csv", ("iteration", "is", "rr"), rows)
step = max(1, len(rows) // 10)
for r in rows[::step]:
    print(f"iteration {r['iteration']:5d}  is {r['is']:.3f}  rr {r['rr']:.3f}")
