"""Train the same short federation under each buffer policy and compare probe accuracy.

Usage: python3 demos/policy_comparison.py [rounds]
"""
import sys

from streamfcl import fed
from streamfcl.config import parse_config

rounds = int(sys.argv[1]) if len(sys.argv) > 1 else 10

for policy in ("is", "rr", "fifo", "kcenter"):
    cfg = parse_config(preset="desk", overrides=[{
        "policy": {"name": policy},
        "training": {"rounds": rounds},
        "probe": {"label_fractions": [0.1]},
    }])
    run = fed.run(cfg)
    evictions = [r["mean_eviction_ratio"] for r in run.archive.rounds]
    acc = run.archive.probes[0]["accuracy"]
    print(f"{policy:8s} accuracy@10% {acc:.3f}  eviction first {evictions[0]:.2f} last {evictions[-1]:.2f}")
