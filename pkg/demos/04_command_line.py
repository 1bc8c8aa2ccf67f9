"""
The command-line pipeline
=========================

The same steps as ``cdtlearn synth``, ``train``, ``eval`` and ``lodo`` from a
shell, run in-process into a temporary directory.
"""

import json
import os
import tempfile

from cdtlearn.cli import main

root = tempfile.mkdtemp(prefix="cdtlearn-")
data = os.path.join(root, "domains.txt")
run = os.path.join(root, "run")

cfg = os.path.join(root, "config.json")
with open(cfg, "w") as fh:
    json.dump({"seed": 4, "synth": {"identities_per_domain": 12}, "train": {"steps": 20}}, fh)

main(["synth", "--config", cfg, "--out", data])
main(["train", data, "--config", cfg, "--held-out", "2", "--lambda", "0.7", "--out", run])
print(sorted(os.listdir(run)))

main(["eval", os.path.join(run, "checkpoint.json"), data, "--held-out", "2",
      "--far-levels", "0.001,0.01,0.1", "--roc", os.path.join(root, "roc.csv"),
      "--out", os.path.join(root, "report.json")])

# a small lambda sweep over every held-out domain
main(["lodo", data, "--config", cfg, "--steps", "5", "--sweep-lambda", "0.5,1", "--out", os.path.join(root, "lodo")])
print("\nartifacts in", root)
