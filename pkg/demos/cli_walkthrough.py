"""
The command-line tool, end to end
=================================

Train, predict, evaluate and check gradients through ``vshgp.cli.main``, the
same entry point as the ``vshgp`` console script. Everything is written to a
temporary directory.
"""

import tempfile
from pathlib import Path

from vshgp.cli import main
from vshgp.io import read_report, read_table

work = Path(tempfile.mkdtemp(prefix="vshgp-demo-"))
config = work / "run.cfg"
config.write_text(
    "model = dvshgp\n"
    "data = toy1d:n=600\n"
    "experts = 4\n"
    "m0 = 15\n"
    "u0 = 15\n"
    "test_fraction = 0.2\n"
    "seed = 3\n"
)

# shell: vshgp train --config run.cfg --out run
assert main(["train", "--config", str(config), "--out", str(work / "run")]) == 0

# shell: vshgp predict --model run/model.npz --data grid:-10:10:201 --out pred.csv
assert main(["predict", "--model", str(work / "run/model.npz"), "--data", "grid:-10:10:201",
             "--out", str(work / "pred.csv")]) == 0
header, rows = read_table(work / "pred.csv")
print(header)
print(rows[100])

# the held-out fifth of the data was written next to the archive
assert main(["eval", "--model", str(work / "run/model.npz"), "--data", str(work / "run/test.csv"),
             "--out", str(work / "metrics.txt")]) == 0
print(read_report(work / "metrics.txt"))

# a typo in the model kind is a configuration error, exit status 2
print("exit status:", main(["train", "--model", "vshpg", "--out", str(work / "bad")]))

# finite-difference checks of every gradient block on two seeds
assert main(["check-grads", "--seeds", "2"]) == 0
print("outputs in", work)
