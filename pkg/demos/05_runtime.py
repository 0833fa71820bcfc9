"""
Evaluation time: network versus solver
======================================

Times one network evaluation and one shooting solve per actuation at a
few discretizations and reports median and spread.
"""
import tempfile
from pathlib import Path

import numpy as np

from ctrpinn import RESTRICTED, load_robot
from ctrpinn.evaluation import runtime_bench
from ctrpinn.pinn import Network, bundled_weights

robot = load_robot()
net = Network.load(bundled_weights())

bench = runtime_bench(net, robot, n_acts=100, discretizations=(50, 200), warmup=10,
                      rng=np.random.default_rng(0), domain=RESTRICTED)
for r in bench.reports:
    print(f"{r.method:6s} n={r.discretization:3d}: median {r.median * 1e3:7.3f} ms, IQR/median {r.relative_spread:.3f}")
out = Path(tempfile.mkdtemp(prefix="ctrpinn-runtime-")) / "runtime_demo"
bench.write(out)
print(f"wrote {out}.tsv")
