"""
Training a small physics-informed network
=========================================

Runs a short L-BFGS training on the composite loss (rod-equation residual,
boundary conditions and tip observations) in a throw-away run directory,
then resumes it. Full-size training uses the same code with larger sets.
"""
import math
import tempfile

import numpy as np

from ctrpinn import load_robot, training
from ctrpinn.training import TrainConfig, Trainer, TrainingLog

robot = load_robot()
run_dir = tempfile.mkdtemp(prefix="ctrpinn-run-")

cfg = TrainConfig(n_colloc=400, n_boundary=40, n_obs=30, hidden=(24, 24), alpha_max=math.pi / 3,
                  max_iter=60, checkpoint_every=20, seed=3)
obs = training.synthetic_observations(robot, cfg.n_obs, np.random.default_rng(4), cfg.domain)

trainer = Trainer(robot, cfg, run_dir, obs=obs)
print("stopped:", trainer.run(max_iter=40, progress_every=0))

# a second Trainer on the same directory continues from the checkpoint
resumed = Trainer(robot, cfg, run_dir, resume=True)
print("stopped:", resumed.run(progress_every=0))

log = TrainingLog.read(f"{run_dir}/train_log.tsv")
print(f"loss {log['loss'][0]:.3f} -> {log['loss'][-1]:.3f} over {int(log['iteration'][-1])} iterations")
print("never increased:", bool(np.all(np.diff(log["loss"]) <= 0)))
print("terms at the end: ode %.3g, bc %.3g, obs %.3g" % (log["ode"][-1], log["bc"][-1], log["obs"][-1]))
print("run directory:", run_dir)
