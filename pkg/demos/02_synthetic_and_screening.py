"""
Synthetic tip observations and outlier screening
================================================

Generates solver-labelled tip records, saves and reloads them, corrupts one
record and shows the median-based screen picking it out.
"""
import numpy as np

from ctrpinn import RESTRICTED, data, load_robot

robot = load_robot()
rng = np.random.default_rng(7)

# each actuation yields three records, one per tube tip
obs = data.generate_synthetic(20, rng, robot, RESTRICTED)
print(f"{len(obs)} records, tubes {np.bincount(obs.tube)[1:]}")
print("first record: s = %.4f m, p = %s mm" % (obs.s[0], np.round(obs.p[0] * 1e3, 3)))

data.save_observations(obs, "synthetic.tsv", robot, seed=7)
back, meta = data.load_observations("synthetic.tsv")
print("round trip exact:", np.array_equal(back.p, obs.p), "| robot hash", meta["robot_hash"][:12])

# push one record 50 mm off and screen against the solver
bad = back.p.copy()
bad[5, 2] += 0.05
noisy = type(back)(back.s, back.tau, bad, back.tube)
screen = data.outlier_screen(noisy, robot, k=10.0, domain=RESTRICTED)
print(f"flagged {len(screen.flagged)} record(s); threshold {screen.threshold:.1e} m")

# a seeded split keeps all tubes of one actuation on the same side
train, held = data.split_rows(screen.clean, 15, rng)
print(f"train {len(train)} / held-out {len(held)} records")
