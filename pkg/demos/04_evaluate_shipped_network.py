"""
Accuracy of the shipped network
===============================

Loads the bundled weights (trained on |alpha| <= pi/3) and compares the
network with the solver: normalized backbone error over a grid, then the
full state curves for one actuation.
"""
import numpy as np

from ctrpinn import RESTRICTED, load_robot
from ctrpinn.evaluation import STATE_NAMES, backbone_error, state_recovery
from ctrpinn.pinn import Network, bundled_weights

robot = load_robot()
net = Network.load(bundled_weights())
print("trained for", net.metadata.get("iteration"), "iterations, final loss", net.metadata.get("loss"))

taus = RESTRICTED.sample(20, np.random.default_rng(11))
rep = backbone_error(net, robot, taus, grid_n=50, domain=RESTRICTED)
print(f"||p_net - p_solver|| / s: mean {rep.mean:.2%}, max {rep.max:.2%}")
for frac, mean in zip(rep.fractions[::10], rep.station_mean[::10]):
    print(f"  s/l1 = {frac:.2f}: mean {mean:.2%}")

rec = state_recovery(net, robot, taus[0], domain=RESTRICTED)
rel = rec.relative_rms()
for name, r in zip(STATE_NAMES, rel):
    print(f"  {name:>6s}: RMS / range {r:.2%}")
print(f"orientation error: max {np.degrees(rec.orientation_error.max()):.2f} deg")
rec.write("states_demo")
