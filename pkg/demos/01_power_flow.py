"""Solve the 13-node feeder at nominal load and check the voltage sensitivity."""

import numpy as np

from odsse.feeder import node_of, template
from odsse.powerflow import FINITE_DIFFERENCE, LINEARIZATION, jacobian_vm, solve_power_flow

model = template("13node")
z = model.nominal_load.copy()
sol = solve_power_flow(model, z)
print(f"converged in {sol.iterations} iterations")
for i in np.argsort(sol.v_mag)[:5]:
    bus, phase = node_of(model, i)
    print(f"  bus {bus} phase {phase}: |V| = {sol.v_mag[i]:.4f} pu")

h = jacobian_vm(model, z, method=LINEARIZATION).h
fd = jacobian_vm(model, z, method=FINITE_DIFFERENCE).h
print(f"sensitivity vs finite difference: max gap {np.max(np.abs(h - fd)):.2e}")
