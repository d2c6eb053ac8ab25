"""Compare closed-form saltation matrices with the finite-difference oracle.

Run from the repository root:  python demos/saltation_matrices.py
"""
import numpy as np

from spipf.hybrid import saltation_fd_oracle, saltation_matrix
from spipf.systems import BouncingBallParams, bouncing_ball, slip

np.set_printoptions(precision=4, suppress=True)

bb = bouncing_ball(BouncingBallParams(e=0.8))
x, u = np.array([0.0, -4.43]), np.array([0.5])
print("bouncing ball impact, v- = -4.43, u = 0.5")
print("formula\n", saltation_matrix(bb, bb.transitions[0], 0.0, x, u))
print("finite differences\n", saltation_fd_oracle(bb, bb.transitions[0], 0.0, x, u, 1e-4))

sl = slip()
x = np.array([0.1, 1.0, 2.0 * np.sin(1.4), -1.5, 1.4])
print("\nSLIP touchdown, leg angle 1.4 rad")
print("formula\n", saltation_matrix(sl, sl.transitions[0], 0.0, x, np.zeros(3)))
print("finite differences\n", saltation_fd_oracle(sl, sl.transitions[0], 0.0, x, np.zeros(3), 1e-4))
