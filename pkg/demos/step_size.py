"""How the certified step size relates to the observed convergence speed.

Run: python demos/step_size.py

For the bundled feeder problem, iterate the model-based loop at fractions of
the certified maximum step and compare the iteration count with the count
predicted by the contraction factor gamma(eps).
"""

import math

import numpy as np

from gridloop import controller, loop
from gridloop.scenario import build, load_scenario

setup = build(load_scenario("bundled:feeder37_overvoltage.json"))
problem = setup.problem
cert = controller.certify_step(problem)
x_star = controller.saddle_point(problem)
print(f"L = {cert.L:.4f}, M = {cert.M_strong:.3g}, eps_max = {cert.eps_max:.4f}\n")

tol = 1e-6
print(f"{'eps/eps_max':>12}{'gamma':>12}{'predicted':>12}{'observed':>10}")
for frac in (0.1, 0.3, 0.5, 0.7, 0.9, 0.99):
    eps = frac * cert.eps_max
    cfg = loop.LoopConfig(mode="linear_model", eps=eps, max_iters=200_000, stop_tol=0.0)
    trace = loop.run(problem, setup.case, cfg, setup.admittance, x_star, cert)
    d0 = trace.dist2[0]
    hit = int(np.argmax(trace.dist2 <= tol**2)) if np.any(trace.dist2 <= tol**2) else None
    gamma = cert.gamma(eps)
    predicted = math.ceil(math.log(tol**2 / d0) / math.log(gamma))
    print(f"{frac:>12.2f}{gamma:>12.6f}{predicted:>12d}{str(hit):>10}")

print("\n'predicted' is the worst-case count from ||x-x*||^2 <= gamma^k ||x0-x*||^2 to reach")
print(f"||x-x*|| <= {tol:g}; the observed count is never larger.")
