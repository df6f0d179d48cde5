"""State-estimation accuracy on the bundled feeder as voltage sensors are added.

Run: python demos/estimation_accuracy.py

Every bus has a pseudo-measurement of its injection (50% error); voltage
sensors (1% noise) are added one at a time, the default three first. Errors are
relative to the AC power flow at the nominal operating point, averaged over
seeds.
"""

import numpy as np

from gridloop import estimator
from gridloop.acpf import solve_pf
from gridloop.netmodel import build_admittance, linearize, load_case
from gridloop.scenario import bundled
from gridloop.sensing import MeasurementPlan, default_sensor_buses, take_measurements

case = load_case(bundled("feeder37.json"))
adm = build_admittance(case)
model = linearize(case, adm)
nominal = (case.nominal_p, case.nominal_q)
v = solve_pf(adm, nominal, case.v0).v_mag

# the default placement first, then the deepest remaining buses
first = list(default_sensor_buses(case))
rest = [int(b) for b in np.argsort(-case.depth(), kind="stable") + 1 if b not in first]
candidates = first + rest[:3]

print(f"{'sensors':<28}{'avg err %':>10}{'max err %':>10}")
for k in range(len(candidates) + 1):
    sensors = tuple(candidates[:k])
    avg, mx = [], []
    for seed in range(50):
        plan = MeasurementPlan(case.n_bus, sensors, seed=seed)
        snap = take_measurements(plan, (nominal[0], nominal[1], v), 0, nominal)
        err = np.abs(estimator.estimate(plan, snap, model, nominal).v_hat - v) / v
        avg.append(err.mean())
        mx.append(err.max())
    print(f"{str(list(sensors)):<28}{100 * np.mean(avg):>10.3f}{100 * np.mean(mx):>10.3f}")

print("\nwith pseudo-measurements on every bus the estimate is already within a fraction of a")
print("percent; each sensor mainly corrects the buses electrically close to it.")
