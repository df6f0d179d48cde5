"""Regenerate the bundled 37-node feeder case and its over-voltage scenario.

Writes src/gridloop/data/feeder37.json and feeder37_overvoltage.json.

Topology follows the IEEE 37-node test feeder (node 799 is the substation,
775 hangs off 709 through the small transformer). Line impedances are
balanced positive-sequence approximations of the four cable configurations
and are representative only. Loads are a light midday pattern and 21 buses
carry rooftop PV, so the uncontrolled feeder is in over-voltage.
"""

from __future__ import annotations

import json
from collections import deque
from pathlib import Path

# ohm per mile, balanced positive-sequence approximations
CONFIGS = {
    721: complex(0.11, 0.09),
    722: complex(0.21, 0.12),
    723: complex(0.55, 0.28),
    724: complex(0.92, 0.34),
}

# (from, to, length ft, config)
SEGMENTS = [
    (799, 701, 1850, 721),
    (701, 702, 960, 722),
    (702, 705, 400, 724),
    (702, 713, 360, 723),
    (702, 703, 1320, 722),
    (703, 727, 240, 724),
    (703, 730, 600, 723),
    (704, 714, 80, 724),
    (704, 720, 800, 723),
    (705, 742, 320, 724),
    (705, 712, 240, 724),
    (706, 725, 280, 724),
    (707, 724, 760, 724),
    (707, 722, 120, 724),
    (708, 733, 320, 723),
    (708, 732, 320, 724),
    (709, 731, 600, 723),
    (709, 708, 320, 723),
    (710, 735, 200, 724),
    (710, 736, 1280, 724),
    (711, 741, 400, 723),
    (711, 740, 200, 724),
    (713, 704, 520, 723),
    (714, 718, 520, 724),
    (720, 707, 920, 724),
    (720, 706, 600, 723),
    (727, 744, 280, 723),
    (730, 709, 200, 723),
    (733, 734, 560, 723),
    (734, 737, 640, 723),
    (734, 710, 520, 724),
    (737, 738, 400, 723),
    (738, 711, 400, 723),
    (744, 728, 200, 724),
    (744, 729, 280, 724),
]
# XFM-1 (500 kVA, 0.09 % + j1.81 %), expressed in ohm on the 4.8 kV side
XFMR = (709, 775, complex(0.0009, 0.0181) * 4.8**2 / 0.5)

# spot loads, kW / kvar (light midday level)
LOADS = {
    701: (252, 126), 712: (25, 12), 713: (25, 12), 714: (20, 10), 718: (25, 12),
    720: (25, 12), 722: (40, 20), 724: (12, 6), 725: (12, 6), 727: (12, 6),
    728: (38, 19), 729: (12, 6), 730: (25, 12), 731: (25, 12), 732: (12, 6),
    733: (25, 12), 734: (12, 6), 735: (25, 12), 736: (12, 6), 737: (40, 20),
    738: (38, 19), 740: (25, 12), 741: (12, 6), 742: (28, 13), 744: (12, 6),
}

# rooftop PV output at the studied instant, kW
PV = {
    705: 120, 712: 140, 742: 120, 714: 100, 718: 140, 720: 120, 706: 140,
    725: 160, 707: 160, 722: 180, 724: 200, 727: 100, 744: 120, 728: 120,
    729: 140, 731: 140, 733: 120, 735: 160, 736: 200, 740: 180, 741: 200,
}

CASE_NAME = "approximate IEEE 37-node feeder, balanced, 21 PV units"
BASE_MVA = 1.0
BASE_KV = 4.8
SUBSTATION_V = 1.035
# inverter reactive capability as a fraction of PV rating
Q_RATIO = 0.44


def build() -> dict:
    adj: dict[int, list[int]] = {}
    for a, b, *_ in SEGMENTS + [XFMR]:
        adj.setdefault(a, []).append(b)
        adj.setdefault(b, []).append(a)
    order, queue, ids = [], deque([799]), {799: 0}
    while queue:
        u = queue.popleft()
        for w in sorted(adj[u]):
            if w not in ids:
                ids[w] = len(ids)
                order.append(w)
                queue.append(w)

    buses = []
    for name in order:
        p_load, q_load = LOADS.get(name, (0, 0))
        p_net = (PV.get(name, 0) - p_load) / 1000.0
        buses.append({"id": ids[name], "label": str(name), "p_nom": round(p_net, 6), "q_nom": -q_load / 1000.0})

    lines = []
    for a, b, feet, cfg in SEGMENTS:
        z = CONFIGS[cfg] * feet / 5280.0
        lines.append({"from": ids[a], "to": ids[b], "r": round(z.real, 6), "x": round(z.imag, 6), "b_shunt": 0.0})
    a, b, z = XFMR
    lines.append({"from": ids[a], "to": ids[b], "r": round(z.real, 6), "x": round(z.imag, 6), "b_shunt": 0.0})

    return {
        "name": CASE_NAME,
        "units": "si",
        "base_mva": BASE_MVA,
        "base_kv": BASE_KV,
        "substation": {"id": 0, "voltage_re": SUBSTATION_V, "voltage_im": 0.0},
        "buses": buses,
        "lines": lines,
    }


def scenario(case: dict) -> dict:
    """PV buses may curtail down to zero output and use +-Q_RATIO of rating as reactive power."""
    ids = {b["label"]: b for b in case["buses"]}
    controllable = []
    for name, kw in sorted(PV.items(), key=lambda item: ids[str(item[0])]["id"]):
        bus = ids[str(name)]
        pv = kw / 1000.0
        controllable.append({
            "bus": bus["id"],
            "p_min": round(bus["p_nom"] - pv, 6),
            "p_max": bus["p_nom"],
            "q_min": round(bus["q_nom"] - Q_RATIO * pv, 6),
            "q_max": round(bus["q_nom"] + Q_RATIO * pv, 6),
        })
    return {
        "name": "feeder37 midday over-voltage, 3 voltage sensors",
        "case_path": "feeder37.json",
        "linearization_point": "zero",
        "problem": {"v_lo": 0.95, "v_hi": 1.05, "eta": 1e-2, "c2_p": 0.05, "c2_q": 0.05,
                    "controllable": controllable},
        "plan": {"v_sensors": "default", "sigma_v": 0.01, "sigma_p": 0.5, "sigma_q": 0.5, "seed": 0},
        "loop": {"mode": "se_feedback", "eps": "auto", "max_iters": 30000, "stop_tol": 2e-6,
                 "stop_window": 2000, "sensed_source": "measurement"},
        "outputs": {"trace": "trace.csv", "summary": "summary.json"},
    }


if __name__ == "__main__":
    data = Path(__file__).resolve().parents[1] / "src" / "gridloop" / "data"
    case = build()
    (data / "feeder37.json").write_text(json.dumps(case, indent=1) + "\n")
    (data / "feeder37_overvoltage.json").write_text(json.dumps(scenario(case), indent=1) + "\n")
    print(f"wrote {data} ({len(case['buses'])} buses, {len(case['lines'])} lines, {len(PV)} PV units)")
