"""Measurement layer: voltage sensors and injection pseudo-measurements."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np

from gridloop.netmodel import NetworkCase

# stream identifiers for the counter-based generator
_V, _P, _Q = 1, 2, 3
SIGMA_FLOOR = 1e-12
# absolute pseudo std never drops below this fraction-of-1-pu when nominal is ~0
PSEUDO_ABS_FLOOR = 1e-3


@dataclass(frozen=True)
class MeasurementPlan:
    """Sensor placement and noise levels.

    ``sigma_v`` is a fraction of the true voltage magnitude; ``sigma_p`` and
    ``sigma_q`` are fractions of the nominal injection of each bus. Pseudo
    measurements cover every bus.
    """

    n_bus: int
    v_sensors: tuple[int, ...]
    sigma_v: float | tuple[float, ...] = 0.01
    sigma_p: float | tuple[float, ...] = 0.5
    sigma_q: float | tuple[float, ...] = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        sensors = tuple(sorted(int(b) for b in self.v_sensors))
        if len(set(sensors)) != len(sensors):
            raise ValueError(f"duplicate voltage sensor in {sensors}")
        for b in sensors:
            if not 1 <= b <= self.n_bus:
                raise ValueError(f"voltage sensor at unknown bus {b}")
        object.__setattr__(self, "v_sensors", sensors)
        for name, size in (("sigma_v", len(sensors)), ("sigma_p", self.n_bus), ("sigma_q", self.n_bus)):
            arr = np.broadcast_to(np.asarray(getattr(self, name), dtype=float), (size,))
            if np.any(arr < 0) or not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} must be finite and non-negative")
            object.__setattr__(self, name, tuple(float(s) for s in arr))

    @property
    def p_pseudo(self) -> tuple[int, ...]:
        return tuple(range(1, self.n_bus + 1))

    @property
    def q_pseudo(self) -> tuple[int, ...]:
        return self.p_pseudo

    @property
    def sensor_index(self) -> np.ndarray:
        return np.array(self.v_sensors, dtype=int) - 1

    def sigmas(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Fractional standard deviations, with zeros clamped to ``SIGMA_FLOOR``."""
        return self._clamped

    @cached_property
    def _clamped(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        out = tuple(np.maximum(np.array(s, dtype=float), SIGMA_FLOOR) for s in (self.sigma_v, self.sigma_p, self.sigma_q))
        for a in out:
            a.flags.writeable = False
        return out

    def pseudo_std(self, nominal_p: np.ndarray, nominal_q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Absolute pseudo-measurement standard deviations in pu."""
        _, sp, sq = self.sigmas()
        return sp * np.maximum(np.abs(nominal_p), PSEUDO_ABS_FLOOR), sq * np.maximum(np.abs(nominal_q), PSEUDO_ABS_FLOOR)


def default_sensor_buses(case: NetworkCase) -> tuple[int, ...]:
    """End-of-feeder, mid-feeder and near-substation buses along the deepest path."""
    depth = case.depth()
    end = int(np.argmax(depth)) + 1
    path = _path_to_substation(case, end)
    mid = path[len(path) // 2]
    near = path[-1]
    return tuple(sorted({end, mid, near}))


def _path_to_substation(case: NetworkCase, bus: int) -> list[int]:
    depth = case.depth()
    nbrs: dict[int, list[int]] = {}
    for ln in case.lines:
        nbrs.setdefault(ln.from_bus, []).append(ln.to_bus)
        nbrs.setdefault(ln.to_bus, []).append(ln.from_bus)
    path = [bus]
    while depth[path[-1] - 1] > 1:
        here = depth[path[-1] - 1]
        path.append(min(b for b in nbrs[path[-1]] if b != 0 and depth[b - 1] == here - 1))
    return path


def standard_normals(seed: int, iteration: int, stream: int, size: int) -> np.ndarray:
    """Standard normals from a Philox stream keyed by (seed, iteration, quantity).

    Entry ``i`` belongs to bus ``i + 1`` whatever subset of buses is used, so
    a bus's noise never depends on where the other sensors are.
    """
    bitgen = np.random.Philox(key=int(seed) % 2**64, counter=[0, int(iteration) % 2**64, int(stream), 0])
    return np.random.Generator(bitgen).standard_normal(size)


@dataclass(frozen=True)
class MeasurementSnapshot:
    v_meas: dict[int, float]
    p_pseudo_meas: np.ndarray
    q_pseudo_meas: np.ndarray
    true_v: np.ndarray
    iteration: int = 0


def pseudo_errors(plan: MeasurementPlan, nominal_p: np.ndarray, nominal_q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Static pseudo-measurement errors, drawn once per seed, std a fraction of nominal."""
    std_p, std_q = plan.pseudo_std(nominal_p, nominal_q)
    xi_p, xi_q = _pseudo_normals(plan.seed, plan.n_bus)
    return std_p * xi_p, std_q * xi_q


@lru_cache(maxsize=64)
def _pseudo_normals(seed: int, n: int) -> tuple[np.ndarray, np.ndarray]:
    xi = standard_normals(seed, 0, _P, n), standard_normals(seed, 0, _Q, n)
    for a in xi:
        a.flags.writeable = False
    return xi


def take_measurements(
    plan: MeasurementPlan,
    true_state: tuple[np.ndarray, np.ndarray, np.ndarray],
    iteration: int,
    nominal: tuple[np.ndarray, np.ndarray] | None = None,
) -> MeasurementSnapshot:
    """Noisy voltage readings at the sensors plus pseudo injections.

    Sensor noise is fresh every iteration. Pseudo injections are the true
    injections plus an error fixed for the whole run, with standard deviation
    ``sigma_p|q`` times the ``nominal`` (historical) injection, which defaults
    to the true injections.
    """
    p, q, v_mag = (np.asarray(a, dtype=float) for a in true_state)
    if not (p.shape == q.shape == v_mag.shape == (plan.n_bus,)):
        raise ValueError("true state dimensions do not match the plan")
    nom_p, nom_q = (p, q) if nominal is None else nominal
    sv, _, _ = plan.sigmas()
    xi = standard_normals(plan.seed, iteration + 1, _V, plan.n_bus)[plan.sensor_index]
    idx = plan.sensor_index
    readings = v_mag[idx] * (1.0 + sv * xi)
    err_p, err_q = pseudo_errors(plan, np.asarray(nom_p, float), np.asarray(nom_q, float))
    return MeasurementSnapshot(
        v_meas={b: float(val) for b, val in zip(plan.v_sensors, readings)},
        p_pseudo_meas=p + err_p,
        q_pseudo_meas=q + err_q,
        true_v=v_mag.copy(),
        iteration=iteration,
    )
