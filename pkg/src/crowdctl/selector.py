"""Routing of incoming workers to tasks."""
from __future__ import annotations

import heapq
from enum import Enum

import numpy as np

from .belief import Action, BeliefState, QualityConfig, decide, lattice_for


class Routing(Enum):
    GREEDY = "greedy"
    RANDOM = "random"
    RANDOM_ROBIN = "random-robin"


def priority(b: BeliefState, cfg: QualityConfig) -> float:
    """Expected one-ballot gain in -P(1 - v) from an average worker."""
    lat = lattice_for(b, cfg, 1)
    P = cfg.penalty
    p1 = lat.p_one[0, 0]
    return float(p1 * -P * (1.0 - lat.v[1, 0]) + (1.0 - p1) * -P * (1.0 - lat.v[0, 1])
                 + P * (1.0 - lat.v[0, 0]))


def select_next(beliefs, cfg: QualityConfig, pay: float, policy: Routing = Routing.GREEDY,
                rng: np.random.Generator | None = None, robin_served: set | None = None):
    """Pick the task id for the next worker, or None if every task is dark.

    ``beliefs`` maps task id to belief (a list is read as ids 0..n-1).
    ``robin_served`` carries round-robin progress between calls and is
    updated in place.
    """
    if not isinstance(beliefs, dict):
        beliefs = dict(enumerate(beliefs))
    light = [t for t in sorted(beliefs) if decide(beliefs[t], cfg, pay) is Action.TAKE_BALLOT]
    if not light:
        return None
    policy = Routing(policy)
    if policy is Routing.GREEDY:
        best = max(light, key=lambda t: (priority(beliefs[t], cfg), -t))
        return best
    if policy is Routing.RANDOM_ROBIN and robin_served is not None:
        for t in light:
            if t not in robin_served:
                robin_served.add(t)
                return t
    if rng is None:
        raise ValueError("random routing needs a random source")
    return light[int(rng.integers(len(light)))]


class Router:
    """Stateful routing for a simulated batch.

    Tasks are identified by index; ``phi`` and ``light`` are callables of
    the task index giving its current priority and light status. The
    greedy queue is a heap of ``(-phi, task)`` with lazy invalidation: only
    a task whose belief changed is re-keyed, and a pay change rebuilds it.
    """

    def __init__(self, n: int, policy: Routing, rng: np.random.Generator):
        self.n = n
        self.policy = Routing(policy)
        self.rng = rng
        self._heap = []
        self._version = np.zeros(n, dtype=np.int64)
        self._light = np.zeros(n, dtype=bool)
        self._phi = np.zeros(n)
        self._light_list = []
        self._pos = {}
        self._robin_next = 0

    def rebuild(self, phi, light):
        self._phi = np.asarray(phi, dtype=float).copy()
        self._light = np.asarray(light, dtype=bool).copy()
        self._version += 1
        ids = np.flatnonzero(self._light)
        self._heap = [(-self._phi[t], int(t), int(self._version[t])) for t in ids]
        heapq.heapify(self._heap)
        self._light_list = [int(t) for t in ids]
        self._pos = {t: i for i, t in enumerate(self._light_list)}

    def update(self, task: int, phi: float, light: bool):
        self._version[task] += 1
        self._phi[task] = phi
        was = self._light[task]
        self._light[task] = light
        if light:
            heapq.heappush(self._heap, (-phi, task, int(self._version[task])))
            if not was:
                self._pos[task] = len(self._light_list)
                self._light_list.append(task)
        elif was:
            i = self._pos.pop(task)
            last = self._light_list.pop()
            if last != task:
                self._light_list[i] = last
                self._pos[last] = i

    def any_light(self) -> bool:
        return bool(self._light_list)

    def select(self):
        if not self._light_list:
            return None
        if self.policy is Routing.GREEDY:
            while self._heap:
                negphi, t, ver = self._heap[0]
                if ver == self._version[t] and self._light[t]:
                    return t
                heapq.heappop(self._heap)
            return None
        if self.policy is Routing.RANDOM_ROBIN:
            while self._robin_next < self.n:
                t = self._robin_next
                self._robin_next += 1
                if self._light[t]:
                    return t
        # light list order depends on history but is fully determined by the seed
        return self._light_list[int(self.rng.integers(len(self._light_list)))]
