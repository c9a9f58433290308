"""Records shared between the frontend, the simulator and the estimator."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

ACTIVE = "active"
CLOSED = "closed"


class Event(NamedTuple):
    t: float
    x: int
    y: int
    polarity: int  # +1 / -1


def _frozen(a, shape_tail):
    a = np.array(a, dtype=float).reshape((-1,) + shape_tail)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class FeatureTrajectory:
    """Immutable snapshot of one feature track: timestamps ``t`` and pixels ``uv``."""

    id: int
    t: np.ndarray
    uv: np.ndarray
    status: str = ACTIVE

    def __post_init__(self):
        t = _frozen(self.t, ())
        uv = _frozen(self.uv, (2,))
        if len(t) != len(uv):
            raise ValueError("timestamps and pixels differ in length")
        if np.any(np.diff(t) <= 0):
            raise ValueError("measurement timestamps must be strictly increasing")
        if self.status not in (ACTIVE, CLOSED):
            raise ValueError(f"unknown status {self.status!r}")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "uv", uv)

    def __len__(self):
        return len(self.t)

    @property
    def last_update(self):
        return float(self.t[-1]) if len(self.t) else float("-inf")

    def same_as(self, other):
        return (self.id == other.id and self.status == other.status
                and np.array_equal(self.t, other.t) and np.array_equal(self.uv, other.uv))


@dataclass(frozen=True)
class EventArray:
    """Column-wise event batch; polarity is +1 / -1."""

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float))
        object.__setattr__(self, "x", np.asarray(self.x, dtype=np.int64))
        object.__setattr__(self, "y", np.asarray(self.y, dtype=np.int64))
        object.__setattr__(self, "p", np.asarray(self.p, dtype=np.int64))
        if not len(self.t) == len(self.x) == len(self.y) == len(self.p):
            raise ValueError("event columns differ in length")

    def __len__(self):
        return len(self.t)

    def __iter__(self):
        for t, x, y, p in zip(self.t.tolist(), self.x.tolist(), self.y.tolist(), self.p.tolist()):
            yield Event(t, x, y, p)

    def __getitem__(self, sel):
        return EventArray(self.t[sel], self.x[sel], self.y[sel], self.p[sel])

    @classmethod
    def concatenate(cls, parts):
        parts = list(parts)
        if not parts:
            return cls(np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0))
        arr = cls(*(np.concatenate([getattr(p, c) for p in parts]) for c in "txyp"))
        return arr[np.argsort(arr.t, kind="stable")]
