"""Event-by-event corner detection and patch tracking.

Events near an active feature (within ``r_reg`` of its registration-table
cell) go to that feature's tracker.  All other events update the surface of
active events (SAE) for their polarity and may spawn a new feature when the
binarized SAE patch around them scores as a Harris corner.

The tracker keeps the binarized patch seen at detection as a template.  Each
event votes for the shift hypotheses (stay, +-x, +-y) under which it lands on
the template; a shift wins once it leads the runner-up by ``margin`` votes.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass

import numpy as np

from . import _kernels
from ._kernels import HYPOTHESES
from ._kernels._pykernels import binarize, harris_mask
from .tracks import ACTIVE, CLOSED, Event, FeatureTrajectory

log = logging.getLogger(__name__)

CREATED = "created"
UPDATED = "updated"
CLOSED_EVENT = "closed"
SETTLE_GAIN = 1.5


@dataclass(frozen=True)
class FrontendConfig:
    r_reg: int = 3
    patch_radius: int = 7
    n_newest: int = 30
    harris_k: float = 0.15
    harris_sigma: float = 1.0
    harris_threshold: float = 100.0
    min_support: int = 11
    t_min: float = 0.001
    t_max: float = 0.1
    prune_interval: float = 0.01
    tracker_window: int = 15
    min_votes: int = 5
    margin: int = 2
    floor: float = 0.2
    settle_events: int = 25
    forward_first: int = 8
    forward_every: int = 4
    kernels: str = "auto"

    def __post_init__(self):
        if self.r_reg < 1 or self.patch_radius < self.r_reg + 1:
            raise ValueError("need 1 <= r_reg < patch_radius")
        if self.n_newest < 1 or self.tracker_window < self.min_votes or self.min_votes < 1:
            raise ValueError("bad tracker window sizes")
        if not 0.0 < self.t_min < self.t_max:
            raise ValueError("need 0 < t_min < t_max")
        if self.settle_events < 0:
            raise ValueError("settle_events must be non-negative")
        if self.forward_first < 1 or self.forward_every < 1:
            raise ValueError("forwarding thresholds must be positive")
        if self.kernels not in ("auto", "compiled", "python"):
            raise ValueError(f"unknown kernel backend {self.kernels!r}")


class _Tracker:
    __slots__ = ("id", "x", "y", "template", "window", "votes", "t", "uv", "last_event", "created", "settle")

    def __init__(self, fid, x, y, template, t):
        self.id = fid
        self.x, self.y = x, y
        self.template = template
        self.window = deque()
        self.votes = np.zeros(len(HYPOTHESES), dtype=np.int64)
        self.t = [t]
        self.uv = [(float(x), float(y))]
        self.last_event = t
        self.created = t
        self.settle = 0

    def reset_votes(self):
        self.window.clear()
        self.votes[:] = 0

    def snapshot(self, status=ACTIVE):
        return FeatureTrajectory(self.id, self.t, self.uv, status)


@dataclass
class FrontendStats:
    events: int = 0
    rejected: int = 0
    routed: int = 0
    detections: int = 0
    shifts: int = 0
    diverged: int = 0
    collisions: int = 0
    border: int = 0
    pruned: int = 0
    cell_accesses: int = 0
    max_cell_accesses: int = 0


class Frontend:
    """Single-owner state: SAE planes, registration table and trackers.

    ``sink`` (optional) receives immutable :class:`FeatureTrajectory`
    snapshots: once a track reaches ``forward_first`` measurements, again on
    each growth of ``forward_every``, and a closed snapshot when it ends.
    """

    def __init__(self, width, height, config: FrontendConfig | None = None, sink=None):
        self.config = c = config or FrontendConfig()
        self.width, self.height = int(width), int(height)
        self.kernels = _kernels.get(c.kernels)
        self.sae = np.full((2, self.height, self.width), -np.inf)
        self.table = np.full((self.height, self.width), -1, dtype=np.int32)
        self.trackers: dict[int, _Tracker] = {}
        self.finished: list[FeatureTrajectory] = []
        self.sink = sink
        self.stats = FrontendStats()
        self.last_t = -np.inf
        self._next_id = 0
        self._next_prune = None

    # -- public ----------------------------------------------------------------
    def ingest(self, e: Event):
        """Process one event; returns a list of ``(kind, id)`` emissions."""
        t, x, y, p = float(e[0]), int(e[1]), int(e[2]), int(e[3])
        if not (0 <= x < self.width and 0 <= y < self.height) or t < self.last_t or p not in (1, -1):
            self.stats.rejected += 1
            return []
        self.stats.events += 1
        self.last_t = t
        out = []
        if self._next_prune is None:
            self._next_prune = t + self.config.prune_interval
        elif t >= self._next_prune:
            out.extend((CLOSED_EVENT, fid) for fid in self.prune(t))
            # event-time cadence; skips empty stretches in one go
            step = self.config.prune_interval
            self._next_prune += step * (np.floor((t - self._next_prune) / step) + 1)
        fid = self._lookup(x, y)
        if fid >= 0:
            self.stats.routed += 1
            out.extend(self._track(self.trackers[fid], t, x, y))
        else:
            self.sae[0 if p > 0 else 1, y, x] = t
            # a corner inside another feature's patch is that feature's arm
            if self.detect(x, y, p) and self._lookup(x, y, self.config.patch_radius) < 0:
                new = self._create(t, x, y, p)
                if new is not None:
                    out.append((CREATED, new))
        return out

    def ingest_array(self, events):
        """Feed a whole :class:`~eventvo.tracks.EventArray`; returns all emissions."""
        out = []
        for e in events:
            out.extend(self.ingest(e))
        return out

    def detect(self, x, y, polarity=1):
        """Harris test on the binarized SAE patch of ``polarity`` around ``(x, y)``."""
        c = self.config
        plane = self.sae[0 if polarity > 0 else 1]
        w = c.patch_radius
        if np.count_nonzero(np.isfinite(plane[y - w:y + w + 1, x - w:x + w + 1])) < c.min_support:
            return False
        score = self.kernels.harris_score(plane, x, y, c.patch_radius, c.n_newest, c.harris_sigma, c.harris_k)
        return bool(score > c.harris_threshold)

    def track(self, fid, e: Event):
        """Feed one event to tracker ``fid``; returns the new pixel after a shift, else None."""
        tr = self.trackers[fid]
        before = (tr.x, tr.y)
        self._track(tr, float(e[0]), int(e[1]), int(e[2]))
        if fid in self.trackers and (tr.x, tr.y) != before:
            return tr.x, tr.y
        return None

    def prune(self, now):
        """Close every feature idle for more than ``t_max``; returns their ids."""
        stale = [fid for fid, tr in self.trackers.items() if now - tr.last_event > self.config.t_max]
        for fid in stale:
            self._close(fid)
        self.stats.pruned += len(stale)
        return stale

    def flush(self):
        """Close all active features (end of stream)."""
        ids = list(self.trackers)
        for fid in ids:
            self._close(fid)
        return ids

    def active(self):
        return {fid: tr.snapshot() for fid, tr in self.trackers.items()}

    def check_table(self):
        """Registration-table consistency: one cell per active id, no strays."""
        ys, xs = np.nonzero(self.table >= 0)
        ids = self.table[ys, xs]
        if len(set(ids.tolist())) != len(ids) or set(ids.tolist()) != set(self.trackers):
            return False
        return all(self.table[tr.y, tr.x] == fid for fid, tr in self.trackers.items())

    # -- internals -------------------------------------------------------------
    def _lookup(self, x, y, r=None):
        r = self.config.r_reg if r is None else r
        fid, visited = self.kernels.neighbor_lookup(self.table, x, y, r)
        self.stats.cell_accesses += visited
        if visited > self.stats.max_cell_accesses:
            self.stats.max_cell_accesses = visited
        return fid

    def _create(self, t, x, y, p):
        c = self.config
        w = c.patch_radius
        patch = self.sae[0 if p > 0 else 1, y - w:y + w + 1, x - w:x + w + 1]
        template = binarize(patch, c.n_newest)
        if int(template.sum()) < c.min_support:
            return None
        fid = self._next_id
        self._next_id += 1
        tr = self.trackers[fid] = _Tracker(fid, x, y, np.ascontiguousarray(template), t)
        tr.settle = c.settle_events
        self.table[y, x] = fid
        self.stats.detections += 1
        return fid

    def _track(self, tr, t, x, y):
        c = self.config
        tr.last_event = t
        if tr.settle > 0:
            return self._settle(tr, x, y)
        v = np.zeros(len(HYPOTHESES), dtype=np.int64)
        self.kernels.hypothesis_votes(tr.template, c.patch_radius, x - tr.x, y - tr.y, v)
        tr.window.append(v)
        tr.votes += v
        if len(tr.window) > c.tracker_window:
            tr.votes -= tr.window.popleft()
        n = len(tr.window)
        if n < c.min_votes:
            return []
        order = np.argsort(-tr.votes, kind="stable")
        best, second = int(order[0]), int(order[1])
        if best != 0 and tr.votes[best] - tr.votes[second] >= c.margin:
            return self._shift(tr, t, HYPOTHESES[best])
        if n >= c.tracker_window and tr.votes[best] < c.floor * n:
            self.stats.diverged += 1
            self._close(tr.id)
            return [(CLOSED_EVENT, tr.id)]
        return []

    def _settle(self, tr, x, y):
        # detection often fires before every pixel near the vertex has; the
        # first routed events complete the template, then the feature moves
        # to the strongest corner among the template pixels near it
        c = self.config
        w, r = c.patch_radius, c.r_reg
        tr.template[y - tr.y + w, x - tr.x + w] = 1
        tr.settle -= 1
        if tr.settle > 0:
            return []
        pad = np.zeros((2 * w + 1 + 2 * r,) * 2, dtype=np.uint8)
        pad[r:-r, r:-r] = tr.template
        best, bx, by = -np.inf, 0, 0
        for dy in range(-r, r + 1):
            for dx in range(-r, r + 1):
                if not tr.template[w + dy, w + dx]:
                    continue
                sc = harris_mask(pad[r + dy:r + dy + 2 * w + 1, r + dx:r + dx + 2 * w + 1], c.harris_sigma, c.harris_k)
                if sc > best:
                    best, bx, by = sc, dx, dy
        here = harris_mask(pad[r:r + 2 * w + 1, r:r + 2 * w + 1], c.harris_sigma, c.harris_k)
        # motion smears the vertex over two pixels; only move for a clear winner
        if (bx, by) == (0, 0) or best < SETTLE_GAIN * max(here, 0.0):
            return []
        nx, ny = tr.x + bx, tr.y + by
        if nx < w or ny < w or nx >= self.width - w or ny >= self.height - w:
            return []
        self.table[tr.y, tr.x] = -1
        if self._lookup(nx, ny) >= 0:
            self.table[tr.y, tr.x] = tr.id
            return []
        tr.template = np.ascontiguousarray(pad[r + by:r + by + 2 * w + 1, r + bx:r + bx + 2 * w + 1])
        tr.x, tr.y = nx, ny
        tr.uv[0] = (float(nx), float(ny))
        self.table[ny, nx] = tr.id
        return []

    def _shift(self, tr, t, h):
        c = self.config
        self.stats.shifts += 1
        tr.reset_votes()
        nx, ny = tr.x + h[0], tr.y + h[1]
        w = c.patch_radius
        if nx < w or ny < w or nx >= self.width - w or ny >= self.height - w:
            self.stats.border += 1
            self._close(tr.id)
            return [(CLOSED_EVENT, tr.id)]
        self.table[tr.y, tr.x] = -1
        if self._lookup(nx, ny) >= 0:
            # moved onto another feature's neighborhood
            self.stats.collisions += 1
            self.table[tr.y, tr.x] = tr.id
            self._close(tr.id)
            return [(CLOSED_EVENT, tr.id)]
        tr.x, tr.y = nx, ny
        self.table[ny, nx] = tr.id
        if t - tr.t[-1] < c.t_min:
            return []
        tr.t.append(t)
        tr.uv.append((float(nx), float(ny)))
        n = len(tr.t)
        if self.sink is not None and n >= c.forward_first and (n - c.forward_first) % c.forward_every == 0:
            self.sink(tr.snapshot())
        return [(UPDATED, tr.id)]

    def _close(self, fid):
        tr = self.trackers.pop(fid)
        if self.table[tr.y, tr.x] == fid:
            self.table[tr.y, tr.x] = -1
        snap = tr.snapshot(CLOSED)
        self.finished.append(snap)
        if self.sink is not None and len(snap) >= self.config.forward_first:
            self.sink(snap)
