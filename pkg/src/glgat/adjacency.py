"""Adjacency matrices from sensor behavior and road connectivity.

The event route turns each vertex's series into divider crossings (sharp
rises and drops through the midpoint of its observed range), then scores
vertex pairs by how often their crossings co-occur within a small time
window. High scores mean one sensor's regime changes reliably accompany
the other's, exactly the lead/lag structure attention should exploit.

All emitted matrices have entries in [0, 1] and a unit diagonal so every
attention row has at least itself to attend to.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import TrafficSeries


@dataclass(frozen=True)
class EventLog:
    """Per-vertex sorted crossing timesteps plus the divider that defined them.

    ``flagged`` lists vertices with fewer than two observed readings; their
    event lists are empty and their divider defaults to 0.
    """

    up_events: list[np.ndarray]
    down_events: list[np.ndarray]
    divider: np.ndarray  # (N,)
    flagged: list[int] = field(default_factory=list)

    def __post_init__(self):
        for lists in (self.up_events, self.down_events):
            for ev in lists:
                if len(ev) > 1 and np.any(np.diff(ev) <= 0):
                    raise ValueError("event lists must be strictly increasing")
        if not np.all(np.isfinite(self.divider)):
            raise ValueError("dividers must be finite")

    @property
    def n_vertices(self) -> int:
        return len(self.up_events)


@dataclass(frozen=True)
class AdjacencySet:
    """Named stack of N x N matrices feeding the multi-adjacency attention."""

    matrices: list[np.ndarray]
    labels: list[str]

    def __post_init__(self):
        if not self.matrices or len(self.matrices) != len(self.labels):
            raise ValueError("need at least one matrix and one label per matrix")
        n = self.matrices[0].shape[0]
        for mat, label in zip(self.matrices, self.labels):
            if mat.shape != (n, n):
                raise ValueError(f"matrix {label!r} is not {n} x {n}")
            if np.any(mat < 0.0) or np.any(mat > 1.0):
                raise ValueError(f"matrix {label!r} has entries outside [0, 1]")
            if np.any(np.diagonal(mat) != 1.0):
                raise ValueError(f"matrix {label!r} lacks a unit diagonal")

    @property
    def n_vertices(self) -> int:
        return self.matrices[0].shape[0]

    @property
    def stacked(self) -> np.ndarray:
        """(H_adj, N, N) view for layer consumption."""
        return np.stack(self.matrices, axis=0)


def detect_events(series: TrafficSeries, feature: int = 0) -> EventLog:
    """Find divider crossings per vertex on one feature of a training series.

    The divider is the midpoint of the observed range. An up-event fires at
    t when the reading rises from strictly below the divider to at or above
    it; a down-event mirrors that for drops. Both readings of the pair must
    be observed, so crossings hidden by missing data produce no event.
    """
    if not 0 <= feature < series.n_features:
        raise ValueError(f"feature index {feature} out of range")
    n = series.n_vertices
    up_events: list[np.ndarray] = []
    down_events: list[np.ndarray] = []
    divider = np.zeros(n)
    flagged: list[int] = []
    for i in range(n):
        x = series.data[:, i, feature]
        obs = series.mask[:, i, feature]
        vals = x[obs]
        if vals.size:
            divider[i] = 0.5 * (vals.max() + vals.min())
        if vals.size < 2:
            flagged.append(i)
            up_events.append(np.empty(0, dtype=np.int64))
            down_events.append(np.empty(0, dtype=np.int64))
            continue
        d = divider[i]
        pair = obs[:-1] & obs[1:]
        up = pair & (x[:-1] < d) & (x[1:] >= d)
        down = pair & (x[:-1] > d) & (x[1:] <= d)
        up_events.append(np.nonzero(up)[0].astype(np.int64) + 1)
        down_events.append(np.nonzero(down)[0].astype(np.int64) + 1)
    return EventLog(
        up_events=up_events, down_events=down_events, divider=divider, flagged=flagged
    )


def _co_occurrence(events: list[np.ndarray], t_p: int, t_q: int) -> np.ndarray:
    """score[i, j] = fraction of i's events with a j event in [t-t_p, t+t_q]."""
    n = len(events)
    score = np.zeros((n, n))
    for i in range(n):
        ev_i = events[i]
        if ev_i.size == 0:
            continue
        for j in range(n):
            ev_j = events[j]
            if ev_j.size == 0:
                continue
            lo = np.searchsorted(ev_j, ev_i - t_p, side="left")
            hi = np.searchsorted(ev_j, ev_i + t_q, side="right")
            score[i, j] = np.count_nonzero(lo < hi) / ev_i.size
    np.clip(score, 0.0, 1.0, out=score)
    np.fill_diagonal(score, 1.0)
    return score


def build_event_adjacency(
    log: EventLog, t_p: int = 6, t_q: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Co-occurrence matrices for up- and down-events.

    Row i scores each j by the fraction of i's events whose window
    [t - t_p, t + t_q] contains at least one j event. Vertices without
    events score 0 off-diagonal; every diagonal is forced to 1.
    """
    if t_p < 0 or t_q < 0:
        raise ValueError("t_p and t_q must be non-negative")
    return (
        _co_occurrence(log.up_events, t_p, t_q),
        _co_occurrence(log.down_events, t_p, t_q),
    )


def build_connectivity_adjacency(graph) -> np.ndarray:
    """Binary matrix: 1 where a road connects i to j (or i = j), else 0."""
    n = graph.n_vertices
    adj = np.zeros((n, n))
    for a, b in graph.edges:
        adj[a, b] = 1.0
    np.fill_diagonal(adj, 1.0)
    return adj
