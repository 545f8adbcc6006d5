"""Sensor-graph datasets: CSV ingestion, synthetic generation, chronological
splitting, stride-1 windowing, and train-anchored z-score normalization.

Raw readings stay in their original scale inside ``TrafficSeries``; windowed
model inputs are normalized while targets remain raw so losses and metrics
are reported in physical units. Loaded datasets are immutable after
construction and safe to share across threads.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

SECONDS_PER_DAY = 86400
STD_FLOOR = 1e-6


class DataError(ValueError):
    """Malformed input files or dataset parameters."""


@dataclass(frozen=True)
class SensorGraph:
    """Static road-sensor layout: vertex coordinates plus directed edges."""

    n_vertices: int
    coordinates: np.ndarray  # (N, 2)
    edges: list[tuple[int, int]]

    def __post_init__(self):
        coords = np.asarray(self.coordinates, dtype=np.float64)
        if coords.shape != (self.n_vertices, 2):
            raise DataError(f"coordinates must have shape ({self.n_vertices}, 2)")
        if not np.all(np.isfinite(coords)):
            raise DataError("coordinates must be finite")
        object.__setattr__(self, "coordinates", coords)
        for a, b in self.edges:
            if not (0 <= a < self.n_vertices and 0 <= b < self.n_vertices):
                raise DataError(f"edge ({a}, {b}) endpoint out of range")
            if a == b:
                raise DataError(f"self-loop edge ({a}, {b}) not allowed in edge list")


@dataclass(frozen=True)
class NormStats:
    """Per-feature z-score statistics fitted on training-split observations."""

    mean: np.ndarray  # (K,)
    std: np.ndarray  # (K,), floored at STD_FLOOR

    def normalize(self, data: np.ndarray) -> np.ndarray:
        return (data - self.mean) / self.std

    def denormalize(self, data: np.ndarray) -> np.ndarray:
        return data * self.std + self.mean


@dataclass
class TrafficSeries:
    """T x N x K observations with an observation mask and epoch timestamps.

    Masked-out entries hold exactly 0. Timestamps are integer epoch seconds,
    strictly increasing with a constant step. ``norm_stats`` is attached by
    ``split_and_window`` (it depends on the split, not on the raw series).
    """

    data: np.ndarray  # (T, N, K) float64, raw scale
    mask: np.ndarray  # (T, N, K) bool
    timestamps: np.ndarray  # (T,) int64 epoch seconds
    norm_stats: NormStats | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        if self.data.ndim != 3:
            raise DataError("series data must be T x N x K")
        if self.mask.shape != self.data.shape:
            raise DataError("mask shape must match data shape")
        if self.timestamps.shape != (self.data.shape[0],):
            raise DataError("need one timestamp per timestep")
        steps = np.diff(self.timestamps)
        if len(steps) and (np.any(steps <= 0) or len(np.unique(steps)) != 1):
            raise DataError("timestamps must be strictly increasing with a constant step")
        if not np.all(np.isfinite(self.data)):
            raise DataError("series data must be finite")
        if np.any(self.data[~self.mask] != 0.0):
            raise DataError("masked-out entries must hold 0")

    @property
    def n_steps(self) -> int:
        return self.data.shape[0]

    @property
    def n_vertices(self) -> int:
        return self.data.shape[1]

    @property
    def n_features(self) -> int:
        return self.data.shape[2]

    def time_of_day(self) -> np.ndarray:
        """Fraction of day in [0, 1) for each timestep."""
        return (self.timestamps % SECONDS_PER_DAY) / float(SECONDS_PER_DAY)

    def slice(self, start: int, stop: int) -> "TrafficSeries":
        return TrafficSeries(
            data=self.data[start:stop].copy(),
            mask=self.mask[start:stop].copy(),
            timestamps=self.timestamps[start:stop].copy(),
        )


@dataclass(frozen=True)
class WindowedSample:
    """One training example: P input steps and the Q following target steps.

    ``input`` is (P, N, 2K+1): the K normalized features (0 where missing),
    one time-of-day channel, then K mask channels as floats. ``target`` is
    (Q, N, K) in raw scale with ``target_mask`` marking observed entries and
    ``target_times`` the epoch timestamps of the Q target steps.
    """

    input: np.ndarray
    target: np.ndarray
    target_mask: np.ndarray
    target_times: np.ndarray


@dataclass(frozen=True)
class WindowedSplits:
    """Chronological train/val/test windows plus the stats that scaled them."""

    train: list[WindowedSample]
    val: list[WindowedSample]
    test: list[WindowedSample]
    stats: NormStats
    split_sizes: tuple[int, int, int]
    p: int
    q: int


def input_channels(n_features: int) -> int:
    """Width of WindowedSample.input's last axis for K raw features."""
    return 2 * n_features + 1


def _parse_timestamp(raw: str, line_no: int) -> int:
    try:
        dt = datetime.fromisoformat(raw.strip())
    except ValueError:
        raise DataError(f"line {line_no}: unparseable timestamp {raw!r}") from None
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def load_series(
    series_file,
    locations_file,
    edges_file=None,
    zero_is_missing: bool = True,
) -> tuple[SensorGraph, TrafficSeries]:
    """Read a timestamped readings CSV plus sensor locations (and edges).

    The series CSV has an ISO-8601 timestamp first column and one column per
    sensor id; its column order defines vertex indexing. The locations CSV
    has columns sensor_id, x, y and must cover exactly the same ids. The
    optional edges CSV has columns from_id, to_id. Empty cells are missing;
    readings equal to 0 are missing too unless ``zero_is_missing`` is off.
    """
    with open(series_file, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise DataError("series file needs a header row and at least one data row")
    header = [c.strip() for c in rows[0]]
    sensor_ids = header[1:]
    if len(sensor_ids) != len(set(sensor_ids)) or not sensor_ids:
        raise DataError("series header must list unique sensor ids after the timestamp")
    n = len(sensor_ids)

    timestamps = np.empty(len(rows) - 1, dtype=np.int64)
    values = np.zeros((len(rows) - 1, n, 1), dtype=np.float64)
    mask = np.zeros((len(rows) - 1, n, 1), dtype=bool)
    for t, row in enumerate(rows[1:], start=2):
        if len(row) != n + 1:
            raise DataError(f"line {t}: expected {n + 1} columns, found {len(row)}")
        timestamps[t - 2] = _parse_timestamp(row[0], t)
        for j, cell in enumerate(row[1:]):
            cell = cell.strip()
            if cell == "":
                continue
            try:
                v = float(cell)
            except ValueError:
                raise DataError(f"line {t}: unparseable reading {cell!r}") from None
            if zero_is_missing and v == 0.0:
                continue
            values[t - 2, j, 0] = v
            mask[t - 2, j, 0] = True

    with open(locations_file, newline="") as fh:
        loc_reader = csv.DictReader(fh)
        loc_map: dict[str, tuple[float, float]] = {}
        for row in loc_reader:
            try:
                loc_map[row["sensor_id"].strip()] = (float(row["x"]), float(row["y"]))
            except (KeyError, TypeError, ValueError) as exc:
                raise DataError(f"locations file: bad row {row!r} ({exc})") from None
    if set(loc_map) != set(sensor_ids):
        missing = set(sensor_ids) - set(loc_map)
        extra = set(loc_map) - set(sensor_ids)
        raise DataError(
            f"sensor ids differ between series and locations "
            f"(missing: {sorted(missing)}, extra: {sorted(extra)})"
        )
    coords = np.array([loc_map[s] for s in sensor_ids], dtype=np.float64)

    edges: list[tuple[int, int]] = []
    if edges_file is not None:
        index = {s: i for i, s in enumerate(sensor_ids)}
        with open(edges_file, newline="") as fh:
            for row in csv.DictReader(fh):
                try:
                    a, b = row["from_id"].strip(), row["to_id"].strip()
                except (KeyError, AttributeError):
                    raise DataError(f"edges file: bad row {row!r}") from None
                if a not in index or b not in index:
                    raise DataError(f"edges file: unknown sensor id in row {row!r}")
                if a != b:
                    edges.append((index[a], index[b]))

    graph = SensorGraph(n_vertices=n, coordinates=coords, edges=edges)
    series = TrafficSeries(data=values, mask=mask, timestamps=timestamps)
    return graph, series


def write_csv_dataset(graph: SensorGraph, series: TrafficSeries, out_dir) -> dict:
    """Write series/locations/edges CSVs readable by ``load_series``.

    Missing readings become empty cells. Values round-trip exactly through
    their text form. Only single-feature series map onto this format.
    """
    if series.n_features != 1:
        raise DataError("the CSV dataset format holds one reading per sensor")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ids = [f"s{i:03d}" for i in range(graph.n_vertices)]
    paths = {
        "series": out / "series.csv",
        "locations": out / "locations.csv",
        "edges": out / "edges.csv",
    }

    with open(paths["series"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp"] + ids)
        for t in range(series.n_steps):
            stamp = datetime.fromtimestamp(
                int(series.timestamps[t]), tz=timezone.utc
            ).isoformat(sep=" ")
            row = [stamp] + [
                repr(float(series.data[t, v, 0])) if series.mask[t, v, 0] else ""
                for v in range(graph.n_vertices)
            ]
            writer.writerow(row)

    with open(paths["locations"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sensor_id", "x", "y"])
        for i, s in enumerate(ids):
            writer.writerow([s, repr(float(graph.coordinates[i, 0])), repr(float(graph.coordinates[i, 1]))])

    with open(paths["edges"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["from_id", "to_id"])
        for a, b in graph.edges:
            writer.writerow([ids[a], ids[b]])
    return paths


def split_sizes(t: int, ratios: tuple[float, float, float]) -> tuple[int, int, int]:
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise DataError(f"ratios must be three non-negative values summing to 1, got {ratios}")
    n_train = int(math.floor(t * ratios[0]))
    n_val = int(math.floor(t * ratios[1]))
    return n_train, n_val, t - n_train - n_val


def fit_norm_stats(data: np.ndarray, mask: np.ndarray) -> NormStats:
    """Per-feature mean/std over observed entries, std floored at 1e-6."""
    k = data.shape[2]
    mean = np.zeros(k)
    std = np.full(k, STD_FLOOR)
    for f in range(k):
        vals = data[:, :, f][mask[:, :, f]]
        if vals.size:
            mean[f] = vals.mean()
            std[f] = max(float(vals.std()), STD_FLOOR)
    return NormStats(mean=mean, std=std)


def _window_split(
    data: np.ndarray,
    mask: np.ndarray,
    tod: np.ndarray,
    times: np.ndarray,
    stats: NormStats,
    p: int,
    q: int,
) -> list[WindowedSample]:
    length, n, k = data.shape
    normalized = stats.normalize(data)
    normalized[~mask] = 0.0  # zero-fill missing inputs after scaling
    maskf = mask.astype(np.float64)
    tod_channel = np.broadcast_to(tod[:, None, None], (length, n, 1))
    channels = np.concatenate([normalized, tod_channel, maskf], axis=2)

    samples = []
    for w in range(length - (p + q) + 1):
        samples.append(
            WindowedSample(
                input=np.ascontiguousarray(channels[w : w + p]),
                target=data[w + p : w + p + q].copy(),
                target_mask=mask[w + p : w + p + q].copy(),
                target_times=times[w + p : w + p + q].copy(),
            )
        )
    return samples


def split_and_window(
    series: TrafficSeries,
    p: int = 12,
    q: int = 12,
    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2),
    stats: NormStats | None = None,
) -> WindowedSplits:
    """Chronological split, then stride-1 windows that stay inside each split.

    Normalization statistics come from the training split's observed entries
    alone and scale the inputs of every split; targets stay raw. Passing
    ``stats`` skips the fit and scales with the given statistics instead
    (evaluating one dataset under another's trained model). The training
    split must fit at least one window; validation and test splits shorter
    than p+q simply yield no windows.
    """
    if p < 1 or q < 1:
        raise DataError("window lengths p and q must be positive")
    n_train, n_val, n_test = split_sizes(series.n_steps, ratios)
    if n_train < p + q:
        raise DataError(
            f"series too short: training split has {n_train} steps, "
            f"needs at least {p + q}"
        )

    if stats is None:
        stats = fit_norm_stats(series.data[:n_train], series.mask[:n_train])
    series.norm_stats = stats
    tod = series.time_of_day()

    bounds = [(0, n_train), (n_train, n_train + n_val), (n_train + n_val, series.n_steps)]
    parts = [
        _window_split(
            series.data[a:b],
            series.mask[a:b],
            tod[a:b],
            series.timestamps[a:b],
            stats,
            p,
            q,
        )
        for a, b in bounds
    ]
    return WindowedSplits(
        train=parts[0],
        val=parts[1],
        test=parts[2],
        stats=stats,
        split_sizes=(n_train, n_val, n_test),
        p=p,
        q=q,
    )


@dataclass(frozen=True)
class ShockRecord:
    """One planted congestion event and where/when it propagates."""

    origin: int
    start: int
    magnitude: float
    duration: int
    spread: list[tuple[int, int]] = field(default_factory=list)  # (neighbor, delay)


def _random_road_layout(n: int, rng: np.random.Generator):
    coords = rng.uniform(0.0, 10.0, size=(n, 2))
    undirected: set[tuple[int, int]] = set()
    for i in range(1, n):
        d = np.linalg.norm(coords[:i] - coords[i], axis=1)
        j = int(np.argmin(d))
        undirected.add((min(i, j), max(i, j)))
    # a few chords between close non-tree pairs keep the layout road-like
    extra = max(1, n // 3)
    dist = np.linalg.norm(coords[:, None, :] - coords[None, :, :], axis=2)
    order = np.argsort(dist, axis=None)
    for flat in order:
        if extra == 0:
            break
        i, j = divmod(int(flat), n)
        if i >= j:
            continue
        if (i, j) not in undirected:
            undirected.add((i, j))
            extra -= 1
    edges = []
    for i, j in sorted(undirected):
        edges.append((i, j))
        edges.append((j, i))
    return coords, edges


def generate_synthetic(
    n: int,
    t: int,
    seed: int,
    missing_ratio: float = 0.05,
    shock_rate: float = 1.0 / 160.0,
    noise_std: float = 1.5,
) -> tuple[SensorGraph, TrafficSeries, list[ShockRecord]]:
    """Simulate a small road network's speeds at 5-minute resolution.

    Per sensor the speed is a free-flow base, a shared daily sinusoid, a
    slow AR(1) drift, planted congestion shocks (each spreading to graph
    neighbors after a 1-3 step per-edge delay), and observation noise.
    ``shock_rate`` is the per-sensor, per-step probability of starting a
    shock. Returns the graph, the series, and the list of planted shocks
    so tests can verify the propagation structure. Deterministic in
    ``seed``: identical arguments give bit-identical output.
    """
    if n < 4:
        raise DataError("synthetic generator needs n >= 4")
    if t < 200:
        raise DataError("synthetic generator needs t >= 200")
    if not 0.0 <= missing_ratio < 1.0:
        raise DataError("missing_ratio must be in [0, 1)")

    rng = np.random.default_rng(seed)
    coords, edges = _random_road_layout(n, rng)
    neighbors: dict[int, list[int]] = {i: [] for i in range(n)}
    for a, b in edges:
        if b not in neighbors[a]:
            neighbors[a].append(b)

    base = rng.uniform(52.0, 64.0, size=n)
    phase = rng.uniform(-0.3, 0.3, size=n)

    start_epoch = 1_700_000_000 - (1_700_000_000 % 300)
    timestamps = start_epoch + 300 * np.arange(t, dtype=np.int64)
    tod = (timestamps % SECONDS_PER_DAY) / float(SECONDS_PER_DAY)

    speed = np.empty((t, n))
    speed[:] = base[None, :]
    speed += 9.0 * np.sin(2.0 * np.pi * tod[:, None] + phase[None, :])

    drift = np.zeros(n)
    for step in range(t):
        drift = 0.985 * drift + rng.normal(0.0, 0.7, size=n)
        speed[step] += drift

    def apply_dip(vertex: int, start: int, magnitude: float, duration: int):
        for dt in range(duration):
            step = start + dt
            if step >= t:
                break
            # sharp onset, linear recovery
            speed[step, vertex] -= magnitude * (1.0 - dt / duration)

    trace: list[ShockRecord] = []
    hits = rng.uniform(size=(t, n)) < shock_rate
    for step, origin in zip(*np.nonzero(hits)):
        step, origin = int(step), int(origin)
        magnitude = float(rng.uniform(14.0, 28.0))
        duration = int(rng.integers(8, 20))
        spread = []
        apply_dip(origin, step, magnitude, duration)
        for nb in neighbors[origin]:
            delay = int(rng.integers(1, 4))
            apply_dip(nb, step + delay, 0.6 * magnitude, duration)
            spread.append((nb, delay))
        trace.append(
            ShockRecord(
                origin=origin,
                start=step,
                magnitude=magnitude,
                duration=duration,
                spread=spread,
            )
        )

    speed += rng.normal(0.0, noise_std, size=(t, n))
    np.clip(speed, 1.0, 90.0, out=speed)

    mask = rng.uniform(size=(t, n, 1)) >= missing_ratio
    data = speed[:, :, None] * mask

    graph = SensorGraph(n_vertices=n, coordinates=coords, edges=edges)
    series = TrafficSeries(data=data, mask=mask, timestamps=timestamps)
    return graph, series, trace
