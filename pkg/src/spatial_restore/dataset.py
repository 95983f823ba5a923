"""Areal time-to-event data: parsing, outage series, scaling and adjacency."""

from __future__ import annotations

import csv
import io
import math
from collections import deque
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from typing import Iterable, Mapping, Sequence

import numpy as np

REQUIRED_COLUMNS = ("unit_id", "event_time_days", "censored")


class DataError(ValueError):
    """Raised for malformed or invalid input data."""


@dataclass(frozen=True)
class UnitRecord:
    unit_id: str
    event_time: float
    censored: bool
    covariates: tuple[float, ...]


@dataclass(frozen=True)
class CovariateScale:
    offset: float = 0.0
    divisor: float = 1.0
    units: str = ""


@dataclass(frozen=True)
class ScalingMeta:
    """Per-covariate affine transforms ``x -> (x - offset) / divisor``."""

    scales: Mapping[str, CovariateScale] = field(default_factory=dict)

    def get(self, name: str) -> CovariateScale:
        return self.scales.get(name, CovariateScale())

    def apply(self, name: str, x):
        s = self.get(name)
        return (np.asarray(x, dtype=float) - s.offset) / s.divisor

    def invert(self, name: str, x):
        s = self.get(name)
        return np.asarray(x, dtype=float) * s.divisor + s.offset

    def to_dict(self) -> dict:
        return {
            k: {"offset": v.offset, "divisor": v.divisor, "units": v.units}
            for k, v in self.scales.items()
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ScalingMeta":
        return cls({k: CovariateScale(float(v["offset"]), float(v["divisor"]), v.get("units", ""))
                    for k, v in d.items()})


@dataclass(frozen=True)
class Dataset:
    records: tuple[UnitRecord, ...]
    covariate_names: tuple[str, ...]
    scaling: ScalingMeta = field(default_factory=ScalingMeta)

    def __post_init__(self):
        ids = [r.unit_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate unit_id in dataset")
        p = len(self.covariate_names)
        for r in self.records:
            if len(r.covariates) != p:
                raise DataError(f"unit {r.unit_id}: expected {p} covariates, got {len(r.covariates)}")
            if not r.event_time > 0:
                raise DataError(f"unit {r.unit_id}: non-positive event time")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def unit_ids(self) -> list[str]:
        return [r.unit_id for r in self.records]

    @property
    def event_times(self) -> np.ndarray:
        return np.array([r.event_time for r in self.records], dtype=float)

    @property
    def censored(self) -> np.ndarray:
        return np.array([r.censored for r in self.records], dtype=bool)

    def covariate_matrix(self, names: Sequence[str] | None = None) -> np.ndarray:
        X = np.array([r.covariates for r in self.records], dtype=float).reshape(len(self.records), -1)
        if names is None:
            return X
        idx = [self.covariate_index(n) for n in names]
        return X[:, idx]

    def covariate_index(self, name: str) -> int:
        try:
            return self.covariate_names.index(name)
        except ValueError:
            raise DataError(f"unknown covariate {name!r}") from None

    def column(self, name: str) -> np.ndarray:
        if name in ("event_time", "event_time_days"):
            return self.event_times
        return self.covariate_matrix([name])[:, 0]

    def subset(self, unit_ids: Iterable[str]) -> "Dataset":
        keep = set(unit_ids)
        return replace(self, records=tuple(r for r in self.records if r.unit_id in keep))


# --------------------------------------------------------------------------- parsing


def _parse_bool01(text: str, row: int) -> bool:
    t = text.strip()
    if t in ("0", "1"):
        return t == "1"
    raise DataError(f"row {row}: censored must be 0 or 1, got {text!r}")


def parse_dataset(csv_text: str, schema: Sequence[str] | None = None) -> Dataset:
    """Parse ``unit_id,event_time_days,censored,<covariates...>`` CSV text.

    If ``schema`` is None every column after the three required ones is taken
    as a covariate, in file order. Row numbers in error messages count the
    header as row 1.
    """
    reader = csv.reader(io.StringIO(csv_text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise DataError("empty dataset: header row missing") from None
    for col in REQUIRED_COLUMNS:
        if col not in header:
            raise DataError(f"row 1: missing column {col!r}")
    if schema is None:
        schema = [h for h in header if h not in REQUIRED_COLUMNS]
    for col in schema:
        if col not in header:
            raise DataError(f"row 1: missing column {col!r}")
    pos = {h: i for i, h in enumerate(header)}

    records = []
    seen: set[str] = set()
    for rownum, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise DataError(f"row {rownum}: expected {len(header)} fields, got {len(row)}")
        uid = row[pos["unit_id"]].strip()
        if uid in seen:
            raise DataError(f"row {rownum}: duplicate unit_id {uid!r}")
        seen.add(uid)
        try:
            t = float(row[pos["event_time_days"]])
        except ValueError:
            raise DataError(f"row {rownum}: non-numeric event time") from None
        if not (t > 0) or not math.isfinite(t):
            raise DataError(f"row {rownum}: non-positive event time")
        cens = _parse_bool01(row[pos["censored"]], rownum)
        covs = []
        for name in schema:
            cell = row[pos[name]].strip()
            if cell == "":
                raise DataError(f"row {rownum}: missing value for covariate {name!r}")
            try:
                val = float(cell)
            except ValueError:
                raise DataError(f"row {rownum}: non-numeric covariate {name!r}: {cell!r}") from None
            if not math.isfinite(val):
                raise DataError(f"row {rownum}: non-finite covariate {name!r}")
            covs.append(val)
        records.append(UnitRecord(uid, t, cens, tuple(covs)))
    return Dataset(tuple(records), tuple(schema))


def dataset_to_csv(dataset: Dataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(REQUIRED_COLUMNS) + list(dataset.covariate_names))
    for r in dataset.records:
        w.writerow([r.unit_id, repr(float(r.event_time)), int(r.censored)]
                   + [repr(float(c)) for c in r.covariates])
    return buf.getvalue()


# --------------------------------------------------------------------------- outage series


@dataclass(frozen=True)
class OutageSeries:
    unit_id: str
    samples: tuple[tuple[float, float], ...]  # (hours since epoch, percent out)

    def __post_init__(self):
        prev = -math.inf
        for ts, pct in self.samples:
            if not ts > prev:
                raise DataError(f"{self.unit_id}: timestamps must be strictly increasing")
            if not 0.0 <= pct <= 100.0:
                raise DataError(f"{self.unit_id}: pct_out {pct} outside [0, 100]")
            prev = ts


def _hours_since_epoch(stamp: str) -> float:
    dt = datetime.fromisoformat(stamp.strip().replace("Z", "+00:00"))
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp() / 3600.0


def parse_outage_series(csv_text: str) -> dict[str, OutageSeries]:
    """Parse ``unit_id,timestamp_iso8601,pct_out`` rows grouped by unit.

    Rows for one unit may appear in any order; they are sorted by time.
    """
    reader = csv.reader(io.StringIO(csv_text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise DataError("empty outage series file") from None
    expected = ["unit_id", "timestamp_iso8601", "pct_out"]
    if header[:3] != expected:
        raise DataError(f"row 1: expected header {','.join(expected)}")
    raw: dict[str, list[tuple[float, float]]] = {}
    for rownum, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) < 3:
            raise DataError(f"row {rownum}: expected 3 fields")
        try:
            ts = _hours_since_epoch(row[1])
        except ValueError:
            raise DataError(f"row {rownum}: bad timestamp {row[1]!r}") from None
        try:
            pct = float(row[2])
        except ValueError:
            raise DataError(f"row {rownum}: non-numeric pct_out {row[2]!r}") from None
        if not 0.0 <= pct <= 100.0:
            raise DataError(f"row {rownum}: pct_out {pct} outside [0, 100]")
        raw.setdefault(row[0].strip(), []).append((ts, pct))
    out = {}
    for uid, samples in raw.items():
        samples.sort()
        for (a, _), (b, _) in zip(samples, samples[1:]):
            if a == b:
                raise DataError(f"{uid}: duplicate timestamp")
        out[uid] = OutageSeries(uid, tuple(samples))
    return out


def restoration_interval(series: OutageSeries, threshold_pct: float = 20.0):
    """Return ``(days, restored)`` or None when the threshold is never reached.

    Onset is the first sample with ``pct_out >= threshold``. Restoration is the
    earliest sample after onset from which ``pct_out`` stays at or below the
    threshold for the rest of the series. If the series ends above the
    threshold, ``restored`` is False and ``days`` runs to the last sample.
    """
    if not series.samples:
        raise DataError(f"{series.unit_id}: empty outage series")
    ts = [s[0] for s in series.samples]
    pct = [s[1] for s in series.samples]
    onset = next((k for k, p in enumerate(pct) if p >= threshold_pct), None)
    if onset is None:
        return None
    last_above = max((k for k in range(onset, len(pct)) if pct[k] > threshold_pct), default=onset)
    if pct[last_above] > threshold_pct and last_above == len(pct) - 1:
        return (ts[-1] - ts[onset]) / 24.0, False
    end = last_above + 1
    if end >= len(pct):
        return (ts[-1] - ts[onset]) / 24.0, False
    return (ts[end] - ts[onset]) / 24.0, True


def restoration_time_from_series(series: OutageSeries, threshold_pct: float = 20.0) -> float | None:
    """Restoration time in days; None when the unit never reached the threshold."""
    res = restoration_interval(series, threshold_pct)
    return None if res is None else res[0]


# --------------------------------------------------------------------------- scaling


def default_scaling_policy(names: Iterable[str]) -> dict[str, tuple[float, float]]:
    """Income-like columns are expressed in units of $10,000; the rest stay raw."""
    return {n: (0.0, 10000.0) for n in names if "income" in n.lower()}


def scale_covariates(dataset: Dataset, policy: Mapping[str, tuple[float, float]],
                     units: Mapping[str, str] | None = None) -> tuple[Dataset, ScalingMeta]:
    units = units or {}
    scales = dict(dataset.scaling.scales)
    for name, (offset, divisor) in policy.items():
        if name not in dataset.covariate_names:
            raise DataError(f"unknown covariate {name!r} in scaling policy")
        if divisor == 0:
            raise DataError(f"zero divisor for covariate {name!r}")
        if name in scales:
            raise DataError(f"covariate {name!r} is already scaled")
        scales[name] = CovariateScale(float(offset), float(divisor), units.get(name, ""))
    meta = ScalingMeta(scales)
    idx = {n: i for i, n in enumerate(dataset.covariate_names)}
    records = []
    for r in dataset.records:
        covs = list(r.covariates)
        for name, (offset, divisor) in policy.items():
            covs[idx[name]] = (covs[idx[name]] - offset) / divisor
        records.append(replace(r, covariates=tuple(covs)))
    return Dataset(tuple(records), dataset.covariate_names, meta), meta


def unscale_covariates(dataset: Dataset) -> Dataset:
    idx = {n: i for i, n in enumerate(dataset.covariate_names)}
    records = []
    for r in dataset.records:
        covs = list(r.covariates)
        for name, s in dataset.scaling.scales.items():
            covs[idx[name]] = covs[idx[name]] * s.divisor + s.offset
        records.append(replace(r, covariates=tuple(covs)))
    return Dataset(tuple(records), dataset.covariate_names, ScalingMeta())


# --------------------------------------------------------------------------- descriptive statistics


def describe(x) -> dict[str, float]:
    x = np.asarray(x, dtype=float)
    if x.size < 2:
        raise DataError("descriptive statistics need at least 2 records")
    return {
        "mean": float(np.mean(x)),
        "std": float(np.std(x, ddof=1)),
        "min": float(np.min(x)),
        "median": float(np.median(x)),
        "max": float(np.max(x)),
    }


def descriptive_stats(dataset: Dataset) -> dict[str, dict[str, float]]:
    """Mean, sample std, min, median and max for event time and every covariate."""
    if len(dataset) < 2:
        raise DataError("descriptive statistics need at least 2 records")
    out = {"event_time_days": describe(dataset.event_times)}
    X = dataset.covariate_matrix()
    for j, name in enumerate(dataset.covariate_names):
        out[name] = describe(X[:, j])
    return out


def event_time_histogram(dataset: Dataset) -> list[tuple[float, int]]:
    """(days, count) pairs over distinct event times, ascending."""
    vals, counts = np.unique(dataset.event_times, return_counts=True)
    return [(float(v), int(c)) for v, c in zip(vals, counts)]


# --------------------------------------------------------------------------- adjacency


@dataclass(frozen=True)
class AdjacencyGraph:
    unit_ids: tuple[str, ...]
    edges: frozenset[frozenset[str]]

    @property
    def m(self) -> int:
        return len(self.unit_ids)

    @property
    def index(self) -> dict[str, int]:
        return {u: i for i, u in enumerate(self.unit_ids)}

    @property
    def degrees(self) -> dict[str, int]:
        deg = {u: 0 for u in self.unit_ids}
        for e in self.edges:
            for u in e:
                deg[u] += 1
        return deg

    def degree_vector(self) -> np.ndarray:
        deg = self.degrees
        return np.array([deg[u] for u in self.unit_ids], dtype=int)

    def edge_index_pairs(self) -> np.ndarray:
        """(n_edges, 2) array of index pairs with i < j, sorted."""
        idx = self.index
        pairs = sorted(tuple(sorted(idx[u] for u in e)) for e in self.edges)
        return np.array(pairs, dtype=int).reshape(-1, 2)

    def neighbors(self) -> list[list[int]]:
        nb: list[list[int]] = [[] for _ in range(self.m)]
        for i, j in self.edge_index_pairs():
            nb[i].append(int(j))
            nb[j].append(int(i))
        return [sorted(n) for n in nb]

    def adjacency_matrix(self) -> np.ndarray:
        A = np.zeros((self.m, self.m))
        pairs = self.edge_index_pairs()
        if len(pairs):
            A[pairs[:, 0], pairs[:, 1]] = 1.0
            A[pairs[:, 1], pairs[:, 0]] = 1.0
        return A

    def laplacian(self) -> np.ndarray:
        A = self.adjacency_matrix()
        return np.diag(A.sum(axis=1)) - A

    def restrict(self, unit_ids: Sequence[str]) -> "AdjacencyGraph":
        keep = set(unit_ids)
        return AdjacencyGraph(tuple(u for u in self.unit_ids if u in keep),
                              frozenset(e for e in self.edges if e <= keep))


def build_adjacency(unit_ids: Sequence[str], edge_list: Iterable[tuple[str, str]]) -> AdjacencyGraph:
    ids = tuple(unit_ids)
    if len(set(ids)) != len(ids):
        raise DataError("duplicate unit id in adjacency unit list")
    known = set(ids)
    edges = set()
    for a, b in edge_list:
        for u in (a, b):
            if u not in known:
                raise DataError(f"unknown unit id {u!r} in edge ({a}, {b})")
        if a == b:
            raise DataError(f"self-loop on unit {a!r}")
        edges.add(frozenset((a, b)))
    return AdjacencyGraph(ids, frozenset(edges))


def parse_adjacency(csv_text: str, unit_ids: Sequence[str] | None = None) -> AdjacencyGraph:
    """Parse ``unit_id_a,unit_id_b`` rows. Units default to first-seen order."""
    reader = csv.reader(io.StringIO(csv_text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise DataError("empty adjacency file") from None
    if header[:2] != ["unit_id_a", "unit_id_b"]:
        raise DataError("row 1: expected header unit_id_a,unit_id_b")
    pairs = []
    for rownum, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) < 2:
            raise DataError(f"row {rownum}: expected 2 fields")
        pairs.append((row[0].strip(), row[1].strip()))
    if unit_ids is None:
        seen: dict[str, None] = {}
        for a, b in pairs:
            seen.setdefault(a)
            seen.setdefault(b)
        unit_ids = list(seen)
    return build_adjacency(unit_ids, pairs)


def adjacency_to_csv(graph: AdjacencyGraph) -> str:
    lines = ["unit_id_a,unit_id_b"]
    for i, j in graph.edge_index_pairs():
        lines.append(f"{graph.unit_ids[i]},{graph.unit_ids[j]}")
    return "\n".join(lines) + "\n"


def connected_components(graph: AdjacencyGraph) -> tuple[int, list[int]]:
    """Breadth-first component labels, numbered in first-seen unit order."""
    nb = graph.neighbors()
    labels = [-1] * graph.m
    c = 0
    for start in range(graph.m):
        if labels[start] >= 0:
            continue
        labels[start] = c
        queue = deque([start])
        while queue:
            i = queue.popleft()
            for j in nb[i]:
                if labels[j] < 0:
                    labels[j] = c
                    queue.append(j)
        c += 1
    return c, labels


def lattice_adjacency(rows: int, cols: int, prefix: str = "u") -> AdjacencyGraph:
    """Rook-contiguity grid with ids ``{prefix}{r}_{c}`` in row-major order."""
    ids = [f"{prefix}{r}_{c}" for r in range(rows) for c in range(cols)]
    edges = []
    for r in range(rows):
        for c in range(cols):
            if c + 1 < cols:
                edges.append((f"{prefix}{r}_{c}", f"{prefix}{r}_{c + 1}"))
            if r + 1 < rows:
                edges.append((f"{prefix}{r}_{c}", f"{prefix}{r + 1}_{c}"))
    return build_adjacency(ids, edges)


def delaunay_adjacency(points, unit_ids: Sequence[str] | None = None) -> AdjacencyGraph:
    """Contiguity proxy from the Delaunay triangulation of unit centroids."""
    from scipy.spatial import Delaunay

    pts = np.asarray(points, dtype=float)
    if unit_ids is None:
        unit_ids = [f"u{i:02d}" for i in range(len(pts))]
    tri = Delaunay(pts)
    edges = set()
    for simplex in tri.simplices:
        for a in range(3):
            for b in range(a + 1, 3):
                i, j = sorted((int(simplex[a]), int(simplex[b])))
                edges.add((unit_ids[i], unit_ids[j]))
    return build_adjacency(unit_ids, sorted(edges))


def areal_test_graph(n: int = 62, seed: int = 2017) -> AdjacencyGraph:
    """Connected planar graph with ``n`` units, sized like a state's county map."""
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0.0, 1.0, size=(n, 2)) * np.array([1.0, 1.6])
    return delaunay_adjacency(pts)
