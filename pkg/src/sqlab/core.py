"""Universes, populations, datasets and statistical queries.

Points are stored as numpy arrays: an ``Indexed`` universe holds integer
indices of shape ``(n,)``, ``BitVectors`` hold ``uint8`` rows of shape
``(n, d)`` and ``RealVectors`` hold ``float64`` rows of shape ``(n, d)``.
Queries are vectorised: an evaluable query maps a batch of points to a
batch of values in [0, 1].
"""

from __future__ import annotations

import csv
import functools
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from sqlab.errors import (
    EnumerationTooLarge,
    GaussianNeedsMonteCarlo,
    UniverseMismatch,
    UniverseNotTabulatable,
    ValidationError,
)

# Tabulated queries and PMW weight vectors are dense over the universe.
UNIVERSE_CAP = 2**20
# Above this many points, means are accumulated with math.fsum.
COMPENSATED_SUM_THRESHOLD = 10**6
_MC_CHUNK_ELEMENTS = 2**22

INDEXED = "indexed"
BIT_VECTORS = "bits"
REAL_VECTORS = "real"


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Independent PCG64 stream for ``(seed, *stream)``.

    Streams with different ids are statistically independent, and the same
    ids always reproduce the same stream.
    """
    seq = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.PCG64(seq))


def _as_rng(seed_or_rng) -> np.random.Generator:
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return make_rng(seed_or_rng)


@dataclass(frozen=True)
class Universe:
    kind: str
    dim: int

    def __post_init__(self):
        if self.kind not in (INDEXED, BIT_VECTORS, REAL_VECTORS):
            raise ValidationError(f"unknown universe kind {self.kind!r}")
        if self.dim < 1:
            raise ValidationError("universe size/dimension must be >= 1")

    @classmethod
    def indexed(cls, size: int) -> "Universe":
        return cls(INDEXED, int(size))

    @classmethod
    def bit_vectors(cls, d: int) -> "Universe":
        return cls(BIT_VECTORS, int(d))

    @classmethod
    def real_vectors(cls, d: int) -> "Universe":
        return cls(REAL_VECTORS, int(d))

    @property
    def size(self) -> Optional[int]:
        """Number of points, or None for a continuous universe."""
        if self.kind == INDEXED:
            return self.dim
        if self.kind == BIT_VECTORS:
            return 2**self.dim
        return None

    @property
    def log_size(self) -> float:
        """Natural log of |X|; equals d*ln 2 for bit vectors."""
        if self.kind == INDEXED:
            return math.log(self.dim)
        if self.kind == BIT_VECTORS:
            return self.dim * math.log(2.0)
        raise UniverseNotTabulatable("a real-vector universe has no finite size")

    @property
    def discrete(self) -> bool:
        return self.kind != REAL_VECTORS

    @property
    def tabulatable(self) -> bool:
        return self.discrete and self.size <= UNIVERSE_CAP

    def require_tabulatable(self) -> int:
        if not self.discrete:
            raise UniverseNotTabulatable("real-vector universes cannot be tabulated")
        if self.size > UNIVERSE_CAP:
            raise EnumerationTooLarge(f"|X| = {self.size} exceeds the cap 2^20")
        return self.size

    def check_points(self, points: np.ndarray) -> np.ndarray:
        """Coerce ``points`` to this universe's array layout or raise."""
        if self.kind == INDEXED:
            arr = np.asarray(points)
            if arr.ndim != 1 or not np.issubdtype(arr.dtype, np.integer):
                raise UniverseMismatch("indexed points must be a 1-d integer array")
            if arr.size and (arr.min() < 0 or arr.max() >= self.dim):
                raise UniverseMismatch(f"index outside [0, {self.dim})")
            return arr.astype(np.int64, copy=False)
        arr = np.asarray(points)
        if arr.ndim != 2 or arr.shape[1] != self.dim:
            raise UniverseMismatch(f"expected points of shape (n, {self.dim})")
        if self.kind == BIT_VECTORS:
            if arr.size and not np.isin(arr, (0, 1)).all():
                raise UniverseMismatch("bit-vector coordinates must be 0 or 1")
            return arr.astype(np.uint8, copy=False)
        return arr.astype(np.float64, copy=False)

    def index_of(self, points: np.ndarray) -> np.ndarray:
        """Integer index of each point (bit vectors read big-endian)."""
        if self.kind == INDEXED:
            return np.asarray(points, dtype=np.int64)
        if self.kind == BIT_VECTORS:
            weights = 1 << np.arange(self.dim - 1, -1, -1, dtype=np.int64)
            return np.asarray(points, dtype=np.int64) @ weights
        raise UniverseNotTabulatable("real-vector points have no index")

    def all_points(self) -> np.ndarray:
        """Every point of a tabulatable universe, in index order."""
        size = self.require_tabulatable()
        idx = np.arange(size, dtype=np.int64)
        if self.kind == INDEXED:
            return idx
        shifts = np.arange(self.dim - 1, -1, -1, dtype=np.int64)
        return ((idx[:, None] >> shifts) & 1).astype(np.uint8)


class Query:
    """A [0, 1]-valued function on a universe.

    Either ``table`` (one value per universe index) or ``fn`` (vectorised
    callback) must be given; both may be given, in which case they are
    expected to agree.
    """

    _ids = itertools.count()

    __slots__ = ("id", "table", "fn")

    def __init__(self, table=None, fn: Optional[Callable[[np.ndarray], np.ndarray]] = None, id: Optional[str] = None):
        if table is None and fn is None:
            raise ValidationError("a query needs a value table or a callback")
        if table is not None:
            table = np.asarray(table, dtype=np.float64)
            if table.ndim != 1:
                raise ValidationError("query table must be one-dimensional")
            if table.size and (table.min() < 0.0 or table.max() > 1.0 or np.isnan(table).any()):
                raise ValidationError("query values must lie in [0, 1]")
        self.table = table
        self.fn = fn
        self.id = id if id is not None else f"q{next(Query._ids)}"

    @classmethod
    def tabulated(cls, values, id: Optional[str] = None) -> "Query":
        return cls(table=values, id=id)

    @classmethod
    def evaluable(cls, fn, id: Optional[str] = None) -> "Query":
        return cls(fn=fn, id=id)

    @classmethod
    def constant(cls, c: float, id: Optional[str] = None) -> "Query":
        if not 0.0 <= c <= 1.0:
            raise ValidationError("constant query value must lie in [0, 1]")
        return cls(fn=lambda pts: np.full(len(pts), float(c)), id=id)

    def __repr__(self):
        form = "tabulated" if self.table is not None else "evaluable"
        return f"Query({self.id!r}, {form})"

    def _check_table(self, universe: Universe):
        if universe.size != self.table.size:
            raise UniverseMismatch(
                f"query {self.id} has {self.table.size} values but |X| = {universe.size}")

    def evaluate(self, points: np.ndarray, universe: Universe) -> np.ndarray:
        if self.table is not None and universe.discrete:
            self._check_table(universe)
            return self.table[universe.index_of(points)]
        if self.fn is None:
            raise UniverseMismatch(f"tabulated query {self.id} cannot be evaluated on {universe.kind} points")
        values = np.asarray(self.fn(points), dtype=np.float64)
        if values.shape != (len(points),):
            raise ValidationError(f"query {self.id} returned shape {values.shape}")
        if values.size and (values.min() < 0.0 or values.max() > 1.0):
            raise ValidationError(f"query {self.id} produced values outside [0, 1]")
        return values

    def values_on(self, universe: Universe) -> np.ndarray:
        """Dense value vector over a tabulatable universe."""
        universe.require_tabulatable()
        if self.table is not None:
            self._check_table(universe)
            return self.table
        return self.evaluate(universe.all_points(), universe)

    def tabulate(self, universe: Universe) -> "Query":
        return Query(table=self.values_on(universe), fn=self.fn, id=self.id)


@dataclass(frozen=True, eq=False)
class Dataset:
    universe: Universe
    points: np.ndarray

    def __post_init__(self):
        pts = self.universe.check_points(self.points)
        if len(pts) < 1:
            raise ValidationError("a dataset needs at least one point")
        object.__setattr__(self, "points", pts)

    @property
    def n(self) -> int:
        return len(self.points)

    def __len__(self):
        return self.n

    @functools.cached_property
    def histogram(self) -> np.ndarray:
        """Point multiplicities over a tabulatable universe."""
        size = self.universe.require_tabulatable()
        return np.bincount(self.universe.index_of(self.points), minlength=size)

    def subset(self, indices) -> "Dataset":
        return Dataset(self.universe, self.points[np.asarray(indices)])

    def replace(self, i: int, point) -> "Dataset":
        """Adjacent dataset with element ``i`` replaced by ``point``."""
        pts = self.points.copy()
        pts[i] = point
        return Dataset(self.universe, pts)


@dataclass(frozen=True, eq=False)
class Population:
    """A samplable distribution over a universe.

    Use the constructors :meth:`tabulated`, :meth:`uniform`,
    :meth:`bernoulli_product` and :meth:`gaussian_product`.
    """

    kind: str
    universe: Universe
    params: np.ndarray

    @classmethod
    def tabulated(cls, weights, universe: Optional[Universe] = None) -> "Population":
        w = np.asarray(weights, dtype=np.float64)
        if w.ndim != 1 or w.size == 0:
            raise ValidationError("weights must be a non-empty vector")
        if (w < 0).any() or abs(math.fsum(w) - 1.0) > 1e-12:
            raise ValidationError("weights must be nonnegative and sum to 1 within 1e-12")
        universe = universe or Universe.indexed(w.size)
        if universe.size != w.size:
            raise UniverseMismatch("weight vector length differs from |X|")
        universe.require_tabulatable()
        return cls("tabulated", universe, w)

    @classmethod
    def uniform(cls, universe: Union[Universe, int]) -> "Population":
        if isinstance(universe, int):
            universe = Universe.indexed(universe)
        size = universe.require_tabulatable()
        return cls.tabulated(np.full(size, 1.0 / size), universe)

    @classmethod
    def bernoulli_product(cls, biases) -> "Population":
        b = np.asarray(biases, dtype=np.float64)
        if b.ndim != 1 or b.size == 0 or (b < 0).any() or (b > 1).any():
            raise ValidationError("biases must be a non-empty vector in [0, 1]")
        return cls("bernoulli", Universe.bit_vectors(b.size), b)

    @classmethod
    def gaussian_product(cls, d: int) -> "Population":
        """N(0, 1)^d over R^d."""
        return cls("gaussian", Universe.real_vectors(d), np.zeros(0))

    @property
    def is_uniform(self) -> bool:
        return self.kind == "tabulated" and bool(np.all(self.params == self.params[0]))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "tabulated":
            if self.is_uniform:
                return rng.integers(0, self.params.size, size=n, dtype=np.int64)
            cdf = np.cumsum(self.params)
            cdf /= cdf[-1]
            idx = np.searchsorted(cdf, rng.random(n), side="right")
            return np.minimum(idx, self.params.size - 1).astype(np.int64)
        if self.kind == "bernoulli":
            return (rng.random((n, self.params.size)) < self.params).astype(np.uint8)
        return rng.standard_normal((n, self.universe.dim))

    def point_weights(self) -> np.ndarray:
        """Probability of every universe point, in index order."""
        if self.kind == "tabulated":
            return self.params
        if self.kind == "bernoulli":
            bits = self.universe.all_points()
            return np.prod(np.where(bits == 1, self.params, 1.0 - self.params), axis=1)
        raise GaussianNeedsMonteCarlo("Gaussian populations have no point weights")


def sample_dataset(pop: Population, n: int, seed) -> Dataset:
    """Draw ``n`` i.i.d. points from ``pop``.

    ``seed`` is an integer or a ``numpy.random.Generator``; an integer seed
    makes the result reproducible.
    """
    if n < 1:
        raise ValidationError("n must be >= 1")
    rng = _as_rng(seed)
    return Dataset(pop.universe, pop.sample(int(n), rng))


def _mean(values: np.ndarray) -> float:
    if values.size > COMPENSATED_SUM_THRESHOLD:
        return math.fsum(values) / values.size
    return float(np.mean(values))


def empirical_mean(S: Dataset, q: Query) -> float:
    """Average of ``q`` over the points of ``S``."""
    if q.table is not None and S.universe.tabulatable:
        q._check_table(S.universe)
        weighted = S.histogram * q.table
        total = math.fsum(weighted) if S.n > COMPENSATED_SUM_THRESHOLD else float(weighted.sum())
        return total / S.n
    return _mean(q.evaluate(S.points, S.universe))


def true_expectation(pop: Population, q: Query) -> float:
    """Exact P[q] by weighted summation over the universe."""
    if pop.kind == "gaussian":
        raise GaussianNeedsMonteCarlo("use monte_carlo_expectation for Gaussian populations")
    if pop.universe.size > UNIVERSE_CAP:
        raise EnumerationTooLarge(f"2^{pop.universe.dim} points exceed the enumeration cap 2^20")
    return float(np.dot(pop.point_weights(), q.values_on(pop.universe)))


def monte_carlo_expectation(pop: Population, q: Query, trials: int, seed) -> tuple[float, float]:
    """Estimate P[q] from ``trials`` fresh draws.

    Returns:
      ``(estimate, standard_error)`` where the standard error is the sample
      standard deviation over sqrt(trials).
    """
    if trials < 100:
        raise ValidationError("monte_carlo_expectation needs trials >= 100")
    rng = _as_rng(seed)
    width = pop.universe.dim if pop.universe.kind != INDEXED else 1
    chunk = max(1, _MC_CHUNK_ELEMENTS // width)
    parts = []
    remaining = trials
    while remaining:
        k = min(chunk, remaining)
        parts.append(q.evaluate(pop.sample(k, rng), pop.universe))
        remaining -= k
    values = np.concatenate(parts)
    est = _mean(values)
    se = float(np.std(values, ddof=1)) / math.sqrt(trials)
    return est, se


def default_truncation(d: int, n: int) -> float:
    """Truncation level 4*sqrt(ln(d*n)) for Gaussian linear queries."""
    return 4.0 * math.sqrt(math.log(max(d * n, 2)))


def truncate_rescale(values: np.ndarray, bound: float) -> np.ndarray:
    """Clip to [-bound, bound] and map affinely onto [0, 1]."""
    return np.clip(values, -bound, bound) / (2.0 * bound) + 0.5


def unrescale(value: float, bound: float) -> float:
    """Inverse of the affine part of :func:`truncate_rescale`."""
    return (value - 0.5) * 2.0 * bound


@dataclass
class TranscriptEntry:
    query_id: str
    answer: Optional[float]
    empirical: float
    true_expectation: Optional[float] = None
    note: str = ""

    @property
    def bottom(self) -> bool:
        return self.answer is None


@dataclass
class Transcript:
    """Ordered record of answered queries.

    ``answer`` is None for a sparse-vector Bottom.  ``empirical`` is the
    query's mean on the set that produced the answer.
    """

    max_queries: int
    entries: list = field(default_factory=list)
    halted: bool = False
    halt_reason: str = ""
    rounds_detected: int = 0

    def append(self, entry: TranscriptEntry):
        if self.halted:
            raise ValidationError("transcript is closed")
        if len(self.entries) >= self.max_queries:
            raise ValidationError("transcript is full")
        self.entries.append(entry)

    def halt(self, reason: str):
        self.halted = True
        self.halt_reason = reason

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            write_transcript_csv(self, fh)


def _fmt(x) -> str:
    if x is None:
        return ""
    return format(float(x), ".17g")


def write_transcript_csv(transcript: Transcript, fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["query_id", "answer_or_bottom", "empirical_on_answering_set", "true_expectation",
                "mechanism_state_note"])
    for e in transcript.entries:
        w.writerow([e.query_id, "BOTTOM" if e.answer is None else _fmt(e.answer), _fmt(e.empirical),
                    _fmt(e.true_expectation), e.note])


def write_dataset_csv(S: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if S.universe.kind == INDEXED:
            w.writerows([int(x)] for x in S.points)
        elif S.universe.kind == BIT_VECTORS:
            w.writerows([int(v) for v in row] for row in S.points)
        else:
            w.writerows([_fmt(v) for v in row] for row in S.points)


def read_dataset_csv(universe: Universe, path) -> Dataset:
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if universe.kind == INDEXED:
        if any(len(r) != 1 for r in rows):
            raise UniverseMismatch("indexed datasets have exactly one column")
        pts = np.array([int(r[0]) for r in rows], dtype=np.int64)
    elif universe.kind == BIT_VECTORS:
        pts = np.array([[int(v) for v in r] for r in rows], dtype=np.int64).reshape(len(rows), -1)
    else:
        pts = np.array([[float(v) for v in r] for r in rows], dtype=np.float64).reshape(len(rows), -1)
    return Dataset(universe, pts)


def read_query_csv(universe: Universe, path, id: Optional[str] = None) -> Query:
    """Load a tabulated query from ``index,value`` rows; missing indices are 0."""
    size = universe.require_tabulatable()
    table = np.zeros(size)
    seen = set()
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().lower() == "index":
                continue
            i = int(row[0])
            if not 0 <= i < size:
                raise UniverseMismatch(f"index {i} outside [0, {size})")
            if i in seen:
                raise ValidationError(f"duplicate index {i}")
            seen.add(i)
            table[i] = float(row[1])
    return Query.tabulated(table, id=id)


def write_query_csv(q: Query, universe: Universe, path) -> None:
    values = q.values_on(universe)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "value"])
        w.writerows([i, _fmt(v)] for i, v in enumerate(values))
