"""
Grids, sampled signals, seeded randomness and elementary metrics
"""
from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np


class EndofairError(Exception):
    """Base class for every error raised by the toolkit"""


class InvalidArgumentError(EndofairError, ValueError):
    pass


class GridMismatchError(EndofairError, ValueError):
    pass


class ArityMismatchError(EndofairError, ValueError):
    pass


class NumericalFailure(EndofairError, RuntimeError):
    pass


class TransportNotConverged(NumericalFailure):
    pass


class TrainingDiverged(NumericalFailure):
    """Raised when the loss stops being finite; keeps the last finite state"""

    def __init__(self, message, last_params=None, trace=None):
        super().__init__(message)
        self.last_params = last_params
        self.trace = trace


@dataclass(frozen=True)
class Grid1D:
    """Regular grid of `count` points from `start` to `stop` (both included)"""
    start: float
    stop: float
    count: int

    def __post_init__(self):
        if self.count < 2:
            raise InvalidArgumentError(f"Grid needs at least 2 points, got {self.count}")
        if not self.start < self.stop:
            raise InvalidArgumentError(f"Grid start {self.start} must be below stop {self.stop}")

    @property
    def spacing(self) -> float:
        return (self.stop - self.start) / (self.count - 1)

    @property
    def points(self) -> np.ndarray:
        return np.linspace(self.start, self.stop, self.count)

    @property
    def shape(self) -> Tuple[int]:
        return (self.count,)

    @property
    def size(self) -> int:
        return self.count

    @property
    def ndim(self) -> int:
        return 1

    def shifted(self, offset: float) -> "Grid1D":
        return Grid1D(self.start + offset, self.stop + offset, self.count)


@dataclass(frozen=True)
class Grid2D:
    """Tensor product of two 1D grids; values are flattened row-major (axis1 slowest)"""
    axis1: Grid1D
    axis2: Grid1D

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.axis1.count, self.axis2.count)

    @property
    def size(self) -> int:
        return self.axis1.count * self.axis2.count

    @property
    def ndim(self) -> int:
        return 2

    def mesh(self) -> Tuple[np.ndarray, np.ndarray]:
        """Flattened (x1, x2) coordinates in row-major order"""
        x1, x2 = np.meshgrid(self.axis1.points, self.axis2.points, indexing='ij')
        return x1.ravel(), x2.ravel()

    def shifted(self, offset: float) -> "Grid2D":
        return Grid2D(self.axis1.shifted(offset), self.axis2.shifted(offset))


Grid = Union[Grid1D, Grid2D]


@dataclass(frozen=True, eq=False)
class Field1D:
    grid: Grid1D
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).ravel()
        _check_values(values, self.grid.count)
        values.setflags(write=False)
        object.__setattr__(self, 'values', values)

    def with_values(self, values) -> "Field1D":
        return Field1D(self.grid, values)

    @property
    def image(self) -> np.ndarray:
        return self.values


@dataclass(frozen=True, eq=False)
class Field2D:
    grid: Grid2D
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).ravel()
        _check_values(values, self.grid.size)
        values.setflags(write=False)
        object.__setattr__(self, 'values', values)

    def with_values(self, values) -> "Field2D":
        return Field2D(self.grid, values)

    @property
    def image(self) -> np.ndarray:
        return self.values.reshape(self.grid.shape)


Field = Union[Field1D, Field2D]


def _check_values(values: np.ndarray, expected: int):
    if values.size != expected:
        raise GridMismatchError(f"Field has {values.size} values but its grid has {expected} points")
    if not np.all(np.isfinite(values)):
        raise NumericalFailure("Field values must be finite")


def make_field(grid: Grid, values) -> Field:
    if isinstance(grid, Grid2D):
        return Field2D(grid, values)
    return Field1D(grid, values)


class EmpiricalDistribution:
    """Uniform-weight atoms; two distributions are equal when their sorted atoms are"""

    def __init__(self, atoms):
        atoms = np.asarray(atoms, dtype=np.float64).ravel()
        if atoms.size == 0:
            raise InvalidArgumentError("An empirical distribution needs at least one atom")
        if not np.all(np.isfinite(atoms)):
            raise NumericalFailure("Empirical distribution atoms must be finite")
        self.atoms = atoms

    @property
    def n(self) -> int:
        return self.atoms.size

    @property
    def weights(self) -> np.ndarray:
        return np.full(self.n, 1.0 / self.n)

    def sorted_atoms(self) -> np.ndarray:
        return np.sort(self.atoms)

    def __eq__(self, other):
        if not isinstance(other, EmpiricalDistribution):
            return NotImplemented
        return self.n == other.n and np.array_equal(self.sorted_atoms(), other.sorted_atoms())

    def __repr__(self):
        return f"EmpiricalDistribution(n={self.n})"


class SeededRng:
    """
    Reproducible random stream.

    Uses numpy's PCG64 bit generator seeded through a SeedSequence, so a
    given seed yields the same draws on every platform. `child(index)`
    derives an independent stream for a sub-task (sweep cell, label draw).
    """

    def __init__(self, seed: int, spawn_key: Tuple[int, ...] = ()):
        self.seed = int(seed)
        self.spawn_key = tuple(spawn_key)
        sequence = np.random.SeedSequence(entropy=self.seed, spawn_key=self.spawn_key)
        self.generator = np.random.Generator(np.random.PCG64(sequence))

    def child(self, index: int) -> "SeededRng":
        return SeededRng(self.seed, self.spawn_key + (int(index),))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def choice(self, n: int, size: int) -> np.ndarray:
        return self.generator.choice(n, size=size, replace=False)


def linspace(start: float, stop: float, count: int) -> Grid1D:
    return Grid1D(float(start), float(stop), int(count))


def _require_same_grid(a: Field, b: Field):
    if a.grid != b.grid:
        raise GridMismatchError(f"Fields live on different grids: {a.grid} vs {b.grid}")


def error_norm(a: Field, b: Field) -> float:
    """Sum of squared differences (not its square root)"""
    _require_same_grid(a, b)
    diff = a.values - b.values
    return float(np.dot(diff, diff))


def mse(a: Field, b: Field) -> float:
    return error_norm(a, b) / a.values.size


def empirical(values: Union[Field, np.ndarray]) -> EmpiricalDistribution:
    data = values.values if isinstance(values, (Field1D, Field2D)) else np.asarray(values)
    if data.size == 0:
        raise InvalidArgumentError("Cannot build an empirical distribution from an empty field")
    return EmpiricalDistribution(data)


def field_points(grid: Grid) -> np.ndarray:
    """Coordinates as an (n, d) array in the field's flattening order"""
    if isinstance(grid, Grid2D):
        x1, x2 = grid.mesh()
        return np.column_stack([x1, x2])
    return grid.points[:, None]

