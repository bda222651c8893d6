"""Datasets: CSV ingestion, normalization, synthetic generators and splitting."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DataError(ValueError):
    """Malformed or unusable input data."""


@dataclass
class Normalizer:
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float
    y_std: float
    constant_columns: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    @classmethod
    def fit(cls, X, y):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        y = np.asarray(y, dtype=float).ravel()
        x_mean = X.mean(axis=0)
        x_std = X.std(axis=0)
        const = x_std == 0
        x_std = np.where(const, 1.0, x_std)
        y_std = float(y.std())
        if y_std == 0:
            y_std = 1.0
        return cls(x_mean, x_std, float(y.mean()), y_std, const)

    @classmethod
    def identity(cls, d):
        return cls(np.zeros(d), np.ones(d), 0.0, 1.0, np.zeros(d, dtype=bool))

    def transform_x(self, X):
        return (np.atleast_2d(np.asarray(X, dtype=float)) - self.x_mean) / self.x_std

    def transform_y(self, y):
        return (np.asarray(y, dtype=float) - self.y_mean) / self.y_std

    def inverse_y(self, y):
        return np.asarray(y, dtype=float) * self.y_std + self.y_mean

    def inverse_var(self, var):
        return np.asarray(var, dtype=float) * self.y_std ** 2

    def to_dict(self):
        return {"x_mean": self.x_mean, "x_std": self.x_std, "y_mean": np.array(self.y_mean),
                "y_std": np.array(self.y_std), "constant_columns": self.constant_columns}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["x_mean"], dtype=float), np.asarray(d["x_std"], dtype=float),
                   float(d["y_mean"]), float(d["y_std"]), np.asarray(d["constant_columns"], dtype=bool))


@dataclass
class Dataset:
    """Raw inputs/targets with normalization statistics computed on them.

    ``extras`` carries generator-side ground truth (noise-free f, true noise std).
    """

    X: np.ndarray
    y: np.ndarray
    normalizer: Normalizer = None
    provenance: str = ""
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.y = np.asarray(self.y, dtype=float).ravel()
        if self.X.shape[0] != self.y.size:
            raise DataError(f"{self.X.shape[0]} input rows but {self.y.size} targets")
        if self.normalizer is None and self.n > 0:
            self.normalizer = Normalizer.fit(self.X, self.y)

    @property
    def n(self):
        return self.y.size

    @property
    def d(self):
        return self.X.shape[1]

    def normalized(self, normalizer=None):
        """(X, y) on the normalized scale, by default using this dataset's own statistics."""
        nz = normalizer or self.normalizer
        return nz.transform_x(self.X), nz.transform_y(self.y)

    def subset(self, idx, provenance=None):
        idx = np.asarray(idx, dtype=int)
        extras = {k: np.asarray(v)[idx] for k, v in self.extras.items()}
        return Dataset(self.X[idx], self.y[idx], None if idx.size == 0 else Normalizer.fit(self.X[idx], self.y[idx]),
                       provenance or self.provenance, extras)


def load_csv(path, target_column=None, delimiter=","):
    """Read a headered numeric CSV. The target defaults to the last column."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        rows = []
        # row numbers count the header as row 1
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: row {lineno} has {len(row)} fields, expected {len(header)}")
            vals = []
            for col, cell in zip(header, row):
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise DataError(f"{path}: row {lineno}, column '{col}': non-numeric value {cell!r}") from None
            rows.append(vals)
    if not rows:
        raise DataError(f"{path}: no data rows")
    data = np.array(rows)
    if target_column is None:
        t = len(header) - 1
    elif isinstance(target_column, str) and target_column in header:
        t = header.index(target_column)
    else:
        try:
            t = int(target_column)
        except (TypeError, ValueError):
            raise DataError(f"{path}: unknown target column {target_column!r}") from None
    X = np.delete(data, t, axis=1)
    return Dataset(X, data[:, t], provenance=str(path))


def write_csv(path, X, y, names=None, target_name="y"):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    names = names or [f"x{i + 1}" for i in range(X.shape[1])]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(names) + [target_name])
        for row, t in zip(X, np.asarray(y, dtype=float)):
            w.writerow([repr(float(v)) for v in row] + [repr(float(t))])


def sinc(x, normalized=False):
    """sin(x)/x with sinc(0) = 1; ``normalized`` uses sin(pi x)/(pi x)."""
    x = np.asarray(x, dtype=float)
    if normalized:
        return np.sinc(x)
    return np.sinc(x / np.pi)


def toy_noise_std(x):
    x = np.asarray(x, dtype=float)
    return 0.05 + 0.2 * (1.0 + np.sin(2.0 * x)) / (1.0 + np.exp(-0.2 * x))


def gen_toy1d(n, seed=0, normalized_sinc=False):
    """y = sinc(x) + eps on [-10, 10] with input-dependent noise std."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(-10.0, 10.0, size=n)
    f = sinc(x, normalized_sinc)
    sd = toy_noise_std(x)
    y = f + sd * rng.standard_normal(n)
    return Dataset(x[:, None], y, provenance=f"toy1d(n={n}, seed={seed})", extras={"f": f, "noise_std": sd})


def toy1d_grid(n=201):
    x = np.linspace(-10.0, 10.0, n)
    return Dataset(x[:, None], sinc(x), provenance=f"toy1d-grid({n})",
                   extras={"f": sinc(x), "noise_std": toy_noise_std(x)})


def _sinc2d_parts(X, normalized_sinc=False):
    z = 0.1 * X[:, 0] * X[:, 1]
    return sinc(z, normalized_sinc), toy_noise_std(z)


def gen_sinc2d(n, seed=0, normalized_sinc=False):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-10.0, 10.0, size=(n, 2))
    f, sd = _sinc2d_parts(X, normalized_sinc)
    y = f + sd * rng.standard_normal(n)
    return Dataset(X, y, provenance=f"sinc2d(n={n}, seed={seed})", extras={"f": f, "noise_std": sd})


def sinc2d_grid(per_side=70, seed=None, normalized_sinc=False):
    """Tensor grid over [-10, 10]^2. With a seed, targets are noisy draws; else noise-free."""
    g = np.linspace(-10.0, 10.0, per_side)
    X = np.array(np.meshgrid(g, g, indexing="ij")).reshape(2, -1).T
    f, sd = _sinc2d_parts(X, normalized_sinc)
    y = f if seed is None else f + sd * np.random.default_rng(seed).standard_normal(f.size)
    return Dataset(X, y, provenance=f"sinc2d-grid({per_side}x{per_side})", extras={"f": f, "noise_std": sd})


def split(dataset, test_fraction=None, test_count=None, seed=0):
    """Seeded uniform split into disjoint (train, test) datasets."""
    n = dataset.n
    if (test_fraction is None) == (test_count is None):
        raise DataError("give exactly one of test_fraction and test_count")
    if test_count is None:
        if not 0 <= test_fraction < 1:
            raise DataError("test_fraction must be in [0, 1)")
        test_count = int(round(test_fraction * n))
    if not 0 <= test_count < n:
        raise DataError(f"test_count {test_count} invalid for {n} points")
    perm = np.random.default_rng(seed).permutation(n)
    test_idx = np.sort(perm[:test_count])
    train_idx = np.sort(perm[test_count:])
    return dataset.subset(train_idx), dataset.subset(test_idx)
