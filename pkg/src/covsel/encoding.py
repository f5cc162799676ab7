"""Test encoding: raw register-value maps to fixed-width numeric vectors.

A pool shares one ordered feature schema. Integer fields pass through as
reals; categorical tokens map to the small-integer codes fixed by the schema.
Standardization is fit on whichever set is currently simulated and applied
to everything scored that round.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

CONSTANT_STD_TOLERANCE = 1e-12


@dataclass(frozen=True)
class FeatureSchema:
    """Ordered feature names plus token->code maps for categorical features."""

    names: tuple[str, ...]
    categories: dict[str, dict[str, int]]

    def __post_init__(self) -> None:
        unknown = set(self.categories) - set(self.names)
        if unknown:
            raise ValueError(f"categorical features not in schema: {sorted(unknown)}")

    @property
    def width(self) -> int:
        return len(self.names)

    def is_categorical(self, name: str) -> bool:
        return name in self.categories


@dataclass(frozen=True)
class RawTest:
    test_id: int
    fields: dict[str, int | str]


@dataclass(frozen=True)
class TestVector:
    __test__ = False  # domain type, not a pytest class

    test_id: int
    values: np.ndarray


def encode(raw: RawTest, schema: FeatureSchema) -> TestVector:
    """Map one raw test onto the schema's fixed-width real vector."""
    if set(raw.fields) != set(schema.names):
        extra = sorted(set(raw.fields) - set(schema.names))
        missing = sorted(set(schema.names) - set(raw.fields))
        raise ValueError(f"test {raw.test_id}: unknown features {extra}, missing {missing}")
    values = np.empty(schema.width)
    for i, name in enumerate(schema.names):
        v = raw.fields[name]
        if schema.is_categorical(name):
            codes = schema.categories[name]
            if v not in codes:
                raise ValueError(f"test {raw.test_id}: unknown token {v!r} for {name}")
            values[i] = float(codes[v])
        else:
            values[i] = float(v)
    return TestVector(test_id=raw.test_id, values=values)


def encode_pool(raws: list[RawTest], schema: FeatureSchema) -> tuple[np.ndarray, np.ndarray]:
    """Encode a whole pool: (test_id array, row-per-test value matrix)."""
    ids = np.array([r.test_id for r in raws], dtype=np.int64)
    matrix = np.empty((len(raws), schema.width))
    for row, raw in enumerate(raws):
        matrix[row] = encode(raw, schema).values
    return ids, matrix


@dataclass(frozen=True)
class Standardizer:
    """Per-column affine transform to zero mean / unit variance.

    Columns whose population std fell below tolerance are flagged constant
    and transform to exactly 0.
    """

    means: np.ndarray
    stds: np.ndarray
    constant_mask: np.ndarray

    def transform(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        if values.shape[-1] != self.means.shape[0]:
            raise ValueError(
                f"width {values.shape[-1]} does not match standardizer width "
                f"{self.means.shape[0]}"
            )
        safe = np.where(self.constant_mask, 1.0, self.stds)
        out = (values - self.means) / safe
        if values.ndim == 1:
            out[self.constant_mask] = 0.0
        else:
            out[:, self.constant_mask] = 0.0
        return out


def fit_standardizer(
    training: np.ndarray | list[TestVector], tolerance: float = CONSTANT_STD_TOLERANCE
) -> Standardizer:
    """Column means and population standard deviations of the training set."""
    if isinstance(training, list):
        if not training:
            raise ValueError("cannot fit a standardizer on an empty set")
        training = np.stack([v.values for v in training])
    training = np.asarray(training, dtype=float)
    if training.ndim != 2 or training.shape[0] < 1:
        raise ValueError("training must be a nonempty 2-D matrix")
    means = training.mean(axis=0)
    stds = training.std(axis=0)  # population, not sample
    return Standardizer(means=means, stds=stds, constant_mask=stds < tolerance)


def standardize(s: Standardizer, v: TestVector) -> TestVector:
    return TestVector(test_id=v.test_id, values=s.transform(v.values))


# ---------------------------------------------------------------- file formats

def write_pool_csv(path, raws: list[RawTest], schema: FeatureSchema) -> None:
    """Pool file: header `test_id,<features>`; categorical tokens quoted."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, quoting=csv.QUOTE_NONNUMERIC)
        writer.writerow(["test_id"] + list(schema.names))
        for raw in raws:
            writer.writerow([raw.test_id] + [raw.fields[n] for n in schema.names])


def read_pool_csv(path, schema: FeatureSchema) -> list[RawTest]:
    raws = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["test_id"] + list(schema.names):
            raise ValueError(f"pool header {header[:4]}... does not match schema")
        for row in reader:
            fields: dict[str, int | str] = {}
            for name, cell in zip(schema.names, row[1:]):
                fields[name] = cell if schema.is_categorical(name) else int(cell)
            raws.append(RawTest(test_id=int(row[0]), fields=fields))
    return raws


def schema_to_json(schema: FeatureSchema) -> str:
    return json.dumps(
        {"features": list(schema.names), "categorical": schema.categories}, indent=2
    )


def schema_from_json(text: str) -> FeatureSchema:
    data = json.loads(text)
    return FeatureSchema(
        names=tuple(data["features"]),
        categories={k: dict(v) for k, v in data["categorical"].items()},
    )
