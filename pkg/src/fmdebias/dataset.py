"""Array-backed containers for labeled records and counterfactual pairs."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .exceptions import InputError

PROVENANCES = ("synthetic-recolor", "tabular-flip", "matched")


@dataclass(frozen=True)
class Sample:
    """One labeled record: feature vector, protected attribute code, class label."""

    features: np.ndarray
    attribute: int
    label: int


@dataclass
class Dataset:
    """A set of samples stored column-wise.

    ``attribute_columns`` lists the feature columns that encode the protected
    attribute (for example the color block of the synthetic data); it is empty
    when the attribute lives only in ``attributes``.
    """

    X: np.ndarray
    attributes: np.ndarray
    labels: np.ndarray
    n_classes: int
    n_attribute_values: int
    attribute_columns: tuple[int, ...] = ()
    aligned: np.ndarray | None = None

    def __post_init__(self):
        self.X = np.ascontiguousarray(np.asarray(self.X, dtype=float))
        if self.X.ndim != 2:
            raise InputError(f"features must be a 2-d array, got shape {self.X.shape}")
        self.attributes = np.asarray(self.attributes, dtype=np.int64).reshape(-1)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        n = self.X.shape[0]
        if self.attributes.shape[0] != n or self.labels.shape[0] != n:
            raise InputError(
                f"length mismatch: {n} feature rows, {self.attributes.shape[0]} attributes, "
                f"{self.labels.shape[0]} labels"
            )
        self.n_classes = int(self.n_classes)
        self.n_attribute_values = int(self.n_attribute_values)
        if self.n_classes < 2:
            raise InputError("at least two classes are required")
        if n:
            if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
                raise InputError(f"labels must lie in [0, {self.n_classes})")
            if self.attributes.min() < 0 or self.attributes.max() >= self.n_attribute_values:
                raise InputError(f"attribute codes must lie in [0, {self.n_attribute_values})")
        self.attribute_columns = tuple(int(c) for c in self.attribute_columns)
        if any(c < 0 or c >= self.X.shape[1] for c in self.attribute_columns):
            raise InputError("attribute column index out of range")
        if self.aligned is not None:
            self.aligned = np.asarray(self.aligned, dtype=bool).reshape(-1)
            if self.aligned.shape[0] != n:
                raise InputError("alignment tags must have one entry per sample")

    def __len__(self):
        return self.X.shape[0]

    def __getitem__(self, i) -> Sample:
        return Sample(self.X[i].copy(), int(self.attributes[i]), int(self.labels[i]))

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices)
        if idx.dtype != bool:
            idx = idx.astype(np.intp)
        return Dataset(
            self.X[idx],
            self.attributes[idx],
            self.labels[idx],
            self.n_classes,
            self.n_attribute_values,
            self.attribute_columns,
            None if self.aligned is None else self.aligned[idx],
        )

    def replace(self, **changes) -> "Dataset":
        fields = dict(
            X=self.X,
            attributes=self.attributes,
            labels=self.labels,
            n_classes=self.n_classes,
            n_attribute_values=self.n_attribute_values,
            attribute_columns=self.attribute_columns,
            aligned=self.aligned,
        )
        fields.update(changes)
        return Dataset(**fields)

    @classmethod
    def from_samples(
        cls,
        samples: Iterable[Sample],
        n_classes: int | None = None,
        n_attribute_values: int | None = None,
        attribute_columns: Sequence[int] = (),
    ) -> "Dataset":
        samples = list(samples)
        if not samples:
            raise InputError("dataset is empty")
        widths = {np.asarray(s.features).shape for s in samples}
        if len(widths) != 1:
            raise InputError(f"inconsistent feature shapes: {sorted(widths)}")
        X = np.stack([np.asarray(s.features, dtype=float) for s in samples])
        a = np.array([s.attribute for s in samples])
        y = np.array([s.label for s in samples])
        return cls(
            X,
            a,
            y,
            n_classes if n_classes is not None else max(2, int(y.max()) + 1),
            n_attribute_values if n_attribute_values is not None else max(2, int(a.max()) + 1),
            tuple(attribute_columns),
        )


def as_dataset(data) -> Dataset:
    """Accept a :class:`Dataset` or a sequence of :class:`Sample`."""
    if isinstance(data, Dataset):
        return data
    return Dataset.from_samples(data)


@dataclass(frozen=True)
class CounterfactualPair:
    factual: Sample
    counterfactual: Sample


@dataclass
class CounterfactualSet:
    """Factual samples and their attribute-altered twins, row-aligned.

    ``approximate`` marks pairs whose non-attribute features are not exactly
    shared (matched pairs); flip and recolor constructions are exact.
    """

    factual: Dataset
    counterfactual: Dataset
    provenance: str = "matched"
    approximate: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise InputError(f"unknown provenance {self.provenance!r}")
        if len(self.factual) == 0:
            raise InputError("counterfactual set is empty")
        if len(self.factual) != len(self.counterfactual):
            raise InputError("factual and counterfactual sides differ in length")
        if self.factual.n_features != self.counterfactual.n_features:
            raise InputError("factual and counterfactual sides differ in feature width")
        if not np.array_equal(self.factual.labels, self.counterfactual.labels):
            raise InputError("paired samples must share their label")

    def __len__(self):
        return len(self.factual)

    def __getitem__(self, i) -> CounterfactualPair:
        return CounterfactualPair(self.factual[i], self.counterfactual[i])

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def head(self, k: int) -> "CounterfactualSet":
        idx = np.arange(min(int(k), len(self)))
        return self.take(idx)

    def take(self, indices) -> "CounterfactualSet":
        return CounterfactualSet(
            self.factual.subset(indices),
            self.counterfactual.subset(indices),
            self.provenance,
            self.approximate,
            dict(self.meta),
        )

    def swapped(self) -> "CounterfactualSet":
        return CounterfactualSet(
            self.counterfactual, self.factual, self.provenance, self.approximate, dict(self.meta)
        )

    @classmethod
    def from_pairs(cls, pairs: Iterable[CounterfactualPair], provenance="matched", **kwargs):
        pairs = list(pairs)
        if not pairs:
            raise InputError("counterfactual set is empty")
        members = [p.factual for p in pairs] + [p.counterfactual for p in pairs]
        kwargs.setdefault("n_classes", max(2, max(s.label for s in members) + 1))
        kwargs.setdefault("n_attribute_values", max(2, max(s.attribute for s in members) + 1))
        fac =Dataset.from_samples([p.factual for p in pairs], **kwargs)
        cf = Dataset.from_samples([p.counterfactual for p in pairs], **kwargs)
        return cls(fac, cf, provenance)
