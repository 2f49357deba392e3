"""Synthetic color-biased data, tabular CSV ingestion and counterfactual pairs.

The synthetic generator is a seeded stand-in for Colored MNIST: each record is
a noisy copy of one of its class's prototypes concatenated with a color block.
With probability ``bias_ratio`` the color is the class's designated color
(class ``c`` owns color ``c``), otherwise a uniformly drawn other color.
"""

from __future__ import annotations

import csv
import gzip
import hashlib
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .dataset import CounterfactualSet, Dataset
from .exceptions import InputError

logger = logging.getLogger(__name__)

BENCHMARK_RATIOS = (0.995, 0.99, 0.95)
RESERVED_COLUMNS = ("__attr", "__label", "__aligned")


@dataclass(frozen=True)
class SyntheticConfig:
    classes: int = 10
    prototypes_per_class: int = 3
    feature_dim: int = 20
    color_count: int = 10
    color_dim: int | None = None  # None -> color_count (one-hot colors)
    bias_ratio: float = 0.99
    noise_sigma: float = 0.8
    color_strength: float = 1.5
    n_train: int = 6000
    n_test: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.classes < 2:
            raise InputError("need at least two classes")
        if self.color_count < self.classes:
            raise InputError("color_count must be at least the number of classes")
        if self.color_dim is not None and self.color_dim < self.color_count:
            raise InputError("color_dim must be at least color_count")
        if not 0.0 < self.bias_ratio < 1.0:
            raise InputError("bias_ratio must lie in (0, 1)")
        if self.prototypes_per_class < 1 or self.feature_dim < 1:
            raise InputError("prototypes_per_class and feature_dim must be positive")
        if self.noise_sigma < 0 or self.color_strength <= 0:
            raise InputError("noise_sigma must be >= 0 and color_strength > 0")
        if self.n_train < 1 or self.n_test < 0:
            raise InputError("n_train must be positive and n_test non-negative")

    @property
    def block_dim(self) -> int:
        return self.color_dim or self.color_count

    @property
    def color_columns(self) -> tuple[int, ...]:
        return tuple(range(self.feature_dim, self.feature_dim + self.block_dim))


class SyntheticColorData:
    """Fixed geometry (prototypes, color codes) shared by every draw of one config."""

    def __init__(self, config: SyntheticConfig):
        self.config = config
        geo = np.random.default_rng([config.seed, 0])
        self.prototypes = geo.standard_normal(
            (config.classes, config.prototypes_per_class, config.feature_dim)
        )
        k, dim = config.color_count, config.block_dim
        if dim == k:
            codes = np.eye(k)
        else:
            codes = np.linalg.qr(geo.standard_normal((dim, k)))[0].T
        self.color_codes = config.color_strength * codes

    def designated_color(self, labels):
        return np.asarray(labels) % self.config.color_count

    def draw(self, labels, colors, stream: int) -> Dataset:
        cfg = self.config
        rng = np.random.default_rng([cfg.seed, stream])
        labels = np.asarray(labels, dtype=np.int64)
        colors = np.asarray(colors, dtype=np.int64)
        proto = rng.integers(cfg.prototypes_per_class, size=len(labels))
        noise = rng.standard_normal((len(labels), cfg.feature_dim))
        body = self.prototypes[labels, proto] + cfg.noise_sigma * noise
        X = np.hstack([body, self.color_codes[colors]])
        return Dataset(
            X, colors, labels, cfg.classes, cfg.color_count, cfg.color_columns,
            aligned=colors == self.designated_color(labels),
        )

    def recolor(self, data: Dataset, colors) -> Dataset:
        colors = np.asarray(colors, dtype=np.int64)
        X = data.X.copy()
        X[:, list(self.config.color_columns)] = self.color_codes[colors]
        return data.replace(
            X=X, attributes=colors, aligned=colors == self.designated_color(data.labels)
        )


@dataclass(frozen=True)
class Preset:
    """A synthetic benchmark with the head and unlearning settings it was tuned for."""

    synthetic: SyntheticConfig
    l2: float
    k: int
    pairs: int

    def with_(self, **changes) -> "Preset":
        return Preset(replace(self.synthetic, **changes), self.l2, self.k, self.pairs)


PRESETS = {
    # two classes, two colors: the color channel dominates a weak shape signal
    "toy": Preset(
        SyntheticConfig(classes=2, color_count=2, bias_ratio=0.95, noise_sigma=1.2,
                        color_strength=5.0, n_train=500, n_test=1000),
        l2=100.0, k=50, pairs=50,
    ),
    "colored": Preset(SyntheticConfig(), l2=300.0, k=5000, pairs=5000),
}


def preset(name: str, **changes) -> Preset:
    """Named preset, optionally with synthetic fields overridden (e.g. ``bias_ratio``, ``seed``)."""
    if name not in PRESETS:
        raise InputError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
    return PRESETS[name].with_(**changes) if changes else PRESETS[name]


def _other_color(rng, base, count):
    # uniform over the count-1 colors different from base
    shift = rng.integers(1, count, size=len(base))
    return (np.asarray(base) + shift) % count


def gen_synthetic(config: SyntheticConfig) -> tuple[Dataset, Dataset, np.ndarray]:
    """Draw a color-biased training set and a class-by-color balanced test set.

    Returns ``(train, balanced_test, aligned_tags)`` where the tags mark the
    bias-aligned training records.
    """
    gen = SyntheticColorData(config)
    cfg = config
    rng = np.random.default_rng([cfg.seed, 1])
    labels = rng.integers(cfg.classes, size=cfg.n_train)
    aligned = rng.random(cfg.n_train) < cfg.bias_ratio
    designated = gen.designated_color(labels)
    colors = np.where(aligned, designated, _other_color(rng, designated, cfg.color_count))
    train = gen.draw(labels, colors, stream=2)

    cells = cfg.classes * cfg.color_count
    cell = np.arange(cfg.n_test) % cells
    test = gen.draw(cell // cfg.color_count, cell % cfg.color_count, stream=3)
    return train, test, train.aligned.copy()


def sample_biased(config: SyntheticConfig, n: int, stream: int = 0) -> Dataset:
    """Held-out draw from the training distribution (same geometry and bias ratio)."""
    gen = SyntheticColorData(config)
    rng = np.random.default_rng([config.seed, 1000 + int(stream)])
    labels = rng.integers(config.classes, size=int(n))
    designated = gen.designated_color(labels)
    aligned = rng.random(int(n)) < config.bias_ratio
    colors = np.where(aligned, designated, _other_color(rng, designated, config.color_count))
    return gen.draw(labels, colors, stream=2000 + int(stream))


def sample_balanced(config: SyntheticConfig, n: int, stream: int = 0) -> Dataset:
    """Held-out draw cycling through every (class, color) cell."""
    gen = SyntheticColorData(config)
    cell = np.arange(int(n)) % (config.classes * config.color_count)
    return gen.draw(cell // config.color_count, cell % config.color_count, stream=3000 + int(stream))


def make_pairs_recolor(samples: Dataset, config: SyntheticConfig, seed: int = 0) -> CounterfactualSet:
    """Pair each record with a copy carrying a uniformly drawn different color."""
    if config.color_count < 2:
        raise InputError("recoloring needs at least two colors")
    if not samples.attribute_columns:
        raise InputError("samples carry no color block")
    if tuple(samples.attribute_columns) != config.color_columns:
        raise InputError("samples' color block does not match the synthetic config")
    gen = SyntheticColorData(config)
    rng = np.random.default_rng([config.seed, 4, seed])
    new = _other_color(rng, samples.attributes, config.color_count)
    return CounterfactualSet(samples, gen.recolor(samples, new), "synthetic-recolor")


def conflicting_twins(samples: Dataset, config: SyntheticConfig, seed: int = 0) -> dict:
    """Bias-conflicting twin of every record that has one, keyed by row index.

    The twin keeps the record's body and label and takes a color that is
    neither the class's designated color nor the record's own. Conflicting
    records in a two-color setup have no such color and are left out.
    """
    gen = SyntheticColorData(config)
    rng = np.random.default_rng([config.seed, 5, seed])
    designated = gen.designated_color(samples.labels)
    K = config.color_count
    own = samples.attributes
    # draw among colors excluding the designated one, then skip the record's own
    pick = _other_color(rng, designated, K)
    clash = pick == own
    if K > 2 and np.any(clash):
        alt = (designated[clash] + rng.integers(1, K - 1, size=int(clash.sum()))) % K
        alt = np.where(alt == own[clash], (alt + 1) % K, alt)
        alt = np.where(alt == designated[clash], (alt + 1) % K, alt)
        pick[clash] = alt
    ok = (pick != own) & (pick != designated)
    twins = gen.recolor(samples, np.where(ok, pick, own))
    return {int(i): twins[int(i)] for i in np.flatnonzero(ok)}


def external_pairs(config: SyntheticConfig, k: int, seed: int = 0) -> CounterfactualSet:
    """Fresh bias-aligned records from the data distribution, each recolored.

    The records share the training geometry but come from a stream disjoint
    from the training and test draws.
    """
    if k < 1:
        raise InputError("k must be positive")
    gen = SyntheticColorData(config)
    rng = np.random.default_rng([config.seed, 7, seed])
    labels = rng.integers(config.classes, size=int(k))
    base = gen.draw(labels, gen.designated_color(labels), stream=8 + 2 * int(seed))
    return make_pairs_recolor(base, config, seed)


def aligned_pairs(test: Dataset, config: SyntheticConfig, k: int, seed: int = 0) -> CounterfactualSet:
    """Counterfactual set built from bias-aligned test records, recolored."""
    idx = np.flatnonzero(test.aligned)
    if len(idx) == 0:
        raise InputError("no bias-aligned records to pair")
    rng = np.random.default_rng([config.seed, 6, seed])
    idx = rng.permutation(idx)[: int(k)]
    return make_pairs_recolor(test.subset(np.sort(idx)), config, seed)


# -- tabular data -------------------------------------------------------------------------


@dataclass(frozen=True)
class TabularSchema:
    """Column roles and categorical encodings for a CSV file.

    ``encodings`` maps a column name to ``{raw string: code}``. Feature
    columns without an encoding are parsed as floats; with one they are
    one-hot expanded. The attribute and label columns must have an encoding
    unless their values are already integer codes.
    """

    feature_columns: tuple[str, ...]
    attribute_column: str
    label_column: str
    encodings: dict = field(default_factory=dict)
    missing_values: tuple[str, ...] = ("", "?", "NA", "nan")
    standardize: bool = False

    def __post_init__(self):
        cols = list(self.feature_columns) + [self.attribute_column, self.label_column]
        if len(set(cols)) != len(cols):
            raise InputError("feature, attribute and label columns must be disjoint")

    def to_dict(self):
        return asdict(self)


@dataclass
class LoadReport:
    rows_read: int = 0
    rows_kept: int = 0
    rows_dropped_missing: int = 0


def _encode(schema, column, raw, lineno):
    enc = schema.encodings.get(column)
    if enc is not None:
        if raw not in enc:
            raise InputError(f"line {lineno}: unknown category {raw!r} in column {column!r}")
        return int(enc[raw])
    try:
        return int(raw)
    except ValueError:
        raise InputError(f"line {lineno}: column {column!r} needs an integer code, got {raw!r}") from None


def load_csv(path, schema: TabularSchema, report: LoadReport | None = None, columns=None) -> Dataset:
    """Read a CSV file into a :class:`Dataset`.

    The first row is the header unless ``columns`` names the fields of a
    headerless file; lines starting with ``|`` are then treated as comments.
    Rows containing a missing-value marker in a used column are dropped and
    counted in ``report``. Categorical feature columns are one-hot encoded in
    code order.
    """
    report = report if report is not None else LoadReport()
    path = Path(path)
    if not path.exists():
        raise InputError(f"{path}: no such file")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        if columns is not None:
            header = list(columns)
        else:
            try:
                header = [h.strip() for h in next(reader)]
            except StopIteration:
                raise InputError(f"{path}: file is empty") from None
        used = list(schema.feature_columns) + [schema.attribute_column, schema.label_column]
        missing = [c for c in used if c not in header]
        if missing:
            raise InputError(f"{path}: header lacks columns {missing}")
        pos = {c: header.index(c) for c in used}
        blocks = []
        attrs, labels = [], []
        for lineno, row in enumerate(reader, start=2 if columns is None else 1):
            if not row or all(not cell.strip() for cell in row):
                continue
            if columns is not None and row[0].startswith("|"):
                continue
            report.rows_read += 1
            if len(row) != len(header):
                raise InputError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
            cells = {c: row[pos[c]].strip() for c in used}
            if any(v in schema.missing_values for v in cells.values()):
                report.rows_dropped_missing += 1
                continue
            feats = []
            for c in schema.feature_columns:
                enc = schema.encodings.get(c)
                if enc is None:
                    try:
                        feats.append(float(cells[c]))
                    except ValueError:
                        raise InputError(
                            f"{path}: line {lineno}: column {c!r} is not numeric: {cells[c]!r}"
                        ) from None
                else:
                    code = _encode(schema, c, cells[c], lineno)
                    onehot = [0.0] * (max(enc.values()) + 1)
                    onehot[code] = 1.0
                    feats.extend(onehot)
            blocks.append(feats)
            attrs.append(_encode(schema, schema.attribute_column, cells[schema.attribute_column], lineno))
            labels.append(_encode(schema, schema.label_column, cells[schema.label_column], lineno))
    if not blocks:
        raise InputError(f"{path}: no usable rows")
    report.rows_kept = len(blocks)
    if report.rows_dropped_missing:
        logger.info("%s: dropped %d rows with missing values", path, report.rows_dropped_missing)
    X = np.array(blocks, dtype=float)
    if schema.standardize:
        sd = X.std(axis=0)
        X = (X - X.mean(axis=0)) / np.where(sd > 0, sd, 1.0)
    a = np.array(attrs)
    y = np.array(labels)
    n_attr = _cardinality(schema, schema.attribute_column, a)
    n_cls = _cardinality(schema, schema.label_column, y)
    return Dataset(X, a, y, n_cls, n_attr)


ADULT_COLUMNS = (
    "age", "workclass", "fnlwgt", "education", "education-num", "marital-status", "occupation",
    "relationship", "race", "sex", "capital-gain", "capital-loss", "hours-per-week",
    "native-country", "income",
)
ADULT_NUMERIC = ("age", "education-num", "capital-gain", "capital-loss", "hours-per-week")
ADULT_CATEGORICAL = ("workclass", "education", "marital-status", "occupation", "relationship",
                     "race", "native-country")


def _category_codes(paths, column_names, wanted, missing):
    seen = {c: set() for c in wanted}
    pos = {c: column_names.index(c) for c in wanted}
    for path in paths:
        with Path(path).open(newline="") as fh:
            for row in csv.reader(fh):
                if len(row) != len(column_names) or row[0].startswith("|"):
                    continue
                for c in wanted:
                    v = row[pos[c]].strip()
                    if v not in missing:
                        seen[c].add(v)
    return {c: {v: i for i, v in enumerate(sorted(vals))} for c, vals in seen.items()}


def load_adult(train_path, test_path=None, attribute: str = "sex", report: LoadReport | None = None):
    """UCI Adult files as ``(train, test)`` datasets (``test`` is None without a path).

    The protected attribute (``sex`` coded Female=0, Male=1, or ``race`` coded
    White=1, other=0) is kept out of the features. Categorical columns are
    one-hot encoded with codes shared by both files; numeric columns are
    standardized with training statistics. Labels are 1 for income above 50K.
    """
    paths = [p for p in (train_path, test_path) if p is not None]
    for p in paths:
        if not Path(p).exists():
            raise InputError(f"{p}: no such file")
    if attribute not in ("sex", "race"):
        raise InputError("attribute must be 'sex' or 'race'")
    cats = tuple(c for c in ADULT_CATEGORICAL if c != attribute)
    missing = TabularSchema((), "sex", "income").missing_values
    enc = _category_codes(paths, list(ADULT_COLUMNS), cats, missing)
    if attribute == "sex":
        enc["sex"] = {"Female": 0, "Male": 1}
    else:
        races = _category_codes(paths, list(ADULT_COLUMNS), ("race",), missing)["race"]
        enc["race"] = {r: int(r == "White") for r in races}
    enc["income"] = {"<=50K": 0, "<=50K.": 0, ">50K": 1, ">50K.": 1}
    schema = TabularSchema(ADULT_NUMERIC + cats, attribute, "income", enc)
    sets = [load_csv(p, schema, report, columns=ADULT_COLUMNS) for p in paths]
    k = len(ADULT_NUMERIC)
    mu = sets[0].X[:, :k].mean(axis=0)
    sd = sets[0].X[:, :k].std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    out = []
    for d in sets:
        X = d.X.copy()
        X[:, :k] = (X[:, :k] - mu) / sd
        out.append(d.replace(X=X))
    return out[0], (out[1] if len(out) > 1 else None)


def _cardinality(schema, column, codes):
    enc = schema.encodings.get(column)
    top = max(enc.values()) if enc else int(codes.max())
    return max(2, top + 1)


def make_pairs_flip(samples: Dataset, schema: TabularSchema | None = None) -> CounterfactualSet:
    """Exact counterfactual twins with the binary protected attribute flipped."""
    if samples.n_attribute_values != 2 or (len(samples) and samples.attributes.max() > 1):
        raise InputError("attribute flipping needs a binary attribute")
    flipped = samples.replace(attributes=1 - samples.attributes, aligned=None)
    if samples.attribute_columns:
        # attribute also encoded in the features as 0/1 columns
        X = samples.X.copy()
        cols = list(samples.attribute_columns)
        X[:, cols] = 1.0 - X[:, cols]
        flipped = flipped.replace(X=X)
    return CounterfactualSet(samples.replace(aligned=None), flipped, "tabular-flip")


# -- CSV dialect for synthetic exports --------------------------------------------------


def write_dataset_csv(data: Dataset, path) -> str:
    """Write features plus reserved ``__attr``, ``__label``, ``__aligned`` columns.

    Returns the SHA-256 of the written bytes.
    """
    names = [f"x{j}" for j in range(data.n_features)]
    lines = [",".join(names + list(RESERVED_COLUMNS))]
    aligned = data.aligned if data.aligned is not None else np.zeros(len(data), dtype=bool)
    for i in range(len(data)):
        vals = [repr(float(v)) for v in data.X[i]]
        vals += [str(int(data.attributes[i])), str(int(data.labels[i])), str(int(aligned[i]))]
        lines.append(",".join(vals))
    payload = ("\n".join(lines) + "\n").encode()
    Path(path).write_bytes(payload)
    return hashlib.sha256(payload).hexdigest()


def read_dataset_csv(path, n_classes: int, n_attribute_values: int, attribute_columns=()) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise InputError(f"{path}: no such file")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[-3:] != list(RESERVED_COLUMNS):
            raise InputError(f"{path}: missing reserved columns {RESERVED_COLUMNS}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise InputError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                raise InputError(f"{path}: line {lineno}: non-numeric field") from None
    if not rows:
        raise InputError(f"{path}: no rows")
    M = np.array(rows)
    return Dataset(
        M[:, :-3], M[:, -3].astype(np.int64), M[:, -2].astype(np.int64),
        n_classes, n_attribute_values, tuple(attribute_columns), M[:, -1].astype(bool),
    )


# -- optional MNIST ingestion ----------------------------------------------------------------


def read_idx(path) -> np.ndarray:
    """Read an (optionally gzipped) IDX file such as the MNIST distribution files."""

    path = Path(path)
    if not path.exists():
        raise InputError(f"{path}: no such file")
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    if len(raw) < 4 or raw[:2] != b"\x00\x00" or raw[2] != 0x08:
        raise InputError(f"{path}: not an unsigned-byte IDX file")
    ndim = raw[3]
    shape = tuple(int.from_bytes(raw[4 + 4 * i: 8 + 4 * i], "big") for i in range(ndim))
    body = np.frombuffer(raw, dtype=np.uint8, offset=4 + 4 * ndim)
    if body.size != int(np.prod(shape)):
        raise InputError(f"{path}: payload size does not match header {shape}")
    return body.reshape(shape)


def colorize(images, labels, config: SyntheticConfig, stream: int = 0) -> Dataset:
    """Attach a color block to real digit images with the config's bias ratio.

    Pixels are flattened and scaled to [0, 1]; ``config.feature_dim`` and the
    prototype fields are ignored.
    """
    labels = np.asarray(labels, dtype=np.int64)
    X = np.asarray(images, dtype=float).reshape(len(labels), -1) / 255.0
    if labels.max(initial=0) >= config.classes:
        raise InputError("labels exceed the configured class count")
    gen = SyntheticColorData(config)
    rng = np.random.default_rng([config.seed, 9, stream])
    designated = gen.designated_color(labels)
    aligned = rng.random(len(labels)) < config.bias_ratio
    colors = np.where(aligned, designated, _other_color(rng, designated, config.color_count))
    cols = tuple(range(X.shape[1], X.shape[1] + config.block_dim))
    return Dataset(np.hstack([X, gen.color_codes[colors]]), colors, labels, config.classes,
                   config.color_count, cols, aligned=colors == designated)
