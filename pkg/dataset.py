"""
Loading, validating, combining and synthesizing labelled feature datasets.

Three line-oriented text files describe a dataset:
  instances   id<TAB>class_label<TAB>v1,v2,...,vd
  embeddings  class_label<TAB>v1,...,vd
  split       seen:<TAB>label,label,...   and   unseen:<TAB>label,...
"""
import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.spatial.distance import pdist
from sklearn.model_selection import train_test_split

from errors import (
    ClassSetMismatch, DimensionMismatch, DuplicateClass, EmptyDataset,
    EmptyInput, EmptySide, InvalidSpec, MalformedRecord, NoSeenInstances,
    NonFiniteValue, OverlappingSplit, UnknownClass, ZeroEmbedding,
)
from utils import format_vector, get_logger, parse_vector, save_outputs

log = get_logger(__name__)


# ── Domain Types ───────────────────────────────────────────────────

@dataclass(frozen=True)
class Instance:
    id: str
    class_label: str
    features: np.ndarray = field(repr=False)

    def __eq__(self, other):
        if not isinstance(other, Instance):
            return NotImplemented
        return (self.id == other.id
                and self.class_label == other.class_label
                and np.array_equal(self.features, other.features))


@dataclass
class ClassEmbeddingTable:
    dim: int
    entries: dict

    @property
    def labels(self):
        return list(self.entries)

    def __contains__(self, label):
        return label in self.entries

    def __len__(self):
        return len(self.entries)

    def vector(self, label):
        return self.entries[label]

    def matrix(self, labels=None):
        """Stack vectors row-wise, in `labels` order (table order by default)."""
        labels = self.labels if labels is None else list(labels)
        return np.vstack([self.entries[label] for label in labels])

    def __eq__(self, other):
        if not isinstance(other, ClassEmbeddingTable):
            return NotImplemented
        return (self.dim == other.dim
                and list(self.entries) == list(other.entries)
                and all(np.array_equal(self.entries[k], other.entries[k])
                        for k in self.entries))


@dataclass(frozen=True)
class ClassSplit:
    seen: tuple
    unseen: tuple

    def __post_init__(self):
        object.__setattr__(self, "seen", tuple(sorted(self.seen)))
        object.__setattr__(self, "unseen", tuple(sorted(self.unseen)))

    @property
    def all_labels(self):
        return set(self.seen) | set(self.unseen)


@dataclass
class LabeledDataset:
    d_v: int
    instances: tuple
    embeddings: ClassEmbeddingTable
    split: ClassSplit

    def __len__(self):
        return len(self.instances)

    def features(self):
        if not self.instances:
            return np.zeros((0, self.d_v))
        return np.vstack([inst.features for inst in self.instances])

    def labels(self):
        return np.array([inst.class_label for inst in self.instances], dtype=object)

    def ids(self):
        return [inst.id for inst in self.instances]

    def subset(self, labels):
        """Instances whose class is in `labels`, order preserved."""
        keep = set(labels)
        return LabeledDataset(
            d_v=self.d_v,
            instances=tuple(i for i in self.instances if i.class_label in keep),
            embeddings=self.embeddings,
            split=self.split,
        )

    def seen_only(self):
        return self.subset(self.split.seen)

    def unseen_only(self):
        return self.subset(self.split.unseen)

    def __eq__(self, other):
        if not isinstance(other, LabeledDataset):
            return NotImplemented
        return (self.d_v == other.d_v
                and tuple(self.instances) == tuple(other.instances)
                and self.embeddings == other.embeddings
                and self.split == other.split)


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 20
    per_class: int = 50
    d_v: int = 32
    d_s: int = 8
    noise_scale: float = 0.1
    seed: int = 0
    unseen_fraction: float = 0.5


# ── File reading ───────────────────────────────────────────────────

def read_table(path, n_fields):
    """
    Read a tab-separated file as strings.

    Returns a DataFrame whose index is the 1-based line number of each
    record. Blank lines are skipped but still counted.
    """
    try:
        frame = pd.read_csv(
            path, sep="\t", header=None, dtype=str,
            keep_default_na=False, quoting=csv.QUOTE_NONE,
            skip_blank_lines=False,
        )
    except pd.errors.EmptyDataError:
        raise EmptyDataset(f"{path}: no records")
    except pd.errors.ParserError as e:
        raise MalformedRecord(f"{path}: {e}")
    except UnicodeDecodeError as e:
        raise MalformedRecord(f"{path}: not valid UTF-8 text (byte {e.start})")

    frame = frame.fillna("")
    frame.index = frame.index + 1
    blank = (frame == "").all(axis=1)
    frame = frame[~blank]
    if frame.empty:
        raise EmptyDataset(f"{path}: no records")

    if frame.shape[1] > n_fields:
        extra = (frame.iloc[:, n_fields:] != "").any(axis=1)
        if extra.any():
            raise MalformedRecord(
                f"expected {n_fields} tab-separated fields",
                line=int(frame.index[extra.argmax()]),
            )
        frame = frame.iloc[:, :n_fields]
    if frame.shape[1] < n_fields:
        raise MalformedRecord(
            f"expected {n_fields} tab-separated fields", line=int(frame.index[0])
        )
    frame.columns = range(n_fields)
    return frame


def _parse_record_vector(text, line):
    try:
        vector = parse_vector(text)
    except ValueError as e:
        raise MalformedRecord(f"cannot parse vector ({e})", line=line)
    if not np.all(np.isfinite(vector)):
        raise NonFiniteValue(f"line {line}: non-finite value")
    return vector


# ── Operations ─────────────────────────────────────────────────────

def load_instances(path, d_v=None):
    """
    Load instance records in file order.

    Args:
        path: instances file
        d_v: expected feature dimension; inferred from the first record
             when None

    Returns:
        list of Instance
    """
    frame = read_table(path, 3)
    instances = []
    ids = set()
    for line, (inst_id, label, values) in zip(frame.index, frame.itertuples(index=False)):
        line = int(line)
        if not inst_id or not label:
            raise MalformedRecord("missing id or class label", line=line)
        vector = _parse_record_vector(values, line)
        if d_v is None:
            d_v = vector.size
        if vector.size != d_v:
            raise DimensionMismatch(
                f"line {line}: expected {d_v} values, found {vector.size}"
            )
        if inst_id in ids:
            raise MalformedRecord(f"duplicate instance id '{inst_id}'", line=line)
        ids.add(inst_id)
        instances.append(Instance(inst_id, label, vector))
    log.debug(f"Loaded {len(instances)} instances from {path}")
    return instances


def load_embeddings(path):
    """Load a class embedding table; its dimension is taken from the first entry."""
    frame = read_table(path, 2)
    entries = {}
    dim = None
    for line, (label, values) in zip(frame.index, frame.itertuples(index=False)):
        line = int(line)
        if not label:
            raise MalformedRecord("missing class label", line=line)
        vector = _parse_record_vector(values, line)
        if dim is None:
            dim = vector.size
        if vector.size != dim:
            raise DimensionMismatch(
                f"line {line}: expected {dim} values, found {vector.size}"
            )
        if label in entries:
            raise DuplicateClass(f"line {line}: class '{label}' listed twice")
        if not np.any(vector):
            raise ZeroEmbedding(f"line {line}: class '{label}' has an all-zero embedding")
        entries[label] = vector
    return ClassEmbeddingTable(dim=dim, entries=entries)


def _parse_labels(text):
    return [p.strip() for p in str(text).split(",") if p.strip()]


def load_split(path, table):
    """Load the seen/unseen split and check it against the embedding table."""
    frame = read_table(path, 2)
    sides = {}
    for line, (key, values) in zip(frame.index, frame.itertuples(index=False)):
        key = key.strip().rstrip(":").lower()
        if key not in ("seen", "unseen"):
            raise MalformedRecord(f"unknown split key '{key}'", line=int(line))
        if key in sides:
            raise MalformedRecord(f"'{key}' listed twice", line=int(line))
        sides[key] = _parse_labels(values)

    seen = sides.get("seen", [])
    unseen = sides.get("unseen", [])
    if not seen or not unseen:
        raise EmptySide("both seen and unseen class lists must be non-empty")
    overlap = set(seen) & set(unseen)
    if overlap:
        raise OverlappingSplit(f"classes on both sides: {sorted(overlap)}")
    missing = [label for label in seen + unseen if label not in table]
    if missing:
        raise UnknownClass(f"split classes missing from embeddings: {sorted(missing)}")
    return ClassSplit(seen=tuple(seen), unseen=tuple(unseen))


def validate_dataset(instances, table, split, require_seen=True):
    """
    Cross-check loaded components and assemble a LabeledDataset.

    `require_seen=False` accepts instance sets with no seen-class
    instance (ZSL test files).
    """
    instances = tuple(instances)
    if not instances:
        raise EmptyDataset("no instances")
    missing = [label for label in split.all_labels if label not in table]
    if missing:
        raise UnknownClass(f"split classes missing from embeddings: {sorted(missing)}")

    d_v = instances[0].features.size
    known = split.all_labels
    for inst in instances:
        if inst.features.size != d_v:
            raise DimensionMismatch(
                f"instance '{inst.id}' has {inst.features.size} values, expected {d_v}"
            )
        if inst.class_label not in table or inst.class_label not in known:
            raise UnknownClass(
                f"instance '{inst.id}' labelled with unknown class '{inst.class_label}'"
            )

    if require_seen:
        seen = set(split.seen)
        if not any(inst.class_label in seen for inst in instances):
            raise NoSeenInstances("no instance carries a seen-class label; nothing to train on")

    return LabeledDataset(d_v=d_v, instances=instances, embeddings=table, split=split)


def load_dataset(instances_path, embeddings_path, split_path, d_v=None, require_seen=True):
    """
    Load the dataset files and validate them together.

    `embeddings_path` may be a list of tables for the same classes; they
    are merged with combine_embeddings.
    """
    paths = [embeddings_path] if isinstance(embeddings_path, (str, Path)) else list(embeddings_path)
    table = combine_embeddings([load_embeddings(path) for path in paths])
    split = load_split(split_path, table)
    instances = load_instances(instances_path, d_v)
    return validate_dataset(instances, table, split, require_seen=require_seen)


def combine_embeddings(tables):
    """
    Average several embedding sources for the same classes.

    Each source is L2-normalized per class and zero-padded to the largest
    dimension before averaging. A single table comes back unchanged.
    """
    tables = list(tables)
    if not tables:
        raise EmptyInput("no embedding tables to combine")
    if len(tables) == 1:
        return tables[0]

    labels = tables[0].labels
    for table in tables[1:]:
        if set(table.labels) != set(labels):
            raise ClassSetMismatch("embedding tables cover different class sets")

    dim = max(table.dim for table in tables)
    entries = {}
    for label in labels:
        stacked = np.zeros((len(tables), dim))
        for row, table in enumerate(tables):
            vector = table.vector(label)
            stacked[row, :vector.size] = vector / np.linalg.norm(vector)
        combined = stacked.mean(axis=0)
        if not np.any(combined):
            raise ZeroEmbedding(f"class '{label}' averages to a zero vector")
        entries[label] = combined
    return ClassEmbeddingTable(dim=dim, entries=entries)


def normalize_embeddings(table):
    """Unit-norm copy of a table."""
    return ClassEmbeddingTable(
        dim=table.dim,
        entries={k: v / np.linalg.norm(v) for k, v in table.entries.items()},
    )


# ── Synthetic data ─────────────────────────────────────────────────
# Class embeddings a(y) ~ N(0, I) in d_s, a fixed linear map M sends them
# to visual means M·a(y), and instances scatter around those means.
# Noise is scaled by the mean pairwise distance between class means so
# that noise_scale sets the difficulty regardless of dimension.

def _check_spec(spec):
    if spec.num_classes < 2:
        raise InvalidSpec("num_classes must be at least 2")
    if spec.per_class < 1:
        raise InvalidSpec("per_class must be at least 1")
    if spec.d_s < 1 or spec.d_v < spec.d_s:
        raise InvalidSpec("need 1 <= d_s <= d_v")
    if spec.noise_scale < 0 or not math.isfinite(spec.noise_scale):
        raise InvalidSpec("noise_scale must be a finite non-negative number")
    if not 0 < spec.unseen_fraction < 1:
        raise InvalidSpec("unseen_fraction must lie in (0, 1)")
    if math.ceil(spec.num_classes * spec.unseen_fraction) >= spec.num_classes:
        raise InvalidSpec("unseen_fraction leaves no seen class")


def _draw_synthetic(spec):
    rng = np.random.default_rng(spec.seed)
    embeddings = rng.standard_normal((spec.num_classes, spec.d_s))
    projection = rng.standard_normal((spec.d_v, spec.d_s)) / math.sqrt(spec.d_s)
    means = embeddings @ projection.T
    noise = rng.standard_normal((spec.num_classes * spec.per_class, spec.d_v))
    order = rng.permutation(spec.num_classes)
    return embeddings, projection, means, noise, order


def _class_labels(num_classes):
    width = len(str(num_classes - 1))
    return [f"class_{c:0{width}d}" for c in range(num_classes)]


def synthetic_class_means(spec):
    """The noiseless visual mean M·a(y) of every synthetic class."""
    _check_spec(spec)
    _, _, means, _, _ = _draw_synthetic(spec)
    return dict(zip(_class_labels(spec.num_classes), means))


def synthetic_noise_sigma(spec):
    """Standard deviation of the per-coordinate noise for this spec."""
    _check_spec(spec)
    _, _, means, _, _ = _draw_synthetic(spec)
    return spec.noise_scale * float(pdist(means).mean())


def generate_synthetic(spec):
    """Deterministic synthetic dataset for `spec`."""
    _check_spec(spec)
    embeddings, _, means, noise, order = _draw_synthetic(spec)
    labels = _class_labels(spec.num_classes)
    sigma = spec.noise_scale * float(pdist(means).mean())

    instances = []
    for c, label in enumerate(labels):
        for i in range(spec.per_class):
            row = c * spec.per_class + i
            features = means[c] + sigma * noise[row]
            instances.append(Instance(f"{label}_{i:04d}", label, features))

    n_unseen = math.ceil(spec.num_classes * spec.unseen_fraction)
    unseen = [labels[c] for c in order[:n_unseen]]
    seen = [labels[c] for c in order[n_unseen:]]
    table = ClassEmbeddingTable(
        dim=spec.d_s, entries={label: embeddings[c] for c, label in enumerate(labels)}
    )
    log.info(f"✅ Synthetic dataset: {len(instances)} instances, "
             f"{len(seen)} seen / {len(unseen)} unseen classes")
    return LabeledDataset(
        d_v=spec.d_v,
        instances=tuple(instances),
        embeddings=table,
        split=ClassSplit(seen=tuple(seen), unseen=tuple(unseen)),
    )


def holdout_split(dataset, test_fraction, seed=0):
    """
    Split into a training set and a test set.

    Training keeps (1 - test_fraction) of every seen class; the test set
    gets the rest of the seen instances plus every unseen-class instance.
    """
    if not 0 <= test_fraction < 1:
        raise InvalidSpec("test_fraction must lie in [0, 1)")
    seen = set(dataset.split.seen)
    seen_idx = [i for i, inst in enumerate(dataset.instances) if inst.class_label in seen]
    unseen_idx = [i for i, inst in enumerate(dataset.instances) if inst.class_label not in seen]

    if test_fraction > 0:
        strata = [dataset.instances[i].class_label for i in seen_idx]
        try:
            train_idx, held_idx = train_test_split(
                seen_idx, test_size=test_fraction, stratify=strata, random_state=seed
            )
        except ValueError as e:
            raise InvalidSpec(f"cannot hold out {test_fraction:.0%} of seen instances: {e}")
    else:
        train_idx, held_idx = seen_idx, []

    def _take(indices):
        return LabeledDataset(
            d_v=dataset.d_v,
            instances=tuple(dataset.instances[i] for i in sorted(indices)),
            embeddings=dataset.embeddings,
            split=dataset.split,
        )

    return _take(train_idx), _take(list(held_idx) + unseen_idx)


# ── Serialization ──────────────────────────────────────────────────

def serialize_instances(instances):
    return "".join(
        f"{inst.id}\t{inst.class_label}\t{format_vector(inst.features)}\n"
        for inst in instances
    )


def serialize_embeddings(table):
    return "".join(
        f"{label}\t{format_vector(vector)}\n" for label, vector in table.entries.items()
    )


def serialize_split(split):
    return f"seen:\t{','.join(split.seen)}\nunseen:\t{','.join(split.unseen)}\n"


def write_dataset(dataset, instances_path, embeddings_path, split_path, test=None, test_path=None):
    """
    Write the three dataset files, plus a held-out instances file when
    `test` is given. Nothing is left behind on failure.
    """
    contents = {
        instances_path:  serialize_instances(dataset.instances),
        embeddings_path: serialize_embeddings(dataset.embeddings),
        split_path:      serialize_split(dataset.split),
    }
    if test is not None:
        contents[test_path] = serialize_instances(test.instances)
    return save_outputs(contents)
