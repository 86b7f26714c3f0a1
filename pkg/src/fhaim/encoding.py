"""Tabular ingest, discretization, one-hot encoding and column-wise SIMD packing."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .he import Capability, Ciphertext, HeEngine, HeParams


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class AttributeDomain:
    """One discrete attribute.

    ``labels`` holds the category names in code order. Binned attributes carry
    ``edges`` (size + 1 values); bins are left-closed, right-open and values
    outside the outer edges are clipped into the first or last bin.
    """

    name: str
    size: int
    labels: tuple[str, ...] | None = None
    edges: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.size < 2:
            raise SchemaError(f"attribute {self.name!r}: domain size must be >= 2, got {self.size}")
        if self.labels is not None and len(self.labels) != self.size:
            raise SchemaError(f"attribute {self.name!r}: {len(self.labels)} labels for size {self.size}")
        if self.edges is not None:
            if len(self.edges) != self.size + 1:
                raise SchemaError(f"attribute {self.name!r}: {len(self.edges)} edges for size {self.size}")
            if any(b <= a for a, b in zip(self.edges, self.edges[1:])):
                raise SchemaError(f"attribute {self.name!r}: edges must be strictly increasing")

    @property
    def kind(self) -> str:
        return "binned" if self.edges is not None else "categorical"

    def encode(self, raw: str) -> int:
        raw = raw.strip()
        if self.edges is not None:
            try:
                x = float(raw)
            except ValueError:
                raise SchemaError(f"attribute {self.name!r}: non-numeric value {raw!r}") from None
            # right bin on an inner edge; clip outside the outer edges
            code = int(np.searchsorted(self.edges[1:-1], x, side="right"))
            return code
        if self.labels is not None:
            try:
                return self.labels.index(raw)
            except ValueError:
                raise SchemaError(f"attribute {self.name!r}: value {raw!r} not among declared labels") from None
        try:
            code = int(raw)
        except ValueError:
            raise SchemaError(f"attribute {self.name!r}: expected an integer code, got {raw!r}") from None
        if not 0 <= code < self.size:
            raise SchemaError(f"attribute {self.name!r}: code {code} outside [0, {self.size})")
        return code

    def decode(self, code: int) -> str:
        if self.labels is not None:
            return self.labels[code]
        if self.edges is not None:
            # bin midpoint stands in for the original continuous value
            return repr((self.edges[code] + self.edges[code + 1]) / 2)
        return str(code)

    def to_json(self):
        if self.labels is not None:
            return {"labels": list(self.labels)}
        if self.edges is not None:
            return {"edges": list(self.edges)}
        return self.size


@dataclass(frozen=True)
class DatasetSchema:
    attributes: tuple[AttributeDomain, ...]

    def __post_init__(self):
        names = [a.name for a in self.attributes]
        if len(set(names)) != len(names):
            raise SchemaError("attribute names must be unique")
        if not names:
            raise SchemaError("schema has no attributes")

    @property
    def names(self) -> list[str]:
        return [a.name for a in self.attributes]

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(a.size for a in self.attributes)

    @property
    def d(self) -> int:
        return len(self.attributes)

    @property
    def total_size(self) -> int:
        return math.prod(self.sizes)

    def offsets(self) -> list[int]:
        return [0] + list(np.cumsum(self.sizes)[:-1].tolist())

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise SchemaError(f"unknown attribute {name!r}") from None

    @classmethod
    def from_json(cls, obj: dict) -> "DatasetSchema":
        attrs = []
        for name, decl in obj.items():
            if isinstance(decl, bool):
                raise SchemaError(f"attribute {name!r}: invalid domain {decl!r}")
            if isinstance(decl, int):
                attrs.append(AttributeDomain(name, decl))
            elif isinstance(decl, list):
                attrs.append(AttributeDomain(name, len(decl), labels=tuple(str(s) for s in decl)))
            elif isinstance(decl, dict) and "labels" in decl:
                labels = tuple(str(s) for s in decl["labels"])
                attrs.append(AttributeDomain(name, len(labels), labels=labels))
            elif isinstance(decl, dict) and "edges" in decl:
                edges = tuple(float(e) for e in decl["edges"])
                attrs.append(AttributeDomain(name, len(edges) - 1, edges=edges))
            else:
                raise SchemaError(f"attribute {name!r}: unrecognised domain {decl!r}")
        return cls(tuple(attrs))

    def to_json(self) -> dict:
        return {a.name: a.to_json() for a in self.attributes}


@dataclass(frozen=True)
class Dataset:
    schema: DatasetSchema
    rows: np.ndarray  # (N, d) integer codes

    def __post_init__(self):
        rows = np.asarray(self.rows)
        if rows.ndim != 2 or rows.shape[1] != self.schema.d:
            raise SchemaError(f"rows must have shape (N, {self.schema.d}), got {rows.shape}")
        if rows.shape[0] < 1:
            raise SchemaError("N >= 1 violated: dataset has no records")
        sizes = np.asarray(self.schema.sizes)
        if rows.size and (rows.min() < 0 or np.any(rows >= sizes)):
            raise SchemaError("category code outside its domain")
        object.__setattr__(self, "rows", rows.astype(np.int64, copy=False))

    @property
    def N(self) -> int:
        return self.rows.shape[0]

    def project(self, attrs: Sequence[int]) -> np.ndarray:
        """Histogram over the given attribute indices, row-major cell order."""
        attrs = list(attrs)
        sizes = [self.schema.sizes[a] for a in attrs]
        flat = np.ravel_multi_index(tuple(self.rows[:, a] for a in attrs), sizes)
        return np.bincount(flat, minlength=math.prod(sizes)).astype(np.float64)

    def to_bytes(self) -> bytes:
        return self.rows.astype("<i8").tobytes()

    def subset(self, idx) -> "Dataset":
        return Dataset(self.schema, self.rows[np.asarray(idx)])


def load_schema(domain_file: str | Path) -> DatasetSchema:
    with open(domain_file, encoding="utf-8") as fh:
        obj = json.load(fh)
    if not isinstance(obj, dict):
        raise SchemaError("domain file must contain a JSON object")
    return DatasetSchema.from_json(obj)


def load_dataset(table_file: str | Path, domain_file: str | Path) -> Dataset:
    schema = load_schema(domain_file)
    with open(table_file, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError("table file is empty") from None
        missing = [n for n in schema.names if n not in header]
        if missing:
            raise SchemaError(f"columns missing from table: {missing}")
        unknown = [h for h in header if h not in schema.names]
        if unknown:
            raise SchemaError(f"unknown attribute(s) in table header: {unknown}")
        cols = [header.index(n) for n in schema.names]
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise SchemaError(f"line {lineno}: expected {len(header)} fields, got {len(rec)}")
            rows.append([a.encode(rec[c]) for a, c in zip(schema.attributes, cols)])
    if not rows:
        raise SchemaError("N >= 1 violated: table has no records")
    return Dataset(schema, np.array(rows, dtype=np.int64))


def write_csv(ds: Dataset, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(ds.schema.names)
        attrs = ds.schema.attributes
        for row in ds.rows:
            w.writerow([a.decode(int(c)) for a, c in zip(attrs, row)])


def train_test_split(ds: Dataset, test_fraction: float = 0.2, seed: int = 42) -> tuple[Dataset, Dataset]:
    """Seeded shuffle split; the test part gets ceil(test_fraction * N) records."""
    n_test = math.ceil(test_fraction * ds.N)
    perm = np.random.default_rng(seed).permutation(ds.N)
    return ds.subset(np.sort(perm[n_test:])), ds.subset(np.sort(perm[:n_test]))


def one_hot(ds: Dataset) -> np.ndarray:
    """(N, sum of domain sizes) 0/1 matrix, attributes laid out in schema order."""
    offsets = np.asarray(ds.schema.offsets())
    out = np.zeros((ds.N, sum(ds.schema.sizes)), dtype=np.uint8)
    out[np.arange(ds.N)[:, None], ds.rows + offsets] = 1
    return out


@dataclass
class EncryptedColumns:
    """One list of chunk ciphertexts per (attribute, bin) one-hot column.

    Slot ``r`` of chunk ``c`` holds record ``c * L + r``.
    """

    schema: DatasetSchema
    columns: dict[tuple[int, int], list[Ciphertext]]
    record_count: int
    slot_count: int

    @property
    def n_chunks(self) -> int:
        return math.ceil(self.record_count / self.slot_count)

    def column(self, attr: int, bin_: int) -> list[Ciphertext]:
        return self.columns[(attr, bin_)]

    def layout(self) -> dict:
        return {
            "record_count": self.record_count,
            "slot_count": self.slot_count,
            "chunks": self.n_chunks,
            "columns": [[a, j] for (a, j) in sorted(self.columns)],
        }

    def save(self, engine: HeEngine, out_dir: str | Path) -> Path:
        """Write each chunk to its own file plus a manifest mapping
        attribute -> bin -> chunk paths. Returns the manifest path."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        manifest = {"layout": self.layout(), "schema": self.schema.to_json(), "attributes": {}}
        for (a, j), chunks in sorted(self.columns.items()):
            name = self.schema.attributes[a].name
            paths = []
            for c, ct in enumerate(chunks):
                p = out_dir / f"col_{a}_{j}_{c}.json"
                p.write_text(engine.dumps(ct))
                paths.append(p.name)
            manifest["attributes"].setdefault(name, {})[str(j)] = paths
        mpath = out_dir / "manifest.json"
        mpath.write_text(json.dumps(manifest, indent=2))
        return mpath

    @classmethod
    def load(cls, engine: HeEngine, manifest_path: str | Path) -> "EncryptedColumns":
        manifest_path = Path(manifest_path)
        manifest = json.loads(manifest_path.read_text())
        schema = DatasetSchema.from_json(manifest["schema"])
        cols = {}
        for name, bins in manifest["attributes"].items():
            a = schema.index(name)
            for j, paths in bins.items():
                cols[(a, int(j))] = [engine.loads((manifest_path.parent / p).read_text()) for p in paths]
        lay = manifest["layout"]
        return cls(schema, cols, lay["record_count"], lay["slot_count"])


def pack_and_encrypt(ohe: np.ndarray, schema: DatasetSchema, key: Capability, params: HeParams | None = None) -> EncryptedColumns:
    """Encrypt every one-hot column into ceil(N / L) chunk ciphertexts."""
    engine = key.engine
    L = engine.slot_count if params is None else params.slot_count
    if L != engine.slot_count:
        raise ValueError("params disagree with the key's engine on slot count")
    N = ohe.shape[0]
    n_chunks = math.ceil(N / L)
    columns = {}
    col = 0
    for a, size in enumerate(schema.sizes):
        for j in range(size):
            bits = ohe[:, col].astype(np.float64)
            columns[(a, j)] = [engine.encrypt(bits[c * L:(c + 1) * L], key) for c in range(n_chunks)]
            col += 1
    return EncryptedColumns(schema, columns, N, L)
