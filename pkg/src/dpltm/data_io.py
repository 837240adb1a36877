"""Dataset loading, deterministic splits, ticket-store persistence and ticket projection."""

from __future__ import annotations

import base64
import csv
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .nn import LabeledBatch, Mask, NetworkParams, ShapeError, init_network, mask_fraction
from .tickets import TicketRecord, TicketStore

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
FORMAT_VERSION = 1
TICKET_SUFFIX = ".ticket.json"


class DataFormatError(ValueError):
    pass


class StoreFormatError(ValueError):
    pass


@dataclass
class Dataset:
    name: str
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    predefined_split: bool = False
    raw: Optional[np.ndarray] = None  # unnormalised features, kept so splits can refit scaling

    def __post_init__(self):
        if len(self.features) != len(self.labels):
            raise DataFormatError("feature/label row counts differ")

    def __len__(self):
        return len(self.labels)

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def batch(self) -> LabeledBatch:
        return LabeledBatch(self.features, self.labels)

    def take(self, idx, name: Optional[str] = None) -> "Dataset":
        return Dataset(name or self.name, self.features[idx], self.labels[idx], self.n_classes,
                       self.predefined_split, None if self.raw is None else self.raw[idx])


# --- IDX --------------------------------------------------------------------

def _read_idx(path, expected_magic: int) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise DataFormatError(f"{path}: truncated header")
    magic = struct.unpack(">I", data[:4])[0]
    if magic != expected_magic:
        raise DataFormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise DataFormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    size = int(np.prod(dims))
    if len(data) - header < size:
        raise DataFormatError(f"{path}: truncated payload ({len(data) - header} of {size} bytes)")
    return np.frombuffer(data, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_idx(images_path, labels_path, name: str = "idx", n_classes: Optional[int] = None) -> Dataset:
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise DataFormatError(f"count mismatch: {len(images)} images vs {len(labels)} labels")
    features = images.reshape(len(images), -1).astype(np.float64) / 255.0
    labels = labels.astype(np.int64)
    k = n_classes if n_classes is not None else int(labels.max()) + 1
    return Dataset(name, features, labels, k)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path):
    """Write uint8 images (n, rows, cols) and labels (n,) in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">I", IDX_IMAGES_MAGIC))
        f.write(struct.pack(f">{images.ndim}I", *images.shape))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        f.write(labels.tobytes())


# --- CSV --------------------------------------------------------------------

def minmax_fit(raw: np.ndarray):
    return raw.min(axis=0), raw.max(axis=0)


def minmax_apply(raw: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    out = np.where(span > 0, (raw - lo) / safe, 0.0)
    return np.clip(out, 0.0, 1.0)


def load_csv(path, label_column: Union[int, str], n_classes: int, header: bool = True,
             name: Optional[str] = None) -> Dataset:
    """Numeric CSV with one label column.

    Labels may be integers in [0, n_classes) or category strings (mapped in
    sorted order). Features are min-max scaled over all rows here; splitting
    with `split_80_20` refits the scaling on the training rows.
    """
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise DataFormatError(f"{path}: empty file")
    names = rows[0] if header else None
    body = rows[1:] if header else rows
    if isinstance(label_column, str):
        if names is None or label_column not in names:
            raise DataFormatError(f"label column {label_column!r} not found")
        li = names.index(label_column)
    else:
        li = int(label_column)
    width = len(body[0]) if body else 0
    if li < 0:
        li += width
    if not 0 <= li < max(width, 1):
        raise DataFormatError(f"label column {label_column} out of range for {width} columns")
    raw_labels, feats = [], []
    for r, row in enumerate(body):
        if not row:
            continue
        try:
            feats.append([float(v) for j, v in enumerate(row) if j != li])
        except ValueError as e:
            raise DataFormatError(f"{path}: non-numeric cell in row {r + 1}: {e}") from None
        raw_labels.append(row[li].strip())
    raw = np.array(feats, dtype=np.float64)
    if not np.all(np.isfinite(raw)):
        raise DataFormatError(f"{path}: non-finite feature value")
    labels = _encode_labels(raw_labels, n_classes)
    lo, hi = minmax_fit(raw)
    return Dataset(name or Path(path).stem, minmax_apply(raw, lo, hi), labels, n_classes, raw=raw)


def _encode_labels(values: List[str], n_classes: int) -> np.ndarray:
    try:
        ints = np.array([int(float(v)) for v in values], dtype=np.int64)
        if any(float(v) != int(float(v)) for v in values):
            raise ValueError
    except ValueError:
        cats = sorted(set(values))
        if len(cats) > n_classes:
            raise DataFormatError(f"{len(cats)} distinct labels but n_classes={n_classes}") from None
        lookup = {c: i for i, c in enumerate(cats)}
        return np.array([lookup[v] for v in values], dtype=np.int64)
    bad = (ints < 0) | (ints >= n_classes)
    if bad.any():
        raise DataFormatError(f"unknown label {ints[bad][0]} (n_classes={n_classes})")
    return ints


# --- splits -----------------------------------------------------------------

def split_80_20(ds: Dataset, seed: int) -> Tuple[Dataset, Dataset]:
    """Shuffled split with floor(0.2 N) test rows."""
    n = len(ds)
    perm = np.random.default_rng(seed).permutation(n)
    n_test = int(np.floor(0.2 * n))
    test_idx, train_idx = np.sort(perm[:n_test]), np.sort(perm[n_test:])
    train, test = ds.take(train_idx, f"{ds.name}-train"), ds.take(test_idx, f"{ds.name}-test")
    if ds.raw is not None:
        lo, hi = minmax_fit(train.raw)
        train.features = minmax_apply(train.raw, lo, hi)
        test.features = minmax_apply(test.raw, lo, hi)
    return train, test


def subsample(ds: Dataset, n: int, seed: int) -> Dataset:
    if n >= len(ds):
        return ds
    idx = np.sort(np.random.default_rng(seed).permutation(len(ds))[:n])
    return ds.take(idx)


# --- synthetic data -----------------------------------------------------------

def make_synthetic(n: int, dim: int, n_classes: int, seed: int, noise: float = 0.25,
                   density: float = 0.2, name: str = "synthetic") -> Dataset:
    """Classes are sparse random prototypes in [0,1]^dim plus clipped Gaussian noise."""
    rng = np.random.default_rng(seed)
    protos = (rng.random((n_classes, dim)) < density) * rng.uniform(0.5, 1.0, (n_classes, dim))
    labels = rng.integers(0, n_classes, n)
    x = np.clip(protos[labels] + noise * rng.standard_normal((n, dim)), 0.0, 1.0)
    return Dataset(name, x, labels.astype(np.int64), n_classes)


def make_separable(n: int, seed: int, dim: int = 2, margin: float = 0.05) -> Dataset:
    """Two classes in [0,1]^dim split by the hyperplane sum(x) = dim / 2, with a margin."""
    rng = np.random.default_rng(seed)
    xs = []
    while len(xs) < n:
        x = rng.random(dim)
        if abs(x.sum() - dim / 2) >= margin * dim:
            xs.append(x)
    x = np.array(xs)
    y = (x.sum(axis=1) > dim / 2).astype(np.int64)
    return Dataset("separable", x, y, 2)


def mnist_subset_arrays():
    """The 5,000-image MNIST sample shipped with mlxtend, as (uint8 images, labels)."""
    try:
        from mlxtend.data import mnist_data
    except ImportError as e:
        raise RuntimeError("mlxtend is required for the bundled MNIST sample "
                           "(pip install 'mlxtend>=0.23')") from e
    x, y = mnist_data()
    return x.reshape(-1, 28, 28).astype(np.uint8), y.astype(np.uint8)


def export_mnist_sample(directory) -> Path:
    """Write the mlxtend sample as train-images/train-labels IDX files; returns the directory."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    images, labels = mnist_subset_arrays()
    write_idx(images, labels, root / "train-images-idx3-ubyte", root / "train-labels-idx1-ubyte")
    return root


# --- ticket store -------------------------------------------------------------

def _b64(a: bytes) -> str:
    return base64.b64encode(a).decode("ascii")


def _f32_bytes(a: np.ndarray) -> str:
    f = a.astype("<f4")
    if not np.array_equal(f.astype(np.float64), a):
        raise StoreFormatError("theta0 values must be exactly representable as float32")
    return _b64(f.tobytes())


def _decode_f32(s: str, shape) -> np.ndarray:
    buf = base64.b64decode(s)
    if len(buf) != 4 * int(np.prod(shape)):
        raise StoreFormatError(f"array payload has {len(buf)} bytes, expected shape {shape}")
    return np.frombuffer(buf, dtype="<f4").astype(np.float64).reshape(shape)


def _encode_mask(m: np.ndarray) -> str:
    return _b64(np.packbits(m.astype(bool).ravel()).tobytes())


def _decode_mask(s: str, shape) -> np.ndarray:
    buf = np.frombuffer(base64.b64decode(s), dtype=np.uint8)
    size = int(np.prod(shape))
    if len(buf) != (size + 7) // 8:
        raise StoreFormatError(f"mask payload has {len(buf)} bytes, expected shape {shape}")
    return np.unpackbits(buf, count=size).astype(bool).reshape(shape)


def store_to_json(store: TicketStore) -> str:
    doc = {
        "format_version": FORMAT_VERSION,
        "layer_dims": list(store.layer_dims),
        "init_seed": int(store.init_seed),
        "prune_rates": [float(r) for r in store.prune_rates],
        "theta0": [{"weights": _f32_bytes(w), "biases": _f32_bytes(b)}
                   for w, b in zip(store.theta0.weights, store.theta0.biases)],
        "tickets": [{"index": int(r.index), "mask": [_encode_mask(m) for m in r.mask],
                     "accuracy": float(r.accuracy), "fraction": float(r.fraction)}
                    for r in store.records],
    }
    return json.dumps(doc, indent=1) + "\n"


def store_from_json(text: str) -> TicketStore:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise StoreFormatError(f"not a ticket store: {e}") from None
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise StoreFormatError(f"unsupported format_version {version!r} (expected {FORMAT_VERSION})")
    try:
        dims = [int(d) for d in doc["layer_dims"]]
        shapes = list(zip(dims[:-1], dims[1:]))
        if len(doc["theta0"]) != len(shapes):
            raise StoreFormatError("theta0 layer count does not match layer_dims")
        weights = [_decode_f32(l["weights"], s) for l, s in zip(doc["theta0"], shapes)]
        biases = [_decode_f32(l["biases"], (s[1],)) for l, s in zip(doc["theta0"], shapes)]
        records = []
        for t in doc["tickets"]:
            if len(t["mask"]) != len(shapes):
                raise StoreFormatError(f"ticket {t['index']}: mask layer count mismatch")
            mask = [_decode_mask(m, s) for m, s in zip(t["mask"], shapes)]
            frac = mask_fraction(mask)
            if float(t["fraction"]) != frac:
                raise StoreFormatError(f"ticket {t['index']}: fraction {t['fraction']} does not match "
                                       f"mask popcount ({frac})")
            records.append(TicketRecord(int(t["index"]), mask, float(t["accuracy"]), frac))
        theta0 = NetworkParams(dims, weights, biases)
        return TicketStore(dims, int(doc["init_seed"]), theta0, records,
                           [float(r) for r in doc["prune_rates"]])
    except (KeyError, TypeError, ShapeError) as e:
        raise StoreFormatError(f"malformed ticket store: {e}") from None


def save_ticket_store(store: TicketStore, path):
    Path(path).write_text(store_to_json(store))


def load_ticket_store(path) -> TicketStore:
    return store_from_json(Path(path).read_text())


# --- transfer -------------------------------------------------------------------

def project_ticket(store: TicketStore, source_ticket: TicketRecord, target_input_dim: int,
                   target_n_classes: int, seed: int) -> Tuple[Mask, NetworkParams]:
    """Keep the ticket's hidden trunk, replace the input and output layers.

    The source network's first layer (the projection layer) and last layer
    are dropped. Fresh, unmasked layers of shape (target_input_dim, trunk_in)
    and (trunk_out, target_n_classes) are initialised from `seed`.
    """
    dims = store.layer_dims
    if len(dims) < 4:
        raise ShapeError(f"need a projection layer, a trunk and an output layer; got dims {dims}")
    if target_input_dim < 1 or target_n_classes < 1:
        raise ShapeError("target dimensions must be positive")
    new_dims = [int(target_input_dim)] + list(dims[1:-1]) + [int(target_n_classes)]
    fresh = init_network(new_dims, seed)
    n = len(new_dims) - 1
    weights = [fresh.weights[0]] + [w.copy() for w in store.theta0.weights[1:-1]] + [fresh.weights[-1]]
    biases = [fresh.biases[0]] + [b.copy() for b in store.theta0.biases[1:-1]] + [fresh.biases[-1]]
    mask = ([np.ones_like(weights[0], dtype=bool)] + [m.copy() for m in source_ticket.mask[1:-1]]
            + [np.ones_like(weights[n - 1], dtype=bool)])
    return mask, NetworkParams(new_dims, weights, biases)
