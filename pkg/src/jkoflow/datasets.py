"""LIBSVM parsing, train/test splitting and dataset download."""
from __future__ import annotations

import hashlib
import io
import logging
import urllib.request
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import MalformedLine, NonBinaryLabels

log = logging.getLogger(__name__)

# label value -> {-1, +1}; anything listed as negative maps to -1
NEGATIVE_LABELS = {-1.0, 0.0, 2.0}
POSITIVE_LABELS = {1.0}

LIBSVM_BASE = "https://www.csie.ntu.edu.tw/~cjlin/libsvmtools/datasets/binary/"
SOURCES = {
    # name: (file, sha256 or None when the upstream file is not pinned)
    "covtype": ("covtype.libsvm.binary.bz2", None),
    "diabetes": ("diabetes", None),
    "german": ("german.numer", None),
}


@dataclass
class LabeledDataset:
    features: np.ndarray  # (M, F), last column is the bias 1.0
    labels: np.ndarray  # (M,), values in {-1, +1}
    feature_names: list | None = None

    def __post_init__(self):
        if np.any(np.isnan(self.features)):
            raise ValueError("features contain NaN")
        if not np.all(np.isin(self.labels, (-1.0, 1.0))):
            raise NonBinaryLabels("labels must be -1 or +1")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.features[idx], self.labels[idx], self.feature_names)


def _map_label(raw: float, lineno: int) -> float:
    if raw in POSITIVE_LABELS:
        return 1.0
    if raw in NEGATIVE_LABELS:
        return -1.0
    raise NonBinaryLabels(f"line {lineno}: label {raw:g} is not binary")


def parse_libsvm(stream, n_features: int | None = None) -> LabeledDataset:
    """Parse ``label idx:val ...`` lines (1-based indices) into a dense dataset.

    Labels ``+1``/``1`` become +1; ``-1``, ``0`` and ``2`` become -1 (covtype
    uses {1, 2}). A bias column of ones is appended after the features.
    Blank lines and ``#`` comments are skipped.
    """
    if isinstance(stream, (str, Path)):
        with open(stream) as fh:
            return parse_libsvm(fh, n_features)
    labels, rows, width = [], [], 0
    for lineno, line in enumerate(stream, start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        parts = text.split()
        try:
            raw = float(parts[0].replace("−", "-"))
            entries = {}
            for tok in parts[1:]:
                k, v = tok.split(":")
                idx = int(k)
                if idx < 1:
                    raise ValueError
                entries[idx] = float(v)
        except ValueError:
            raise MalformedLine(lineno, line.rstrip("\n")) from None
        labels.append(_map_label(raw, lineno))
        rows.append(entries)
        if entries:
            width = max(width, max(entries))
    F = width if n_features is None else n_features
    X = np.zeros((len(rows), F + 1))
    for i, entries in enumerate(rows):
        for idx, v in entries.items():
            if idx > F:
                raise MalformedLine(i + 1, f"feature index {idx} exceeds {F}")
            X[i, idx - 1] = v
    X[:, F] = 1.0
    return LabeledDataset(X, np.asarray(labels, dtype=np.float64))


def write_libsvm(ds: LabeledDataset, stream, drop_bias: bool = True):
    """Write in LIBSVM format with full float precision; zero features are omitted."""
    X = ds.features[:, :-1] if drop_bias else ds.features
    for y, row in zip(ds.labels, X):
        items = " ".join(f"{j + 1}:{v!r}" for j, v in enumerate(row.tolist()) if v != 0.0)
        stream.write(f"{int(y):+d} {items}".rstrip() + "\n")


def train_test_split(ds: LabeledDataset, rng, test_fraction: float = 0.2):
    """Random split (4:1 by default) with features standardized on the training part.

    The bias column is left untouched.
    """
    perm = rng.permutation(len(ds))
    n_test = int(round(test_fraction * len(ds)))
    test, train = ds.subset(perm[:n_test]), ds.subset(perm[n_test:])
    mu = train.features[:, :-1].mean(axis=0)
    sd = train.features[:, :-1].std(axis=0)
    sd[sd == 0] = 1.0
    for part in (train, test):
        part.features = part.features.copy()
        part.features[:, :-1] = (part.features[:, :-1] - mu) / sd
    return train, test


def fetch(name: str, dest, timeout: float = 60.0) -> Path:
    """Download a benchmark dataset into ``dest``; verifies SHA-256 where pinned."""
    if name not in SOURCES:
        raise KeyError(f"unknown dataset {name!r}; known: {sorted(SOURCES)}")
    fname, digest = SOURCES[name]
    dest = Path(dest)
    dest.mkdir(parents=True, exist_ok=True)
    out = dest / fname
    with urllib.request.urlopen(LIBSVM_BASE + fname, timeout=timeout) as resp:
        data = resp.read()
    if digest is not None and hashlib.sha256(data).hexdigest() != digest:
        raise ValueError(f"checksum mismatch for {fname}")
    if fname.endswith(".bz2"):
        import bz2
        data = bz2.decompress(data)
        out = dest / fname[:-4]
    out.write_bytes(data)
    log.info("wrote %s (%d bytes, sha256 %s)", out, len(data), hashlib.sha256(data).hexdigest())
    return out


def load_dataset(path) -> LabeledDataset:
    path = Path(path)
    text = path.read_text()
    return parse_libsvm(io.StringIO(text))
