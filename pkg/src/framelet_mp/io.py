"""Graph dataset directories.

A dataset directory holds:

``graph.edges``
    One undirected edge per line, ``u<TAB>v`` or ``u<TAB>v<TAB>weight``,
    0-based node ids. Blank lines and lines starting with ``#`` are skipped.
``features.csv``
    One comma-separated row of floats per node, no header. Its row count
    fixes the node count.
``labels.csv`` (optional)
    One non-negative integer class id per line.
``splits.json`` (optional)
    ``{"train": [...], "val": [...], "test": [...]}`` node id lists.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .errors import ParseError
from .graph import Graph

EDGES = "graph.edges"
FEATURES = "features.csv"
LABELS = "labels.csv"
SPLITS = "splits.json"


def _lines(path):
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if text and not text.startswith("#"):
                yield lineno, text


def read_features(path):
    rows = []
    width = None
    for lineno, text in _lines(path):
        try:
            row = [float(x) for x in text.split(",")]
        except ValueError:
            raise ParseError(path, lineno, f"non-numeric feature value in {text!r}") from None
        if not all(np.isfinite(row)):
            raise ParseError(path, lineno, "non-finite feature value")
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise ParseError(path, lineno, f"expected {width} columns, got {len(row)}")
        rows.append(row)
    if not rows:
        raise ParseError(path, None, "empty graph")
    return np.array(rows, dtype=np.float64)


def read_edges(path, n):
    edges, weights = [], []
    for lineno, text in _lines(path):
        parts = text.split("\t") if "\t" in text else text.split()
        if len(parts) not in (2, 3):
            raise ParseError(path, lineno, f"expected 'u<TAB>v[<TAB>w]', got {text!r}")
        try:
            u, v = int(parts[0]), int(parts[1])
            w = float(parts[2]) if len(parts) == 3 else 1.0
        except ValueError:
            raise ParseError(path, lineno, f"malformed edge {text!r}") from None
        if not (0 <= u < n and 0 <= v < n):
            raise ParseError(path, lineno, f"node id outside [0, {n})")
        if not np.isfinite(w) or w < 0:
            raise ParseError(path, lineno, f"edge weight must be a finite non-negative number, got {parts[2]!r}")
        edges.append((u, v))
        weights.append(w)
    return np.array(edges, dtype=np.int64).reshape(-1, 2), np.array(weights, dtype=np.float64)


def read_labels(path, n):
    labels = []
    for lineno, text in _lines(path):
        try:
            c = int(text)
        except ValueError:
            raise ParseError(path, lineno, f"label must be an integer, got {text!r}") from None
        if c < 0:
            raise ParseError(path, lineno, "label must be non-negative")
        labels.append(c)
    if len(labels) != n:
        raise ParseError(path, None, f"{len(labels)} labels for {n} nodes")
    return np.array(labels, dtype=np.int64)


def read_splits(path, n):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(path, exc.lineno, exc.msg) from None
    out = {}
    for key in ("train", "val", "test"):
        if key not in raw:
            raise ParseError(path, None, f"missing {key!r} list")
        idx = np.asarray(raw[key])
        if idx.ndim != 1 or (idx.size and (idx.dtype.kind not in "iu" or idx.min() < 0 or idx.max() >= n)):
            raise ParseError(path, None, f"{key!r} must list node ids in [0, {n})")
        out[key] = np.sort(idx.astype(np.int64))
    return out


def load_graph_dir(directory):
    """Return ``(graph, splits)``; ``splits`` is None when no split file exists."""
    if not os.path.isdir(directory):
        raise FileNotFoundError(f"dataset directory not found: {directory}")
    feats = read_features(os.path.join(directory, FEATURES))
    n = feats.shape[0]
    edges, weights = read_edges(os.path.join(directory, EDGES), n)
    lpath = os.path.join(directory, LABELS)
    labels = read_labels(lpath, n) if os.path.exists(lpath) else None
    spath = os.path.join(directory, SPLITS)
    splits = read_splits(spath, n) if os.path.exists(spath) else None
    return Graph.from_edges(n, edges, weights, feats, labels), splits


def write_graph_dir(g: Graph, directory, splits=None):
    """Write ``g`` in the dataset layout; floats use ``repr`` so reloading is exact."""
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, EDGES), "w") as fh:
        for (u, v), w in zip(g.edges, g.weights):
            fh.write(f"{u}\t{v}\t{float(w)!r}\n")
    with open(os.path.join(directory, FEATURES), "w") as fh:
        for row in g.features:
            fh.write(",".join(repr(float(x)) for x in row) + "\n")
    if g.labels is not None:
        with open(os.path.join(directory, LABELS), "w") as fh:
            fh.write("".join(f"{c}\n" for c in g.labels))
    if splits is not None:
        with open(os.path.join(directory, SPLITS), "w") as fh:
            json.dump({k: [int(i) for i in splits[k]] for k in ("train", "val", "test")}, fh)
            fh.write("\n")
