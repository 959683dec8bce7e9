"""Dataset bundles on disk, validation splitting, edge-deletion scenario
construction, and structured result export.

A dataset bundle is a directory with a manifest.json naming the feature
matrix (CSV or raw float64 binary with a JSON header), a labels CSV, an
optional undirected edge list, and train/val/test id files.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from .gcn import LabeledSplit
from .numcore import Rng


class DataError(ValueError):
    pass


HIST_BIN_EDGES = np.array([0.0, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0 + 1e-12])


@dataclass
class Dataset:
    name: str
    x: np.ndarray
    labels: np.ndarray  # -1 for unknown
    edges: list[tuple[int, int]] | None
    train_ids: np.ndarray
    val_ids: np.ndarray
    test_ids: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.x.shape[0]

    @property
    def n_features(self) -> int:
        return self.x.shape[1]

    def n_classes(self) -> int:
        return int(self.labels.max()) + 1


def _read_ids(path) -> np.ndarray:
    ids = []
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                ids.append(int(line))
            except ValueError:
                raise DataError(f"{path}:{ln}: expected a node id, got {line!r}")
    return np.asarray(ids, dtype=np.int64)


def _read_features(base, spec) -> np.ndarray:
    path = os.path.join(base, spec)
    if spec.endswith(".csv"):
        rows = []
        width = None
        with open(path) as f:
            for ln, line in enumerate(f, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    row = [float(v) for v in line.split(",")]
                except ValueError:
                    raise DataError(f"{path}:{ln}: malformed float row")
                if width is None:
                    width = len(row)
                elif len(row) != width:
                    raise DataError(f"{path}:{ln}: expected {width} columns, got {len(row)}")
                rows.append(row)
        return np.asarray(rows, dtype=np.float64)
    if spec.endswith(".bin"):
        header_path = path[:-4] + ".json"
        with open(header_path) as f:
            header = json.load(f)
        if header.get("dtype") != "float64":
            raise DataError(f"{header_path}: only float64 supported")
        shape = tuple(header["shape"])
        data = np.fromfile(path, dtype="<f8")
        if data.size != shape[0] * shape[1]:
            raise DataError(f"{path}: size {data.size} does not match shape {shape}")
        return data.reshape(shape)
    raise DataError(f"unknown feature format: {spec}")


def load_dataset(path: str) -> Dataset:
    """Load a bundle directory; raises DataError with file/line context."""
    manifest_path = os.path.join(path, "manifest.json")
    if not os.path.exists(manifest_path):
        raise DataError(f"no manifest.json in {path}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    x = _read_features(path, manifest["features"])
    n = x.shape[0]

    labels = np.full(n, -1, dtype=np.int64)
    lpath = os.path.join(path, manifest["labels"])
    with open(lpath) as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise DataError(f"{lpath}:{ln}: expected 'node_id,class_id'")
            try:
                i, c = int(parts[0]), int(parts[1])
            except ValueError:
                raise DataError(f"{lpath}:{ln}: malformed integers")
            if not 0 <= i < n:
                raise DataError(f"{lpath}:{ln}: node id {i} out of range [0, {n})")
            if c < 0:
                raise DataError(f"{lpath}:{ln}: negative class id {c}")
            labels[i] = c

    edges = None
    if manifest.get("edges"):
        epath = os.path.join(path, manifest["edges"])
        edges = []
        with open(epath) as f:
            for ln, line in enumerate(f, 1):
                line = line.strip()
                if not line:
                    continue
                parts = line.split()
                if len(parts) != 2:
                    raise DataError(f"{epath}:{ln}: expected 'i j'")
                i, j = int(parts[0]), int(parts[1])
                if not (0 <= i < n and 0 <= j < n):
                    raise DataError(f"{epath}:{ln}: endpoint out of range")
                edges.append((i, j))

    train = _read_ids(os.path.join(path, manifest["train"]))
    val = _read_ids(os.path.join(path, manifest["val"]))
    test = _read_ids(os.path.join(path, manifest["test"]))
    for ids, kind in ((train, "train"), (val, "val"), (test, "test")):
        if len(ids) and ids.max() >= n:
            raise DataError(f"{kind} ids out of range")
        if np.any(labels[ids] < 0):
            raise DataError(f"{kind} ids include unlabeled nodes")
    return Dataset(manifest.get("name", os.path.basename(path)), x, labels,
                   edges, train, val, test)


def split_validation(dataset: Dataset, seed: int) -> LabeledSplit:
    """Deterministic even split of the validation ids into (A) and (B)."""
    val = dataset.val_ids
    if len(val) < 2:
        raise DataError("validation set too small to split")
    perm = Rng(seed, 71).shuffled(len(val))
    half = math.ceil(len(val) / 2)
    shuffled = val[perm]
    return LabeledSplit(dataset.labels, dataset.train_ids,
                        shuffled[:half], shuffled[half:], dataset.test_ids)


def subsample_edges(edges, retain_fraction: float, seed: int) -> list[tuple[int, int]]:
    """Uniform sample without replacement of floor(fraction * M) edges."""
    if not edges:
        raise DataError("empty edge list")
    if not 0.0 < retain_fraction <= 1.0:
        raise DataError("retain_fraction must be in (0, 1]")
    if retain_fraction == 1.0:
        return list(edges)
    m = int(math.floor(retain_fraction * len(edges)))
    perm = Rng(seed, 72).shuffled(len(edges))
    return [edges[i] for i in sorted(perm[:m].tolist())]


def edges_to_adjacency(n: int, edges) -> np.ndarray:
    a = np.zeros((n, n))
    for i, j in edges:
        a[i, j] = a[j, i] = 1.0
    np.fill_diagonal(a, 0.0)
    return a


def probability_histogram(values: np.ndarray) -> list[int]:
    """Six log10 bins over [0, 1]; bin mass sums to len(values)."""
    counts, _ = np.histogram(np.asarray(values, dtype=np.float64), bins=HIST_BIN_EDGES)
    return [int(c) for c in counts]


# ---------------------------------------------------------------------------
# reports


@dataclass
class RunReport:
    """Aggregated output of one experiment (all seeds of the selected
    hyperparameter point)."""

    config: dict
    traces: list[dict]  # per seed: {"seed": int, "inner_loss": [...], ...}
    final_accuracies: dict  # {"test_mean","test_std","per_seed":{seed:acc}}
    expected_edge_count: float
    histograms: dict  # group name -> 6 bin masses
    theta_path: str | None = None


_TRACE_COLUMNS = ("inner_loss", "outer_loss", "acc_val_a", "acc_val_b",
                  "acc_test", "expected_edges")


def export_report(report: RunReport, path: str):
    """Write report.json plus one trace CSV per seed (17 significant
    digits so a reload reproduces every value)."""
    os.makedirs(path, exist_ok=True)
    summary = {
        "config": report.config,
        "final_accuracies": report.final_accuracies,
        "expected_edge_count": report.expected_edge_count,
        "histograms": report.histograms,
        "theta_path": report.theta_path,
        "trace_seeds": [t["seed"] for t in report.traces],
    }
    with open(os.path.join(path, "report.json"), "w") as f:
        json.dump(summary, f, indent=2)
    for t in report.traces:
        fname = os.path.join(path, f"trace_seed{t['seed']}.csv")
        cols = [c for c in _TRACE_COLUMNS if t.get(c)]
        rows = max((len(t[c]) for c in cols), default=0)
        with open(fname, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step"] + list(cols))
            for r in range(rows):
                w.writerow([r] + [format(t[c][r], ".17g") if r < len(t[c]) else ""
                                  for c in cols])


def load_report(path: str) -> RunReport:
    with open(os.path.join(path, "report.json")) as f:
        summary = json.load(f)
    traces = []
    for seed in summary.get("trace_seeds", []):
        fname = os.path.join(path, f"trace_seed{seed}.csv")
        t = {"seed": seed}
        if os.path.exists(fname):
            with open(fname, newline="") as f:
                reader = csv.reader(f)
                header = next(reader)
                for c in header[1:]:
                    t[c] = []
                for row in reader:
                    for c, v in zip(header[1:], row[1:]):
                        if v != "":
                            t[c].append(float(v))
        traces.append(t)
    return RunReport(summary["config"], traces, summary["final_accuracies"],
                     summary["expected_edge_count"], summary["histograms"],
                     summary.get("theta_path"))


# ---------------------------------------------------------------------------
# converter for the scikit-learn tabular datasets


_TABULAR = {
    # name -> (sklearn loader attr, train size, val size)
    "wine": ("load_wine", 10, 20),
    "cancer": ("load_breast_cancer", 10, 20),
    "digits": ("load_digits", 50, 100),
}


def _stratified_pick(labels: np.ndarray, available: np.ndarray, count: int,
                     rng: Rng) -> np.ndarray:
    """Pick `count` ids spread as evenly as possible over the classes."""
    classes = np.unique(labels[available])
    pools = {c: rng.shuffled(len(available[labels[available] == c])) for c in classes}
    by_class = {c: available[labels[available] == c] for c in classes}
    picked = []
    round_i = 0
    while len(picked) < count:
        progress = False
        for c in classes:
            if len(picked) >= count:
                break
            if round_i < len(by_class[c]):
                picked.append(int(by_class[c][pools[c][round_i]]))
                progress = True
        if not progress:
            raise DataError("not enough samples to build the split")
        round_i += 1
    return np.asarray(sorted(picked), dtype=np.int64)


def make_tabular_bundle(name: str, out_dir: str, seed: int = 0) -> str:
    """Build a bundle from a scikit-learn dataset: features standardized
    to zero mean / unit variance per column, stratified train/val split."""
    if name not in _TABULAR:
        raise DataError(f"unknown tabular dataset {name!r}; choose from {sorted(_TABULAR)}")
    from sklearn import datasets as skdata

    loader, n_train, n_val = _TABULAR[name]
    bunch = getattr(skdata, loader)()
    x = np.asarray(bunch.data, dtype=np.float64)
    y = np.asarray(bunch.target, dtype=np.int64)
    std = x.std(axis=0)
    std[std == 0.0] = 1.0
    x = (x - x.mean(axis=0)) / std

    rng = Rng(seed, 73)
    n = x.shape[0]
    all_ids = np.arange(n)
    train = _stratified_pick(y, all_ids, n_train, rng)
    rest = np.setdiff1d(all_ids, train)
    val = _stratified_pick(y, rest, n_val, rng.derive(1))
    test = np.setdiff1d(rest, val)

    os.makedirs(out_dir, exist_ok=True)
    x.astype("<f8").tofile(os.path.join(out_dir, "features.bin"))
    with open(os.path.join(out_dir, "features.json"), "w") as f:
        json.dump({"shape": list(x.shape), "dtype": "float64", "order": "C"}, f)
    with open(os.path.join(out_dir, "labels.csv"), "w") as f:
        for i, c in enumerate(y):
            f.write(f"{i},{c}\n")
    for fname, ids in (("train.txt", train), ("val.txt", val), ("test.txt", test)):
        with open(os.path.join(out_dir, fname), "w") as f:
            f.write("\n".join(str(i) for i in ids) + "\n")
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump({"name": name, "features": "features.bin", "labels": "labels.csv",
                   "train": "train.txt", "val": "val.txt", "test": "test.txt"}, f, indent=2)
    return out_dir
