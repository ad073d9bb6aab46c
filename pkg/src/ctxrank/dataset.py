"""Ranking datasets and their JSONL serialization."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .ranklosses import is_permutation

DATASET_FORMAT = "ctxrank-dataset"
DATASET_VERSION = 1


@dataclass
class Dataset:
    """A list of ranking tasks ``(objects (n, d), positions (n,))`` with a common ``d``."""

    objects: list[np.ndarray]
    rankings: list[np.ndarray]
    dim: int = field(default=-1)

    def __post_init__(self):
        if len(self.objects) != len(self.rankings):
            raise ValueError("objects and rankings differ in length")
        self.objects = [np.asarray(x, dtype=np.float64) for x in self.objects]
        self.rankings = [np.asarray(r, dtype=np.int64) for r in self.rankings]
        if self.dim < 0:
            if not self.objects:
                raise ValueError("cannot infer dimension of an empty dataset")
            self.dim = int(self.objects[0].shape[1])
        for x, r in zip(self.objects, self.rankings):
            if x.ndim != 2 or x.shape[1] != self.dim:
                raise ValueError(f"task of shape {x.shape} does not have dimension {self.dim}")
            if len(r) != len(x) or not is_permutation(r):
                raise ValueError("ranking is not a permutation of the task's items")
            if not np.all(np.isfinite(x)):
                raise ValueError("features must be finite")

    @classmethod
    def from_arrays(cls, X: np.ndarray, R: np.ndarray) -> Dataset:
        """Build from stacked arrays of shape (N, n, d) and (N, n)."""
        return cls(list(X), list(R), dim=X.shape[-1])

    def __len__(self) -> int:
        return len(self.objects)

    def __iter__(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        return iter(zip(self.objects, self.rankings))

    def subset(self, indices) -> Dataset:
        return Dataset([self.objects[i] for i in indices], [self.rankings[i] for i in indices], self.dim)

    def size_groups(self, indices=None) -> dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]]:
        """Stack tasks by size: ``{n: (task indices, X (B, n, d), R (B, n))}``."""
        if indices is None:
            indices = range(len(self))
        buckets: dict[int, list[int]] = {}
        for i in indices:
            buckets.setdefault(len(self.rankings[i]), []).append(i)
        return {
            n: (
                np.array(idx),
                np.stack([self.objects[i] for i in idx]),
                np.stack([self.rankings[i] for i in idx]),
            )
            for n, idx in sorted(buckets.items())
        }


def dumps_dataset(data: Dataset) -> str:
    lines = [json.dumps({"format": DATASET_FORMAT, "version": DATASET_VERSION, "dim": data.dim})]
    for x, r in data:
        record = {"objects": [[float(v) for v in row] for row in x], "ranking": [int(p) for p in r]}
        lines.append(json.dumps(record, separators=(",", ":")))
    return "\n".join(lines) + "\n"


def loads_dataset(text: str) -> Dataset:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ValueError("empty dataset file")
    header = json.loads(lines[0])
    if header.get("format") != DATASET_FORMAT:
        raise ValueError(f"not a {DATASET_FORMAT} file")
    if header.get("version") != DATASET_VERSION:
        raise ValueError(f"unsupported dataset version {header.get('version')}")
    objects, rankings = [], []
    for ln in lines[1:]:
        rec = json.loads(ln)
        objects.append(np.array(rec["objects"], dtype=np.float64).reshape(-1, header["dim"]))
        rankings.append(np.array(rec["ranking"], dtype=np.int64))
    return Dataset(objects, rankings, dim=int(header["dim"]))


def checksum(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
