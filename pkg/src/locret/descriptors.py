"""Descriptor records and the on-disk store.

A store is an ordered set of unit-norm vectors with string image ids and
optional category ids, persisted as a CKT1 rank-2 tensor plus a JSON
manifest. Stores are immutable once built; search never mutates them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ckt

NORM_TOL = 1e-5


@dataclass(frozen=True)
class Descriptor:
    image_id: str
    category_id: str | None
    vector: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64)
        norm = float(np.linalg.norm(v))
        if abs(norm - 1.0) > NORM_TOL:
            raise ValueError(f"descriptor {self.image_id!r} norm {norm} is not unit")
        object.__setattr__(self, "vector", v)


class DescriptorStore:
    def __init__(self, descriptors: list[Descriptor]):
        if not descriptors:
            raise ValueError("store cannot be empty")
        dims = {d.vector.shape[0] for d in descriptors}
        if len(dims) != 1:
            raise ValueError(f"mixed descriptor dimensions {sorted(dims)}")
        ids = [d.image_id for d in descriptors]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate image ids in store")
        self.ids = ids
        self.category_ids = [d.category_id for d in descriptors]
        self.matrix = np.stack([d.vector for d in descriptors])
        self._index = {i: k for k, i in enumerate(ids)}

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __contains__(self, image_id: str) -> bool:
        return image_id in self._index

    def vector(self, image_id: str) -> np.ndarray:
        return self.matrix[self._index[image_id]]

    def category(self, image_id: str) -> str | None:
        return self.category_ids[self._index[image_id]]

    def save(self, path: str | Path) -> None:
        path = Path(path)
        ckt.write_tensor(path, self.matrix.astype(np.float32))
        manifest = {"image_ids": self.ids, "category_ids": self.category_ids}
        with open(path.with_suffix(path.suffix + ".ids.json"), "w") as fh:
            json.dump(manifest, fh, indent=2)

    @classmethod
    def load(cls, path: str | Path) -> "DescriptorStore":
        path = Path(path)
        matrix = ckt.read_tensor(path)
        with open(path.with_suffix(path.suffix + ".ids.json")) as fh:
            manifest = json.load(fh)
        descs = [
            Descriptor(image_id=i, category_id=c, vector=v)
            for i, c, v in zip(manifest["image_ids"], manifest["category_ids"], matrix)
        ]
        return cls(descs)
