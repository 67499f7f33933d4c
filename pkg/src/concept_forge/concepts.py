"""Concept vector containers and their JSON form."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

UNIT_TOL = 1e-9


def normalize_rows(X, eps=0.0):
    X = np.asarray(X, dtype=float)
    norms = np.linalg.norm(X, axis=-1, keepdims=True)
    return X / np.where(norms > eps, norms, 1.0)


@dataclass(frozen=True, eq=False)
class ConceptSet:
    """Concept representations stored as rows of a ``K_total x d`` matrix.

    ``attribute_of`` optionally groups rows by attribute; ``flags`` carries
    per-extractor diagnostics such as ``"near_zero:<row>"``.
    """

    vectors: np.ndarray
    attribute_of: Optional[np.ndarray] = None
    names: tuple = ()
    normalized: bool = False
    flags: tuple = ()

    def __post_init__(self):
        V = np.array(self.vectors, dtype=float, copy=True)
        if V.ndim != 2:
            raise ValueError(f"concept vectors must be 2-D, got {V.shape}")
        if not np.all(np.isfinite(V)):
            raise ValueError("concept vectors contain non-finite entries")
        if self.normalized and V.shape[0]:
            err = np.abs(np.linalg.norm(V, axis=1) - 1.0).max()
            if err > UNIT_TOL:
                raise ValueError(f"rows flagged unit-norm deviate by {err:.3g}")
        V.flags.writeable = False
        object.__setattr__(self, "vectors", V)
        if self.attribute_of is not None:
            attr = np.array(self.attribute_of, dtype=np.int64, copy=True)
            if attr.shape != (V.shape[0],):
                raise ValueError("attribute_of must have one entry per concept")
            attr.flags.writeable = False
            object.__setattr__(self, "attribute_of", attr)
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "flags", tuple(self.flags))

    def __len__(self):
        return self.vectors.shape[0]

    @property
    def d(self) -> int:
        return self.vectors.shape[1]

    @classmethod
    def from_rows(cls, rows, attribute_of=None, names=(), flags=()):
        """Unit-normalize ``rows`` and wrap them."""
        rows = np.asarray(rows, dtype=float)
        norms = np.linalg.norm(rows, axis=1)
        if np.any(norms == 0):
            raise ValueError("cannot normalize a zero concept vector")
        return cls(rows / norms[:, None], attribute_of, names, True, flags)

    def normalized_copy(self) -> "ConceptSet":
        return ConceptSet.from_rows(self.vectors, self.attribute_of, self.names, self.flags)

    def to_json(self) -> dict:
        return {
            "vectors": self.vectors.tolist(),
            "attribute_of": None if self.attribute_of is None else self.attribute_of.tolist(),
            "names": list(self.names),
            "normalized": self.normalized,
            "flags": list(self.flags),
        }

    @classmethod
    def from_json(cls, obj) -> "ConceptSet":
        return cls(
            np.asarray(obj["vectors"], dtype=float),
            obj.get("attribute_of"),
            tuple(obj.get("names") or ()),
            bool(obj.get("normalized", False)),
            tuple(obj.get("flags") or ()),
        )
