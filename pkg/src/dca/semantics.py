"""Per-class semantic feature table used as decoder queries and classifier anchors.

Vectors come either from a precomputed embedding file (the output of an
offline language-model pass) or from a synthetic compositional generator that
preserves attribute relatedness: "red circle" and "red square" share the
"red" component, so their cosine similarity exceeds that of unrelated pairs.
Rows are unit-norm and registration of new classes never touches old rows.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datagen import _word_seed
from .errors import (ConfigurationError, CoverageError, FormatError,
                     TemplateError, UnknownClassError)

NORM_TOLERANCE = 1e-6
DEFAULT_TEMPLATE = "a photo of a {}"


def fill_template(class_name: str, template: str = DEFAULT_TEMPLATE) -> str:
    """Substitute the class name into a single-placeholder prompt template."""
    if template.count("{}") != 1:
        raise TemplateError(
            f"template {template!r} must contain exactly one '{{}}' placeholder")
    return template.replace("{}", class_name)


@dataclass
class SemanticTable:
    """Ordered class-name -> unit vector map; immutable rows once registered."""

    dim: int
    names: list[str]
    vectors: np.ndarray  # (K, dim), unit rows
    source: str  # "precomputed_file" | "synthetic_compositional"
    _attr_basis: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    _seed: int = 0

    @property
    def num_classes(self) -> int:
        return len(self.names)

    def lookup(self, class_ids) -> np.ndarray:
        """Rows for the given ids, in the given order; copies, never views."""
        out = np.empty((len(class_ids), self.dim), dtype=np.float64)
        for row, cid in enumerate(class_ids):
            if not 0 <= int(cid) < len(self.names):
                raise UnknownClassError(f"class id {cid} not registered")
            out[row] = self.vectors[int(cid)]
        return out

    def register(self, names: list[str], vectors: np.ndarray | None = None) -> None:
        """Append classes. Synthetic tables derive vectors; file tables need them."""
        if vectors is None:
            if self.source != "synthetic_compositional":
                raise CoverageError("precomputed tables need explicit vectors to register")
            vectors = np.stack([_compose_vector(n, self.dim, self._seed, self._attr_basis)
                                for n in names])
        vectors = _normalized_rows(np.asarray(vectors, dtype=np.float64))
        if vectors.shape != (len(names), self.dim):
            raise FormatError("registered vectors do not match (count, dim)")
        self.names = self.names + list(names)
        self.vectors = np.concatenate([self.vectors, vectors], axis=0)


def lookup(table: SemanticTable, class_ids) -> np.ndarray:
    return table.lookup(class_ids)


def _normalized_rows(vectors: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=-1, keepdims=True)
    if np.any(norms < 1e-12):
        raise FormatError("zero-norm embedding vector cannot be normalized")
    return vectors / norms


def load_embedding_table(path: str | Path, taxonomy: list[str]) -> SemanticTable:
    """Load a {"dim": d, "embeddings": {name: [floats]}} JSON file."""
    path = Path(path)
    if not path.exists():
        raise FormatError(f"embedding file {path} does not exist")
    payload = json.loads(path.read_text())
    if "dim" not in payload or "embeddings" not in payload:
        raise FormatError("embedding file must carry 'dim' and 'embeddings'")
    dim = int(payload["dim"])
    table = payload["embeddings"]
    rows = []
    for name in taxonomy:
        if name not in table:
            raise CoverageError(f"embedding file is missing class {name!r}")
        vec = np.asarray(table[name], dtype=np.float64)
        if vec.shape != (dim,):
            raise FormatError(
                f"embedding for {name!r} has length {vec.shape}, expected ({dim},)")
        rows.append(vec)
    vectors = _normalized_rows(np.stack(rows))
    return SemanticTable(dim=dim, names=list(taxonomy), vectors=vectors,
                         source="precomputed_file")


def save_embedding_table(table: SemanticTable, path: str | Path) -> None:
    payload = {
        "dim": table.dim,
        "embeddings": {name: [float(v) for v in table.vectors[i]]
                       for i, name in enumerate(table.names)},
    }
    Path(path).write_text(json.dumps(payload))


def _attribute_vector(word: str, dim: int, seed: int,
                      basis: dict[str, np.ndarray]) -> np.ndarray:
    """Deterministic per-attribute direction, orthogonalized against the basis.

    Orthogonal attribute directions make the compositional similarity ordering
    exact: cos(shared attribute) = 1/2 versus cos(disjoint) = 0. When more
    attributes than dimensions are requested the residual degenerates and we
    fall back to the raw direction.
    """
    if word in basis:
        return basis[word]
    rng = np.random.default_rng([seed, 31, *_word_seed(word)])
    raw = rng.standard_normal(dim)
    residual = raw.copy()
    for existing in basis.values():
        residual -= (residual @ existing) * existing
    if np.linalg.norm(residual) < 1e-9:
        warnings.warn(f"attribute basis saturated at dim={dim}; "
                      f"{word!r} is not orthogonal to earlier attributes")
        residual = raw
    vec = residual / np.linalg.norm(residual)
    basis[word] = vec
    return vec


def _compose_vector(name: str, dim: int, seed: int,
                    basis: dict[str, np.ndarray]) -> np.ndarray:
    parts = name.split(" ")
    if len(parts) == 2:
        vec = (_attribute_vector(parts[0], dim, seed, basis)
               + _attribute_vector(parts[1], dim, seed, basis))
    else:
        rng = np.random.default_rng([seed, 47, *_word_seed(name)])
        vec = rng.standard_normal(dim)
    return vec / np.linalg.norm(vec)


def synth_embeddings(taxonomy: list[str], dim: int = 64, seed: int = 0) -> SemanticTable:
    """Language-model stand-in: compositional unit vectors per class name."""
    if dim < 8:
        raise ConfigurationError("embedding dim must be >= 8")
    basis: dict[str, np.ndarray] = {}
    vectors = np.stack([_compose_vector(name, dim, seed, basis) for name in taxonomy])
    return SemanticTable(dim=dim, names=list(taxonomy), vectors=vectors,
                         source="synthetic_compositional", _attr_basis=basis,
                         _seed=seed)


def check_table(table: SemanticTable, taxonomy: list[str]) -> None:
    """Validate coverage, order, and unit norms against a taxonomy."""
    if table.names[:len(taxonomy)] != list(taxonomy):
        missing = [n for n in taxonomy if n not in table.names]
        if missing:
            raise CoverageError(f"table is missing classes {missing}")
        raise FormatError("table rows are not in taxonomy order")
    norms = np.linalg.norm(table.vectors, axis=-1)
    if np.any(np.abs(norms - 1.0) > NORM_TOLERANCE):
        raise FormatError("table contains non-unit rows")
