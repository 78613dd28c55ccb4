"""Embedding sets: ingestion of precomputed vectors and a synthetic generator.

On-disk format
--------------
A JSON manifest plus a flat blob of little-endian float32 values::

    {
      "format": "spurbench-embeddings",
      "version": 1,
      "blob": "vectors.f32",          # path relative to the manifest
      "dim": 512,
      "entries": [
        {"clip_ref": "a", "offset": 0, "length": 512},
        {"clip_ref": "b", "offset": 512, "length": 512,
         "frames": {"offset": 1024, "rows": 157, "cols": 64}}
      ]
    }

``offset`` and ``length`` count float32 elements (not bytes) from the start
of the blob. Frame matrices are stored row-major (``rows x cols``).

Synthetic generator
-------------------
Each item gets ``r * normalize(mu_fg + w * omega + beta * nu_bg + sigma * g)``
with ``g ~ N(0, I)``. ``omega`` is a direction shared by every class (feature
vectors of real encoders share a large common component), ``nu_bg`` is the
background's direction and ``r`` a magnitude drawn from a normal truncated at
zero: the clean parameters for foreground-only items, the mixed parameters
otherwise. When a familiarity map is given, a mixed item whose background is
not among its foreground's paired backgrounds is contracted further by
``mismatch_contraction``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

import numpy as np

from .episodes import Item, derive_seed
from .errors import EmbeddingError

FORMAT_NAME = "spurbench-embeddings"
FORMAT_VERSION = 1

# Conv64F ProtoNet magnitudes (clean / mixed). Standard deviations assume the
# published 95% half-widths were computed from 500 samples per condition.
CLEAN_MAG_MEAN = 83.26
MIXED_MAG_MEAN = 58.69
CLEAN_MAG_STD = 2.57 * np.sqrt(500) / 1.96
MIXED_MAG_STD = 1.09 * np.sqrt(500) / 1.96


class EmbeddingSet:
    """Immutable map clip_ref -> global vector (+ optional frame descriptors)."""

    def __init__(self, global_vecs: Mapping[str, np.ndarray] | None = None,
                 frame_vecs: Mapping[str, np.ndarray] | None = None, *,
                 refs: Sequence[str] | None = None, matrix: np.ndarray | None = None):
        if matrix is None:
            global_vecs = dict(global_vecs or {})
            refs = list(global_vecs)
            dims = {np.asarray(v).shape for v in global_vecs.values()}
            if len(dims) > 1:
                raise EmbeddingError(f"dimension mismatch: vector shapes {sorted(dims)}")
            matrix = (np.stack([np.asarray(global_vecs[r], dtype=np.float64) for r in refs])
                      if refs else np.zeros((0, 0)))
        matrix = np.array(matrix, dtype=np.float64)
        if matrix.ndim != 2 or len(refs) != matrix.shape[0]:
            raise EmbeddingError("embedding matrix must be 2-D with one row per clip")
        if not np.all(np.isfinite(matrix)):
            raise EmbeddingError("non-finite embedding")
        matrix.setflags(write=False)
        self._refs = tuple(refs)
        self._index = {r: i for i, r in enumerate(self._refs)}
        if len(self._index) != len(self._refs):
            raise EmbeddingError("duplicate clip_ref in embedding set")
        self._matrix = matrix
        frames = {}
        for ref, f in (frame_vecs or {}).items():
            f = np.array(f, dtype=np.float64)
            if f.ndim != 2 or f.shape[0] == 0:
                raise EmbeddingError(f"frame descriptors for {ref!r} must be a non-empty matrix")
            if not np.all(np.isfinite(f)):
                raise EmbeddingError("non-finite embedding")
            f.setflags(write=False)
            frames[ref] = f
        self._frames = MappingProxyType(frames)

    @property
    def dim(self) -> int:
        return self._matrix.shape[1]

    @property
    def refs(self) -> tuple[str, ...]:
        return self._refs

    @property
    def matrix(self) -> np.ndarray:
        return self._matrix

    @property
    def frame_vecs(self) -> Mapping[str, np.ndarray]:
        return self._frames

    def __len__(self):
        return len(self._refs)

    def __contains__(self, ref):
        return ref in self._index

    def __getitem__(self, ref: str) -> np.ndarray:
        return self._matrix[self._index[ref]]

    def vectors(self, refs: Iterable[str]) -> np.ndarray:
        try:
            rows = [self._index[r] for r in refs]
        except KeyError as e:
            raise EmbeddingError(f"clip {e.args[0]!r} has no embedding") from None
        return self._matrix[rows]

    def frames(self, ref: str) -> np.ndarray:
        try:
            return self._frames[ref]
        except KeyError:
            raise EmbeddingError(f"no local descriptors for clip {ref!r}") from None

    def save(self, manifest_path: str | Path, blob_name: str | None = None) -> None:
        manifest_path = Path(manifest_path)
        blob_name = blob_name or manifest_path.with_suffix(".f32").name
        entries, chunks, offset = [], [], 0
        for i, ref in enumerate(self._refs):
            entry = {"clip_ref": ref, "offset": offset, "length": self.dim}
            chunks.append(self._matrix[i])
            offset += self.dim
            if ref in self._frames:
                f = self._frames[ref]
                entry["frames"] = {"offset": offset, "rows": f.shape[0], "cols": f.shape[1]}
                chunks.append(f.ravel())
                offset += f.size
            entries.append(entry)
        blob = np.concatenate(chunks) if chunks else np.zeros(0)
        (manifest_path.parent / blob_name).write_bytes(blob.astype("<f4").tobytes())
        manifest = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "blob": blob_name,
                    "dim": self.dim, "entries": entries}
        manifest_path.write_text(json.dumps(manifest, indent=1) + "\n")

    def subset(self, refs: Iterable[str]) -> "EmbeddingSet":
        refs = list(refs)
        frames = {r: self._frames[r] for r in refs if r in self._frames}
        return EmbeddingSet(refs=refs, matrix=self.vectors(refs), frame_vecs=frames)


def load_embedding_set(manifest_path: str | Path,
                       required: Iterable[str] | None = None) -> EmbeddingSet:
    """Load and validate an embedding set written in the manifest + blob format."""
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != FORMAT_NAME:
        raise EmbeddingError(f"{manifest_path}: not a {FORMAT_NAME} manifest")
    blob = np.frombuffer((manifest_path.parent / manifest["blob"]).read_bytes(), dtype="<f4")
    dim = manifest.get("dim")
    refs, rows, frames = [], [], {}
    for e in manifest["entries"]:
        start, length = int(e["offset"]), int(e["length"])
        if dim is not None and length != dim:
            raise EmbeddingError(
                f"dimension mismatch: {e['clip_ref']!r} has length {length}, expected {dim}")
        if start + length > blob.size:
            raise EmbeddingError(f"manifest incomplete: blob too short for {e['clip_ref']!r}")
        refs.append(e["clip_ref"])
        rows.append(blob[start:start + length])
        if "frames" in e:
            f = e["frames"]
            o, r, c = int(f["offset"]), int(f["rows"]), int(f["cols"])
            if o + r * c > blob.size:
                raise EmbeddingError(f"manifest incomplete: frames of {e['clip_ref']!r}")
            frames[e["clip_ref"]] = blob[o:o + r * c].reshape(r, c)
    if len({r.size for r in rows}) > 1:
        raise EmbeddingError("dimension mismatch between entries")
    matrix = np.stack(rows).astype(np.float64) if rows else np.zeros((0, dim or 0))
    emb = EmbeddingSet(refs=refs, matrix=matrix, frame_vecs=frames)
    if required is not None:
        missing = [r for r in required if r not in emb]
        if missing:
            raise EmbeddingError(f"manifest incomplete: {len(missing)} clips missing, e.g. {missing[0]!r}")
    return emb


def _unit_directions(n: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    if n <= dim:
        q, _ = np.linalg.qr(rng.standard_normal((dim, n)))
        return q.T.copy()
    v = rng.standard_normal((n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


@dataclass(frozen=True)
class ContractionModel:
    """Generative model of magnitude contraction under background mixing.

    Directions are orthonormal (class, background and shared directions
    together) when ``dim`` allows it, random unit vectors otherwise.
    """

    classes: tuple[str, ...]
    backgrounds: tuple[str, ...]
    dim: int = 128
    angular_noise: float = 0.075
    bg_weight: float = 0.02
    shared_weight: float = 2.0
    clean_mag_mean: float = CLEAN_MAG_MEAN
    clean_mag_std: float = CLEAN_MAG_STD
    mixed_mag_mean: float = MIXED_MAG_MEAN
    mixed_mag_std: float = MIXED_MAG_STD
    mismatch_contraction: float = MIXED_MAG_MEAN / CLEAN_MAG_MEAN
    familiar: Mapping[str, frozenset[str]] | None = None
    seed: int = 0
    class_directions: np.ndarray = field(init=False, repr=False, compare=False)
    bg_directions: np.ndarray = field(init=False, repr=False, compare=False)
    shared_direction: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "backgrounds", tuple(self.backgrounds))
        if not self.classes:
            raise EmbeddingError("model needs at least one class")
        if self.dim < 1:
            raise EmbeddingError("dim must be positive")
        for name in ("angular_noise", "bg_weight", "shared_weight", "clean_mag_std", "mixed_mag_std"):
            if not getattr(self, name) >= 0:
                raise EmbeddingError(f"{name} must be >= 0")
        if not (self.clean_mag_mean > 0 and self.mixed_mag_mean > 0):
            raise EmbeddingError("magnitude means must be positive")
        if self.mixed_mag_mean > self.clean_mag_mean:
            raise EmbeddingError("mixed_mag_mean must not exceed clean_mag_mean (contraction model)")
        if not 0 < self.mismatch_contraction <= 1:
            raise EmbeddingError("mismatch_contraction must be in (0, 1]")
        if self.familiar is not None:
            object.__setattr__(self, "familiar", MappingProxyType(
                {k: frozenset(v) for k, v in self.familiar.items()}))
        nc, nb = len(self.classes), len(self.backgrounds)
        rng = np.random.default_rng(self.seed)
        dirs = _unit_directions(nc + nb + 1, self.dim, rng)
        for name, arr in (("class_directions", dirs[:nc]), ("bg_directions", dirs[nc:nc + nb]),
                          ("shared_direction", dirs[-1])):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "_class_index", {c: i for i, c in enumerate(self.classes)})
        object.__setattr__(self, "_bg_index", {b: i for i, b in enumerate(self.backgrounds)})

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def replace(self, **changes) -> "ContractionModel":
        return dataclasses.replace(self, **changes)

    def prototype_direction(self, fg: str) -> np.ndarray:
        """Noise-free clean direction of a class."""
        v = self.class_directions[self._class_index[fg]] + self.shared_weight * self.shared_direction
        return v / np.linalg.norm(v)

    def is_mismatched(self, item: Item) -> bool:
        return (item.bg is not None and self.familiar is not None
                and item.bg not in self.familiar.get(item.fg, frozenset()))

    def _magnitude(self, rng, clean: bool) -> float:
        mean, std = ((self.clean_mag_mean, self.clean_mag_std) if clean
                     else (self.mixed_mag_mean, self.mixed_mag_std))
        # normal truncated at zero, by rejection
        while True:
            r = mean + std * rng.standard_normal()
            if r > 0:
                return float(r)

    def sample(self, item: Item, rng: np.random.Generator) -> np.ndarray:
        try:
            v = self.class_directions[self._class_index[item.fg]] + self.shared_weight * self.shared_direction
        except KeyError:
            raise EmbeddingError(f"unknown foreground {item.fg!r}") from None
        if item.bg is not None:
            try:
                v = v + self.bg_weight * self.bg_directions[self._bg_index[item.bg]]
            except KeyError:
                raise EmbeddingError(f"unknown background {item.bg!r}") from None
        if self.angular_noise:
            v = v + self.angular_noise * rng.standard_normal(self.dim)
        r = self._magnitude(rng, item.is_clean)
        if self.is_mismatched(item):
            r *= self.mismatch_contraction
        return r * v / np.linalg.norm(v)


def item_seed(seed: int, clip_ref: str) -> int:
    digest = hashlib.blake2b(clip_ref.encode(), digest_size=8).digest()
    return derive_seed(seed, int.from_bytes(digest, "little"))


def synth_embeddings(model: ContractionModel, items: Iterable[Item], seed: int = 0,
                     n_frames: int = 0, frame_noise: float = 0.3) -> EmbeddingSet:
    """Draw one vector per item. Each item's randomness is keyed by
    ``(seed, clip_ref)``, so a clip's vector does not depend on which other
    items are generated alongside it.

    With ``n_frames > 0`` every clip also gets that many local descriptors,
    each its global direction plus isotropic noise of expected norm ``frame_noise``.
    """
    refs, rows, frames = [], [], {}
    for it in items:
        rng = np.random.default_rng(item_seed(seed, it.clip_ref))
        vec = model.sample(it, rng)
        refs.append(it.clip_ref)
        rows.append(vec)
        if n_frames:
            unit = vec / np.linalg.norm(vec)
            noise = rng.standard_normal((n_frames, model.dim)) / np.sqrt(model.dim)
            frames[it.clip_ref] = unit + frame_noise * noise
    matrix = np.stack(rows) if rows else np.zeros((0, model.dim))
    # round to float32 so a saved-then-loaded set is identical to the in-memory one
    matrix = matrix.astype(np.float32).astype(np.float64)
    frames = {k: v.astype(np.float32).astype(np.float64) for k, v in frames.items()}
    return EmbeddingSet(refs=refs, matrix=matrix, frame_vecs=frames)


def model_for_catalog(catalog, classes: Sequence[str] | None = None, **params) -> ContractionModel:
    """A contraction model covering ``classes`` (default: all foregrounds) and
    every background of the catalog's tables, with pairing familiarity."""
    classes = tuple(catalog.table.foregrounds if classes is None else classes)
    bgs = set(catalog.table.backgrounds)
    if catalog.hard_table is not None:
        bgs |= set(catalog.hard_table.backgrounds)
    params.setdefault("familiar", catalog.familiar())
    return ContractionModel(classes, tuple(sorted(bgs)), **params)
