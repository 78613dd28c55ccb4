"""Foreground/background pairing tables, class splits and curation records.

Pairing-table text grammar (one record per line)::

    # comment
    variant: standard | hard
    <foreground> -> <bg1>, <bg2>, <bg3>, <bg4>

The unicode arrow ``→`` is accepted in place of ``->``. Class names are
lower-cased and stripped of surrounding whitespace; inner whitespace is kept.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from types import MappingProxyType
from typing import Mapping, Sequence

import numpy as np

from .errors import CatalogError

BACKGROUNDS_PER_FOREGROUND = 4
DEFAULT_BACKGROUND_CAP = 24


class Variant(str, enum.Enum):
    STANDARD = "standard"
    HARD = "hard"


# Split lists as published use slightly different names than the table rows.
SPLIT_NAME_ALIASES = {
    "coughing": "cough",
    "clearing throat": "throat clearing",
}

CANONICAL_TEST = (
    "crackling fire", "crow", "chainsaw", "coughing",
    "sneezing", "blender", "phone", "pig",
)
CANONICAL_VAL = ("page turn", "keys drop", "door slam", "clearing throat", "drawer")

# Documentation constants: mixtures generated vs. kept after curation.
GENERATED_MIXTURES = 50116
CURATED_MIXTURES = 16378


def _norm(name: str) -> str:
    return " ".join(name.strip().lower().split())


def canonical_name(name: str) -> str:
    """Map a class name to the spelling used in the pairing tables."""
    name = _norm(name)
    return SPLIT_NAME_ALIASES.get(name, name)


@dataclass(frozen=True)
class PairingTable:
    """Foreground class -> ordered tuple of exactly four background classes."""

    pairs: Mapping[str, tuple[str, ...]]
    variant: Variant = Variant.STANDARD

    def __post_init__(self):
        pairs = {_norm(fg): tuple(_norm(b) for b in bgs) for fg, bgs in self.pairs.items()}
        object.__setattr__(self, "pairs", MappingProxyType(pairs))
        object.__setattr__(self, "variant", Variant(self.variant))
        self.validate()

    def validate(self, background_cap: int = DEFAULT_BACKGROUND_CAP) -> None:
        if not self.pairs:
            raise CatalogError("pairing table is empty")
        for fg, bgs in self.pairs.items():
            if not fg or any(not b for b in bgs):
                raise CatalogError("class names must be non-empty")
            if len(bgs) != BACKGROUNDS_PER_FOREGROUND:
                raise CatalogError(
                    f"pairing arity violation: {fg!r} has {len(bgs)} backgrounds, "
                    f"expected {BACKGROUNDS_PER_FOREGROUND}")
            if len(set(bgs)) != len(bgs):
                raise CatalogError(f"pairing arity violation: {fg!r} repeats a background")
            if fg in bgs:
                raise CatalogError(f"{fg!r} is paired with itself as background")
        for bg, n in self.background_usage().items():
            if n > background_cap:
                warnings.warn(
                    f"background {bg!r} serves {n} foregrounds (cap {background_cap})",
                    stacklevel=3)

    @property
    def foregrounds(self) -> tuple[str, ...]:
        return tuple(self.pairs)

    @property
    def backgrounds(self) -> tuple[str, ...]:
        """All background classes, sorted."""
        return tuple(sorted({b for bgs in self.pairs.values() for b in bgs}))

    def background_usage(self) -> dict[str, int]:
        usage: dict[str, int] = {}
        for bgs in self.pairs.values():
            for b in bgs:
                usage[b] = usage.get(b, 0) + 1
        return usage

    def __getitem__(self, fg: str) -> tuple[str, ...]:
        return self.pairs[canonical_name(fg)]

    def __contains__(self, fg: str) -> bool:
        return canonical_name(fg) in self.pairs

    def dumps(self) -> str:
        lines = [f"variant: {self.variant.value}", ""]
        lines += [f"{fg} -> {', '.join(bgs)}" for fg, bgs in self.pairs.items()]
        return "\n".join(lines) + "\n"


def load_pairing_table(source: str, variant: Variant | str | None = None) -> PairingTable:
    """Parse pairing-table text. ``variant`` overrides any ``variant:`` line."""
    pairs: dict[str, tuple[str, ...]] = {}
    declared = None
    for lineno, raw in enumerate(source.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.lower().startswith("variant:"):
            declared = line.split(":", 1)[1].strip().lower()
            continue
        line = line.replace("→", "->")
        if "->" not in line:
            raise CatalogError(f"line {lineno}: expected '<foreground> -> <backgrounds>'")
        fg, rest = line.split("->", 1)
        fg = _norm(fg)
        bgs = tuple(_norm(b) for b in rest.split(",") if b.strip())
        if fg in pairs:
            raise CatalogError(f"duplicate class: {fg!r} (line {lineno})")
        pairs[fg] = bgs
    chosen = variant if variant is not None else (declared or Variant.STANDARD)
    try:
        chosen = Variant(chosen)
    except ValueError:
        raise CatalogError(f"unknown variant {chosen!r}") from None
    return PairingTable(pairs, chosen)


def bundled_table(variant: Variant | str = Variant.STANDARD) -> PairingTable:
    """The standard or hard pairing table shipped with the package."""
    variant = Variant(variant)
    text = resources.files("spurbench.data").joinpath(f"{variant.value}.pairs").read_text()
    return load_pairing_table(text, variant)


def resolve_pairing(spec: str) -> PairingTable:
    """``standard``, ``hard`` or a path to a pairing-table file."""
    if spec in (Variant.STANDARD.value, Variant.HARD.value):
        return bundled_table(spec)
    return load_pairing_table(Path(spec).read_text())


@dataclass(frozen=True)
class SplitAssignment:
    train: frozenset[str]
    val: frozenset[str]
    test: frozenset[str]

    def __post_init__(self):
        if self.train & self.val or self.train & self.test or self.val & self.test:
            raise CatalogError("splits overlap")

    def __getitem__(self, name: str) -> frozenset[str]:
        if name not in ("train", "val", "test"):
            raise KeyError(name)
        return getattr(self, name)

    def as_dict(self) -> dict[str, list[str]]:
        return {k: sorted(getattr(self, k)) for k in ("train", "val", "test")}


def assign_splits(table: PairingTable, canonical: bool = True, seed: int = 0) -> SplitAssignment:
    """Partition foreground classes into train/val/test.

    With ``canonical`` the published 25/5/8 partition is returned (this needs
    every published val/test class to be present in ``table``). Otherwise the
    classes are shuffled with ``seed`` and cut 70/10/20, each split getting at
    least one class. Background classes are never split.
    """
    fgs = sorted(table.foregrounds)
    if len(fgs) < 3:
        raise CatalogError("cannot split: fewer than 3 foreground classes")
    if canonical:
        test = {canonical_name(c) for c in CANONICAL_TEST}
        val = {canonical_name(c) for c in CANONICAL_VAL}
        missing = (test | val) - set(fgs)
        if missing:
            raise CatalogError(f"canonical split classes missing from table: {sorted(missing)}")
        train = set(fgs) - test - val
        return SplitAssignment(frozenset(train), frozenset(val), frozenset(test))
    n = len(fgs)
    n_test = max(1, round(0.2 * n))
    n_val = max(1, round(0.1 * n))
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [fgs[i] for i in order]
    test = shuffled[:n_test]
    val = shuffled[n_test:n_test + n_val]
    train = shuffled[n_test + n_val:]
    return SplitAssignment(frozenset(train), frozenset(val), frozenset(test))


def resolve_split(table: PairingTable, spec: str) -> SplitAssignment:
    """``canonical`` or ``seeded:<seed>``."""
    if spec == "canonical":
        return assign_splits(table, canonical=True)
    if spec.startswith("seeded:"):
        return assign_splits(table, canonical=False, seed=int(spec.split(":", 1)[1]))
    raise CatalogError(f"unknown split spec {spec!r}")


N_CRITERIA = 4
CRITERIA = (
    "acoustic similarity",
    "background overwhelms foreground",
    "background inaudible",
    "unintended events",
)


@dataclass(frozen=True)
class CurationRecord:
    clip_id: str
    scores: tuple[int, ...]
    kept: bool = field(init=False)

    def __post_init__(self):
        scores = tuple(self.scores)
        if len(scores) != N_CRITERIA:
            raise CatalogError(f"invalid score: expected {N_CRITERIA} scores, got {len(scores)}")
        for s in scores:
            if isinstance(s, bool) or int(s) != s or not 1 <= s <= 5:
                raise CatalogError(f"invalid score: {s!r} not an integer in [1, 5]")
        object.__setattr__(self, "scores", tuple(int(s) for s in scores))
        # mean >= 4  <=>  sum >= 16; integer arithmetic keeps the boundary exact
        object.__setattr__(self, "kept", sum(self.scores) >= 4 * N_CRITERIA)

    @property
    def mean(self) -> float:
        return sum(self.scores) / N_CRITERIA


def curate(scores: Sequence[int], clip_id: str = "") -> CurationRecord:
    """Mixtures whose mean annotator score is below 4 are discarded."""
    return CurationRecord(clip_id, tuple(scores))


def curated_keep_rate() -> float:
    return CURATED_MIXTURES / GENERATED_MIXTURES


@dataclass(frozen=True)
class Catalog:
    """A pairing table, its split assignment and (optionally) the hard-variant
    table used for Hard-OOD episodes."""

    table: PairingTable
    splits: SplitAssignment
    hard_table: PairingTable | None = None

    @classmethod
    def default(cls) -> "Catalog":
        table = bundled_table(Variant.STANDARD)
        return cls(table, assign_splits(table, canonical=True), bundled_table(Variant.HARD))

    def classes(self, split: str = "test") -> tuple[str, ...]:
        return tuple(sorted(self.splits[split]))

    def familiar(self) -> dict[str, frozenset[str]]:
        """Backgrounds each foreground is paired with in the main table."""
        return {fg: frozenset(bgs) for fg, bgs in self.table.pairs.items()}
