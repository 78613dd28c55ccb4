"""N-way K-shot episode sampling under IID, OOD, Hard-OOD and clean-query regimes.

Background regimes, per episode class ``c`` with support backgrounds ``S_c``:

* IID: query backgrounds of ``c`` are exactly the set ``S_c``.
* OOD: query backgrounds of ``c`` come from the other episode classes'
  pairing backgrounds and avoid ``S_c``.
* Hard-OOD: OOD, drawn from the hard pairing table, and additionally every
  support background of every other class shows up among ``c``'s queries.
* Clean-query: IID supports, foreground-only queries.

Clips are drawn from a :class:`ClipPool` keyed by ``(foreground, background)``
and sorted by identifier, so results depend only on the seed and the pool's
contents, never on its order.
"""

from __future__ import annotations

import csv
import enum
import io
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .catalog import Catalog, PairingTable, Variant
from .errors import EpisodeError, InfeasibleEpisode, PoolExhausted

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
MAX_TUPLE_RETRIES = 32
NONE_BG = ""


class Mode(str, enum.Enum):
    IID = "iid"
    OOD = "ood"
    HARD_OOD = "hard-ood"
    CLEAN_QUERY = "clean-query"


def _splitmix64(x: int) -> int:
    x = (x + GOLDEN_GAMMA) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def derive_seed(base_seed: int, episode_index: int) -> int:
    """64-bit seed for episode ``episode_index``, independent of earlier episodes.

    The finalizer is a bijection on 64-bit words and the index enters through an
    odd multiplier, so distinct indices (below 2**64) never collide.
    """
    x = (_splitmix64(base_seed & MASK64) + (episode_index & MASK64) * GOLDEN_GAMMA) & MASK64
    return _splitmix64(x)


def derive_rng(base_seed: int, episode_index: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(base_seed, episode_index))


@dataclass(frozen=True)
class EpisodeSpec:
    n_way: int = 5
    k_shot: int = 5
    n_query: int = 10
    mode: Mode = Mode.IID
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        if self.n_way < 2:
            raise EpisodeError("n_way must be >= 2")
        if self.k_shot < 1:
            raise EpisodeError("k_shot must be >= 1")
        if self.n_query < 1:
            raise EpisodeError("n_query must be >= 1")


@dataclass(frozen=True)
class Item:
    clip_ref: str
    fg: str
    bg: str | None

    @property
    def is_clean(self) -> bool:
        return self.bg is None


@dataclass(frozen=True)
class Episode:
    classes: tuple[str, ...]
    support: tuple[Item, ...]
    query: tuple[Item, ...]
    mode: Mode = Mode.IID
    seed: int = 0

    @property
    def n_way(self) -> int:
        return len(self.classes)

    def _labels(self, items):
        index = {c: i for i, c in enumerate(self.classes)}
        return np.array([index[it.fg] for it in items], dtype=np.intp)

    @property
    def support_labels(self) -> np.ndarray:
        return self._labels(self.support)

    @property
    def query_labels(self) -> np.ndarray:
        return self._labels(self.query)

    def items(self) -> Iterable[tuple[str, Item]]:
        for it in self.support:
            yield "support", it
        for it in self.query:
            yield "query", it


@dataclass
class ClipPool:
    """Available clips indexed by ``(fg, bg)``; ``bg is None`` for clean clips."""

    clips: dict[str, Item] = field(default_factory=dict)

    def __post_init__(self):
        self._index: dict[tuple[str, str | None], tuple[str, ...]] = {}
        buckets: dict[tuple[str, str | None], list[str]] = {}
        for ref, it in self.clips.items():
            if ref != it.clip_ref:
                raise EpisodeError(f"clip key {ref!r} does not match item {it.clip_ref!r}")
            buckets.setdefault((it.fg, it.bg), []).append(ref)
        self._index = {k: tuple(sorted(v)) for k, v in buckets.items()}

    @classmethod
    def from_items(cls, items: Iterable[Item]) -> "ClipPool":
        clips = {}
        for it in items:
            if it.clip_ref in clips:
                raise EpisodeError(f"duplicate clip_ref {it.clip_ref!r}")
            clips[it.clip_ref] = it
        return cls(clips)

    def __len__(self):
        return len(self.clips)

    def __contains__(self, clip_ref):
        return clip_ref in self.clips

    def bucket(self, fg: str, bg: str | None) -> tuple[str, ...]:
        return self._index.get((fg, bg), ())

    @classmethod
    def synthetic(cls, table: PairingTable, classes: Sequence[str], per_combo: int = 20,
                  clean_per_class: int = 20, backgrounds: Sequence[str] | None = None) -> "ClipPool":
        """A pool holding ``per_combo`` clip ids for every (class, background)
        combination plus ``clean_per_class`` foreground-only clip ids."""
        bgs = table.backgrounds if backgrounds is None else tuple(backgrounds)
        items = []
        for fg in classes:
            for bg in bgs:
                items += [Item(f"{fg}|{bg}|{i:03d}", fg, bg) for i in range(per_combo)]
            items += [Item(f"{fg}|-|{i:03d}", fg, None) for i in range(clean_per_class)]
        return cls.from_items(items)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["clip_ref", "fg", "bg"])
            for ref in sorted(self.clips):
                it = self.clips[ref]
                w.writerow([ref, it.fg, NONE_BG if it.bg is None else it.bg])

    @classmethod
    def from_csv(cls, path: str | Path) -> "ClipPool":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls.from_items(Item(r["clip_ref"], r["fg"], r["bg"] or None) for r in rows)


def _hard_table(catalog: Catalog) -> PairingTable:
    if catalog.table.variant is Variant.HARD:
        return catalog.table
    if catalog.hard_table is not None:
        return catalog.hard_table
    raise EpisodeError("hard-ood episodes need a hard pairing table")


def _pick(rng, seq, k, replace=False):
    # integers/permutation instead of rng.choice: same distribution, far less overhead
    if replace:
        idx = rng.integers(0, len(seq), size=k)
    else:
        if k > len(seq):
            raise ValueError(f"cannot draw {k} of {len(seq)} without replacement")
        idx = rng.permutation(len(seq))[:k]
    return [seq[i] for i in idx]


def _iid_support_bgs(rng, paired, k_shot, n_query):
    n_distinct = min(k_shot, len(paired), n_query)
    chosen = _pick(rng, paired, n_distinct)
    return chosen + _pick(rng, chosen, k_shot - n_distinct, replace=True)


def _queries_covering(rng, required, allowed, n_query):
    """``n_query`` backgrounds containing every element of ``required``, the rest
    drawn uniformly from ``allowed``."""
    required = sorted(required)
    if len(required) > n_query:
        return None
    bgs = required + _pick(rng, allowed, n_query - len(required), replace=True)
    return [bgs[i] for i in rng.permutation(n_query)]


def _random_sdr(rng, options: list[list[str]]) -> list[str] | None:
    """A system of distinct representatives (one background per class)."""
    order = list(rng.permutation(len(options)))
    shuffled = [_pick(rng, opts, len(opts)) for opts in options]
    chosen: list[str | None] = [None] * len(options)

    def search(pos, used):
        if pos == len(order):
            return True
        i = order[pos]
        for bg in shuffled[i]:
            if bg not in used:
                chosen[i] = bg
                if search(pos + 1, used | {bg}):
                    return True
        return False

    return list(chosen) if search(0, frozenset()) else None


def _plan_backgrounds(rng, classes, table: PairingTable, spec: EpisodeSpec):
    """Per-class (support bgs, query bgs), or None if this class tuple is infeasible."""
    mode = spec.mode
    if mode is Mode.HARD_OOD:
        sdr = _random_sdr(rng, [list(table[c]) for c in classes])
        if sdr is None:
            return None
        plan = []
        for i, c in enumerate(classes):
            allowed = sorted({b for j, d in enumerate(classes) if j != i for b in table[d]} - {sdr[i]})
            required = {sdr[j] for j in range(len(classes)) if j != i}
            q = _queries_covering(rng, required, allowed, spec.n_query)
            if q is None:
                return None
            plan.append(([sdr[i]] * spec.k_shot, q))
        return plan

    plan = []
    for i, c in enumerate(classes):
        s = _iid_support_bgs(rng, list(table[c]), spec.k_shot, spec.n_query)
        if mode is Mode.IID:
            q = _queries_covering(rng, set(s), sorted(set(s)), spec.n_query)
        elif mode is Mode.CLEAN_QUERY:
            q = [None] * spec.n_query
        else:
            allowed = sorted({b for j, d in enumerate(classes) if j != i for b in table[d]} - set(s))
            if not allowed:
                return None
            q = _pick(rng, allowed, spec.n_query, replace=True)
        plan.append((s, q))
    return plan


def sample_episode(catalog: Catalog, spec: EpisodeSpec, pool: ClipPool,
                   split: str = "test", rng: np.random.Generator | None = None) -> Episode:
    """Draw one episode from ``split``. ``rng`` defaults to one seeded by ``spec.seed``."""
    if rng is None:
        rng = np.random.default_rng(spec.seed & MASK64)
    table = _hard_table(catalog) if spec.mode is Mode.HARD_OOD else catalog.table
    candidates = catalog.classes(split)
    if len(candidates) < spec.n_way:
        raise EpisodeError(f"split {split!r} has {len(candidates)} classes, need {spec.n_way}")

    for _ in range(MAX_TUPLE_RETRIES):
        classes = tuple(_pick(rng, candidates, spec.n_way))
        plan = _plan_backgrounds(rng, classes, table, spec)
        if plan is not None:
            break
    else:
        raise InfeasibleEpisode(
            f"{spec.mode.value} coverage infeasible for class tuple {classes} "
            f"after {MAX_TUPLE_RETRIES} attempts")

    need = Counter()
    for c, (s, q) in zip(classes, plan):
        need.update((c, b) for b in s)
        need.update((c, b) for b in q)
    drawn = {}
    for key in sorted(need, key=lambda k: (k[0], k[1] or "")):
        bucket = pool.bucket(*key)
        if len(bucket) < need[key]:
            raise PoolExhausted(
                f"pool exhausted: need {need[key]} clips of {key}, have {len(bucket)}")
        drawn[key] = iter(_pick(rng, bucket, need[key]))

    support, query = [], []
    for c, (s, q) in zip(classes, plan):
        support += [Item(next(drawn[(c, b)]), c, b) for b in s]
        query += [Item(next(drawn[(c, b)]), c, b) for b in q]
    return Episode(classes, tuple(support), tuple(query), spec.mode, spec.seed)


def sample_episodes(catalog: Catalog, spec: EpisodeSpec, pool: ClipPool, n_episodes: int,
                    split: str = "test") -> list[Episode]:
    """Episode ``i`` uses the seed ``derive_seed(spec.seed, i)``."""
    out = []
    for i in range(n_episodes):
        seed = derive_seed(spec.seed, i)
        ep = sample_episode(catalog, spec, pool, split, np.random.default_rng(seed))
        out.append(Episode(ep.classes, ep.support, ep.query, ep.mode, seed))
    return out


def check_episode(ep: Episode, catalog: Catalog, spec: EpisodeSpec, split: str = "test",
                  pool: ClipPool | None = None) -> list[str]:
    """Brute-force audit of an episode; returns a list of violated invariants."""
    bad = []
    mode = Mode(spec.mode)
    table = _hard_table(catalog) if mode is Mode.HARD_OOD else catalog.table
    classes = list(ep.classes)
    if len(set(classes)) != spec.n_way or len(classes) != spec.n_way:
        bad.append("class count")
    allowed_classes = catalog.splits[split]
    for c in classes:
        if c not in allowed_classes:
            bad.append(f"class {c!r} not in split {split}")
    if len(ep.support) != spec.n_way * spec.k_shot or len(ep.query) != spec.n_way * spec.n_query:
        bad.append("set sizes")
    refs = [it.clip_ref for _, it in ep.items()]
    if len(refs) != len(set(refs)):
        bad.append("clip reused within episode")
    if pool is not None:
        for _, it in ep.items():
            src = pool.clips.get(it.clip_ref)
            if src is None or (src.fg, src.bg) != (it.fg, it.bg):
                bad.append(f"clip {it.clip_ref!r} not in pool as labeled")

    sup = {c: [it.bg for it in ep.support if it.fg == c] for c in classes}
    qry = {c: [it.bg for it in ep.query if it.fg == c] for c in classes}
    for c in classes:
        if len(sup[c]) != spec.k_shot:
            bad.append(f"{c}: {len(sup[c])} supports")
        if len(qry[c]) != spec.n_query:
            bad.append(f"{c}: {len(qry[c])} queries")
        for b in sup[c]:
            if b is None or b not in table[c]:
                bad.append(f"{c}: support background {b!r} not paired")
    for c in classes:
        s_set, q_list = set(sup[c]), qry[c]
        if mode is Mode.IID:
            if set(q_list) != s_set:
                bad.append(f"{c}: iid query backgrounds {set(q_list)} != support {s_set}")
        elif mode is Mode.CLEAN_QUERY:
            if any(b is not None for b in q_list):
                bad.append(f"{c}: clean-query item has a background")
        else:
            others = set()
            for d in classes:
                if d != c:
                    others.update(table[d])
            for b in q_list:
                if b is None or b not in others:
                    bad.append(f"{c}: query background {b!r} not from other classes")
                if b in s_set:
                    bad.append(f"{c}: query background {b!r} also in own support")
            if mode is Mode.HARD_OOD:
                for d in classes:
                    if d == c:
                        continue
                    for b in sup[d]:
                        if b not in q_list:
                            bad.append(f"{c}: support background {b!r} of {d} missing from queries")
    return bad


MANIFEST_FIELDS = ["episode", "role", "clip_ref", "fg", "bg"]


def write_manifest(path_or_buf, episodes: Sequence[Episode]) -> None:
    """Tab-separated, one item per line: episode, role, clip_ref, fg, bg.

    Lines starting with ``#`` carry tab-separated per-episode metadata
    (``episode=``, ``mode=``, ``seed=``, ``classes=`` joined by ``|``).
    """
    own = isinstance(path_or_buf, (str, Path))
    fh = open(path_or_buf, "w", newline="") if own else path_or_buf
    try:
        fh.write("\t".join(MANIFEST_FIELDS) + "\n")
        for i, ep in enumerate(episodes):
            fh.write(f"# episode={i}\tmode={ep.mode.value}\tseed={ep.seed}\t"
                     f"classes={'|'.join(ep.classes)}\n")
            for role, it in ep.items():
                fh.write("\t".join([str(i), role, it.clip_ref, it.fg,
                                    NONE_BG if it.bg is None else it.bg]) + "\n")
    finally:
        if own:
            fh.close()


def read_manifest(path_or_text) -> list[Episode]:
    if isinstance(path_or_text, Path) or (isinstance(path_or_text, str) and "\n" not in path_or_text):
        text = Path(path_or_text).read_text()
    else:
        text = path_or_text
    meta: dict[int, dict[str, str]] = {}
    rows: dict[int, list[list[str]]] = {}
    for line in io.StringIO(text):
        line = line.rstrip("\n")
        if not line or line.startswith("episode\t"):
            continue
        if line.startswith("#"):
            fields = dict(kv.strip().split("=", 1) for kv in line[1:].split("\t") if "=" in kv)
            meta[int(fields["episode"])] = fields
            continue
        parts = line.split("\t")
        if len(parts) != len(MANIFEST_FIELDS):
            raise EpisodeError(f"malformed manifest line: {line!r}")
        rows.setdefault(int(parts[0]), []).append(parts)
    episodes = []
    for i in sorted(rows):
        m = meta.get(i, {})
        sup, qry = [], []
        for _, role, ref, fg, bg in rows[i]:
            (sup if role == "support" else qry).append(Item(ref, fg, bg or None))
        classes = tuple(m["classes"].split("|")) if "classes" in m else tuple(dict.fromkeys(it.fg for it in sup))
        episodes.append(Episode(classes, tuple(sup), tuple(qry),
                                Mode(m.get("mode", "iid")), int(m.get("seed", 0))))
    return episodes
