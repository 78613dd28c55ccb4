from __future__ import annotations

import numpy as np
import pytest

from spurbench.catalog import Catalog
from spurbench.embeddings import EmbeddingSet, model_for_catalog, synth_embeddings
from spurbench.episodes import ClipPool, Episode, Item, Mode


def make_episode(support, query, frames=None, mode=Mode.IID):
    """Episode + embeddings from raw vectors.

    ``support`` and ``query`` are lists of (vector, class name). Classes are
    ordered by first appearance in the support set.
    """
    classes = tuple(dict.fromkeys(c for _, c in support))
    vecs, sup, qry = {}, [], []
    for role, rows, out in (("s", support, sup), ("q", query, qry)):
        for i, (v, c) in enumerate(rows):
            ref = f"{role}{i}"
            vecs[ref] = np.asarray(v, dtype=np.float64)
            out.append(Item(ref, c, None))
    frame_vecs = None
    if frames is not None:
        frame_vecs = {ref: np.asarray(f, dtype=np.float64) for ref, f in frames.items()}
    return Episode(classes, tuple(sup), tuple(qry), mode, 0), EmbeddingSet(vecs, frame_vecs)


def random_episode(rng, n_way=3, k_shot=2, n_query=3, dim=6, n_frames=0, spread=3.0):
    centers = spread * rng.standard_normal((n_way, dim))
    support, query = [], []
    for c in range(n_way):
        support += [(centers[c] + rng.standard_normal(dim), f"c{c}") for _ in range(k_shot)]
        query += [(centers[c] + rng.standard_normal(dim), f"c{c}") for _ in range(n_query)]
    frames = None
    if n_frames:
        frames = {f"{r}{i}": rng.standard_normal((n_frames, dim))
                  for r, rows in (("s", support), ("q", query)) for i in range(len(rows))}
    return make_episode(support, query, frames)


@pytest.fixture(scope="session")
def catalog():
    return Catalog.default()


@pytest.fixture(scope="session")
def synthetic(catalog):
    """(model, pool, embeddings) over the canonical test classes."""
    model = model_for_catalog(catalog, catalog.classes("test"))
    pool = ClipPool.synthetic(catalog.table, catalog.classes("test"), backgrounds=model.backgrounds)
    emb = synth_embeddings(model, pool.clips.values(), seed=3, n_frames=4)
    return model, pool, emb


def gaussian_kernel_mean(dmu2, s, h, d):
    """E exp(-|x - y|^2 / (2 h^2)) for x ~ N(mu_x, s^2 I), y ~ N(mu_y, s^2 I) in d dims."""
    v = h * h + 2 * s * s
    return (h * h / v) ** (d / 2) * np.exp(-dmu2 / (2 * v))


def mmd2_monte_carlo(mu_x, mu_y, s, h, n_pairs=100_000, seed=0):
    """Population RBF MMD^2 between two isotropic Gaussians from independent sample pairs."""
    rng = np.random.default_rng(seed)
    d = len(mu_x)

    def k(a, b):
        return np.exp(-np.sum((a - b) ** 2, axis=1) / (2 * h * h)).mean()

    draw = lambda mu: mu + s * rng.standard_normal((n_pairs, d))
    return k(draw(mu_x), draw(mu_x)) + k(draw(mu_y), draw(mu_y)) - 2 * k(draw(mu_x), draw(mu_y))


def pytest_terminal_summary(terminalreporter):
    """Print the acceptance PASS/FAIL lines recorded through ``record_property``."""
    lines = []
    for key in ("passed", "failed"):
        for rep in terminalreporter.stats.get(key, []):
            if rep.when != "call":
                continue
            lines += [v for k, v in rep.user_properties if k == "acceptance"]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
