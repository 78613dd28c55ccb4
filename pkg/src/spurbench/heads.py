"""Few-shot inference heads over frozen embeddings.

Every head maps ``(episode, embeddings, config)`` to a :class:`Prediction`
holding per-query class posteriors (columns follow ``episode.classes``).
Heads keep no state between episodes.

Families covered:

* metric: ``proto`` (squared Euclidean), ``cosine`` (Baseline++-style),
  ``dn4`` (local-descriptor image-to-class matching)
* fine-tuning: ``linear`` (Baseline-style logistic regression on supports)
* transductive: ``laplacianshot``, ``bdcspn``, ``protolp``, ``bpa``
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

import numpy as np
from scipy.special import logsumexp, softmax

from .embeddings import EmbeddingSet
from .episodes import Episode
from .errors import HeadError, SinkhornError

DEFAULTS: dict[str, dict[str, Any]] = {
    "proto": {},
    "cosine": {"tau": 10.0, "lr": 0.01, "n_iter": 100, "l2": 1e-3},
    "linear": {"lr": 0.01, "n_iter": 100, "l2": 1e-3},
    "dn4": {"k": 3},
    "laplacianshot": {"lam": 0.7, "knn": 3, "max_iter": 20, "tol": 1e-6},
    "bdcspn": {"eps": 10.0, "tau": 10.0},
    "protolp": {"rho": 0.9, "knn": 10, "normalize": True},
    "bpa": {"eps": 0.05, "max_iter": 100, "tol": 1e-6},
}

# (low, high) inclusive bounds; None = unbounded
_RANGES = {
    "tau": (0.0, None), "lr": (0.0, None), "n_iter": (0, None), "l2": (0.0, None),
    "k": (1, None), "lam": (0.0, None), "knn": (1, None), "max_iter": (1, None),
    "tol": (0.0, None), "eps": (0.0, None), "rho": (0.0, 1.0),
}


@dataclass(frozen=True)
class HeadConfig:
    kind: str = "proto"
    params: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in DEFAULTS:
            raise HeadError(f"unknown head {self.kind!r}; choose from {sorted(DEFAULTS)}")
        unknown = set(self.params) - set(DEFAULTS[self.kind])
        if unknown:
            raise HeadError(f"{self.kind}: unknown hyperparameters {sorted(unknown)}")
        merged = {**DEFAULTS[self.kind], **self.params}
        for name, value in merged.items():
            lo, hi = _RANGES.get(name, (None, None))
            if lo is not None and value < lo or hi is not None and value > hi:
                raise HeadError(f"{self.kind}: {name}={value} out of range [{lo}, {hi}]")
        if self.kind == "protolp" and not merged["rho"] < 1:
            raise HeadError("protolp: rho must be < 1")
        object.__setattr__(self, "params", merged)

    def __getitem__(self, name):
        return self.params[name]

    def as_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, **self.params}


@dataclass(frozen=True)
class Prediction:
    posteriors: np.ndarray  # (n_query, n_way)

    @property
    def labels(self) -> np.ndarray:
        # np.argmax returns the first maximum, i.e. ties go to the lowest class index
        if self.posteriors.shape[0] == 0:
            return np.zeros(0, dtype=np.intp)
        return np.argmax(self.posteriors, axis=1)


def _cfg(cfg: HeadConfig | None, kind: str) -> HeadConfig:
    if cfg is None:
        return HeadConfig(kind)
    if cfg.kind != kind:
        raise HeadError(f"config for {cfg.kind!r} passed to the {kind!r} head")
    return cfg


def _arrays(ep: Episode, emb: EmbeddingSet):
    s = emb.vectors(it.clip_ref for it in ep.support)
    q = emb.vectors(it.clip_ref for it in ep.query)
    if q.shape[0] == 0:
        q = np.zeros((0, s.shape[1]))
    return s, ep.support_labels, q, ep.n_way


def _one_hot(y, n):
    out = np.zeros((y.size, n))
    out[np.arange(y.size), y] = 1.0
    return out


def class_means(x: np.ndarray, y: np.ndarray, n_way: int) -> np.ndarray:
    return np.stack([x[y == c].mean(axis=0) for c in range(n_way)])


def sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances, by explicit differences."""
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _normalize(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise HeadError("cannot normalize a zero-norm embedding")
    return x / norms


def classify_proto(ep: Episode, emb: EmbeddingSet, cfg: HeadConfig | None = None) -> Prediction:
    _cfg(cfg, "proto")
    s, ys, q, n = _arrays(ep, emb)
    protos = class_means(s, ys, n)
    return Prediction(softmax(-sq_dists(q, protos), axis=1))


def train_cosine_weights(xn: np.ndarray, y: np.ndarray, w: np.ndarray, tau: float, lr: float,
                         n_iter: int, l2: float) -> np.ndarray:
    """Full-batch gradient descent on cross-entropy over ``tau * cos(x, w_c)``
    plus ``l2/2 * ||W||^2``; ``xn`` must be row-normalized."""
    t = _one_hot(y, w.shape[0])
    for _ in range(n_iter):
        norms = np.linalg.norm(w, axis=1, keepdims=True)
        wn = w / norms
        p = softmax(tau * xn @ wn.T, axis=1)
        g_wn = tau * (p - t).T @ xn / xn.shape[0]
        # chain rule through w -> w / ||w||
        g_w = (g_wn - np.sum(g_wn * wn, axis=1, keepdims=True) * wn) / norms + l2 * w
        w = w - lr * g_w
    return w


def classify_cosine(ep: Episode, emb: EmbeddingSet, cfg: HeadConfig | None = None) -> Prediction:
    cfg = _cfg(cfg, "cosine")
    s, ys, q, n = _arrays(ep, emb)
    sn = _normalize(s)
    w0 = _normalize(class_means(s, ys, n))
    w = train_cosine_weights(sn, ys, w0, cfg["tau"], cfg["lr"], cfg["n_iter"], cfg["l2"])
    if q.shape[0] == 0:
        return Prediction(np.zeros((0, n)))
    return Prediction(softmax(cfg["tau"] * _normalize(q) @ _normalize(w).T, axis=1))


def train_logistic(x: np.ndarray, y: np.ndarray, n_way: int, lr: float, n_iter: int,
                   l2: float) -> tuple[np.ndarray, np.ndarray]:
    """Multinomial logistic regression by full-batch gradient descent from zero."""
    w = np.zeros((n_way, x.shape[1]))
    b = np.zeros(n_way)
    t = _one_hot(y, n_way)
    for _ in range(n_iter):
        p = softmax(x @ w.T + b, axis=1)
        g = (p - t) / x.shape[0]
        w = w - lr * (g.T @ x + l2 * w)
        b = b - lr * g.sum(axis=0)
    return w, b


def classify_linear(ep: Episode, emb: EmbeddingSet, cfg: HeadConfig | None = None) -> Prediction:
    cfg = _cfg(cfg, "linear")
    s, ys, q, n = _arrays(ep, emb)
    w, b = train_logistic(s, ys, n, cfg["lr"], cfg["n_iter"], cfg["l2"])
    return Prediction(softmax(q @ w.T + b, axis=1))


def dn4_scores(query_frames: list[np.ndarray], class_frames: list[np.ndarray], k: int) -> np.ndarray:
    """Image-to-class scores: for each query descriptor, sum of its ``k`` highest
    cosine similarities to the class's pooled support descriptors."""
    out = np.zeros((len(query_frames), len(class_frames)))
    pooled = [_normalize(f) for f in class_frames]
    for i, qf in enumerate(query_frames):
        qn = _normalize(qf)
        for c, sf in enumerate(pooled):
            sims = qn @ sf.T
            kk = min(k, sims.shape[1])
            top = np.partition(sims, sims.shape[1] - kk, axis=1)[:, -kk:]
            out[i, c] = top.sum()
    return out


def classify_dn4(ep: Episode, emb: EmbeddingSet, cfg: HeadConfig | None = None) -> Prediction:
    cfg = _cfg(cfg, "dn4")
    ys = ep.support_labels
    class_frames = []
    for c in range(ep.n_way):
        refs = [it.clip_ref for it, y in zip(ep.support, ys) if y == c]
        class_frames.append(np.concatenate([emb.frames(r) for r in refs]))
    query_frames = [emb.frames(it.clip_ref) for it in ep.query]
    if not query_frames:
        return Prediction(np.zeros((0, ep.n_way)))
    return Prediction(softmax(dn4_scores(query_frames, class_frames, cfg["k"]), axis=1))


def knn_graph(x: np.ndarray, k: int) -> np.ndarray:
    """Binary directed k-nearest-neighbour adjacency (no self loops)."""
    n = x.shape[0]
    w = np.zeros((n, n))
    k = min(k, n - 1)
    if k <= 0:
        return w
    d = sq_dists(x, x)
    np.fill_diagonal(d, np.inf)
    nbrs = np.argsort(d, axis=1, kind="stable")[:, :k]
    w[np.repeat(np.arange(n), k), nbrs.ravel()] = 1.0
    return w


def laplacian_energy(unary: np.ndarray, w: np.ndarray, labels: np.ndarray, lam: float) -> float:
    """Discrete objective: unary cost minus ``lam`` times the weight of
    agreeing neighbour pairs."""
    same = labels[:, None] == labels[None, :]
    return float(unary[np.arange(labels.size), labels].sum() - lam * (w * same).sum())


def classify_laplacianshot(ep: Episode, emb: EmbeddingSet, cfg: HeadConfig | None = None) -> Prediction:
    cfg = _cfg(cfg, "laplacianshot")
    s, ys, q, n = _arrays(ep, emb)
    unary = sq_dists(q, class_means(s, ys, n))
    w = knn_graph(q, cfg["knn"])
    y = softmax(-unary, axis=1)
    for _ in range(cfg["max_iter"]):
        y_new = softmax(-unary + cfg["lam"] * (w @ y), axis=1)
        change = np.max(np.abs(y_new - y)) if y.size else 0.0
        y = y_new
        if change < cfg["tol"]:
            break
    return Prediction(y)


def rectify_prototypes(s: np.ndarray, ys: np.ndarray, q: np.ndarray, n_way: int,
                       eps: float) -> tuple[np.ndarray, np.ndarray]:
    """Cross-class bias removal then soft prototype augmentation.

    Returns (shifted queries, rectified prototypes). Queries are shifted by
    ``mean(support) - mean(query)``. Each prototype becomes the weighted mean
    of its own supports and all shifted queries, weights being the softmax
    over classes of ``eps * cos(x, initial prototype)``.
    """
    if q.shape[0]:
        q = q + (s.mean(axis=0) - q.mean(axis=0))
    p0 = class_means(s, ys, n_way)
    ws = softmax(eps * _normalize(s) @ _normalize(p0).T, axis=1) * _one_hot(ys, n_way)
    wq = softmax(eps * _normalize(q) @ _normalize(p0).T, axis=1) if q.shape[0] else np.zeros((0, n_way))
    num = ws.T @ s + wq.T @ q
    den = ws.sum(axis=0) + wq.sum(axis=0)
    return q, num / den[:, None]


def classify_bdcspn(ep: Episode, emb: EmbeddingSet, cfg: HeadConfig | None = None) -> Prediction:
    cfg = _cfg(cfg, "bdcspn")
    s, ys, q, n = _arrays(ep, emb)
    q, protos = rectify_prototypes(s, ys, q, n, cfg["eps"])
    if q.shape[0] == 0:
        return Prediction(np.zeros((0, n)))
    return Prediction(softmax(cfg["tau"] * _normalize(q) @ _normalize(protos).T, axis=1))


def lp_affinity(x: np.ndarray, knn: int) -> np.ndarray:
    """Symmetrically normalized k-NN Gaussian affinity ``D^-1/2 W D^-1/2``.

    Bandwidth is the median pairwise distance; the k-NN mask is symmetrized
    by union.
    """
    n = x.shape[0]
    d2 = sq_dists(x, x)
    off = d2[~np.eye(n, dtype=bool)]
    sigma2 = np.median(off) if off.size and np.median(off) > 0 else 1.0
    w = np.exp(-d2 / sigma2)
    np.fill_diagonal(w, 0.0)
    mask = knn_graph(x, knn) > 0
    w = np.where(mask | mask.T, w, 0.0)
    deg = w.sum(axis=1)
    inv = np.where(deg > 0, 1.0 / np.sqrt(np.where(deg > 0, deg, 1.0)), 0.0)
    return w * inv[:, None] * inv[None, :]


def propagate_labels(affinity: np.ndarray, y0: np.ndarray, rho: float) -> np.ndarray:
    """Closed-form label spreading ``F = (I - rho S)^-1 Y``."""
    if not 0 <= rho < 1:
        raise HeadError("rho must be in [0, 1)")
    return np.linalg.solve(np.eye(affinity.shape[0]) - rho * affinity, y0)


def classify_protolp(ep: Episode, emb: EmbeddingSet, cfg: HeadConfig | None = None) -> Prediction:
    cfg = _cfg(cfg, "protolp")
    s, ys, q, n = _arrays(ep, emb)
    if q.shape[0] == 0:
        return Prediction(np.zeros((0, n)))
    x = np.concatenate([s, q])
    if cfg["normalize"]:
        x = _normalize(x)
    y0 = np.zeros((x.shape[0], n))
    y0[np.arange(ys.size), ys] = 1.0
    f = propagate_labels(lp_affinity(x, cfg["knn"]), y0, cfg["rho"])[ys.size:]
    f = np.maximum(f, 0.0)
    totals = f.sum(axis=1, keepdims=True)
    post = np.where(totals > 0, f / np.where(totals > 0, totals, 1.0), 1.0 / n)
    return Prediction(post)


def sinkhorn(log_kernel: np.ndarray, max_iter: int = 100, tol: float = 1e-6) -> np.ndarray:
    """Scale ``exp(log_kernel)`` to unit row and column sums (log domain).

    Entries equal to ``-inf`` stay exactly zero. Raises :class:`SinkhornError`
    if the marginal error is still above ``tol`` after ``max_iter`` sweeps.
    """
    f = np.zeros(log_kernel.shape[0])
    g = np.zeros(log_kernel.shape[1])
    residual = np.inf
    for _ in range(max_iter):
        f = -logsumexp(log_kernel + g[None, :], axis=1)
        g = -logsumexp(log_kernel + f[:, None], axis=0)
        plan = np.exp(log_kernel + f[:, None] + g[None, :])
        residual = max(np.max(np.abs(plan.sum(axis=1) - 1)), np.max(np.abs(plan.sum(axis=0) - 1)))
        if residual < tol:
            return plan
    raise SinkhornError(f"sinkhorn budget exceeded: marginal residual {residual:.3g} "
                        f"after {max_iter} iterations", residual)


def bpa_transform(x: np.ndarray, eps: float = 0.05, max_iter: int = 100, tol: float = 1e-6) -> np.ndarray:
    """Re-embed items as rows of the balanced (doubly stochastic) cosine affinity."""
    xn = _normalize(x)
    log_k = (xn @ xn.T) / eps
    np.fill_diagonal(log_k, -np.inf)
    return sinkhorn(log_k, max_iter, tol)


def classify_bpa(ep: Episode, emb: EmbeddingSet, cfg: HeadConfig | None = None) -> Prediction:
    cfg = _cfg(cfg, "bpa")
    s, ys, q, n = _arrays(ep, emb)
    z = bpa_transform(np.concatenate([s, q]), cfg["eps"], cfg["max_iter"], cfg["tol"])
    zs, zq = z[:ys.size], z[ys.size:]
    return Prediction(softmax(-sq_dists(zq, class_means(zs, ys, n)), axis=1))


HEADS: dict[str, Callable[..., Prediction]] = {
    "proto": classify_proto,
    "cosine": classify_cosine,
    "linear": classify_linear,
    "dn4": classify_dn4,
    "laplacianshot": classify_laplacianshot,
    "bdcspn": classify_bdcspn,
    "protolp": classify_protolp,
    "bpa": classify_bpa,
}


def classify(ep: Episode, emb: EmbeddingSet, cfg: HeadConfig | str) -> Prediction:
    if isinstance(cfg, str):
        cfg = HeadConfig(cfg)
    return HEADS[cfg.kind](ep, emb, cfg)
