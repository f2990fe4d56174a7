"""Feature-gradient coreset selection.

Two-level K-means over teacher embeddings, gradient-trace quality scores,
per-subcluster dual ranking (quality vs. distance to centroid) and an
exact-budget quota/repair selection.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .encoder import GradientTrace
from .seeding import derive_seed

EPS = 1e-12


@dataclass
class KMeansResult:
    centroids: np.ndarray  # (K, d)
    assignments: np.ndarray  # (N,) int
    history: list[float]  # objective after every assignment step

    @property
    def objective(self) -> float:
        return self.history[-1]


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    return ((x[:, None, :] - c[None, :, :]) ** 2).sum(axis=-1)


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    chosen = [int(rng.integers(n))]
    d2 = ((x - x[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            # every point coincides with a centre already; fall back to an unused index
            unused = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(unused))
        chosen.append(nxt)
        d2 = np.minimum(d2, ((x - x[nxt]) ** 2).sum(axis=1))
    return x[chosen].copy()


def kmeans(
    features: np.ndarray,
    k: int,
    seed: int = 0,
    max_iters: int = 100,
    tol: float = 1e-10,
    ids: Optional[Sequence[str]] = None,
) -> KMeansResult:
    """Lloyd's algorithm from a k-means++ start.

    Ties in assignment go to the lowest cluster index. A cluster that empties is
    re-seeded at the point farthest from its current centroid.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise ValueError("kmeans needs a non-empty (N, d) feature matrix")
    bad = np.flatnonzero(~np.isfinite(x).all(axis=1))
    if bad.size:
        name = ids[bad[0]] if ids is not None else int(bad[0])
        raise ValueError(f"non-finite feature for sample {name!r}")
    n = len(x)
    if k < 1:
        raise ValueError("K must be >= 1")
    if k > n:
        raise ValueError(f"K={k} exceeds the number of samples N={n}")

    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp(x, k, rng)
    d2 = _sq_dists(x, centroids)
    assign = d2.argmin(axis=1)
    history = [float(d2[np.arange(n), assign].sum())]
    for _ in range(max_iters):
        new = np.empty_like(centroids)
        for j in range(k):
            members = assign == j
            if members.any():
                new[j] = x[members].mean(axis=0)
            else:
                own = d2[np.arange(n), assign]
                new[j] = x[int(own.argmax())]
        centroids = new
        d2 = _sq_dists(x, centroids)
        assign = d2.argmin(axis=1)
        history.append(float(d2[np.arange(n), assign].sum()))
        if history[-2] - history[-1] < tol:
            break
    return KMeansResult(centroids, assign, history)


@dataclass
class ClusterTree:
    ids: list[str]
    features: np.ndarray
    k1: int
    k2: int
    level1: KMeansResult
    level2: list[KMeansResult]  # one per level-1 cluster, over that cluster's members
    members1: list[np.ndarray]  # global indices per level-1 cluster

    def subclusters(self) -> Iterable[tuple[tuple[int, int], np.ndarray, np.ndarray]]:
        """Yield ((j1, j2), global member indices, centroid), including empty subclusters."""
        for j1, (members, sub) in enumerate(zip(self.members1, self.level2)):
            for j2 in range(len(sub.centroids)):
                yield (j1, j2), members[sub.assignments == j2], sub.centroids[j2]

    def cluster_of(self) -> dict[str, tuple[int, int]]:
        out = {}
        for key, idx, _ in self.subclusters():
            for i in idx:
                out[self.ids[i]] = key
        return out


def build_tree(ids: Sequence[str], features: np.ndarray, k1: int, k2: int, seed: int = 0) -> ClusterTree:
    if k1 < 1 or k2 < 1:
        raise ValueError("K1 and K2 must be >= 1")
    x = np.asarray(features, dtype=np.float64)
    if len(ids) != len(x):
        raise ValueError("ids and features differ in length")
    top = kmeans(x, k1, seed=derive_seed(seed, "level1"), ids=ids)
    members1, level2 = [], []
    for j in range(k1):
        idx = np.flatnonzero(top.assignments == j)
        members1.append(idx)
        if idx.size == 0:
            level2.append(KMeansResult(np.zeros((0, x.shape[1])), np.zeros(0, dtype=np.int64), [0.0]))
            continue
        sub_k = min(k2, idx.size)
        level2.append(kmeans(x[idx], sub_k, seed=derive_seed(seed, "level2", j), ids=[ids[i] for i in idx]))
    return ClusterTree(list(ids), x, k1, k2, top, level2, members1)


# ----------------------------------------------------------------- scoring


@dataclass(frozen=True)
class QualityScore:
    id: str
    s_stb: float
    s_mag: float
    s: float
    alpha: float = 0.5


def quality_scores(traces: Sequence[GradientTrace], alpha: float = 0.5) -> list[QualityScore]:
    """Stability 1 - sigma/mu (clamped), min-max magnitude of mu, and their alpha-blend."""
    if not traces:
        raise ValueError("no gradient traces")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must be in [0, 1]")
    for t in traces:
        if not t.norms:
            raise ValueError(f"trace {t.id!r} has no norms")
    mu = np.array([t.mu for t in traces], dtype=np.float64)
    sigma = np.array([t.sigma for t in traces], dtype=np.float64)
    s_stb = np.clip(1.0 - sigma / np.maximum(mu, EPS), 0.0, 1.0)
    lo, hi = mu.min(), mu.max()
    s_mag = np.full_like(mu, 0.5) if hi == lo else (mu - lo) / (hi - lo)
    s = np.clip(alpha * s_stb + (1.0 - alpha) * s_mag, 0.0, 1.0)
    return [QualityScore(t.id, float(a), float(b), float(c), alpha) for t, a, b, c in zip(traces, s_stb, s_mag, s)]


@dataclass(frozen=True)
class SelectionScore:
    id: str
    r_q: int
    r_d: int
    r: float
    s: float
    distance: float
    cluster: tuple[int, int] = (0, 0)


def rank_subcluster(
    members: Sequence[tuple[str, float, float]], beta: float = 0.5, cluster: tuple[int, int] = (0, 0)
) -> list[SelectionScore]:
    """Dual rank of (id, quality, distance) triples; result sorted by (r, id)."""
    if not members:
        return []
    by_q = sorted(members, key=lambda m: (-m[1], m[0]))
    by_d = sorted(members, key=lambda m: (m[2], m[0]))
    r_q = {m[0]: i + 1 for i, m in enumerate(by_q)}
    r_d = {m[0]: i + 1 for i, m in enumerate(by_d)}
    out = [
        SelectionScore(sid, r_q[sid], r_d[sid], beta * r_q[sid] + (1.0 - beta) * r_d[sid], float(s), float(d), cluster)
        for sid, s, d in members
    ]
    return sorted(out, key=lambda x: (x.r, x.id))


@dataclass
class CoresetSelection:
    selected: list[SelectionScore]
    budget: int
    ranked: dict[tuple[int, int], list[SelectionScore]] = field(default_factory=dict)

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.selected]


def score_tree(tree: ClusterTree, scores: Sequence[QualityScore], beta: float = 0.5) -> dict[tuple[int, int], list[SelectionScore]]:
    quality = {q.id: q.s for q in scores}
    ranked = {}
    for key, idx, centroid in tree.subclusters():
        members = []
        for i in idx:
            sid = tree.ids[i]
            if sid not in quality:
                raise ValueError(f"no quality score for clustered sample {sid!r}")
            dist = float(np.sqrt(((tree.features[i] - centroid) ** 2).sum()))
            members.append((sid, quality[sid], dist))
        ranked[key] = rank_subcluster(members, beta, key)
    return ranked


def select(tree: ClusterTree, scores: Sequence[QualityScore], budget: int, beta: float = 0.5) -> CoresetSelection:
    """Proportional per-subcluster quota (floor, at least 1), then global repair to the exact budget."""
    if budget < 1:
        raise ValueError("budget must be >= 1")
    ranked = score_tree(tree, scores, beta)
    n = len(tree.ids)
    target = min(budget, n)
    chosen: list[SelectionScore] = []
    rest: list[SelectionScore] = []
    for key, items in ranked.items():
        if not items:
            continue
        quota = max(1, math.floor(budget * len(items) / n))
        chosen.extend(items[:quota])
        rest.extend(items[quota:])
    order = lambda s: (s.r, s.id)  # noqa: E731
    if len(chosen) > target:
        chosen.sort(key=order)
        chosen = chosen[:target]
    elif len(chosen) < target:
        rest.sort(key=order)
        chosen.extend(rest[: target - len(chosen)])
    chosen.sort(key=order)
    return CoresetSelection(chosen, budget, ranked)


def curate(
    ids: Sequence[str],
    features: np.ndarray,
    traces: Sequence[GradientTrace],
    budget: int,
    k1: int,
    k2: int,
    alpha: float = 0.5,
    beta: float = 0.5,
    seed: int = 0,
) -> tuple[CoresetSelection, ClusterTree, list[QualityScore]]:
    tree = build_tree(ids, features, k1, k2, seed)
    by_id = {t.id: t for t in traces}
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise ValueError(f"no gradient trace for {missing[:5]}")
    scores = quality_scores([by_id[i] for i in ids], alpha)
    return select(tree, scores, budget, beta), tree, scores


def random_selection(ids: Sequence[str], budget: int, seed: int = 0) -> list[str]:
    """Uniform baseline subset of size min(budget, N)."""
    rng = np.random.default_rng(derive_seed(seed, "random-subset"))
    idx = rng.choice(len(ids), size=min(budget, len(ids)), replace=False)
    return [ids[i] for i in sorted(idx)]


# ----------------------------------------------------------------- outputs


def selection_report(
    selection: CoresetSelection, tree: ClusterTree, scores: Sequence[QualityScore]
) -> list[dict]:
    quality = {q.id: q.s for q in scores}
    picked = set(selection.ids)
    rows = []
    for key, idx, _ in tree.subclusters():
        sids = [tree.ids[i] for i in idx]
        s = np.array([quality[i] for i in sids]) if sids else np.zeros(0)
        n_sel = sum(1 for i in sids if i in picked)
        rows.append(
            {
                "cluster_l1": key[0],
                "cluster_l2": key[1],
                "n": len(sids),
                "selected": n_sel,
                "coverage": n_sel / len(sids) if sids else 0.0,
                "s_mean": float(s.mean()) if s.size else float("nan"),
                "s_min": float(s.min()) if s.size else float("nan"),
                "s_max": float(s.max()) if s.size else float("nan"),
            }
        )
    return rows


def write_report_csv(rows: Sequence[dict], path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        if rows:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
    return path


def write_selection(selection: CoresetSelection, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for s in selection.selected:
            fh.write(json.dumps({"id": s.id, "r": s.r, "r_q": s.r_q, "r_d": s.r_d, "s": s.s, "cluster": list(s.cluster)}) + "\n")
    return path


def read_selection_ids(path: str | os.PathLike) -> list[str]:
    return [json.loads(line)["id"] for line in Path(path).read_text().splitlines() if line.strip()]
