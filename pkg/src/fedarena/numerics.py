"""Deterministic numerical kernels shared across the simulator.

Everything here is either a pure function of its inputs or an explicit
random stream (`Rng`).  The random source is counter-based (Philox-4x64-10)
with named substreams derived by hashing, so swapping one consumer never
perturbs another consumer's stream.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
from scipy.fft import dct as _dct, idct as _idct


class Rng:
    """Named, reproducible random stream.

    Backed by numpy's Philox-4x64-10 counter-based generator.  The 128-bit
    Philox key is derived as a BLAKE2b chain over the master seed and the
    substream path::

        key("")          = blake2b_16(seed_le_8_bytes)
        key(path + name) = blake2b_16(key(path) + b"/" + name_utf8)

    Identical seed + identical call sequence gives bit-identical outputs.
    Substream derivation depends only on the path, never on how many draws
    the parent made.  Test vectors live in tests/test_numerics.py and the
    README.
    """

    def __init__(self, seed: int, path: tuple[str, ...] = ()):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = seed
        self.path = tuple(path)
        key = hashlib.blake2b(seed.to_bytes(8, "little"), digest_size=16).digest()
        for name in self.path:
            key = hashlib.blake2b(key + b"/" + name.encode("utf-8"), digest_size=16).digest()
        self._key = key
        words = np.frombuffer(key, dtype=np.uint64).copy()
        self._gen = np.random.Generator(np.random.Philox(key=words))

    def substream(self, name: str) -> "Rng":
        return Rng(self.seed, self.path + (name,))

    # thin draw wrappers; all consumers go through these
    def normal(self, size=None, scale: float = 1.0) -> np.ndarray:
        return scale * self._gen.standard_normal(size)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self._gen.uniform(low, high, size)

    def standard_gamma(self, shape: float, size=None):
        return self._gen.standard_gamma(shape, size)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={'/'.join(self.path) or '<root>'})"


def require_finite(arr: np.ndarray, what: str = "vector") -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"non-finite entries in {what}")
    return arr


def dct2(v) -> np.ndarray:
    """Orthonormal DCT-II of a 1-D vector.

    Orthonormal normalization makes the transform an isometry: it preserves
    the l2 norm and `idct2` is its exact inverse.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("empty vector")
    require_finite(v)
    return _dct(v, type=2, norm="ortho")


def idct2(c) -> np.ndarray:
    """Inverse of :func:`dct2`."""
    c = np.asarray(c, dtype=np.float64)
    if c.size == 0:
        raise ValueError("empty vector")
    require_finite(c)
    return _idct(c, type=2, norm="ortho")


def top_right_singular_vector(rows, iters: int = 100, tol: float = 1e-9) -> np.ndarray:
    """Dominant right singular vector of a row matrix via power iteration.

    Iterates v <- A^T A v / ||.|| from the deterministic start e_0, restarting
    from e_{n-1} and from the heaviest-column basis vector; a start that is
    exactly orthogonal to the dominant subspace (or annihilated by A) would
    otherwise trap the iteration on a minor eigenvector, so the candidate
    with the largest Rayleigh quotient wins.  Sign convention: first nonzero
    entry positive.
    """
    a = np.asarray(rows, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.size == 0 or not np.any(a):
        raise ValueError("degenerate matrix")
    n = a.shape[1]

    col_sq = np.einsum("ij,ij->j", a, a)
    best_v, best_q = None, -1.0
    for s in dict.fromkeys([0, n - 1, int(np.argmax(col_sq))]):
        v = np.zeros(n)
        v[s] = 1.0
        if not np.any(a @ v):
            continue
        for _ in range(max(1, iters)):
            w = a.T @ (a @ v)
            nw = np.linalg.norm(w)
            if nw == 0.0:
                break
            w /= nw
            done = np.linalg.norm(w - v) <= tol or np.linalg.norm(w + v) <= tol
            v = w
            if done:
                break
        q = float(np.linalg.norm(a @ v))
        if q > best_q:
            best_v, best_q = v, q

    v = best_v / np.linalg.norm(best_v)
    for x in v:
        if x != 0.0:
            if x < 0.0:
                v = -v
            break
    return v


def sample_dirichlet(rng: Rng, alpha: float, k: int) -> np.ndarray:
    """Symmetric Dirichlet(alpha) draw of length k via normalized Gammas."""
    if alpha <= 0:
        raise ValueError("invalid concentration")
    if k < 1:
        raise ValueError("k must be >= 1")
    while True:
        g = rng.standard_gamma(alpha, k)
        s = g.sum()
        if s > 0:  # all-zero draws possible for tiny alpha; redraw
            return g / s


@dataclass(frozen=True)
class DistanceMatrix:
    """Symmetric pairwise distance matrix with a metric tag."""

    entries: np.ndarray
    metric: str

    def __post_init__(self):
        e = self.entries
        if e.ndim != 2 or e.shape[0] != e.shape[1]:
            raise ValueError("distance matrix must be square")
        if np.any(np.diag(e) != 0.0):
            raise ValueError("distance matrix diagonal must be zero")
        if np.abs(e - e.T).max(initial=0.0) > 1e-12:
            raise ValueError("distance matrix must be symmetric within 1e-12")
        if e.min(initial=0.0) < 0.0:
            raise ValueError("distances must be nonnegative")

    @property
    def n(self) -> int:
        return self.entries.shape[0]


def pairwise_distances(rows, metric: str = "euclidean") -> DistanceMatrix:
    """Pairwise euclidean or cosine distances between row vectors.

    Cosine distance is 1 - cos similarity, clamped to [0, 2].  A zero vector
    has distance 1 to any nonzero vector and 0 to another zero vector.
    """
    a = np.asarray(rows, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError("rows must form a 2-D matrix")
    n = a.shape[0]
    d = np.zeros((n, n))
    if metric == "euclidean":
        for i in range(n):
            for j in range(i + 1, n):
                d[i, j] = d[j, i] = float(np.linalg.norm(a[i] - a[j]))
    elif metric == "cosine":
        norms = np.linalg.norm(a, axis=1)
        for i in range(n):
            for j in range(i + 1, n):
                if norms[i] == 0.0 and norms[j] == 0.0:
                    dist = 0.0
                elif norms[i] == 0.0 or norms[j] == 0.0:
                    dist = 1.0
                else:
                    cos = float(a[i] @ a[j]) / (norms[i] * norms[j])
                    dist = min(max(1.0 - cos, 0.0), 2.0)
                d[i, j] = d[j, i] = dist
    else:
        raise ValueError(f"unknown metric {metric!r}")
    return DistanceMatrix(entries=d, metric=metric)


def _prim_mst(weights: np.ndarray) -> list[tuple[float, int, int]]:
    """Prim's MST over a dense symmetric weight matrix; O(n^2)."""
    n = weights.shape[0]
    in_tree = np.zeros(n, dtype=bool)
    best = np.full(n, np.inf)
    best_edge = np.full(n, -1, dtype=int)
    in_tree[0] = True
    best[:] = weights[0]
    best_edge[:] = 0
    edges: list[tuple[float, int, int]] = []
    for _ in range(n - 1):
        cand = np.where(~in_tree, best, np.inf)
        j = int(np.argmin(cand))
        edges.append((float(best[j]), int(best_edge[j]), j))
        in_tree[j] = True
        closer = weights[j] < best
        upd = closer & ~in_tree
        best[upd] = weights[j][upd]
        best_edge[upd] = j
    return edges


def density_cluster(dist: DistanceMatrix, min_cluster_size: int) -> np.ndarray:
    """Density clustering: mutual reachability + MST + fixed-size leaf extraction.

    Reduced HDBSCAN: core distance is the (min_cluster_size - 1)-th nearest
    neighbor distance, the single-linkage hierarchy is cut top-down level by
    level, and leaves are extracted as follows.  Removing all edges at the
    current largest weight splits a component; sub-threshold fragments fall
    out of a surviving component (and stay members of it if it later dies),
    while two or more >= min_cluster_size fragments form a true split.  A
    component with no surviving fragment dies and becomes one cluster.
    Points shed at a true split are noise (label -1).

    One exception mirrors full HDBSCAN's single-cluster mode: when the root
    component dies without ever splitting, only the points still present at
    the final level join the cluster; anything that fell out earlier (at a
    lower density) is noise.  Without this, a lone cluster could never shed
    outliers.

    With fewer than min_cluster_size points the whole input is returned as
    one cluster so downstream consumers never aggregate over an empty set.
    """
    if min_cluster_size < 2:
        raise ValueError("min_cluster_size must be >= 2")
    n = dist.n
    labels = np.full(n, -1, dtype=int)
    if n < min_cluster_size:
        labels[:] = 0
        return labels

    d = dist.entries
    k = min_cluster_size - 1
    # row-sorted distances include the self 0 at rank 0, so rank k is the
    # k-th nearest *other* point
    core = np.sort(d, axis=1)[:, k]
    mreach = np.maximum(d, np.maximum(core[:, None], core[None, :]))
    np.fill_diagonal(mreach, 0.0)

    mst = _prim_mst(mreach)

    next_label = 0

    def components(points: list[int], edges: list[tuple[float, int, int]]):
        adj: dict[int, list[int]] = {p: [] for p in points}
        for _, u, v in edges:
            adj[u].append(v)
            adj[v].append(u)
        seen: set[int] = set()
        comps: list[list[int]] = []
        for p in points:
            if p in seen:
                continue
            stack, comp = [p], []
            seen.add(p)
            while stack:
                q = stack.pop()
                comp.append(q)
                for r in adj[q]:
                    if r not in seen:
                        seen.add(r)
                        stack.append(r)
            comps.append(sorted(comp))
        return comps

    def extract(points: list[int], edges: list[tuple[float, int, int]], is_root: bool = False):
        nonlocal next_label
        fallen: list[int] = []
        while True:
            if not edges:
                for p in points if is_root else fallen + points:
                    labels[p] = next_label
                next_label += 1
                return
            w_max = max(w for w, _, _ in edges)
            kept = [e for e in edges if e[0] < w_max]
            comps = components(points, kept)
            big = [c for c in comps if len(c) >= min_cluster_size]
            if not big:
                for p in points if is_root else fallen + points:
                    labels[p] = next_label
                next_label += 1
                return
            if len(big) == 1:
                survivor = set(big[0])
                fallen.extend(p for p in points if p not in survivor)
                points = big[0]
                edges = [e for e in kept if e[1] in survivor and e[2] in survivor]
                continue
            # true split: shed points become noise, children recurse
            for child in sorted(big, key=lambda c: c[0]):
                in_child = set(child)
                extract(child, [e for e in kept if e[1] in in_child and e[2] in in_child])
            return

    extract(list(range(n)), mst, is_root=True)
    return labels
