"""Observational analyses: PCA of embeddings and cross-type cosine similarity."""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .activations import capture
from .dataset import CountingSample, TextTaskConfig, generate_text
from .model import CountingTransformer
from .vocab import FRUITS

EIG_TOL = 1e-10
EIG_MAX_ITER = 10_000


class UndefinedEntry(ValueError):
    pass


@dataclass
class EmbeddingSet:
    vectors: np.ndarray  # (n, d)
    labels: list[dict] = field(default_factory=list)  # list_position, item_type, layer, role

    def __post_init__(self):
        self.vectors = np.atleast_2d(np.asarray(self.vectors, dtype=np.float64))
        if self.labels and len(self.labels) != len(self.vectors):
            raise ValueError("labels and vectors differ in length")

    def __len__(self) -> int:
        return len(self.vectors)

    def select(self, **where) -> "EmbeddingSet":
        idx = [i for i, lab in enumerate(self.labels) if all(lab.get(k) == v for k, v in where.items())]
        return EmbeddingSet(self.vectors[idx], [self.labels[i] for i in idx])


def symmetric_eig(mat: np.ndarray, k: int, tol: float = EIG_TOL, max_iter: int = EIG_MAX_ITER, seed: int = 0):
    """Top-k eigenpairs of a symmetric PSD matrix by power iteration with Hotelling deflation."""
    a = np.array(mat, dtype=np.float64)
    n = a.shape[0]
    rng = np.random.default_rng(seed)
    vals, vecs = [], []
    scale = max(np.abs(a).max(), 1e-300)
    for _ in range(k):
        v = rng.standard_normal(n)
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(max_iter):
            w = a @ v
            norm = np.linalg.norm(w)
            if norm <= tol * scale:
                lam, w = 0.0, v
                break
            w /= norm
            # re-orthogonalize against found vectors to keep rounding out of deflated directions
            for u in vecs:
                w -= (u @ w) * u
            w /= np.linalg.norm(w)
            lam_new = float(w @ a @ w)
            done = np.linalg.norm(w - v) < tol or np.linalg.norm(w + v) < tol
            v = w
            if done and abs(lam_new - lam) <= tol * scale:
                lam = lam_new
                break
            lam = lam_new
        vals.append(max(lam, 0.0))
        vecs.append(v)
        a = a - lam * np.outer(v, v)
    return np.array(vals), np.array(vecs).T


@dataclass
class PCAResult:
    coords: np.ndarray  # (n, k)
    components: np.ndarray  # (d, k)
    eigenvalues: np.ndarray
    explained_variance_ratio: np.ndarray
    mean: np.ndarray
    reduced_rank: bool = False
    labels: list[dict] = field(default_factory=list)


def pca_project(emb: EmbeddingSet | np.ndarray, k: int = 2, seed: int = 0) -> PCAResult:
    """Project onto the top-k principal axes of the mean-centered data.

    Sign convention: each component's largest-magnitude coordinate is positive.
    """
    if not isinstance(emb, EmbeddingSet):
        emb = EmbeddingSet(emb)
    x = emb.vectors
    n, d = x.shape
    if n < k + 1:
        raise ValueError(f"need at least {k + 1} vectors for k={k}")
    if k > d:
        raise ValueError(f"k={k} exceeds dimensionality {d}")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / n
    vals, vecs = symmetric_eig(cov, k, seed=seed)
    order = np.argsort(-vals, kind="stable")
    vals, vecs = vals[order], vecs[:, order]
    for j in range(k):
        i = np.argmax(np.abs(vecs[:, j]))
        if vecs[i, j] < 0:
            vecs[:, j] = -vecs[:, j]
    total = float(np.trace(cov))
    ratio = vals / total if total > 0 else np.zeros_like(vals)
    reduced = bool(np.any(vals <= EIG_TOL * max(total, 1e-300)))
    if reduced:
        warnings.warn(f"data rank below k={k}; trailing components carry no variance", RuntimeWarning)
    return PCAResult(xc @ vecs, vecs, vals, ratio, mean, reduced, list(emb.labels))


def cosine_similarity_matrix(a: EmbeddingSet | np.ndarray, b: EmbeddingSet | np.ndarray) -> np.ndarray:
    va = a.vectors if isinstance(a, EmbeddingSet) else np.atleast_2d(np.asarray(a, dtype=np.float64))
    vb = b.vectors if isinstance(b, EmbeddingSet) else np.atleast_2d(np.asarray(b, dtype=np.float64))
    na = np.linalg.norm(va, axis=1)
    nb = np.linalg.norm(vb, axis=1)
    if np.any(na == 0) or np.any(nb == 0):
        raise UndefinedEntry("cosine similarity is undefined for a zero vector")
    m = (va / na[:, None]) @ (vb / nb[:, None]).T
    return np.clip(m, -1.0, 1.0)


def cross_type_cosine(emb: EmbeddingSet, positions: Sequence[int] = tuple(range(1, 10))) -> np.ndarray:
    """Position-by-position cosine matrix averaged over ordered pairs of distinct item types."""
    types = sorted({lab["item_type"] for lab in emb.labels})
    mats = []
    for ta, tb in itertools.permutations(types, 2):
        a = _by_position(emb.select(item_type=ta), positions)
        b = _by_position(emb.select(item_type=tb), positions)
        if a is None or b is None:
            continue
        mats.append(cosine_similarity_matrix(a, b))
    if not mats:
        raise UndefinedEntry("need at least two item types covering every position")
    return np.mean(mats, axis=0)


def _by_position(emb: EmbeddingSet, positions) -> np.ndarray | None:
    rows = []
    for p in positions:
        sel = [v for v, lab in zip(emb.vectors, emb.labels) if lab["list_position"] == p]
        if not sel:
            return None
        rows.append(np.mean(sel, axis=0))
    return np.array(rows)


def collect_embeddings(
    model: CountingTransformer,
    samples: Sequence[CountingSample],
    layer: int,
    role: str = "item",
    family: str = "resid_post",
    caches=None,
) -> EmbeddingSet:
    """Activations at list items (or separators) of the given samples at one layer."""
    vecs, labels = [], []
    for i, s in enumerate(samples):
        cache = caches[i] if caches is not None else capture(model, s)
        if role == "item":
            sites = [(p, j + 1, s.item_types[j]) for j, p in enumerate(s.list_positions)]
        else:
            sites = [(p, s.separator_index(p) + 1, s.item_types[0]) for p in s.separator_positions]
        for p, listpos, itype in sites:
            vecs.append(cache.get(family, layer, p).double().numpy())
            labels.append({"list_position": listpos, "item_type": itype, "layer": layer + 1, "role": role})
    return EmbeddingSet(np.array(vecs), labels)


def monotypic_samples(order: str = "question-first", count: int = 9, types=FRUITS, seed: int = 0) -> list[CountingSample]:
    return [generate_text(TextTaskConfig(count, "monotypic", order, "general", seed=seed, item_types=(t,))) for t in types]


def layerwise_sweep(
    model: CountingTransformer,
    analysis: Callable[[int], object],
    layers: Sequence[int] | None = None,
) -> dict[int, object]:
    """Apply ``analysis(layer)`` at each layer; keys are 1-based layer labels."""
    layers = range(model.n_layers) if layers is None else layers
    return {layer + 1: analysis(layer) for layer in layers}
