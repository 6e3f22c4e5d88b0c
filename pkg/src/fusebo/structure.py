"""Stage 2b: candidate-manifold analysis and structural weights.

Candidates are embedded with PCA, partitioned by several competing proposers
(k-means, Gaussian mixtures, a density-based proposer, and graph communities
on a nearest-neighbor graph), and the partition with the best silhouette is
kept. Geometric descriptors of the chosen partition turn into a per-candidate
weight pi in (0, 1]: boundary points and sparse tails up, dense cores
slightly down.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import networkx as nx
import numpy as np
from networkx.algorithms.community import louvain_communities
from sklearn.cluster import HDBSCAN, KMeans
from sklearn.metrics import pairwise_distances, silhouette_score
from sklearn.mixture import GaussianMixture
from sklearn.neighbors import NearestNeighbors, kneighbors_graph

log = logging.getLogger(__name__)


class PartitionError(RuntimeError):
    """No usable partition could be produced."""


@dataclass
class Partition:
    proposer: str
    labels: np.ndarray  # -1 marks noise


@dataclass
class ClusterModel:
    embedding: np.ndarray
    labels: np.ndarray  # original labels, -1 = noise
    assigned: np.ndarray  # noise mapped to nearest centroid
    n_clusters: int
    centroids: np.ndarray
    boundary: np.ndarray  # in [0, 1]; 1 for noise
    density: np.ndarray  # in [0, 1], min-max per cluster
    boundary_flag: np.ndarray
    validity: float
    trivial: bool = False


@dataclass
class StructuralWeights:
    pi: np.ndarray


def embed(X_cand: np.ndarray, max_components: int = 10) -> np.ndarray:
    """Standardize and project onto leading principal components.

    Component signs follow the largest-magnitude loading (made positive), so
    the embedding is deterministic. Constant columns are dropped; an entirely
    constant input embeds to a zero column.
    """
    X = np.asarray(X_cand, dtype=float)
    m, d = X.shape
    std = X.std(axis=0)
    keep = std > 0
    if not keep.any():
        return np.zeros((m, 1))
    Z = (X[:, keep] - X[:, keep].mean(axis=0)) / std[keep]
    e = min(max_components, Z.shape[1], m - 1)
    U, s, Vt = np.linalg.svd(Z, full_matrices=False)
    scores = U[:, :e] * s[:e]
    for j in range(e):
        pivot = np.argmax(np.abs(Vt[j]))
        if Vt[j, pivot] < 0:
            scores[:, j] = -scores[:, j]
    return scores


def _relabel(labels: np.ndarray) -> np.ndarray:
    """Map non-noise labels onto 0..K-1 preserving first-appearance order."""
    out = np.full(labels.shape, -1, dtype=int)
    mapping: dict[int, int] = {}
    for i, label in enumerate(labels):
        if label == -1:
            continue
        if label not in mapping:
            mapping[label] = len(mapping)
        out[i] = mapping[label]
    return out


def _assign_from_subsample(emb: np.ndarray, sub_idx: np.ndarray, sub_labels: np.ndarray) -> np.ndarray:
    nn = NearestNeighbors(n_neighbors=1).fit(emb[sub_idx])
    _, nearest = nn.kneighbors(emb)
    return sub_labels[nearest[:, 0]]


def propose_partitions(
    embedding: np.ndarray,
    rng: np.random.Generator,
    kmeans_k_max: int = 8,
    gmm_k_max: int = 6,
    hdbscan_min_sizes: Sequence[int] = (5, 15),
    graph_resolutions: Sequence[float] = (0.5, 1.0),
    graph_knn: int = 15,
    fit_cap: int = 1500,
    proposers: Sequence[str] = ("kmeans", "gmm", "density", "graph"),
) -> list[Partition]:
    """Candidate partitions from several proposers at multiple settings.

    Cluster counts above m/2 are skipped. The density and graph proposers fit
    on an evenly spaced subsample when the set is large, then extend labels
    by nearest neighbor. Any proposer may fail and be skipped, but at least
    one k-means partition must succeed.
    """
    emb = np.asarray(embedding, dtype=float)
    m = emb.shape[0]
    if m < 10:
        raise PartitionError("need at least 10 points to propose partitions")
    k_guard = m // 2
    partitions: list[Partition] = []

    if "kmeans" in proposers:
        for k in range(2, kmeans_k_max + 1):
            if k > k_guard:
                continue
            try:
                seed = int(rng.integers(2**31))
                labels = KMeans(n_clusters=k, n_init=2, random_state=seed).fit_predict(emb)
                partitions.append(Partition(f"kmeans-{k}", _relabel(labels)))
            except Exception as exc:  # noqa: BLE001
                log.warning("kmeans k=%d failed: %s", k, exc)
    if not any(p.proposer.startswith("kmeans") for p in partitions):
        raise PartitionError("k-means produced no usable partition")

    if "gmm" in proposers:
        for k in range(2, gmm_k_max + 1):
            if k > k_guard:
                continue
            try:
                seed = int(rng.integers(2**31))
                gmm = GaussianMixture(
                    n_components=k, covariance_type="full", reg_covar=1e-6,
                    max_iter=50, random_state=seed,
                )
                partitions.append(Partition(f"gmm-{k}", _relabel(gmm.fit_predict(emb))))
            except Exception as exc:  # noqa: BLE001
                log.warning("gmm k=%d failed: %s", k, exc)

    sub_idx = np.unique(np.linspace(0, m - 1, min(m, fit_cap)).astype(int))
    if "density" in proposers:
        for min_size in hdbscan_min_sizes:
            if min_size >= sub_idx.size:
                continue
            try:
                labels_sub = HDBSCAN(min_cluster_size=int(min_size)).fit_predict(emb[sub_idx])
                labels = labels_sub if sub_idx.size == m else _assign_from_subsample(emb, sub_idx, labels_sub)
                partitions.append(Partition(f"density-{min_size}", _relabel(labels)))
            except Exception as exc:  # noqa: BLE001
                log.warning("density min_size=%d failed: %s", min_size, exc)

    if "graph" in proposers:
        try:
            k_nn = min(graph_knn, sub_idx.size - 1)
            graph = kneighbors_graph(emb[sub_idx], n_neighbors=k_nn, mode="connectivity")
            G = nx.from_scipy_sparse_array(graph + graph.T)
            for resolution in graph_resolutions:
                seed = int(rng.integers(2**31))
                comms = louvain_communities(G, resolution=resolution, seed=seed)
                labels_sub = np.empty(sub_idx.size, dtype=int)
                for cid, members in enumerate(comms):
                    labels_sub[list(members)] = cid
                labels = labels_sub if sub_idx.size == m else _assign_from_subsample(emb, sub_idx, labels_sub)
                partitions.append(Partition(f"graph-{resolution}", _relabel(labels)))
        except Exception as exc:  # noqa: BLE001
            log.warning("graph-community proposer failed: %s", exc)

    return partitions


def select_partition(
    partitions: Sequence[Partition],
    embedding: np.ndarray,
    silhouette_cap: int = 2000,
    density_k: int = 10,
) -> ClusterModel:
    """Pick the partition with the best mean silhouette on a subsample.

    Ties break toward fewer clusters, then proposal order. Noise points are
    assigned to the nearest centroid for downstream use but keep their
    boundary flag. If every proposal is trivial (one cluster), a neutral
    single-cluster model is returned.
    """
    emb = np.asarray(embedding, dtype=float)
    m = emb.shape[0]
    sub = np.unique(np.linspace(0, m - 1, min(m, silhouette_cap)).astype(int))
    dists = pairwise_distances(emb[sub]) if sub.size > 2 else None

    best: Optional[tuple[float, int, int]] = None  # (-validity, K, order)
    best_partition: Optional[Partition] = None
    best_validity = 0.0
    for order, partition in enumerate(partitions):
        labels = partition.labels
        n_clusters = int(labels.max()) + 1 if (labels >= 0).any() else 0
        if n_clusters < 2 or dists is None:
            continue
        sub_labels = labels[sub]
        mask = sub_labels >= 0
        present = np.unique(sub_labels[mask])
        if present.size < 2 or mask.sum() <= present.size:
            continue
        try:
            validity = float(
                silhouette_score(dists[np.ix_(mask, mask)], sub_labels[mask], metric="precomputed")
            )
        except ValueError:
            continue
        key = (-validity, n_clusters, order)
        if best is None or key < best:
            best = key
            best_partition = partition
            best_validity = validity

    if best_partition is None:
        return ClusterModel(
            embedding=emb,
            labels=np.zeros(m, dtype=int),
            assigned=np.zeros(m, dtype=int),
            n_clusters=1,
            centroids=emb.mean(axis=0, keepdims=True),
            boundary=np.zeros(m),
            density=np.zeros(m),
            boundary_flag=np.zeros(m, dtype=bool),
            validity=0.0,
            trivial=True,
        )
    return _build_model(emb, best_partition.labels, best_validity, density_k)


def _minmax_per_cluster(values: np.ndarray, assigned: np.ndarray) -> np.ndarray:
    out = np.empty_like(values)
    for label in np.unique(assigned):
        members = assigned == label
        lo, hi = values[members].min(), values[members].max()
        out[members] = 0.5 if hi - lo <= 0 else (values[members] - lo) / (hi - lo)
    return out


def _build_model(emb: np.ndarray, labels: np.ndarray, validity: float, density_k: int) -> ClusterModel:
    m = emb.shape[0]
    n_clusters = int(labels.max()) + 1
    centroids = np.vstack([emb[labels == k].mean(axis=0) for k in range(n_clusters)])

    assigned = labels.copy()
    noise = labels == -1
    if noise.any():
        dist_to_centroids = pairwise_distances(emb[noise], centroids)
        assigned[noise] = np.argmin(dist_to_centroids, axis=1)

    centroid_dist = np.linalg.norm(emb - centroids[assigned], axis=1)
    boundary = _minmax_per_cluster(centroid_dist, assigned)
    boundary[noise] = 1.0

    k_density = min(density_k, m - 1)
    if k_density >= 1:
        nn = NearestNeighbors(n_neighbors=k_density + 1).fit(emb)
        dists, _ = nn.kneighbors(emb)
        mean_dist = dists[:, 1:].mean(axis=1)
        raw_density = 1.0 / np.maximum(mean_dist, 1e-12)
    else:
        raw_density = np.ones(m)
    density = _minmax_per_cluster(raw_density, assigned)

    return ClusterModel(
        embedding=emb,
        labels=labels,
        assigned=assigned,
        n_clusters=n_clusters,
        centroids=centroids,
        boundary=boundary,
        density=density,
        boundary_flag=noise.copy(),
        validity=validity,
        trivial=False,
    )


def compute_structural_weights(
    model: ClusterModel,
    pi_base: float = 0.7,
    boundary_gain: float = 0.3,
    core_gain: float = 0.2,
    pi_min: float = 0.05,
) -> StructuralWeights:
    """pi = clamp(base + boundary_gain*b - core_gain*c, pi_min, 1).

    Higher boundary score raises pi, higher local density lowers it; a
    trivial single-cluster model gets the neutral base weight everywhere.
    """
    m = model.embedding.shape[0]
    if model.trivial:
        return StructuralWeights(pi=np.full(m, pi_base))
    pi = np.clip(pi_base + boundary_gain * model.boundary - core_gain * model.density, pi_min, 1.0)
    return StructuralWeights(pi=pi)


def analyze_candidates(
    X_cand: np.ndarray,
    rng: np.random.Generator,
    max_components: int = 10,
    proposers: Sequence[str] = ("kmeans", "gmm", "density", "graph"),
    **kwargs,
) -> tuple[ClusterModel, StructuralWeights]:
    """Embed, partition, and weight a candidate matrix in one call."""
    pi_kwargs = {
        k: kwargs.pop(k) for k in ("pi_base", "boundary_gain", "core_gain", "pi_min") if k in kwargs
    }
    select_kwargs = {
        k: kwargs.pop(k) for k in ("silhouette_cap", "density_k") if k in kwargs
    }
    emb = embed(X_cand, max_components=max_components)
    if X_cand.shape[0] < 10:
        model = select_partition([], emb, **select_kwargs)
    else:
        partitions = propose_partitions(emb, rng, proposers=proposers, **kwargs)
        model = select_partition(partitions, emb, **select_kwargs)
    return model, compute_structural_weights(model, **pi_kwargs)
