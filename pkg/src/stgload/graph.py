"""Building-similarity graph: embeddings, cosine similarity, top-k edges, normalization."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .dataio import LOAD, BuildingDataset

DESCRIPTOR_WIDTH = 37  # 24 hourly + 7 weekday means, load mean/sd, 4 weather means


def default_k(n_nodes: int) -> int:
    return max(2, math.ceil(n_nodes / 4))


def yearly_descriptors(ds: BuildingDataset) -> np.ndarray:
    """Per-building summary of the whole record, shape ``(N, 37)``."""
    feats = ds.features
    stamps = ds.timestamps
    hours = (stamps.astype("datetime64[h]").astype(np.int64) % 24)
    # 1970-01-01 was a Thursday; shift so Monday = 0
    weekday = ((stamps.astype("datetime64[D]").astype(np.int64) + 3) % 7)
    load = feats[:, :, LOAD]
    rows = []
    for i in range(feats.shape[1]):
        daily = [load[hours == h, i].mean() if np.any(hours == h) else 0.0 for h in range(24)]
        weekly = [load[weekday == w, i].mean() if np.any(weekday == w) else 0.0 for w in range(7)]
        weather = feats[:, i, 2:].mean(axis=0)
        rows.append(np.concatenate([daily, weekly, [load[:, i].mean(), load[:, i].std()], weather]))
    return np.asarray(rows)


def init_embeddings(ds: BuildingDataset, r: int = 32, seed: int = 0) -> nx.Parameter:
    """Seed node embeddings from yearly descriptors.

    Descriptors are centred across buildings so cosine similarity contrasts
    buildings against the fleet average; a row that centres to zero keeps its
    raw descriptor. Widths below 37 use a seeded orthonormal projection,
    wider ones zero-pad. Rows end at unit norm.
    """
    if ds.n_nodes == 0:
        raise nx.ContractError("cannot embed an empty dataset")
    desc = yearly_descriptors(ds)
    centred = desc - desc.mean(axis=0, keepdims=True)
    flat = np.linalg.norm(centred, axis=1) < 1e-9
    centred[flat] = desc[flat]
    return nx.Parameter(_project_rows(centred, r, seed), name="embeddings")


def _project_rows(desc: np.ndarray, r: int, seed: int) -> np.ndarray:
    width = desc.shape[1]
    if r < width:
        rng = np.random.default_rng(seed)
        q, _ = np.linalg.qr(rng.standard_normal((width, r)))
        emb = desc @ q
    else:
        emb = np.zeros((desc.shape[0], r))
        emb[:, :width] = desc
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    # a projection can null a row; fall back to a fixed nonzero direction
    emb[norms[:, 0] < 1e-12] = 1.0
    return emb / np.linalg.norm(emb, axis=1, keepdims=True)


def similarity_matrix(E) -> nx.Tensor:
    """ReLU-clamped cosine similarity with a zero diagonal."""
    E = nx.tensor(E)
    norms = np.linalg.norm(E.data, axis=1)
    if np.any(norms == 0):
        raise nx.ContractError(f"embedding rows {np.flatnonzero(norms == 0).tolist()} are zero")
    n = E.shape[0]
    unit = E / nx.sqrt((E * E).sum(axis=1, keepdims=True))
    cos = unit @ unit.transpose()
    return nx.relu(cos) * (1.0 - np.eye(n))


def topk_mask(A: np.ndarray, k: int) -> np.ndarray:
    """0/1 mask keeping the k largest off-diagonal entries per row.

    Ties go to the lower column index.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    ranked = A.copy()
    np.fill_diagonal(ranked, -np.inf)
    mask = np.zeros_like(A)
    keep = min(k, n - 1)
    if keep <= 0:
        return mask
    order = np.argsort(-ranked, axis=1, kind="stable")[:, :keep]
    np.put_along_axis(mask, order, 1.0, axis=1)
    return mask


def topk_filter(A, k: int):
    """Zero all but the k strongest edges per row. Works on arrays or tensors."""
    if isinstance(A, nx.Tensor):
        return A * topk_mask(A.data, k)
    A = np.asarray(A, dtype=float)
    return A * topk_mask(A, k)


def normalize_adjacency(A):
    """Symmetric degree normalization of ``A + I`` (row-sum degrees)."""
    A = nx.tensor(A)
    n = A.shape[0]
    tilde = A + np.eye(n)
    inv_sqrt = nx.power(tilde.sum(axis=1), -0.5)
    return inv_sqrt.reshape(n, 1) * tilde * inv_sqrt.reshape(1, n)


@dataclass
class AdjacencyMatrix:
    raw: nx.Tensor
    filtered: nx.Tensor
    norm: nx.Tensor
    k: int


def refresh_graph(E, k: int) -> AdjacencyMatrix:
    """Similarity, top-k, and normalization in one differentiable pass.

    The top-k selection is a constant mask; gradients reach ``E`` only
    through the retained entries.
    """
    raw = similarity_matrix(E)
    filtered = topk_filter(raw, k)
    return AdjacencyMatrix(raw, filtered, normalize_adjacency(filtered), k)


def export_adjacency(adj: AdjacencyMatrix, out_dir, ids=None) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    raw, filt = adj.raw.data, adj.filtered.data
    edges, dense = out_dir / "adjacency_edges.csv", out_dir / "adjacency_dense.csv"
    with open(edges, "w") as f:
        f.write("i,j,weight\n")
        for i, j in zip(*np.nonzero(raw)):
            f.write(f"{i},{j},{float(raw[i, j])!r}\n")
    with open(dense, "w") as f:
        n = filt.shape[0]
        f.write(",".join(ids if ids is not None else [str(j) for j in range(n)]) + "\n")
        for row in filt:
            f.write(",".join(repr(float(v)) for v in row) + "\n")
    return edges, dense
