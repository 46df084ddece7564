"""Exact nearest-neighbor search over unit-normalized vectors.

One flat index per exit: stored vectors are the training split's pooled
representations at that exit, the label sidecar is the exit's own
prediction on each training sample (cached at build time so queries
never touch the model). Search is an exhaustive scan - desk-scale
stores make exactness affordable - with squared L2 distances and ties
broken by lower stored index.
"""

from __future__ import annotations

import json

import numpy as np

INDEX_FORMAT_VERSION = 1


def _normalize_rows(x):
    """Unit L2 rows; zero rows stay zero. Returns (normalized, zero_mask)."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1)
    zero = norms == 0.0
    safe = np.where(zero, 1.0, norms)
    return x / safe[:, None], zero


class FlatIndex:
    """Immutable exact-L2 index with a per-vector label sidecar."""

    def __init__(self, vectors, labels):
        vectors = np.asarray(vectors)
        labels = np.asarray(labels, dtype=np.int64)
        if vectors.ndim != 2 or vectors.shape[0] == 0:
            raise ValueError(
                f"need a nonempty (count, dim) vector matrix, got {vectors.shape}")
        if labels.shape != (vectors.shape[0],):
            raise ValueError(
                f"labels {labels.shape} do not align with "
                f"{vectors.shape[0]} vectors")
        self.vectors, self.zero_mask = _normalize_rows(vectors)
        self.labels = labels
        self._sq_norms = np.einsum("ij,ij->i", self.vectors, self.vectors)

    @property
    def dim(self):
        return self.vectors.shape[1]

    @property
    def count(self):
        return self.vectors.shape[0]

    def query(self, probes, k):
        """k nearest stored vectors per probe, ascending squared L2.

        Probes are normalized here; accepts one vector (dim,) or a batch
        (B, dim). Returns (indices, distances) shaped (k,)/(B, k) resp.
        Candidate selection uses the expanded |q|^2+|v|^2-2qv form for
        speed; reported distances are recomputed elementwise so they
        match a direct sum((q-v)^2) evaluation.
        """
        probes = np.asarray(probes)
        single = probes.ndim == 1
        q = np.atleast_2d(probes)
        if q.shape[1] != self.dim:
            raise ValueError(
                f"probe dim {q.shape[1]} != index dim {self.dim}")
        if not 1 <= k <= self.count:
            raise ValueError(f"k={k} must be in [1, {self.count}]")
        q, _ = _normalize_rows(q)
        expand = (np.einsum("ij,ij->i", q, q)[:, None] + self._sq_norms[None, :]
                  - 2.0 * (q @ self.vectors.T))
        if k < self.count:
            part = np.argpartition(expand, k - 1, axis=1)[:, :k]
        else:
            part = np.broadcast_to(np.arange(self.count), expand.shape).copy()
        idx_out = np.empty((q.shape[0], k), dtype=np.int64)
        dist_out = np.empty((q.shape[0], k), dtype=np.float64)
        for b in range(q.shape[0]):
            if k < self.count:
                # widen past the partition so rows tying the k-th value
                # compete; ties then resolve toward the lower index
                kth = expand[b, part[b]].max()
                sel = np.nonzero(expand[b] <= kth)[0]
            else:
                sel = part[b]
            exact = np.sum((q[b] - self.vectors[sel]) ** 2, axis=1)
            order = np.lexsort((sel, exact))[:k]
            idx_out[b] = sel[order]
            dist_out[b] = exact[order]
        if single:
            return idx_out[0], dist_out[0]
        return idx_out, dist_out

    def save(self, path):
        header = {"format_version": INDEX_FORMAT_VERSION,
                  "count": self.count, "dim": self.dim}
        with open(path, "wb") as fh:
            np.savez(fh,
                     __header__=np.frombuffer(
                         json.dumps(header, sort_keys=True).encode("utf-8"),
                         dtype=np.uint8),
                     vectors=self.vectors, labels=self.labels,
                     zero_mask=self.zero_mask)

    @classmethod
    def load(cls, path):
        with np.load(path) as z:
            header = json.loads(bytes(z["__header__"]).decode("utf-8"))
            if header.get("format_version") != INDEX_FORMAT_VERSION:
                raise ValueError(
                    f"unsupported index format {header.get('format_version')}")
            idx = cls.__new__(cls)
            idx.vectors = z["vectors"]
            idx.labels = z["labels"]
            idx.zero_mask = z["zero_mask"]
        if idx.vectors.shape != (header["count"], header["dim"]):
            raise ValueError(
                f"index header says {header['count']}x{header['dim']}, "
                f"file holds {idx.vectors.shape}")
        idx._sq_norms = np.einsum("ij,ij->i", idx.vectors, idx.vectors)
        return idx


def build_exit_indices(reprs_per_exit, logits_per_exit):
    """One FlatIndex per exit from training representations; the sidecar
    labels are each exit's own argmax predictions."""
    if len(reprs_per_exit) != len(logits_per_exit):
        raise ValueError("one representation matrix per exit required")
    indices = []
    for reps, logits in zip(reprs_per_exit, logits_per_exit):
        preds = np.argmax(logits, axis=1)
        indices.append(FlatIndex(reps, preds))
    return indices
