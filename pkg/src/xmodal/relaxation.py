"""Relaxed noun-embedding bank: template-averaged noun embeddings filtered by
k-means alignment with training-image embeddings, then kept as learnable vectors.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import records
from .embeddings import EncoderBackend, normalize
from .errors import BackendError, DegenerateInputError, InputError, XModalError
from .lexicon import NounCandidateSet, PromptTemplateSet, apply_templates

log = logging.getLogger(__name__)

SELECT_MODES = ("nearest-in-cluster", "random-in-cluster")


def embed_nouns(
    nouns: NounCandidateSet | Sequence[str],
    templates: PromptTemplateSet,
    backend: EncoderBackend,
    batch_size: int = 256,
) -> tuple[list[str], np.ndarray]:
    """Encode every noun under every template, average over templates, renormalize.

    Returns the noun list and a ``(len(nouns), d_txt)`` float32 matrix.
    """
    names = list(nouns.nouns if isinstance(nouns, NounCandidateSet) else nouns)
    if not names:
        raise DegenerateInputError("no nouns to embed")
    total = np.zeros((len(names), backend.d_txt), dtype=np.float64)
    for t_idx, template in enumerate(templates.templates):
        single = PromptTemplateSet((template,))
        for start in range(0, len(names), batch_size):
            for i in range(start, min(start + batch_size, len(names))):
                prompt = apply_templates(single, names[i])[0]
                try:
                    total[i] += backend.encode_text(prompt)
                except XModalError as exc:
                    raise BackendError(
                        f"encoding failed for noun {names[i]!r} with template #{t_idx} {template!r}: {exc}"
                    ) from exc
    return names, normalize(total / len(templates))


def _sqdist(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    diff = X[:, None, :] - C[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


@dataclass
class ClusterModel:
    centers: np.ndarray  # (M, d) float64
    assignment: np.ndarray  # (n,) int
    inertia: float
    n_iter: int = 0
    reseeded: list[tuple[int, int]] = field(default_factory=list)  # (iteration, cluster)

    @property
    def num_clusters(self) -> int:
        return len(self.centers)

    def predict(self, vectors: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
        return np.argmin(_sqdist(X, self.centers), axis=1)


def _kmeanspp_init(X: np.ndarray, M: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    chosen = [int(rng.integers(n))]
    d2 = _sqdist(X, X[chosen])[:, 0]
    for _ in range(1, M):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        chosen.append(idx)
        d2 = np.minimum(d2, _sqdist(X, X[idx : idx + 1])[:, 0])
    return X[chosen].copy()


def kmeans(vectors, M: int, seed: int = 0, max_iter: int = 100, tol: float = 1e-6) -> ClusterModel:
    """Lloyd's algorithm with seeded k-means++ initialisation.

    Stops when no center moves by ``tol`` or more, or after ``max_iter``
    iterations.  A cluster that empties is re-seeded at the point farthest from
    its current center.  Ties in assignment go to the lowest cluster id.
    """
    X = np.asarray(vectors, dtype=np.float64)
    if X.ndim != 2:
        raise InputError("kmeans expects a 2-D array of vectors")
    n = len(X)
    if not 1 <= M <= n:
        raise InputError(f"need 1 <= M <= number of vectors, got M={M}, n={n}")
    rng = np.random.default_rng(seed)
    centers = _kmeanspp_init(X, M, rng)
    reseeded: list[tuple[int, int]] = []
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        d2 = _sqdist(X, centers)
        assign = np.argmin(d2, axis=1)
        own = d2[np.arange(n), assign]
        new = centers.copy()
        for k in range(M):
            members = assign == k
            if members.any():
                new[k] = X[members].mean(axis=0)
            else:
                far = int(np.argmax(own))
                log.info("kmeans: cluster %d empty at iteration %d, re-seeded from point %d", k, n_iter, far)
                reseeded.append((n_iter, k))
                new[k] = X[far]
                own[far] = -1.0
        shift = float(np.max(np.linalg.norm(new - centers, axis=1)))
        centers = new
        if shift < tol:
            break
    d2 = _sqdist(X, centers)
    assign = np.argmin(d2, axis=1)
    inertia = float(d2[np.arange(n), assign].sum())
    return ClusterModel(centers=centers, assignment=assign, inertia=inertia, n_iter=n_iter, reseeded=reseeded)


def similarity_matrix(centers: np.ndarray, noun_vectors: np.ndarray) -> np.ndarray:
    """``S[k, i] = <m_k, n_i>``."""
    C = np.asarray(centers, dtype=np.float64)
    N = np.asarray(noun_vectors, dtype=np.float64)
    if C.shape[1] != N.shape[1]:
        raise InputError(f"center dim {C.shape[1]} != noun dim {N.shape[1]}; image and text spaces must match")
    return C @ N.T


class NounBank:
    """Filtered relaxed-noun vectors with frozen pretrained snapshots.

    ``pretrained`` is a read-only float32 array; ``current`` is a float32 torch
    tensor, a ``Parameter`` when the bank is learnable.
    """

    def __init__(
        self,
        nouns: Sequence[str],
        pretrained: np.ndarray,
        cluster_ids: Sequence[int],
        num_clusters: int,
        learnable: bool = True,
        similarity: Sequence[float] | None = None,
        current: np.ndarray | None = None,
        centers: np.ndarray | None = None,
    ):
        pre = np.array(pretrained, dtype=np.float32)
        if pre.ndim != 2 or len(pre) != len(nouns) or len(cluster_ids) != len(nouns):
            raise InputError("bank arrays disagree in length")
        pre.setflags(write=False)
        self.nouns = tuple(nouns)
        self.pretrained = pre
        self.cluster_ids = np.asarray(cluster_ids, dtype=np.int64)
        self.num_clusters = int(num_clusters)
        self.similarity = np.asarray(similarity if similarity is not None else np.zeros(len(nouns)), dtype=np.float64)
        self.centers = None if centers is None else np.asarray(centers, dtype=np.float64)
        init = pre.copy() if current is None else np.array(current, dtype=np.float32)
        self.current = torch.nn.Parameter(torch.from_numpy(init), requires_grad=learnable)
        self.learnable = learnable

    def __len__(self) -> int:
        return len(self.nouns)

    @property
    def dim(self) -> int:
        return self.pretrained.shape[1]

    def set_learnable(self, learnable: bool) -> None:
        self.learnable = learnable
        self.current.requires_grad_(learnable)

    def pretrained_tensor(self) -> torch.Tensor:
        return torch.from_numpy(self.pretrained.copy())

    @torch.no_grad()
    def renormalize_(self) -> None:
        self.current.div_(self.current.norm(dim=1, keepdim=True))

    def snapshot(self) -> np.ndarray:
        return self.current.detach().numpy().copy()

    def checksum(self) -> str:
        return hashlib.sha256(self.snapshot().tobytes() + self.pretrained.tobytes()).hexdigest()

    def entries_in_cluster(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.cluster_ids == k)

    def drift_stats(self) -> dict[str, float]:
        cur = self.snapshot().astype(np.float64)
        pre = self.pretrained.astype(np.float64)
        cos = np.sum(cur * pre, axis=1) / (np.linalg.norm(cur, axis=1) * np.linalg.norm(pre, axis=1))
        return {"mean_cos": float(cos.mean()), "min_cos": float(cos.min())}

    def copy(self, learnable: bool | None = None) -> "NounBank":
        return NounBank(
            self.nouns,
            self.pretrained,
            self.cluster_ids,
            self.num_clusters,
            learnable=self.learnable if learnable is None else learnable,
            similarity=self.similarity,
            current=self.snapshot(),
            centers=self.centers,
        )

    def report_rows(self) -> list[dict]:
        return [
            {"noun": n, "cluster": int(k), "similarity": float(s)}
            for n, k, s in zip(self.nouns, self.cluster_ids, self.similarity)
        ]

    def save(self, directory: str | Path) -> Path:
        directory = Path(directory)
        arrays = {"pretrained": self.pretrained, "current": self.snapshot(), "cluster_ids": self.cluster_ids}
        if self.centers is not None:
            arrays["centers"] = self.centers.astype(np.float32)
        meta = {
            "nouns": list(self.nouns),
            "num_clusters": self.num_clusters,
            "learnable": self.learnable,
            "similarity": [float(s) for s in self.similarity],
        }
        records.save_arrays(directory, arrays, meta)
        lines = ["noun\tcluster\tsimilarity"] + [
            f"{r['noun']}\t{r['cluster']}\t{r['similarity']:.6f}" for r in self.report_rows()
        ]
        records.atomic_write_bytes(directory / "selection.tsv", ("\n".join(lines) + "\n").encode())
        return directory

    @classmethod
    def load(cls, directory: str | Path) -> "NounBank":
        arrays, meta = records.load_arrays(Path(directory))
        return cls(
            meta["nouns"],
            arrays["pretrained"],
            arrays["cluster_ids"],
            meta["num_clusters"],
            learnable=meta["learnable"],
            similarity=meta["similarity"],
            current=arrays["current"],
            centers=arrays.get("centers"),
        )


def assign_and_filter(
    cluster_model: ClusterModel,
    nouns: Sequence[str],
    noun_vectors: np.ndarray,
    top_k: int = 5,
    learnable: bool = True,
) -> NounBank:
    """Assign nouns to their most similar center and keep the ``top_k`` best per cluster.

    Ranking uses the raw similarity: a softmax taken over any axis is strictly
    increasing in each entry, so it cannot change the order within a cluster.
    Ties go to the lower cluster id / lower noun index.
    """
    if top_k < 1:
        raise InputError("top_k must be >= 1")
    vecs = np.asarray(noun_vectors, dtype=np.float64)
    norms = np.linalg.norm(vecs, axis=1)
    if not np.allclose(norms, 1.0, atol=1e-5):
        raise InputError("noun embeddings must be unit-norm")
    S = similarity_matrix(cluster_model.centers, vecs)
    assign = np.argmax(S, axis=0)
    selected: list[int] = []
    cluster_ids: list[int] = []
    for k in range(cluster_model.num_clusters):
        members = np.flatnonzero(assign == k)
        if members.size == 0:
            log.warning("cluster %d received no nouns; kept with an empty selection", k)
            continue
        order = members[np.argsort(-S[k, members], kind="stable")]
        keep = order[:top_k]
        selected.extend(int(i) for i in keep)
        cluster_ids.extend([k] * len(keep))
    bank_vecs = normalize(vecs[selected])
    return NounBank(
        [nouns[i] for i in selected],
        bank_vecs,
        cluster_ids,
        cluster_model.num_clusters,
        learnable=learnable,
        similarity=[S[k, i] for k, i in zip(cluster_ids, selected)],
        centers=cluster_model.centers,
    )


def sample_seed(seed: int, sample_id: str) -> int:
    digest = hashlib.sha256(f"{seed}|{sample_id}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def select_relaxed_for_sample(
    bank: NounBank,
    image_vec: np.ndarray,
    cluster_model: ClusterModel,
    mode: str = "nearest-in-cluster",
    seed: int = 0,
) -> int:
    """Index of the bank entry paired with one image embedding."""
    idx = select_relaxed_batch(bank, np.atleast_2d(image_vec), cluster_model.predict(image_vec), mode, [seed])
    return int(idx[0])


def select_relaxed_batch(
    bank: NounBank,
    image_vecs,
    image_clusters: np.ndarray,
    mode: str = "nearest-in-cluster",
    seeds: Sequence[int] | None = None,
) -> np.ndarray:
    """Vectorised selection for a batch of images with known clusters.

    ``nearest-in-cluster`` maximises ``<image, current_vec>`` over the image
    cluster's entries; ``random-in-cluster`` draws uniformly with each sample's
    own seed.  Images whose cluster has no entries fall back to the global
    nearest entry.
    """
    if len(bank) == 0:
        raise DegenerateInputError("noun bank is empty")
    if mode not in SELECT_MODES:
        raise InputError(f"unknown selection mode {mode!r}")
    clusters = np.asarray(image_clusters, dtype=np.int64)
    in_cluster = bank.cluster_ids[None, :] == clusters[:, None]  # (B, J)
    has_entries = in_cluster.any(axis=1)
    V = torch.as_tensor(np.asarray(image_vecs), dtype=torch.float32) if not torch.is_tensor(image_vecs) else image_vecs
    with torch.no_grad():
        scores = (V.to(torch.float32) @ bank.current.detach().T).numpy().astype(np.float64)
    if mode == "nearest-in-cluster":
        masked = np.where(in_cluster | ~has_entries[:, None], scores, -np.inf)
        return np.argmax(masked, axis=1)
    if seeds is None or len(seeds) != len(clusters):
        raise InputError("random-in-cluster needs one seed per sample")
    out = np.empty(len(clusters), dtype=np.int64)
    for b, s in enumerate(seeds):
        if has_entries[b]:
            out[b] = int(np.random.default_rng(s).choice(np.flatnonzero(in_cluster[b])))
        else:
            out[b] = int(np.argmax(scores[b]))
    return out


def build_bank(
    candidates: NounCandidateSet | Sequence[str],
    templates: PromptTemplateSet,
    backend: EncoderBackend,
    image_vectors: np.ndarray,
    num_clusters: int,
    top_k: int = 5,
    seed: int = 0,
    max_iter: int = 100,
    tol: float = 1e-6,
    learnable: bool = True,
) -> tuple[NounBank, ClusterModel]:
    """Embed nouns, cluster the image embeddings, filter, and return the bank."""
    nouns, vecs = embed_nouns(candidates, templates, backend)
    model = kmeans(image_vectors, num_clusters, seed=seed, max_iter=max_iter, tol=tol)
    bank = assign_and_filter(model, nouns, vecs, top_k=top_k, learnable=learnable)
    log.info("noun bank: %d of %d candidates kept over %d clusters", len(bank), len(nouns), num_clusters)
    return bank, model
