"""Classifier heads, teachers, student, and per-sample text resolution."""
from __future__ import annotations

import hashlib
import logging
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import records
from .embeddings import EncoderBackend
from .errors import ConfigError, InputError
from .lexicon import ClassCatalog, PromptTemplateSet, shuffle_permutation
from .relaxation import ClusterModel, NounBank, embed_nouns, sample_seed, select_relaxed_batch

log = logging.getLogger(__name__)

SOURCES = ("gt", "wn", "noise")
GT, WN, NOISE = 0, 1, 2
MODALITIES = ("image+text", "text")
# marker attribute set on every tensor that carries text-derived values
TEXT_MARK = "_xmodal_text_derived"


def mark_text(t: torch.Tensor) -> torch.Tensor:
    setattr(t, TEXT_MARK, True)
    return t


def is_text_derived(t) -> bool:
    return bool(getattr(t, TEXT_MARK, False))


class ClassifierHead(nn.Module):
    """Feed-forward stack ending in ``output_dim`` logits.

    Weights are drawn from ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))`` with an
    explicit generator so construction never touches the global RNG.
    """

    def __init__(
        self,
        input_dim: int,
        output_dim: int,
        hidden: Sequence[int] = (64,),
        generator: torch.Generator | None = None,
        zero_last: bool = False,
    ):
        super().__init__()
        self.input_dim = int(input_dim)
        self.output_dim = int(output_dim)
        self.hidden = tuple(int(h) for h in hidden)
        dims = (self.input_dim,) + self.hidden + (self.output_dim,)
        layers: list[nn.Module] = []
        # nn.Linear's default init draws from the global RNG; those values are overwritten below
        with torch.random.fork_rng(devices=[]):
            for i in range(len(dims) - 1):
                layers.append(nn.Linear(dims[i], dims[i + 1]))
                if i < len(dims) - 2:
                    layers.append(nn.ReLU())
        self.net = nn.Sequential(*layers)
        with torch.no_grad():
            for lin in self.linears():
                bound = 1.0 / np.sqrt(lin.in_features)
                nn.init.uniform_(lin.weight, -bound, bound, generator=generator)
                nn.init.uniform_(lin.bias, -bound, bound, generator=generator)
            if zero_last:
                self.linears()[-1].weight.zero_()
                self.linears()[-1].bias.zero_()

    def linears(self) -> list[nn.Linear]:
        return [m for m in self.net if isinstance(m, nn.Linear)]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.input_dim:
            raise InputError(f"expected input dim {self.input_dim}, got {x.shape[-1]}")
        return self.net(x)

    def arch(self) -> dict:
        return {"input_dim": self.input_dim, "output_dim": self.output_dim, "hidden": list(self.hidden)}


@dataclass(frozen=True)
class Augmentation:
    """Feature-space augmentation: Gaussian jitter plus optional feature dropout.

    ``strength`` is the jitter norm relative to a unit vector.
    """

    strength: float = 0.0
    dropout: float = 0.0

    def __call__(self, x: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
        if self.strength > 0:
            x = x + self.strength / np.sqrt(x.shape[-1]) * torch.randn(x.shape, generator=generator)
        if self.dropout > 0:
            keep = torch.rand(x.shape, generator=generator) >= self.dropout
            x = x * keep / (1 - self.dropout)
        return x


def augmentation_policy(name: str, strength: float) -> Augmentation:
    if name == "strong":
        return Augmentation(strength=strength, dropout=0.1)
    if name == "weak":
        return Augmentation(strength=strength, dropout=0.0)
    raise ConfigError(f"unknown augmentation policy {name!r}")


class UnimodalTeacher(nn.Module):
    """Image-only ensemble member; augmentation is applied by the training loop only."""

    def __init__(self, head: ClassifierHead, policy: str = "strong", aug_strength: float = 0.0):
        super().__init__()
        self.head = head
        self.policy = policy
        self.augment = augmentation_policy(policy, aug_strength)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(x)


def forward_unimodal(teacher: UnimodalTeacher, image: torch.Tensor) -> torch.Tensor:
    teacher.eval()
    with torch.no_grad():
        return teacher(image)


def ensemble_logits(members: Sequence[torch.Tensor]) -> torch.Tensor:
    """Element-wise mean of member logits."""
    if len(members) == 0:
        raise InputError("ensemble needs at least one member")
    shape = members[0].shape
    for m in members[1:]:
        if m.shape != shape:
            raise InputError(f"member logits shape mismatch {tuple(m.shape)} vs {tuple(shape)}")
    return torch.stack(list(members)).mean(dim=0)


def _check_unit(v: torch.Tensor, what: str) -> torch.Tensor:
    norms = v.norm(dim=-1, keepdim=True)
    dev = (norms - 1).abs().max().item() if v.numel() else 0.0
    if dev <= 1e-5:
        return v
    if dev <= 1e-3:
        warnings.warn(f"{what} embedding not unit-norm (max deviation {dev:.2e}); renormalized", stacklevel=3)
        return v / norms
    raise InputError(f"{what} embedding not unit-norm (max deviation {dev:.2e})")


class MultimodalTeacher(nn.Module):
    """Head over ``[image_embedding || text_embedding]`` (or the text part alone).

    The noun bank is held by reference; its ``current`` parameter is optimised
    alongside the head when the bank is learnable.
    """

    def __init__(self, head: ClassifierHead, d_img: int, d_txt: int, modality: str = "image+text"):
        super().__init__()
        if modality not in MODALITIES:
            raise ConfigError(f"unknown teacher modality {modality!r}")
        expected = d_txt + (d_img if modality == "image+text" else 0)
        if head.input_dim != expected:
            raise ConfigError(f"head input {head.input_dim} != expected {expected} for modality {modality}")
        self.head = head
        self.d_img = int(d_img)
        self.d_txt = int(d_txt)
        self.modality = modality

    def concat(self, image_vec: torch.Tensor, text_vec: torch.Tensor) -> torch.Tensor:
        if image_vec.shape[-1] != self.d_img:
            raise InputError(f"image embedding has dim {image_vec.shape[-1]}, expected {self.d_img}")
        if text_vec.shape[-1] != self.d_txt:
            raise InputError(f"text embedding has dim {text_vec.shape[-1]}, expected {self.d_txt}")
        image_vec = _check_unit(image_vec, "image")
        text_vec = _check_unit(text_vec, "text")
        if self.modality == "text":
            return text_vec
        return torch.cat([image_vec, text_vec], dim=-1)

    def forward(self, image_vec: torch.Tensor, text_vec: torch.Tensor) -> torch.Tensor:
        return self.head(self.concat(image_vec, text_vec))


def forward_multimodal(teacher: MultimodalTeacher, image_vec: torch.Tensor, text_vec: torch.Tensor) -> torch.Tensor:
    return teacher(image_vec, text_vec)


class Student(nn.Module):
    """Image-only classifier.  Refuses any tensor flagged as text-derived."""

    def __init__(self, head: ClassifierHead, aug_strength: float = 0.0):
        super().__init__()
        self.head = head
        self.augment = augmentation_policy("strong", aug_strength)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        if is_text_derived(image):
            raise AssertionError("text-derived tensor reached the student forward pass")
        return self.head(image)


@dataclass(frozen=True)
class TextMixPolicy:
    """Per-sample choice between ground-truth, relaxed and shuffled class-name text.

    Samples are ordered by a hash of ``(seed, sample_id)``; the first
    ``round(p_gt*N)`` get gt text, the next block relaxed text, the rest noise.
    Tags therefore never change between epochs, and for a fixed seed the gt
    block shrinks monotonically as ``p_gt`` decreases.
    """

    p_gt: float = 0.0
    p_wn: float = 1.0
    p_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        ps = (self.p_gt, self.p_wn, self.p_noise)
        if any(p < 0 for p in ps) or abs(sum(ps) - 1) > 1e-9:
            raise ConfigError(f"mix proportions must be non-negative and sum to 1, got {ps}")

    @property
    def name(self) -> str:
        parts = [f"{round(100 * self.p_gt)}%gt"]
        if self.p_wn:
            parts.append(f"{round(100 * self.p_wn)}%wn")
        if self.p_noise:
            parts.append(f"{round(100 * self.p_noise)}%noise")
        return " ".join(parts)

    def assign(self, sample_ids: Sequence[str]) -> np.ndarray:
        n = len(sample_ids)
        keys = [hashlib.sha256(f"mix|{self.seed}|{sid}".encode()).digest() for sid in sample_ids]
        order = sorted(range(n), key=lambda i: (keys[i], i))
        n_gt = int(round(self.p_gt * n))
        n_gt_wn = int(round((self.p_gt + self.p_wn) * n))
        tags = np.full(n, NOISE, dtype=np.int64)
        for rank, i in enumerate(order):
            if rank < n_gt:
                tags[i] = GT
            elif rank < n_gt_wn:
                tags[i] = WN
        return tags

    def to_dict(self) -> dict:
        return asdict(self)


class TextResolver:
    """Builds the teacher's text input for a batch of samples.

    * gt -> template-averaged embedding of the annotated class name
    * wn -> bank ``current`` vector chosen from the image (differentiable)
    * noise -> class-name embedding of a per-sample shuffled label; each sample
      draws its own permutation seeded by ``(noise_seed, sample_id)``
    """

    def __init__(
        self,
        catalog: ClassCatalog,
        templates: PromptTemplateSet,
        backend: EncoderBackend,
        bank: NounBank | None,
        cluster_model: ClusterModel | None,
        noise_seed: int = 0,
        select_mode: str = "nearest-in-cluster",
        select_seed: int = 0,
    ):
        self.catalog = catalog
        self.bank = bank
        self.cluster_model = cluster_model
        self.noise_seed = noise_seed
        self.select_mode = select_mode
        self.select_seed = select_seed
        _, vecs = embed_nouns(list(catalog.names), templates, backend)
        self.class_text = torch.from_numpy(vecs)

    def noise_classes(self, sample_ids: Sequence[str], labels: np.ndarray) -> np.ndarray:
        C = self.catalog.num_classes
        return np.array(
            [shuffle_permutation(C, sample_seed(self.noise_seed, sid))[int(y)] for sid, y in zip(sample_ids, labels)],
            dtype=np.int64,
        )

    def image_clusters(self, image_vecs: np.ndarray) -> np.ndarray:
        if self.cluster_model is None:
            return np.zeros(len(image_vecs), dtype=np.int64)
        return self.cluster_model.predict(image_vecs)

    def select_seeds(self, sample_ids: Sequence[str]) -> list[int]:
        return [sample_seed(self.select_seed, f"select|{sid}") for sid in sample_ids]

    def resolve(
        self,
        sources: np.ndarray,
        labels: np.ndarray,
        noise_cls: np.ndarray,
        image_vecs: torch.Tensor,
        image_clusters: np.ndarray,
        seeds: Sequence[int] | None = None,
    ) -> tuple[torch.Tensor, np.ndarray]:
        """Return the text batch and the bank index per row (``-1`` where not relaxed)."""
        sources = np.asarray(sources)
        eff = np.where(sources == NOISE, noise_cls, labels)
        text = self.class_text[torch.from_numpy(np.asarray(eff, dtype=np.int64))]
        bank_idx = np.full(len(sources), -1, dtype=np.int64)
        wn = sources == WN
        if wn.any():
            if self.bank is None:
                raise ConfigError("relaxed text requested but no noun bank is available")
            picked = select_relaxed_batch(self.bank, image_vecs, image_clusters, self.select_mode, seeds)
            bank_idx[wn] = picked[wn]
            rows = self.bank.current[torch.from_numpy(np.where(wn, picked, 0))]
            text = torch.where(torch.from_numpy(wn)[:, None], rows, text)
        return mark_text(text), bank_idx


def resolve_text_input(
    policy: TextMixPolicy,
    sample_id: str,
    label: int,
    image_vec: np.ndarray,
    resolver: TextResolver,
    split_ids: Sequence[str] | None = None,
) -> tuple[torch.Tensor, str]:
    """Text embedding and source tag for one sample (0-based ``label``).

    The source tag is assigned over ``split_ids`` (the sample's whole split) so
    proportions stay stratified; without it the sample is its own split.
    """
    ids = list(split_ids) if split_ids is not None else [sample_id]
    source = int(policy.assign(ids)[ids.index(sample_id)])
    noise = resolver.noise_classes([sample_id], np.array([label]))
    vec = torch.as_tensor(np.atleast_2d(image_vec), dtype=torch.float32)
    text, _ = resolver.resolve(
        np.array([source]),
        np.array([label]),
        noise,
        vec,
        resolver.image_clusters(np.atleast_2d(image_vec)),
        resolver.select_seeds([sample_id]),
    )
    return mark_text(text[0]), SOURCES[source]


# --- checkpoints ------------------------------------------------------------


def save_checkpoint(module: nn.Module, directory: str | Path, meta: dict) -> Path:
    arrays = {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}
    return records.save_arrays(Path(directory), arrays, meta)


def load_state(directory: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    arrays, meta = records.load_arrays(Path(directory))
    return {k: torch.from_numpy(v) for k, v in arrays.items()}, meta


def parameter_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for k, v in sorted(module.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().numpy().tobytes())
    return h.hexdigest()
