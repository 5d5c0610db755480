"""Text/image encoders producing unit-norm embeddings, plus a persistent cache.

Two backends share one interface:

* :class:`SemanticMockEncoder` -- deterministic stand-in for a CLIP-style
  model.  Every class owns an anchor direction; registered nouns sit in a
  controllable neighbourhood of their class anchor, unregistered strings map
  to hash-seeded random directions.
* :class:`PretrainedVLMEncoder` -- thin adapter over a Hugging Face CLIP
  checkpoint.  Optional; it is never used as a silent fallback.

Hash-seeded vectors
-------------------
``hash_unit(anchor_seed, domain, text, dim)`` seeds ``numpy.random.default_rng``
with the first 8 bytes (little endian) of
``sha256(f"{anchor_seed}|{domain}|{text}")``, draws ``dim`` standard normals and
normalizes them.  Unregistered prompts use ``domain="text"``.
"""
from __future__ import annotations

import hashlib
import json
import logging
import re
import threading
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from filelock import FileLock

from . import records
from .errors import BackendError, CacheIntegrityError, ConfigError, DegenerateInputError, InputError

log = logging.getLogger(__name__)

ANCHOR_MAX_OVERLAP = 0.2


def normalize(v) -> np.ndarray:
    """Return ``v / ||v||_2`` as float32.  Raises on a zero or non-finite vector."""
    arr = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InputError("vector has non-finite entries")
    norm = np.sqrt(np.sum(arr * arr, axis=-1, keepdims=True))
    if np.any(norm == 0):
        raise DegenerateInputError("cannot normalize a zero vector")
    return (arr / norm).astype(np.float32)


def hash_seed(anchor_seed: int, domain: str, text: str) -> int:
    digest = hashlib.sha256(f"{anchor_seed}|{domain}|{text}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def hash_gauss(anchor_seed: int, domain: str, text: str, dim: int) -> np.ndarray:
    rng = np.random.default_rng(hash_seed(anchor_seed, domain, text))
    return rng.standard_normal(dim)


def hash_unit(anchor_seed: int, domain: str, text: str, dim: int) -> np.ndarray:
    g = hash_gauss(anchor_seed, domain, text, dim)
    return g / np.linalg.norm(g)


class EncoderBackend(ABC):
    """Common encoder interface.  Implementations are read-only after construction."""

    kind: str
    d_txt: int
    d_img: int

    @property
    @abstractmethod
    def identity(self) -> str:
        """Stable id used as the cache namespace."""

    @abstractmethod
    def encode_text(self, prompt: str) -> np.ndarray: ...

    @abstractmethod
    def encode_image(self, image_key: str, image) -> np.ndarray: ...

    def encode_texts(self, prompts: Iterable[str]) -> np.ndarray:
        return np.stack([self.encode_text(p) for p in prompts])

    def encode_images(self, keys: Sequence[str], images) -> np.ndarray:
        return np.stack([self.encode_image(k, im) for k, im in zip(keys, images)])

    def describe(self) -> dict:
        return {"kind": self.kind, "d_txt": self.d_txt, "d_img": self.d_img, "identity": self.identity}


@dataclass(frozen=True)
class SemanticMockSpec:
    num_classes: int
    anchor_seed: int = 0
    synonym_noise: float = 0.2
    distractor_noise: float = 0.3
    image_noise: float = 0.1
    # perturbation added when a noun is wrapped in a template; zero for bare nouns
    template_jitter: float = 0.05

    def __post_init__(self):
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if not 0 <= self.synonym_noise < 1:
            raise ConfigError("synonym_noise must lie in [0, 1)")
        if self.distractor_noise < 0 or self.image_noise < 0 or self.template_jitter < 0:
            raise ConfigError("noise scales must be non-negative")


# relation kinds understood by the mock vocabulary
NEIGHBOUR_RELATIONS = ("synonym", "hyponym", "sibling")
RELATIONS = ("class",) + NEIGHBOUR_RELATIONS + ("hypernym", "distractor")


def _build_anchors(num_classes: int, dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((dim, num_classes))
    if num_classes <= dim:
        q, r = np.linalg.qr(g)
        q = q * np.sign(np.diag(r))
        return q.T.copy()
    return g.T / np.linalg.norm(g.T, axis=1, keepdims=True)


def _project_rows(anchors: np.ndarray, dim: int) -> np.ndarray:
    out = anchors[:, :dim]
    return out / np.linalg.norm(out, axis=1, keepdims=True)


def _check_overlap(anchors: np.ndarray, what: str) -> None:
    gram = anchors @ anchors.T
    np.fill_diagonal(gram, 0.0)
    worst = float(np.max(np.abs(gram))) if len(anchors) > 1 else 0.0
    if worst > ANCHOR_MAX_OVERLAP:
        raise ConfigError(
            f"{what} anchors overlap too much (max |cos| = {worst:.3f} > {ANCHOR_MAX_OVERLAP}); "
            "increase the embedding dimension or reduce num_classes"
        )


class SemanticMockEncoder(EncoderBackend):
    """Deterministic semantic encoder for tests and desk-scale experiments.

    Parameters
    ----------
    spec:
        Noise scales and anchor seed.
    d_txt, d_img:
        Output dimensions.  Anchors are built in ``max(d_txt, d_img)`` dims and
        truncated (then renormalized) per modality.
    vocabulary:
        ``noun -> (relation, class indices)``.  Class indices are 0-based.
        Relation ``"class"`` maps the noun exactly onto its anchor.
    """

    kind = "semantic-mock"

    def __init__(
        self,
        spec: SemanticMockSpec,
        d_txt: int = 32,
        d_img: int | None = None,
        vocabulary: Mapping[str, tuple[str, Sequence[int]]] | None = None,
    ):
        d_img = d_txt if d_img is None else d_img
        if d_txt < 1 or d_img < 1:
            raise ConfigError("embedding dims must be positive")
        self.spec = spec
        self.d_txt = int(d_txt)
        self.d_img = int(d_img)
        base = _build_anchors(spec.num_classes, max(self.d_txt, self.d_img), spec.anchor_seed)
        self.text_anchors = _project_rows(base, self.d_txt)
        self.image_anchors = _project_rows(base, self.d_img)
        _check_overlap(self.text_anchors, "text")
        _check_overlap(self.image_anchors, "image")

        self.vocabulary: dict[str, tuple[str, tuple[int, ...]]] = {}
        for noun, (relation, classes) in (vocabulary or {}).items():
            self._register(noun, relation, classes)
        self._pattern = self._compile()
        self._noun_cache: dict[str, np.ndarray] = {}
        self._identity = self._make_identity()

    def _register(self, noun: str, relation: str, classes: Sequence[int]) -> None:
        noun = noun.strip().lower()
        if relation not in RELATIONS:
            raise ConfigError(f"unknown relation {relation!r} for noun {noun!r}")
        classes = tuple(sorted({int(c) for c in classes}))
        if any(c < 0 or c >= self.spec.num_classes for c in classes):
            raise ConfigError(f"noun {noun!r} references a class outside 0..{self.spec.num_classes - 1}")
        if relation != "distractor" and not classes:
            raise ConfigError(f"noun {noun!r} ({relation}) needs at least one class")
        prev = self.vocabulary.get(noun)
        if prev is not None and prev[0] == "class":
            return  # an exact class name keeps its anchor
        if relation == "hypernym" and prev is not None and prev[0] == "hypernym":
            classes = tuple(sorted(set(prev[1]) | set(classes)))
        self.vocabulary[noun] = (relation, classes)

    def _compile(self) -> re.Pattern | None:
        if not self.vocabulary:
            return None
        nouns = sorted(self.vocabulary, key=lambda n: (-len(n), n))
        alternation = "|".join(re.escape(n) for n in nouns)
        return re.compile(rf"(?<![\w-])(?:{alternation})(?![\w-])")

    def _make_identity(self) -> str:
        payload = json.dumps(
            {
                "spec": asdict(self.spec),
                "d_txt": self.d_txt,
                "d_img": self.d_img,
                "vocab": sorted((n, r, list(c)) for n, (r, c) in self.vocabulary.items()),
            },
            sort_keys=True,
        )
        return "semantic-mock-" + hashlib.sha256(payload.encode()).hexdigest()[:16]

    @property
    def identity(self) -> str:
        return self._identity

    # -- text -------------------------------------------------------------

    def noun_vector(self, noun: str) -> np.ndarray:
        """Base (template-free) embedding of a registered noun, float64."""
        noun = noun.strip().lower()
        hit = self._noun_cache.get(noun)
        if hit is not None:
            return hit
        relation, classes = self.vocabulary[noun]
        seed, d = self.spec.anchor_seed, self.d_txt
        A = self.text_anchors
        if relation == "class":
            vec = A[classes[0]].copy()
        elif relation == "distractor":
            r = hash_gauss(seed, "noun", noun, d)
            if self.spec.num_classes < d:
                r = r - A.T @ (A @ r)  # orthogonal to the class span
            r = r / np.linalg.norm(r)
            cls = classes[0] if classes else hash_seed(seed, "distractor-class", noun) % self.spec.num_classes
            vec = r + self.spec.distractor_noise * A[cls]
        else:
            centre = A[list(classes)].mean(axis=0)
            centre = centre / np.linalg.norm(centre)
            vec = centre + self.spec.synonym_noise * hash_unit(seed, "noun", noun, d)
        vec = vec / np.linalg.norm(vec)
        self._noun_cache[noun] = vec
        return vec

    def find_noun(self, prompt: str) -> re.Match | None:
        if self._pattern is None:
            return None
        return self._pattern.search(prompt.lower())

    def encode_text(self, prompt: str) -> np.ndarray:
        if not isinstance(prompt, str) or not prompt.strip():
            raise InputError("prompt must be a non-empty string")
        text = prompt.strip().lower()
        match = self.find_noun(text)
        if match is None:
            return normalize(hash_unit(self.spec.anchor_seed, "text", text, self.d_txt))
        base = self.noun_vector(match.group(0))
        context = text[: match.start()] + "{}" + text[match.end():]
        if context == "{}" or self.spec.template_jitter == 0:
            return normalize(base)
        jitter = hash_unit(self.spec.anchor_seed, "context", context, self.d_txt)
        return normalize(base + self.spec.template_jitter * jitter)

    # -- image ------------------------------------------------------------

    def encode_image(self, image_key: str, image) -> np.ndarray:
        """Embed one image.

        ``image`` is either a class index (the mock draws
        ``anchor + image_noise * g / sqrt(d_img)`` with ``g`` hash-seeded by
        ``image_key``) or a raw feature vector of length ``d_img``.
        """
        if isinstance(image, (int, np.integer)):
            c = int(image)
            if not 0 <= c < self.spec.num_classes:
                raise InputError(f"class index {c} out of range")
            vec = self.image_anchors[c].astype(np.float64)
            if self.spec.image_noise > 0:
                g = hash_gauss(self.spec.anchor_seed, "image", str(image_key), self.d_img)
                vec = vec + self.spec.image_noise * g / np.sqrt(self.d_img)
            return normalize(vec)
        arr = np.asarray(image, dtype=np.float64)
        if arr.shape != (self.d_img,):
            raise InputError(f"image feature must have shape ({self.d_img},), got {arr.shape}")
        return normalize(arr)

    def encode_images(self, keys: Sequence[str], images) -> np.ndarray:
        arr = np.asarray(images)
        if arr.ndim == 2:
            if arr.shape[1] != self.d_img:
                raise InputError(f"image features must have {self.d_img} columns, got {arr.shape[1]}")
            return normalize(arr)
        return super().encode_images(keys, images)


class PretrainedVLMEncoder(EncoderBackend):
    """Adapter over a Hugging Face CLIP checkpoint (optional dependency).

    Loading failures raise :class:`BackendError`; there is no fallback.
    """

    kind = "pretrained-vlm"

    def __init__(self, model_name: str = "openai/clip-vit-base-patch32", device: str = "cpu"):
        self.model_name = model_name
        try:
            import torch
            from transformers import CLIPModel, CLIPProcessor

            self._torch = torch
            self.model = CLIPModel.from_pretrained(model_name).to(device).eval()
            self.processor = CLIPProcessor.from_pretrained(model_name)
        except Exception as exc:  # noqa: BLE001 - any loader failure is a backend failure
            raise BackendError(f"cannot load pretrained VLM {model_name!r}: {exc}") from exc
        self.device = device
        self.d_txt = self.d_img = int(self.model.config.projection_dim)

    @property
    def identity(self) -> str:
        return "clip-" + re.sub(r"[^A-Za-z0-9_.-]", "_", self.model_name)

    def encode_text(self, prompt: str) -> np.ndarray:
        if not prompt or not prompt.strip():
            raise InputError("prompt must be a non-empty string")
        inputs = self.processor(text=[prompt], return_tensors="pt", padding=True).to(self.device)
        with self._torch.no_grad():
            feats = self.model.get_text_features(**inputs)
        return normalize(feats[0].cpu().numpy())

    def encode_image(self, image_key: str, image) -> np.ndarray:
        if isinstance(image, (int, np.integer)):
            raise InputError("pretrained backend needs pixels, not a class index")
        inputs = self.processor(images=image, return_tensors="pt").to(self.device)
        with self._torch.no_grad():
            feats = self.model.get_image_features(**inputs)
        return normalize(feats[0].cpu().numpy())


class EmbeddingCache:
    """On-disk vector cache: ``<root>/<backend-id>/manifest.json`` + ``vectors/<record>.f32``.

    Reads are lock-free; writes go through a per-namespace file lock.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self._manifests: dict[str, dict] = {}
        self._lock = threading.Lock()

    def _dir(self, backend_id: str) -> Path:
        return self.root / backend_id

    def _manifest(self, backend_id: str) -> dict:
        if backend_id not in self._manifests:
            path = self._dir(backend_id) / "manifest.json"
            self._manifests[backend_id] = records.load_json(path) if path.exists() else {}
        return self._manifests[backend_id]

    @staticmethod
    def record_id(key: str) -> str:
        return hashlib.sha256(key.encode("utf-8")).hexdigest()[:24]

    def get(self, backend_id: str, key: str) -> np.ndarray | None:
        entry = self._manifest(backend_id).get(key)
        if entry is None:
            return None
        vec = records.read_array(self._dir(backend_id) / "vectors", entry, key=key)
        if vec.shape != (entry["length"],):
            raise CacheIntegrityError(key, "length mismatch")
        return vec

    def put(self, backend_id: str, key: str, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float32).reshape(-1)
        directory = self._dir(backend_id)
        directory.mkdir(parents=True, exist_ok=True)
        with self._lock, FileLock(str(directory / ".lock")):
            entry = records.write_array(directory / "vectors", self.record_id(key), vec)
            entry["length"] = int(vec.shape[0])
            path = directory / "manifest.json"
            manifest = records.load_json(path) if path.exists() else {}
            manifest[key] = entry
            records.dump_json(path, manifest)
            self._manifests[backend_id] = manifest


def cache_get_or_encode(
    cache: EmbeddingCache | None,
    backend: EncoderBackend,
    key: str,
    encode_fn: Callable[[], np.ndarray],
) -> np.ndarray:
    """Return the cached vector for ``key`` or encode, persist and return it."""
    if cache is None:
        return np.asarray(encode_fn(), dtype=np.float32)
    vec = cache.get(backend.identity, key)
    if vec is None:
        vec = np.asarray(encode_fn(), dtype=np.float32)
        cache.put(backend.identity, key, vec)
    return vec


class CachedEncoder(EncoderBackend):
    """Wraps a backend so every text/image encode goes through an :class:`EmbeddingCache`."""

    def __init__(self, inner: EncoderBackend, cache: EmbeddingCache):
        self.inner = inner
        self.cache = cache
        self.kind = inner.kind
        self.d_txt = inner.d_txt
        self.d_img = inner.d_img

    @property
    def identity(self) -> str:
        return self.inner.identity

    def __getattr__(self, name):
        return getattr(self.inner, name)

    def encode_text(self, prompt: str) -> np.ndarray:
        return cache_get_or_encode(self.cache, self.inner, "text:" + prompt, lambda: self.inner.encode_text(prompt))

    def encode_image(self, image_key: str, image) -> np.ndarray:
        return cache_get_or_encode(
            self.cache, self.inner, "image:" + str(image_key), lambda: self.inner.encode_image(image_key, image)
        )

    def encode_images(self, keys: Sequence[str], images) -> np.ndarray:
        # raw feature rows are only normalized, so caching them buys nothing
        if np.asarray(images).ndim == 2:
            return self.inner.encode_images(keys, images)
        return super().encode_images(keys, images)
