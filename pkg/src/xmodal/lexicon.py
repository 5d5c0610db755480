"""Class catalogs, candidate nouns, prompt templates and class-name shuffling."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, InputError, LexiconError

log = logging.getLogger(__name__)

DEFAULT_TEMPLATES = ("a photo of a {}",)
EXPANDED_TEMPLATES = (
    "a photo of a {}",
    "a blurry photo of a {}",
    "a close-up photo of a {}",
    "a photo of the small {}",
    "a photo of the large {}",
)
# harvest order per class; earlier relations win when per_class_limit truncates
DEFAULT_RELATIONS = ("synonym", "hypernym", "sibling", "hyponym")
GLOBAL_POOL = "*"


@dataclass(frozen=True)
class ClassCatalog:
    """Ordered label space; ids are contiguous from 1."""

    names: tuple[str, ...]

    def __post_init__(self):
        names = tuple(n.strip().lower() for n in self.names)
        if not names:
            raise ConfigError("catalog is empty")
        if any(not n for n in names):
            raise ConfigError("catalog contains an empty class name")
        if len(set(names)) != len(names):
            raise ConfigError("class names must be unique")
        object.__setattr__(self, "names", names)

    @property
    def num_classes(self) -> int:
        return len(self.names)

    @property
    def classes(self) -> list[tuple[int, str]]:
        return [(i + 1, n) for i, n in enumerate(self.names)]

    def name(self, class_id: int) -> str:
        return self.names[class_id - 1]

    def index(self, name: str) -> int:
        """0-based index of ``name``."""
        return self.names.index(name.strip().lower())

    @classmethod
    def load(cls, path: str | Path) -> "ClassCatalog":
        """One class name per line; blank lines and ``#`` comments ignored."""
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(tuple(ln.strip() for ln in lines if ln.strip() and not ln.startswith("#")))


@dataclass(frozen=True)
class PromptTemplateSet:
    templates: tuple[str, ...] = DEFAULT_TEMPLATES

    def __post_init__(self):
        if not self.templates:
            raise ConfigError("at least one prompt template is required")
        for t in self.templates:
            if t.count("{}") != 1:
                raise ConfigError(f"template {t!r} must contain exactly one '{{}}' slot")
        object.__setattr__(self, "templates", tuple(self.templates))

    def __len__(self) -> int:
        return len(self.templates)


def apply_templates(templates: PromptTemplateSet, noun: str) -> list[str]:
    if not noun or not noun.strip():
        raise InputError("noun must be non-empty")
    return [t.format(noun.strip()) for t in templates.templates]


@dataclass(frozen=True)
class NounCandidateSet:
    nouns: tuple[str, ...]
    source: str
    skipped: tuple[str, ...] = ()
    # noun -> [(class_name or "*", relation), ...]
    provenance: Mapping[str, tuple[tuple[str, str], ...]] = field(default_factory=dict)

    def __post_init__(self):
        if len(set(self.nouns)) != len(self.nouns):
            raise LexiconError("candidate nouns must be unique")
        if any(not n or n != n.lower() for n in self.nouns):
            raise LexiconError("candidate nouns must be non-empty and lowercase")

    def __len__(self) -> int:
        return len(self.nouns)


class SnapshotLexicon:
    """Offline lexicon read from ``class_name<TAB>relation<TAB>noun`` lines.

    Class ``*`` rows form a global noun pool not tied to any class.
    """

    def __init__(self, rows: Iterable[tuple[str, str, str]], source: str = "offline-snapshot"):
        self.source = source
        self.by_class: dict[str, list[tuple[str, str]]] = {}
        self.pool: list[str] = []
        for cls, relation, noun in rows:
            cls, relation, noun = cls.strip().lower(), relation.strip().lower(), noun.strip().lower()
            if not noun:
                continue
            if cls == GLOBAL_POOL:
                if noun not in self.pool:
                    self.pool.append(noun)
            else:
                self.by_class.setdefault(cls, []).append((relation, noun))

    @classmethod
    def load(cls, path: str | Path, source: str = "offline-snapshot") -> "SnapshotLexicon":
        return cls.parse(Path(path).read_text(encoding="utf-8"), source=source)

    @classmethod
    def parse(cls, text: str, source: str = "offline-snapshot") -> "SnapshotLexicon":
        rows = []
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise LexiconError(f"snapshot line {lineno}: expected 3 tab-separated fields, got {len(parts)}")
            rows.append(tuple(parts))
        return cls(rows, source=source)

    def related(self, class_name: str) -> list[tuple[str, str]] | None:
        return self.by_class.get(class_name)

    def global_pool(self) -> list[str]:
        return list(self.pool)


def mock_lexicon() -> SnapshotLexicon:
    """The lexicon shipped with the package (real-word classes, WordNet-like relations)."""
    text = resources.files("xmodal").joinpath("data/mock_lexicon.tsv").read_text(encoding="utf-8")
    return SnapshotLexicon.parse(text, source="mock-lexicon")


def mock_class_names(lexicon: SnapshotLexicon | None = None) -> list[str]:
    return list((lexicon or mock_lexicon()).by_class)


class WordNetLexicon:
    """Live WordNet access through ``nltk``.

    ``wn`` may be injected (anything with ``synsets(name, pos)``); by default
    ``nltk.corpus.wordnet`` is imported lazily.
    """

    source = "wordnet-live"

    def __init__(self, wn=None):
        if wn is None:
            try:
                from nltk.corpus import wordnet as wn  # type: ignore[no-redef]

                wn.ensure_loaded()
            except Exception as exc:  # noqa: BLE001
                raise LexiconError(f"WordNet unavailable: {exc}") from exc
        self.wn = wn

    @staticmethod
    def _lemmas(synset) -> list[str]:
        return [l.replace("_", " ").lower() for l in synset.lemma_names()]

    def related(self, class_name: str) -> list[tuple[str, str]] | None:
        synsets = self.wn.synsets(class_name.replace(" ", "_"), pos="n")
        fallback = False
        if not synsets and " " in class_name:
            # nearest sense: head word of a multi-word name
            synsets = self.wn.synsets(class_name.split()[-1], pos="n")
            fallback = True
        if not synsets:
            return None
        sense = synsets[0]
        out: list[tuple[str, str]] = []
        if not fallback:
            out += [("synonym", n) for n in self._lemmas(sense)]
        for hyper in sense.hypernyms():
            out += [("hypernym", n) for n in self._lemmas(hyper)]
            for sib in hyper.hyponyms():
                if sib != sense:
                    out += [("sibling", n) for n in self._lemmas(sib)]
        return out

    def global_pool(self) -> list[str]:
        return []


def harvest_candidates(
    catalog: ClassCatalog,
    lexicon,
    per_class_limit: int = 20,
    relations: Sequence[str] = DEFAULT_RELATIONS,
    include_global_pool: bool = True,
) -> NounCandidateSet:
    """Collect related nouns for every class, never including any class name.

    Classes missing from the lexicon are skipped with a warning and listed in
    ``skipped``.
    """
    if per_class_limit < 1:
        raise LexiconError("no candidates: per_class_limit must be >= 1")
    class_names = set(catalog.names)
    rank = {r: i for i, r in enumerate(relations)}
    nouns: list[str] = []
    provenance: dict[str, list[tuple[str, str]]] = {}
    skipped: list[str] = []
    for name in catalog.names:
        related = lexicon.related(name)
        if related is None:
            log.warning("class %r not found in lexicon %s; skipped", name, lexicon.source)
            skipped.append(name)
            continue
        ordered = sorted(
            (pair for pair in related if pair[0] in rank),
            key=lambda pair: rank[pair[0]],
        )  # stable: file order within a relation
        taken: list[str] = []
        for relation, noun in ordered:
            if len(taken) >= per_class_limit:
                break
            if noun in class_names or noun in taken:
                continue
            taken.append(noun)
            provenance.setdefault(noun, []).append((name, relation))
        for noun in taken:
            if noun not in nouns:
                nouns.append(noun)
    if include_global_pool:
        for noun in lexicon.global_pool():
            if noun in class_names:
                continue
            provenance.setdefault(noun, []).append((GLOBAL_POOL, "distractor"))
            if noun not in nouns:
                nouns.append(noun)
    if not nouns:
        raise LexiconError("no candidates harvested")
    return NounCandidateSet(
        nouns=tuple(nouns),
        source=lexicon.source,
        skipped=tuple(skipped),
        provenance={k: tuple(v) for k, v in provenance.items()},
    )


def mock_vocabulary(catalog: ClassCatalog, lexicon: SnapshotLexicon) -> dict[str, tuple[str, list[int]]]:
    """Registry for :class:`~xmodal.embeddings.SemanticMockEncoder` built from a lexicon.

    Class names map to their anchors; related nouns to the neighbourhood of
    every catalog class that lists them.
    """
    vocab: dict[str, tuple[str, list[int]]] = {n: ("class", [i]) for i, n in enumerate(catalog.names)}
    for i, name in enumerate(catalog.names):
        for relation, noun in lexicon.related(name) or []:
            if noun in catalog.names:
                continue
            if noun in vocab:
                rel, classes = vocab[noun]
                if rel == "hypernym" and relation == "hypernym" and i not in classes:
                    classes.append(i)
                continue
            vocab[noun] = (relation, [i])
    for noun in lexicon.global_pool():
        vocab.setdefault(noun, ("distractor", []))
    return vocab


def shuffle_permutation(num_classes: int, seed: int) -> np.ndarray:
    """Uniform random permutation of ``range(num_classes)``; identity allowed."""
    if num_classes < 2:
        raise LexiconError("shuffling needs at least 2 classes")
    return np.random.default_rng(seed).permutation(num_classes)


def shuffle_class_names(catalog: ClassCatalog, seed: int) -> dict[int, str]:
    """Map every class id to a shuffled class name (seeded, uniform over permutations)."""
    perm = shuffle_permutation(catalog.num_classes, seed)
    mapping = {cid: catalog.names[perm[cid - 1]] for cid in range(1, catalog.num_classes + 1)}
    fixed = int(np.sum(perm == np.arange(catalog.num_classes)))
    log.debug("class-name shuffle seed=%d perm=%s fixed_points=%d", seed, perm.tolist(), fixed)
    return mapping


def generic_lexicon(num_classes: int, synonyms: int = 3, siblings: int = 2) -> SnapshotLexicon:
    """Lexicon over placeholder classes ``c1..cC`` for catalogs larger than the shipped one.

    Neighbouring classes share a hypernym so the bank still has cross-class nouns.
    """
    rows = []
    for k in range(1, num_classes + 1):
        name = f"c{k}"
        rows += [(name, "synonym", f"{name} variant {j}") for j in range(1, synonyms + 1)]
        rows += [(name, "sibling", f"{name} cousin {j}") for j in range(1, siblings + 1)]
        rows.append((name, "hypernym", f"group {(k - 1) // 3 + 1}"))
    rows += [(GLOBAL_POOL, "distractor", f"filler {j}") for j in range(1, 6)]
    return SnapshotLexicon(rows, source="generic-lexicon")
