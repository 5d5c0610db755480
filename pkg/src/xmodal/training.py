"""Three-phase pipeline (image teachers -> multimodal teacher -> student) and sweeps."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import records
from .config import TrainConfig, seed_for
from .datasets import DataSpec, Split, SyntheticDataset, generate_dataset
from .embeddings import CachedEncoder, EmbeddingCache, EncoderBackend, PretrainedVLMEncoder, SemanticMockEncoder, SemanticMockSpec
from .errors import ConfigError, TrainingError
from .lexicon import (
    ClassCatalog,
    NounCandidateSet,
    PromptTemplateSet,
    SnapshotLexicon,
    WordNetLexicon,
    generic_lexicon,
    harvest_candidates,
    mock_lexicon,
    mock_vocabulary,
)
from .losses import as_onehot, average_logits, cross_entropy, student_total, teacher_total
from .models import (
    WN,
    ClassifierHead,
    MultimodalTeacher,
    Student,
    TextMixPolicy,
    TextResolver,
    UnimodalTeacher,
    ensemble_logits,
    load_state,
    parameter_checksum,
    save_checkpoint,
)
from .relaxation import ClusterModel, NounBank, build_bank

log = logging.getLogger(__name__)


@dataclass
class RunRecord:
    """Metrics of one training phase.  ``wall_clock`` is excluded from :meth:`metrics`."""

    phase: str
    config: dict
    history: list[dict] = field(default_factory=list)
    final: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    wall_clock: float = 0.0

    def metrics(self) -> dict:
        return {"phase": self.phase, "history": self.history, "final": self.final, "extra": self.extra}

    def metrics_bytes(self) -> bytes:
        return json.dumps(self.metrics(), sort_keys=True).encode()

    def to_dict(self) -> dict:
        return {**self.metrics(), "config": self.config, "wall_clock": self.wall_clock}

    def save(self, path: str | Path) -> None:
        records.dump_json(Path(path), self.to_dict())


@dataclass
class Context:
    cfg: TrainConfig
    catalog: ClassCatalog
    lexicon: object
    backend: EncoderBackend
    templates: PromptTemplateSet
    dataset: SyntheticDataset
    img_train: np.ndarray
    img_val: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.catalog.num_classes

    def image_vecs(self, split: Split) -> np.ndarray:
        return self.img_train if split is self.dataset.train else self.img_val


def make_lexicon(cfg: TrainConfig):
    src = cfg.lexicon.source
    if src == "mock":
        lex = mock_lexicon()
        if cfg.lexicon.classes is None and cfg.dataset.num_classes > len(lex.by_class):
            return generic_lexicon(cfg.dataset.num_classes)
        return lex
    if src == "snapshot":
        return SnapshotLexicon.load(cfg.lexicon.snapshot)
    return WordNetLexicon()


def make_catalog(cfg: TrainConfig, lexicon) -> ClassCatalog:
    if cfg.lexicon.classes is not None:
        return ClassCatalog(tuple(cfg.lexicon.classes))
    if not isinstance(lexicon, SnapshotLexicon):
        raise ConfigError("lexicon.classes is required for this lexicon source")
    names = list(lexicon.by_class)
    if len(names) < cfg.dataset.num_classes:
        raise ConfigError(f"lexicon lists {len(names)} classes, dataset needs {cfg.dataset.num_classes}")
    return ClassCatalog(tuple(names[: cfg.dataset.num_classes]))


def make_backend(cfg: TrainConfig, catalog: ClassCatalog, lexicon) -> EncoderBackend:
    b = cfg.backend
    if b.kind == "vlm":
        backend: EncoderBackend = PretrainedVLMEncoder(b.model_name)
    else:
        if isinstance(lexicon, SnapshotLexicon):
            vocab = mock_vocabulary(catalog, lexicon)
        else:
            cands = harvest_candidates(catalog, lexicon, cfg.lexicon.per_class_limit)
            vocab = {n: ("class", [i]) for i, n in enumerate(catalog.names)}
            for noun, prov in cands.provenance.items():
                cls, rel = prov[0]
                vocab.setdefault(noun, (rel, [] if cls == "*" else [catalog.index(cls)]))
        spec = SemanticMockSpec(
            num_classes=catalog.num_classes,
            anchor_seed=b.anchor_seed,
            synonym_noise=b.synonym_noise,
            distractor_noise=b.distractor_noise,
            image_noise=b.image_noise,
            template_jitter=b.template_jitter,
        )
        backend = SemanticMockEncoder(spec, d_txt=b.d_txt or cfg.dataset.dim, d_img=cfg.dataset.dim, vocabulary=vocab)
    if b.cache_dir:
        backend = CachedEncoder(backend, EmbeddingCache(b.cache_dir))
    return backend


def data_spec(cfg: TrainConfig) -> DataSpec:
    d = cfg.dataset
    return DataSpec(
        num_classes=d.num_classes,
        train_per_class=d.train_per_class,
        val_per_class=d.val_per_class,
        image_noise=d.image_noise,
        label_noise=d.label_noise,
        imbalance_factor=d.imbalance_factor,
        seed=d.seed,
    )


def make_dataset(cfg: TrainConfig, backend: EncoderBackend) -> SyntheticDataset:
    if cfg.dataset.path:
        return SyntheticDataset.load(cfg.dataset.path)
    anchors = getattr(backend, "image_anchors", None)
    if anchors is None:
        raise ConfigError("synthetic datasets need the mock backend's image anchors")
    return generate_dataset(data_spec(cfg), anchors)


def prepare(cfg: TrainConfig, dataset: SyntheticDataset | None = None) -> Context:
    lexicon = make_lexicon(cfg)
    catalog = make_catalog(cfg, lexicon)
    backend = make_backend(cfg, catalog, lexicon)
    dataset = dataset if dataset is not None else make_dataset(cfg, backend)
    if dataset.spec.num_classes != catalog.num_classes:
        raise ConfigError("dataset and catalog disagree on the number of classes")
    img_train = backend.encode_images(dataset.train.sample_ids, dataset.train.features)
    img_val = backend.encode_images(dataset.val.sample_ids, dataset.val.features)
    return Context(cfg, catalog, lexicon, backend, PromptTemplateSet(cfg.lexicon.templates), dataset, img_train, img_val)


def harvest(ctx: Context) -> NounCandidateSet:
    return harvest_candidates(ctx.catalog, ctx.lexicon, ctx.cfg.lexicon.per_class_limit)


def build_relaxed_bank(ctx: Context) -> tuple[NounBank, ClusterModel]:
    r = ctx.cfg.relaxation
    return build_bank(
        harvest(ctx),
        ctx.templates,
        ctx.backend,
        ctx.img_train,
        num_clusters=r.num_clusters or ctx.num_classes,
        top_k=r.top_k,
        seed=ctx.cfg.seeds.kmeans,
        max_iter=r.max_iter,
        tol=r.tol,
        learnable=ctx.cfg.teacher_x.bank_mode == "learnable",
    )


# --- optimisation helpers -------------------------------------------------


def _gen(seed: int, tag: str) -> torch.Generator:
    return torch.Generator().manual_seed(seed_for(seed, tag))


def _sgd(groups, section) -> torch.optim.SGD:
    return torch.optim.SGD(groups, lr=section.lr, momentum=section.momentum, weight_decay=section.weight_decay)


def _accuracy(logits: torch.Tensor, labels: np.ndarray) -> float:
    return float((logits.argmax(dim=1).numpy() == labels).mean())


def _fit(
    n: int,
    section,
    opt: torch.optim.Optimizer,
    loss_fn: Callable[[torch.Tensor], torch.Tensor],
    evaluate: Callable[[int], dict],
    order_gen: torch.Generator,
    seed: int,
    after_step: Callable[[], None] | None = None,
) -> list[dict]:
    history = []
    step = 0
    for epoch in range(1, section.epochs + 1):
        perm = torch.randperm(n, generator=order_gen)
        total, count = 0.0, 0
        for start in range(0, n, section.batch_size):
            idx = perm[start : start + section.batch_size]
            loss = loss_fn(idx)
            if not torch.isfinite(loss):
                raise TrainingError("non-finite loss", seed=seed, step=step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            if after_step is not None:
                after_step()
            total += float(loss.detach()) * len(idx)
            count += len(idx)
            step += 1
        history.append({"epoch": epoch, "loss": total / count, **evaluate(epoch)})
    return history


# --- phase 1: image-only teachers -------------------------------------------


def train_unimodal_teachers(ctx: Context) -> tuple[list[UnimodalTeacher], RunRecord]:
    """Two image-only members trained with supervised CE under strong / weak augmentation."""
    cfg, sec = ctx.cfg, ctx.cfg.teacher_m
    t0 = time.perf_counter()
    tr, va = ctx.dataset.train, ctx.dataset.val
    x_tr = torch.from_numpy(tr.features)
    x_va = torch.from_numpy(va.features)
    y_tr = torch.from_numpy(tr.labels)
    members, history = [], []
    for policy, strength in (("strong", sec.aug_strong), ("weak", sec.aug_weak)):
        head = ClassifierHead(x_tr.shape[1], ctx.num_classes, sec.hidden, generator=_gen(cfg.seeds.init, f"tm-{policy}"))
        member = UnimodalTeacher(head, policy, strength)
        aug_gen = _gen(cfg.seeds.augment, f"tm-{policy}")
        opt = _sgd(member.parameters(), sec)

        def loss_fn(idx, member=member, aug_gen=aug_gen):
            member.train()
            return cross_entropy(member(member.augment(x_tr[idx], aug_gen)), y_tr[idx])

        def evaluate(epoch, member=member):
            member.eval()
            with torch.no_grad():
                return {"train_acc": _accuracy(member(x_tr), tr.labels), "val_acc": _accuracy(member(x_va), va.labels)}

        hist = _fit(len(tr), sec, opt, loss_fn, evaluate, _gen(cfg.seeds.order, f"tm-{policy}"), cfg.seeds.init)
        if not hist:
            hist = [{"epoch": 0, "loss": None, **evaluate(0)}]
        history += [{"member": policy, **h} for h in hist]
        members.append(member.eval())
    with torch.no_grad():
        z = ensemble_logits([m(x_va) for m in members])
    final = {
        "val_acc_strong": history_last(history, "strong")["val_acc"],
        "val_acc_weak": history_last(history, "weak")["val_acc"],
        "val_acc_ensemble": _accuracy(z, va.labels),
    }
    rec = RunRecord("teacher_m", cfg.to_dict(), history, final, wall_clock=time.perf_counter() - t0)
    return members, rec


def history_last(history: list[dict], member: str) -> dict:
    return [h for h in history if h["member"] == member][-1]


# --- phase 2: multimodal teacher ---------------------------------------------


@dataclass
class TextInputs:
    """Per-split, epoch-independent inputs for text resolution."""

    sources: np.ndarray
    noise_cls: np.ndarray
    clusters: np.ndarray
    seeds: list[int]
    image: torch.Tensor
    labels: np.ndarray

    @classmethod
    def build(cls, resolver: TextResolver, policy: TextMixPolicy, split: Split, image_vecs: np.ndarray) -> "TextInputs":
        return cls(
            sources=policy.assign(split.sample_ids),
            noise_cls=resolver.noise_classes(split.sample_ids, split.labels),
            clusters=resolver.image_clusters(image_vecs),
            seeds=resolver.select_seeds(split.sample_ids),
            image=torch.from_numpy(np.ascontiguousarray(image_vecs, dtype=np.float32)),
            labels=split.labels,
        )

    def text(self, resolver: TextResolver, idx=None):
        sl = slice(None) if idx is None else np.asarray(idx)
        seeds = self.seeds if idx is None else [self.seeds[i] for i in sl]
        return resolver.resolve(
            self.sources[sl], self.labels[sl], self.noise_cls[sl], self.image[sl], self.clusters[sl], seeds
        )


@dataclass
class TeacherX:
    teacher: MultimodalTeacher
    bank: NounBank | None
    resolver: TextResolver
    policy: TextMixPolicy
    train_inputs: TextInputs
    val_inputs: TextInputs
    record: RunRecord

    def logits(self, which: str = "val") -> torch.Tensor:
        inputs = self.val_inputs if which == "val" else self.train_inputs
        self.teacher.eval()
        with torch.no_grad():
            text, _ = inputs.text(self.resolver)
            return self.teacher(inputs.image, text)

    def inputs(self, which: str = "val") -> tuple[torch.Tensor, torch.Tensor]:
        inputs = self.val_inputs if which == "val" else self.train_inputs
        with torch.no_grad():
            text, _ = inputs.text(self.resolver)
        return inputs.image, text.detach().clone()


def train_multimodal_teacher(ctx: Context, bank: NounBank | None, cluster_model: ClusterModel | None) -> TeacherX:
    """Train the multimodal teacher; a learnable bank is updated and renormalised every step.

    The caller's bank is not mutated: the teacher works on a copy.
    """
    cfg, sec = ctx.cfg, ctx.cfg.teacher_x
    t0 = time.perf_counter()
    learnable = sec.bank_mode == "learnable"
    bank = bank.copy(learnable=learnable) if bank is not None else None
    resolver = TextResolver(
        ctx.catalog,
        ctx.templates,
        ctx.backend,
        bank,
        cluster_model,
        noise_seed=cfg.seeds.noise,
        select_mode=cfg.relaxation.select_mode,
        select_seed=cfg.seeds.mix,
    )
    policy = TextMixPolicy(cfg.mix.p_gt, cfg.mix.p_wn, cfg.mix.p_noise, seed=cfg.seeds.mix)
    d_img, d_txt = ctx.img_train.shape[1], resolver.class_text.shape[1]
    in_dim = d_txt + (d_img if sec.modality == "image+text" else 0)
    head = ClassifierHead(in_dim, ctx.num_classes, sec.hidden, generator=_gen(cfg.seeds.init, "tx"))
    teacher = MultimodalTeacher(head, d_img, d_txt, sec.modality)
    tr_in = TextInputs.build(resolver, policy, ctx.dataset.train, ctx.img_train)
    va_in = TextInputs.build(resolver, policy, ctx.dataset.val, ctx.img_val)
    y_tr = torch.from_numpy(ctx.dataset.train.labels)

    groups = [{"params": list(teacher.parameters())}]
    if bank is not None and learnable:
        groups.append({"params": [bank.current], "lr": sec.bank_lr, "weight_decay": 0.0})
    opt = _sgd(groups, sec)
    pre = bank.pretrained_tensor() if bank is not None else None
    terms = {"hier": [], "cosreg": []}
    norm_dev = [0.0]

    def loss_fn(idx):
        teacher.train()
        text, bidx = tr_in.text(resolver, idx)
        logits = teacher(tr_in.image[idx], text)
        y = y_tr[idx]
        if bank is None or not (tr_in.sources[idx.numpy()] == WN).any():
            return teacher_total(logits, y, None, None, None, cfg.kd)
        mask = torch.from_numpy(tr_in.sources[idx.numpy()] == WN)
        n_gt = resolver.class_text[y]
        n_pre = pre[torch.from_numpy(np.clip(bidx, 0, None))]
        with torch.no_grad():
            terms["hier"].append(float((1 - torch.cosine_similarity(n_gt[mask], text[mask], dim=1)).mean()))
            terms["cosreg"].append(float((1 - torch.cosine_similarity(n_pre[mask], text[mask], dim=1)).mean()))
        return teacher_total(logits, y, n_gt, text, n_pre, cfg.kd, relaxed_mask=mask)

    def after_step():
        if bank is not None and learnable:
            bank.renormalize_()
            norm_dev[0] = max(norm_dev[0], float((bank.current.detach().norm(dim=1) - 1).abs().max()))

    def evaluate(epoch):
        teacher.eval()
        out = {}
        with torch.no_grad():
            for name, inp in (("train_acc", tr_in), ("val_acc", va_in)):
                text, _ = inp.text(resolver)
                out[name] = _accuracy(teacher(inp.image, text), inp.labels)
        for k, v in terms.items():
            out[f"{k}_mean"] = float(np.mean(v)) if v else 0.0
            v.clear()
        if bank is not None:
            out["bank_mean_cos"] = bank.drift_stats()["mean_cos"]
        return out

    history = _fit(len(y_tr), sec, opt, loss_fn, evaluate, _gen(cfg.seeds.order, "tx"), cfg.seeds.init, after_step)
    if not history:
        history = [{"epoch": 0, "loss": None, **evaluate(0)}]
    teacher.eval()
    extra = {
        "source_counts_train": np.bincount(tr_in.sources, minlength=3).tolist(),
        "source_counts_val": np.bincount(va_in.sources, minlength=3).tolist(),
        "bank_size": len(bank) if bank is not None else 0,
        "bank_max_norm_dev": norm_dev[0],
        "trial": f"({'img' if sec.modality == 'image+text' else 'txt'}, {policy.name})",
    }
    if bank is not None:
        extra["bank_drift"] = bank.drift_stats()
        bank.set_learnable(False)
    final = {"val_acc": history[-1]["val_acc"], "train_acc": history[-1]["train_acc"]}
    rec = RunRecord("teacher_x", cfg.to_dict(), history, final, extra, time.perf_counter() - t0)
    return TeacherX(teacher, bank, resolver, policy, tr_in, va_in, rec)


# --- phase 3: student -----------------------------------------------------------


def teacher_targets(ctx: Context, members: Sequence[UnimodalTeacher] | None, tx: TeacherX | None, which: str) -> torch.Tensor | None:
    """Averaged teacher logits for every training sample (``None`` for CE-only)."""
    x_tr = torch.from_numpy(ctx.dataset.train.features)
    with torch.no_grad():
        z_tm = ensemble_logits([m.eval()(x_tr) for m in members]) if members and "m" in which else None
        z_tx = tx.logits("train") if tx is not None and "x" in which else None
    if which == "m+x":
        return average_logits(z_tm, z_tx)
    if which == "m":
        return z_tm
    if which == "x":
        return z_tx
    return None


def _student_epoch_loss(student: Student, x: torch.Tensor, y_onehot: torch.Tensor, z_bar, kd_cfg) -> torch.Tensor:
    logits = student(x)
    if z_bar is None:
        return cross_entropy(logits, y_onehot)
    return student_total(logits, z_bar, y_onehot, kd_cfg)


def distill_student(
    ctx: Context,
    members: Sequence[UnimodalTeacher] | None = None,
    tx: TeacherX | None = None,
) -> tuple[Student, RunRecord]:
    """Train the image-only student against the averaged teacher logits.

    Teachers are frozen: their parameters and the bank are checksummed before
    and after.  Student seeds are independent of the teacher phase, so a
    ``lambda_kd = 0`` run reproduces the CE-only baseline exactly.
    """
    cfg, sec = ctx.cfg, ctx.cfg.student
    t0 = time.perf_counter()
    which = sec.teachers
    if "m" in which and not members:
        raise ConfigError("student.teachers needs the image teachers")
    if "x" in which and tx is None:
        raise ConfigError("student.teachers needs the multimodal teacher")
    before = _teacher_checksums(members, tx)
    z_bar = teacher_targets(ctx, members, tx, which)
    if z_bar is not None:
        z_bar = z_bar.detach()
    tr, va = ctx.dataset.train, ctx.dataset.val
    x_tr = torch.from_numpy(tr.features)
    x_va = torch.from_numpy(va.features)
    y_tr = as_onehot(torch.from_numpy(tr.labels), ctx.num_classes, dtype=torch.float32)
    head = ClassifierHead(x_tr.shape[1], ctx.num_classes, sec.hidden, generator=_gen(cfg.seeds.init, "student"))
    student = Student(head, sec.aug_strength)
    aug_gen = _gen(cfg.seeds.augment, "student")
    opt = _sgd(student.parameters(), sec)

    def loss_fn(idx):
        student.train()
        x = student.augment(x_tr[idx], aug_gen)
        return _student_epoch_loss(student, x, y_tr[idx], None if z_bar is None else z_bar[idx], cfg.kd)

    def evaluate(epoch):
        student.eval()
        with torch.no_grad():
            return {"train_acc": _accuracy(student(x_tr), tr.labels), "val_acc": _accuracy(student(x_va), va.labels)}

    history = _fit(len(tr), sec, opt, loss_fn, evaluate, _gen(cfg.seeds.order, "student"), cfg.seeds.init)
    if not history:
        history = [{"epoch": 0, "loss": None, **evaluate(0)}]
    after = _teacher_checksums(members, tx)
    if before != after:
        raise TrainingError("teacher state changed during distillation", seed=cfg.seeds.init)
    student.eval()
    final = {"val_acc": history[-1]["val_acc"], "train_acc": history[-1]["train_acc"]}
    extra = {"teachers": which, "teacher_checksums": before}
    rec = RunRecord(f"student[{which}]", cfg.to_dict(), history, final, extra, time.perf_counter() - t0)
    return student, rec


def _teacher_checksums(members, tx: TeacherX | None) -> dict:
    out = {f"teacher_m[{i}]": parameter_checksum(m) for i, m in enumerate(members or [])}
    if tx is not None:
        out["teacher_x"] = parameter_checksum(tx.teacher)
        if tx.bank is not None:
            out["bank"] = tx.bank.checksum()
    return out


# --- full pipeline ----------------------------------------------------------------


@dataclass
class PipelineResult:
    members: list[UnimodalTeacher]
    teacher_x: TeacherX
    student: Student
    records: dict[str, RunRecord]
    cluster_model: ClusterModel | None

    def summary(self) -> dict:
        return {
            "teacher_m_val": self.records["teacher_m"].final["val_acc_ensemble"],
            "teacher_x_val": self.records["teacher_x"].final["val_acc"],
            "student_val": self.records["student"].final["val_acc"],
        }


def run_pipeline(cfg: TrainConfig, dataset: SyntheticDataset | None = None, out_dir: str | Path | None = None) -> PipelineResult:
    ctx = prepare(cfg, dataset)
    members, rec_m = train_unimodal_teachers(ctx)
    bank, cm = build_relaxed_bank(ctx)
    tx = train_multimodal_teacher(ctx, bank, cm)
    student, rec_s = distill_student(ctx, members, tx)
    result = PipelineResult(members, tx, student, {"teacher_m": rec_m, "teacher_x": tx.record, "student": rec_s}, cm)
    if out_dir is not None:
        save_pipeline(result, ctx, out_dir)
    return result


def save_pipeline(result: PipelineResult, ctx: Context, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    cfg_echo = ctx.cfg.to_dict()
    for m in result.members:
        save_checkpoint(m, out / "teacher_m" / m.policy, {"arch": m.head.arch(), "policy": m.policy, "config": cfg_echo})
    tx = result.teacher_x
    save_checkpoint(
        tx.teacher,
        out / "teacher_x",
        {"arch": tx.teacher.head.arch(), "modality": tx.teacher.modality, "d_img": tx.teacher.d_img, "d_txt": tx.teacher.d_txt, "config": cfg_echo},
    )
    if tx.bank is not None:
        tx.bank.save(out / "bank")
    save_checkpoint(result.student, out / "student", {"arch": result.student.head.arch(), "config": cfg_echo})
    for name, rec in result.records.items():
        rec.save(out / "records" / f"{name}.json")
    return out


# --- sweeps ------------------------------------------------------------------------


def axis_points(axis: str, percents: Sequence[float]) -> list[tuple[float, float, float]]:
    """``wn`` / ``noise`` percentages -> (p_gt, p_wn, p_noise) triples."""
    pts = []
    for p in percents:
        q = p / 100.0
        if not 0 <= q <= 1:
            raise ConfigError(f"proportion {p} outside 0..100")
        if axis == "wn":
            pts.append((1 - q, q, 0.0))
        elif axis == "noise":
            pts.append((1 - q, 0.0, q))
        else:
            raise ConfigError(f"unknown sweep axis {axis!r}")
    return pts


@dataclass
class SweepRow:
    point: tuple[float, float, float]
    seed: int
    trial: str
    teacher_val: float | None = None
    students: dict[str, float] = field(default_factory=dict)
    image_share: float | None = None
    text_share: float | None = None
    attribution_residual: float | None = None  # max per-sample relative completeness residual
    bank_mean_cos: float | None = None
    error: str | None = None


@dataclass
class SweepResult:
    rows: list[SweepRow]

    def points(self) -> list[tuple[float, float, float]]:
        seen = []
        for r in self.rows:
            if r.point not in seen:
                seen.append(r.point)
        return seen

    def values(self, point, key: str) -> list[float]:
        out = []
        for r in self.rows:
            if r.point != point or r.error:
                continue
            v = r.students.get(key[len("student:"):]) if key.startswith("student:") else getattr(r, key)
            if v is not None:
                out.append(v)
        return out

    def mean(self, point, key: str) -> float:
        return float(np.mean(self.values(point, key)))

    def std(self, point, key: str) -> float:
        return float(np.std(self.values(point, key)))

    def table(self) -> list[dict]:
        keys = ["teacher_val"]
        students = sorted({k for r in self.rows for k in r.students})
        keys += [f"student:{s}" for s in students]
        if any(r.image_share is not None for r in self.rows):
            keys += ["image_share", "text_share"]
        out = []
        for p in self.points():
            trial = next(r.trial for r in self.rows if r.point == p)
            row = {"trial": trial, "p_gt": p[0], "p_wn": p[1], "p_noise": p[2]}
            for k in keys:
                vals = self.values(p, k)
                row[f"{k}_mean"] = float(np.mean(vals)) if vals else None
                row[f"{k}_std"] = float(np.std(vals)) if vals else None
            row["n_seeds"] = len({r.seed for r in self.rows if r.point == p and not r.error})
            row["failures"] = sum(1 for r in self.rows if r.point == p and r.error)
            out.append(row)
        return out


def run_sweep(
    base_cfg: TrainConfig,
    points: Sequence[tuple[float, float, float]],
    seeds: Sequence[int] = (0,),
    teacher_sets: Sequence[str] = ("m+x",),
    attribution_steps: int | None = None,
    attribution_samples: int | None = None,
    dataset: SyntheticDataset | None = None,
    bank_modes: Sequence[str] | None = None,
) -> SweepResult:
    """One full pipeline per (point, seed), retraining the multimodal teacher from scratch.

    Image teachers and the noun bank depend only on the seed, so they are
    trained once per seed and shared by every point.  A failing point is
    recorded and the sweep continues.
    """
    rows: list[SweepRow] = []
    for seed in seeds:
        cfg_s = base_cfg.with_seed(seed) if seed is not None else base_cfg
        ctx = prepare(cfg_s, dataset)
        dataset = ctx.dataset
        members = None
        if any("m" in t for t in teacher_sets):
            members, _ = train_unimodal_teachers(ctx)
        bank, cm = build_relaxed_bank(ctx)
        for mode in bank_modes or [cfg_s.teacher_x.bank_mode]:
            for point in points:
                cfg_p = cfg_s.with_mix(*point).with_overrides(teacher_x={"bank_mode": mode})
                ctx_p = replace(ctx, cfg=cfg_p)
                row = SweepRow(point=point if bank_modes is None else (mode,) + tuple(point), seed=seed, trial="")
                try:
                    tx = train_multimodal_teacher(ctx_p, bank, cm)
                    row.trial = tx.record.extra["trial"] + ("" if bank_modes is None else f" [{mode}]")
                    row.teacher_val = tx.record.final["val_acc"]
                    if tx.bank is not None:
                        row.bank_mean_cos = tx.record.extra["bank_drift"]["mean_cos"]
                    for which in teacher_sets:
                        ctx_t = replace(ctx_p, cfg=cfg_p.with_overrides(student={"teachers": which}))
                        _, rec = distill_student(ctx_t, members, tx)
                        row.students[which] = rec.final["val_acc"]
                    if attribution_steps:
                        from .attribution import teacher_attribution

                        rep = teacher_attribution(tx, n_steps=attribution_steps, max_samples=attribution_samples)
                        row.image_share, row.text_share = rep.image_share, rep.text_share
                        row.attribution_residual = rep.max_relative_residual()
                except Exception as exc:  # noqa: BLE001 - sweep records failures and continues
                    log.exception("sweep point %s seed %s failed", point, seed)
                    row.error = f"{type(exc).__name__}: {exc}"
                rows.append(row)
    return SweepResult(rows)


# --- reloading saved phases -------------------------------------------------------


def _head_from_state(state: dict, meta: dict) -> ClassifierHead:
    arch = meta["arch"]
    head = ClassifierHead(arch["input_dim"], arch["output_dim"], arch["hidden"])
    head.load_state_dict({k.removeprefix("head."): v for k, v in state.items()})
    return head


def load_unimodal_teachers(ctx: Context, directory: str | Path) -> list[UnimodalTeacher]:
    sec = ctx.cfg.teacher_m
    members = []
    for policy, strength in (("strong", sec.aug_strong), ("weak", sec.aug_weak)):
        state, meta = load_state(Path(directory) / "teacher_m" / policy)
        members.append(UnimodalTeacher(_head_from_state(state, meta), policy, strength).eval())
    return members


def load_multimodal_teacher(ctx: Context, directory: str | Path) -> TeacherX:
    """Rebuild a trained teacher bundle (head, bank, text resolution) from a run directory."""
    directory = Path(directory)
    cfg = ctx.cfg
    state, meta = load_state(directory / "teacher_x")
    teacher = MultimodalTeacher(_head_from_state(state, meta), meta["d_img"], meta["d_txt"], meta["modality"]).eval()
    bank = cm = None
    if (directory / "bank" / "manifest.json").exists():
        bank = NounBank.load(directory / "bank")
        bank.set_learnable(False)
        if bank.centers is not None:
            cm = ClusterModel(bank.centers, np.zeros(0, dtype=np.int64), float("nan"))
    resolver = TextResolver(
        ctx.catalog,
        ctx.templates,
        ctx.backend,
        bank,
        cm,
        noise_seed=cfg.seeds.noise,
        select_mode=cfg.relaxation.select_mode,
        select_seed=cfg.seeds.mix,
    )
    policy = TextMixPolicy(cfg.mix.p_gt, cfg.mix.p_wn, cfg.mix.p_noise, seed=cfg.seeds.mix)
    rec_path = directory / "records" / "teacher_x.json"
    if rec_path.exists():
        raw = records.load_json(rec_path)
        rec = RunRecord(raw["phase"], raw["config"], raw["history"], raw["final"], raw["extra"], raw["wall_clock"])
    else:
        rec = RunRecord("teacher_x", cfg.to_dict(), extra={"trial": f"({'img' if teacher.modality == 'image+text' else 'txt'}, {policy.name})"})
    return TeacherX(
        teacher,
        bank,
        resolver,
        policy,
        TextInputs.build(resolver, policy, ctx.dataset.train, ctx.img_train),
        TextInputs.build(resolver, policy, ctx.dataset.val, ctx.img_val),
        rec,
    )
