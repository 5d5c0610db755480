"""Per-modality integrated-gradients attribution for the multimodal teacher."""
from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from . import records
from .errors import ConfigError, DegenerateInputError, InputError

log = logging.getLogger(__name__)

MIN_STEPS = 8


@dataclass
class IGResult:
    attributions: np.ndarray  # (N, D)
    delta: np.ndarray  # f(x) - f(baseline), per sample
    residual: np.ndarray  # sum(attributions) - delta, per sample
    targets: np.ndarray


def _as_float64(f: Callable | nn.Module) -> Callable:
    if isinstance(f, nn.Module):
        g = copy.deepcopy(f).double().eval()
        for p in g.parameters():
            p.requires_grad_(False)
        return g
    return f


def integrated_gradients(
    f: Callable | nn.Module,
    x,
    target=None,
    baseline=None,
    n_steps: int = 64,
) -> IGResult:
    """Right-Riemann integrated gradients of ``f(.)[target]`` from ``baseline`` to ``x``.

    ``f`` maps ``(B, D)`` to ``(B, C)`` logits; modules are evaluated on a
    float64 copy.  ``target`` defaults to the predicted class of each row and
    ``baseline`` to the zero vector.
    """
    if n_steps < MIN_STEPS:
        raise ConfigError(f"n_steps must be >= {MIN_STEPS}, got {n_steps}")
    f = _as_float64(f)
    x = torch.as_tensor(np.asarray(x, dtype=np.float64))
    single = x.dim() == 1
    x = x.reshape(1, -1) if single else x
    b = torch.zeros_like(x) if baseline is None else torch.as_tensor(np.asarray(baseline, dtype=np.float64))
    if b.dim() == 1:
        b = b.expand_as(x) if b.shape[0] == x.shape[1] else b
    if b.shape != x.shape:
        raise InputError(f"baseline shape {tuple(b.shape)} does not match input {tuple(x.shape)}")
    n, d = x.shape
    with torch.no_grad():
        fx = f(x)
        fb = f(b)
    if target is None:
        tgt = fx.argmax(dim=1)
    else:
        tgt = torch.as_tensor(np.broadcast_to(np.asarray(target, dtype=np.int64), (n,)).copy())
    rows = torch.arange(n)
    alphas = torch.arange(1, n_steps + 1, dtype=torch.float64) / n_steps
    grads_sum = torch.zeros_like(x)
    for s, a in enumerate(alphas, 1):
        point = (b + a * (x - b)).requires_grad_(True)
        out = f(point)[rows, tgt].sum()
        (g,) = torch.autograd.grad(out, point)
        if not torch.isfinite(g).all():
            raise InputError(f"non-finite gradient at integration step {s} of {n_steps}")
        grads_sum += g
    attr = (x - b) * grads_sum / n_steps
    delta = (fx[rows, tgt] - fb[rows, tgt]).numpy()
    attr_np = attr.numpy()
    residual = attr_np.sum(axis=1) - delta
    if single:
        return IGResult(attr_np[0], delta[:1], residual[:1], tgt.numpy())
    return IGResult(attr_np, delta, residual, tgt.numpy())


def modality_shares(attr, d_img: int, d_txt: int) -> tuple[float, float]:
    """Absolute-sum share of the image block (first ``d_img`` dims) and the text block."""
    a = np.abs(np.asarray(attr, dtype=np.float64))
    if a.shape[-1] != d_img + d_txt:
        raise InputError(f"attribution length {a.shape[-1]} != {d_img} + {d_txt}")
    total = a.sum()
    if total == 0:
        raise DegenerateInputError("all attributions are zero; modality shares are undefined")
    image = float(a[:d_img].sum() / total)
    return image, 1.0 - image


@dataclass
class AttributionReport:
    trial: str
    n_steps: int
    baseline: str
    target_mode: str
    d_img: int
    d_txt: int
    attributions: np.ndarray
    sample_shares: np.ndarray  # (N, 2) image, text
    residual: np.ndarray
    delta: np.ndarray
    skipped: int = 0

    @property
    def image_share(self) -> float:
        return float(self.sample_shares[:, 0].mean())

    @property
    def text_share(self) -> float:
        return 1.0 - self.image_share

    def max_relative_residual(self) -> float:
        scale = np.maximum(np.abs(self.delta), 1e-12)
        return float(np.max(np.abs(self.residual) / scale)) if len(self.delta) else 0.0

    def summary(self) -> dict:
        return {
            "trial": self.trial,
            "n_steps": self.n_steps,
            "baseline": self.baseline,
            "target": self.target_mode,
            "n_samples": int(len(self.sample_shares)),
            "skipped_zero_attribution": self.skipped,
            "image_share": self.image_share,
            "text_share": self.text_share,
            "max_abs_residual": float(np.max(np.abs(self.residual))) if len(self.residual) else 0.0,
            "max_relative_residual": self.max_relative_residual(),
        }

    def save(self, path: str | Path) -> None:
        path = Path(path)
        records.dump_json(path, {**self.summary(), "sample_shares": self.sample_shares.tolist()})
        with open(path.with_suffix(".csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample", "image_share", "text_share", "residual"])
            for i, (s, r) in enumerate(zip(self.sample_shares, self.residual)):
                w.writerow([i, repr(float(s[0])), repr(float(s[1])), repr(float(r))])


def attribute_teacher(
    teacher,
    image_vecs,
    text_vecs,
    n_steps: int = 64,
    labels=None,
    trial: str = "",
) -> AttributionReport:
    """Attribute a :class:`~xmodal.models.MultimodalTeacher` over its concatenated input.

    Targets are the predicted classes unless ``labels`` is given.  Samples
    whose attributions are all zero are skipped (and counted).
    """
    image = torch.as_tensor(np.asarray(image_vecs, dtype=np.float32))
    text = torch.as_tensor(np.asarray(text_vecs, dtype=np.float32))
    with torch.no_grad():
        x = teacher.concat(image, text).double().numpy()
    d_img = teacher.d_img if teacher.modality == "image+text" else 0
    ig = integrated_gradients(teacher.head, x, target=labels, n_steps=n_steps)
    shares, keep = [], []
    for i, a in enumerate(ig.attributions):
        try:
            shares.append(modality_shares(a, d_img, teacher.d_txt))
            keep.append(i)
        except DegenerateInputError:
            continue
    if not keep:
        raise DegenerateInputError("every sample has all-zero attributions")
    keep = np.asarray(keep)
    return AttributionReport(
        trial=trial,
        n_steps=n_steps,
        baseline="zero",
        target_mode="label" if labels is not None else "predicted",
        d_img=d_img,
        d_txt=teacher.d_txt,
        attributions=ig.attributions[keep],
        sample_shares=np.asarray(shares),
        residual=ig.residual[keep],
        delta=ig.delta[keep],
        skipped=len(ig.attributions) - len(keep),
    )


def teacher_attribution(tx, n_steps: int = 64, max_samples: int | None = None, which: str = "val") -> AttributionReport:
    """Attribution of a trained teacher bundle over its own resolved evaluation inputs."""
    image, text = tx.inputs(which)
    if max_samples is not None:
        image, text = image[:max_samples], text[:max_samples]
    return attribute_teacher(tx.teacher, image, text, n_steps=n_steps, trial=tx.record.extra.get("trial", ""))


@dataclass
class AttributionSweep:
    rows: list[dict] = field(default_factory=list)

    def series(self, key: str = "image_share") -> list[tuple[str, float]]:
        return [(r["trial"], r[key]) for r in self.rows if r.get("error") is None]

    def save_csv(self, path: str | Path) -> None:
        cols = ["trial", "image_share", "text_share", "n_samples", "max_relative_residual", "error"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
            w.writeheader()
            for r in self.rows:
                w.writerow({c: r.get(c) for c in cols})


def attribution_sweep(
    trials: Sequence[tuple[str, object, object, object]],
    n_steps: int = 64,
) -> AttributionSweep:
    """``trials`` holds ``(name, teacher, image_vecs, text_vecs)``; failures are recorded per trial."""
    out = AttributionSweep()
    for name, teacher, image, text in trials:
        try:
            rep = attribute_teacher(teacher, image, text, n_steps=n_steps, trial=name)
            out.rows.append({**rep.summary(), "error": None})
        except Exception as exc:  # noqa: BLE001 - record and continue
            log.exception("attribution trial %s failed", name)
            out.rows.append({"trial": name, "error": f"{type(exc).__name__}: {exc}"})
    return out
