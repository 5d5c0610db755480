"""Pre-wired desk-scale experiments with directional trend checks.

Every experiment runs on the shipped leakage dataset (``leakage_desk.yaml``)
with the mock backend and returns a :class:`ReportBundle`.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import spearmanr

from . import records
from .config import TrainConfig, from_dict, load_config
from .training import SweepResult, axis_points, run_sweep

EXPERIMENTS = ("table2", "fig2", "table3", "fig3")
DEFAULT_SEEDS = (0, 1, 2, 3, 4)
BETAS = (0, 20, 50, 80, 100)


def shipped_config(name: str = "leakage_desk.yaml") -> TrainConfig:
    import yaml

    text = resources.files("xmodal").joinpath(f"data/{name}").read_text(encoding="utf-8")
    return from_dict(yaml.safe_load(text))


@dataclass
class TrendCheck:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


@dataclass
class ReportBundle:
    experiment: str
    table: list[dict]
    series: dict[str, list[tuple[float, ...]]]
    checks: list[TrendCheck]
    rows: list[dict] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def summary(self) -> str:
        lines = [f"experiment {self.experiment}"]
        for row in self.table:
            cells = [f"{k}={_fmt(v)}" for k, v in row.items()]
            lines.append("  " + " ".join(cells))
        lines += [c.line() for c in self.checks]
        return "\n".join(lines)

    def table_csv(self) -> str:
        buf = io.StringIO()
        if self.table:
            w = csv.DictWriter(buf, fieldnames=list(self.table[0]))
            w.writeheader()
            w.writerows(self.table)
        return buf.getvalue()

    def save(self, out_dir: str | Path) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{self.experiment}.csv").write_text(self.table_csv())
        records.dump_json(out / f"{self.experiment}_runs.json", self.rows)
        records.dump_json(
            out / f"{self.experiment}_checks.json",
            [{"name": c.name, "passed": c.passed, "detail": c.detail} for c in self.checks],
        )
        for name, pts in self.series.items():
            lines = ["\t".join(repr(float(v)) for v in p) for p in pts]
            (out / f"{self.experiment}_{name}.tsv").write_text("\n".join(lines) + "\n")
        (out / f"{self.experiment}_summary.txt").write_text(self.summary() + "\n")
        return out


def _fmt(v) -> str:
    return f"{v:.4f}" if isinstance(v, float) else str(v)


def _rows(res: SweepResult) -> list[dict]:
    from dataclasses import asdict

    return [asdict(r) for r in res.rows]


def _non_increasing(vals: Sequence[float]) -> bool:
    return all(b <= a for a, b in zip(vals, vals[1:]))


def leakage_points() -> list[tuple[float, float, float]]:
    """Pure gt, then the wn axis and the noise axis (Table 2 layout)."""
    return axis_points("wn", BETAS) + axis_points("noise", BETAS[1:])


def leakage_sweep(cfg: TrainConfig, seeds: Sequence[int] = DEFAULT_SEEDS, attribution_steps: int | None = None,
                  attribution_samples: int | None = 100) -> SweepResult:
    return run_sweep(cfg, leakage_points(), seeds=seeds, attribution_steps=attribution_steps,
                     attribution_samples=attribution_samples)


def _std_detail(res: SweepResult, p, key) -> str:
    return f"{res.mean(p, key):.4f}±{res.std(p, key):.4f}"


def table2(cfg: TrainConfig | None = None, seeds=DEFAULT_SEEDS, sweep: SweepResult | None = None) -> ReportBundle:
    cfg = cfg or shipped_config()
    res = sweep or leakage_sweep(cfg, seeds)
    wn = axis_points("wn", BETAS)
    teacher = [res.mean(p, "teacher_val") for p in wn]
    gt, wn100, noise100 = (1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0)
    s = {p: res.mean(p, "student:m+x") for p in (gt, wn100, noise100)}
    failures = sum(r.error is not None for r in res.rows)
    checks = [
        TrendCheck("runs complete", failures == 0, f"{failures} failed runs"),
        TrendCheck(
            "teacher val non-increasing in p_wn",
            _non_increasing(teacher),
            " >= ".join(f"{t:.4f}" for t in teacher),
        ),
        TrendCheck("teacher(100%gt) >= 0.99", res.mean(gt, "teacher_val") >= 0.99, _std_detail(res, gt, "teacher_val")),
        TrendCheck(
            "student(100%wn) >= student(100%noise) >= student(100%gt)",
            s[wn100] >= s[noise100] >= s[gt],
            " >= ".join(_std_detail(res, p, "student:m+x") for p in (wn100, noise100, gt)),
        ),
    ]
    table = [
        {
            "trial": r["trial"],
            "teacher_val_mean": r["teacher_val_mean"],
            "teacher_val_std": r["teacher_val_std"],
            "student_val_mean": r["student:m+x_mean"],
            "student_val_std": r["student:m+x_std"],
            "n_seeds": r["n_seeds"],
        }
        for r in res.table()
    ]
    series = {
        "wn": [(100 * p[1], res.mean(p, "teacher_val"), res.mean(p, "student:m+x")) for p in wn],
        "noise": [(100 * p[2], res.mean(p, "teacher_val"), res.mean(p, "student:m+x")) for p in axis_points("noise", BETAS)],
    }
    return ReportBundle("table2", table, series, checks, _rows(res))


def fig2(cfg: TrainConfig | None = None, seeds=DEFAULT_SEEDS) -> ReportBundle:
    """Text-only teacher distilled alone into the student, swept along the wn axis."""
    cfg = (cfg or shipped_config()).with_overrides(teacher_x={"modality": "text"}, student={"teachers": "x"})
    pts = axis_points("wn", BETAS)
    res = run_sweep(cfg, pts, seeds=seeds, teacher_sets=("x",))
    teacher = [res.mean(p, "teacher_val") for p in pts]
    student = [res.mean(p, "student:x") for p in pts]
    rho_t = float(spearmanr(BETAS, teacher)[0])
    rho_s = float(spearmanr(BETAS, student)[0])
    failures = sum(r.error is not None for r in res.rows)
    checks = [
        TrendCheck("runs complete", failures == 0, f"{failures} failed runs"),
        TrendCheck("teacher val decreases with p_wn (rho <= -0.7)", rho_t <= -0.7, f"rho={rho_t:.3f}"),
        TrendCheck("student val increases with p_wn (rho >= 0.7)", rho_s >= 0.7, f"rho={rho_s:.3f}"),
    ]
    table = [
        {
            "p_wn": 100 * p[1],
            "teacher_val_mean": res.mean(p, "teacher_val"),
            "teacher_val_std": res.std(p, "teacher_val"),
            "student_val_mean": res.mean(p, "student:x"),
            "student_val_std": res.std(p, "student:x"),
        }
        for p in pts
    ]
    series = {"accuracy": [(b, t, s) for b, t, s in zip(BETAS, teacher, student)]}
    return ReportBundle("fig2", table, series, checks, _rows(res))


def table3(cfg: TrainConfig | None = None, seeds=DEFAULT_SEEDS) -> ReportBundle:
    cfg = cfg or shipped_config()
    res = run_sweep(cfg, [(0.0, 1.0, 0.0)], seeds=seeds, bank_modes=("learnable", "frozen"))
    lp, fp = ("learnable", 0.0, 1.0, 0.0), ("frozen", 0.0, 1.0, 0.0)
    failures = sum(r.error is not None for r in res.rows)
    checks = [TrendCheck("runs complete", failures == 0, f"{failures} failed runs")]
    for key, label in (("teacher_val", "teacher"), ("student:m+x", "student")):
        lm, fm = res.mean(lp, key), res.mean(fp, key)
        checks.append(
            TrendCheck(
                f"{label} val learnable >= frozen",
                lm >= fm,
                f"{_std_detail(res, lp, key)} vs {_std_detail(res, fp, key)}",
            )
        )
    table = [
        {
            "bank": p[0],
            "teacher_val_mean": res.mean(p, "teacher_val"),
            "teacher_val_std": res.std(p, "teacher_val"),
            "student_val_mean": res.mean(p, "student:m+x"),
            "student_val_std": res.std(p, "student:m+x"),
            "bank_mean_cos": res.mean(p, "bank_mean_cos") if p[0] == "learnable" else 1.0,
        }
        for p in (lp, fp)
    ]
    return ReportBundle("table3", table, {}, checks, _rows(res))


def fig3(cfg: TrainConfig | None = None, seeds=DEFAULT_SEEDS, n_steps: int = 64, samples: int = 100,
         sweep: SweepResult | None = None) -> ReportBundle:
    cfg = cfg or shipped_config()
    res = sweep or leakage_sweep(cfg, seeds, attribution_steps=n_steps, attribution_samples=samples)
    noise = [res.mean(p, "image_share") for p in axis_points("noise", BETAS)]
    wn = [res.mean(p, "image_share") for p in axis_points("wn", BETAS)]
    noise_text = [1 - v for v in noise]
    wn_text = [1 - v for v in wn]
    rho = float(spearmanr(BETAS, noise)[0])
    strictly = all(b > a for a, b in zip(noise, noise[1:]))
    failures = sum(r.error is not None for r in res.rows)
    checks = [
        TrendCheck("runs complete", failures == 0, f"{failures} failed runs"),
        TrendCheck(
            "image_share strictly increases along the noise axis",
            strictly and rho > 0,
            " < ".join(f"{v:.4f}" for v in noise) + f" (rho={rho:.3f})",
        ),
        TrendCheck(
            "wn text_share >= noise text_share at matched beta",
            all(w >= n for w, n in zip(wn_text, noise_text)),
            ", ".join(f"b={b}: {w:.4f} vs {n:.4f}" for b, w, n in zip(BETAS, wn_text, noise_text)),
        ),
    ]
    table = [
        {"beta": b, "noise_image_share": n, "noise_text_share": 1 - n, "wn_image_share": w, "wn_text_share": 1 - w}
        for b, n, w in zip(BETAS, noise, wn)
    ]
    series = {"noise": list(zip(BETAS, noise, noise_text)), "wn": list(zip(BETAS, wn, wn_text))}
    return ReportBundle("fig3", table, series, checks, _rows(res))


def run_experiment(name: str, cfg: TrainConfig | None = None, seeds=DEFAULT_SEEDS) -> ReportBundle:
    fn = {"table2": table2, "fig2": fig2, "table3": table3, "fig3": fig3}[name]
    return fn(cfg, seeds=seeds)


def load_or_shipped(path: str | Path | None) -> TrainConfig:
    return load_config(path) if path else shipped_config()
