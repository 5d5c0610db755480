"""Command-line entry point: ``xmodal <subcommand>``.

Exit codes: 0 success, 2 configuration error, 3 run failure, 4 trend-check failure.
"""
from __future__ import annotations

import csv
import functools
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import click
import numpy as np

from . import records
from .config import TrainConfig, dump_config, from_dict, load_config
from .errors import ConfigError, TrendCheckError, XModalError

EXIT_OK, EXIT_CONFIG, EXIT_RUN, EXIT_TREND = 0, 2, 3, 4
log = logging.getLogger("xmodal")


def _guard(fn):
    """Map library errors onto the documented exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            click.echo(f"config error: {exc}", err=True)
            sys.exit(EXIT_CONFIG)
        except TrendCheckError as exc:
            click.echo(f"trend check failed: {exc}", err=True)
            sys.exit(EXIT_TREND)
        except (XModalError, OSError, RuntimeError, ValueError) as exc:
            click.echo(f"run failed: {type(exc).__name__}: {exc}", err=True)
            sys.exit(EXIT_RUN)

    return wrapper


def _config(path: str | None) -> TrainConfig:
    if path is None:
        from .reproduce import shipped_config

        return shipped_config()
    return load_config(path)


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from exc


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from exc


def _write_config(out: Path, cfg: TrainConfig) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_config(cfg))


@click.group()
@click.option("-v", "--verbose", count=True, help="Repeat for more logging.")
def main(verbose: int) -> None:
    """Crossmodal distillation with relaxed class-name text."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@main.command("gen-data")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="YAML config; its dataset section is used.")
@click.option("--num-classes", type=int)
@click.option("--per-class", type=int, help="Training samples per class (head class when imbalanced).")
@click.option("--imbalance-factor", type=float)
@click.option("--label-noise", type=float)
@click.option("--seed", type=int)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@_guard
def gen_data(config_path, num_classes, per_class, imbalance_factor, label_noise, seed, out):
    """Generate and persist a seeded synthetic dataset."""
    from .training import make_backend, make_catalog, make_dataset, make_lexicon

    cfg = _config(config_path) if config_path else TrainConfig()
    overrides = {
        k: v
        for k, v in {
            "num_classes": num_classes,
            "train_per_class": per_class,
            "imbalance_factor": imbalance_factor,
            "label_noise": label_noise,
            "seed": seed,
        }.items()
        if v is not None
    }
    if overrides:
        lex = {"classes": None} if num_classes is not None else {}
        cfg = cfg.with_overrides(dataset=overrides, lexicon=lex)
    lexicon = make_lexicon(cfg)
    ds = make_dataset(cfg, make_backend(cfg, make_catalog(cfg, lexicon), lexicon))
    ds.save(out)
    counts = np.bincount(ds.train.labels, minlength=ds.spec.num_classes)
    click.echo(f"wrote {len(ds.train)} train / {len(ds.val)} val samples to {out}")
    click.echo("train per class: " + " ".join(f"{c + 1}:{n}" for c, n in enumerate(counts)))


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--backend", type=click.Choice(["mock", "vlm"]), default=None)
@click.option("--cache-dir", type=click.Path(file_okay=False))
@click.option("--text", "texts", multiple=True, help="Prompt to encode (repeatable).")
@click.option("--texts-file", type=click.Path(exists=True, dir_okay=False), help="One prompt per line.")
@click.option("--out", type=click.Path(file_okay=False), required=True)
@_guard
def embed(config_path, backend, cache_dir, texts, texts_file, out):
    """Encode text prompts with the configured backend."""
    from .training import make_backend, make_catalog, make_lexicon

    cfg = _config(config_path)
    over = {k: v for k, v in {"kind": backend, "cache_dir": cache_dir}.items() if v is not None}
    if over:
        cfg = cfg.with_overrides(backend=over)
    prompts = list(texts)
    if texts_file:
        prompts += [ln.strip() for ln in Path(texts_file).read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not prompts:
        raise ConfigError("no prompts given (use --text or --texts-file)")
    lexicon = make_lexicon(cfg)
    enc = make_backend(cfg, make_catalog(cfg, lexicon), lexicon)
    vecs = enc.encode_texts(prompts)
    records.save_arrays(Path(out), {"text": vecs}, {"prompts": prompts, "backend": enc.describe()})
    click.echo(f"encoded {len(prompts)} prompts with {enc.identity} (dim {vecs.shape[1]}) -> {out}")


@main.command()
@click.option("--snapshot", type=click.Path(exists=True, dir_okay=False), help="Offline lexicon (default: shipped mock lexicon).")
@click.option("--wordnet", is_flag=True, help="Query WordNet through nltk instead of a snapshot.")
@click.option("--catalog", type=click.Path(exists=True, dir_okay=False), help="One class name per line.")
@click.option("--per-class-limit", type=int, default=20, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), help="TSV of noun, class, relation (default: stdout).")
@_guard
def lexicon(snapshot, wordnet, catalog, per_class_limit, out):
    """Harvest relaxed noun candidates for a class catalog."""
    from .lexicon import ClassCatalog, SnapshotLexicon, WordNetLexicon, harvest_candidates, mock_class_names, mock_lexicon

    lex = WordNetLexicon() if wordnet else SnapshotLexicon.load(snapshot) if snapshot else mock_lexicon()
    cat = ClassCatalog.load(catalog) if catalog else ClassCatalog(tuple(mock_class_names(lex if not wordnet else None)))
    cands = harvest_candidates(cat, lex, per_class_limit)
    lines = ["noun\tclass\trelation"]
    for noun in cands.nouns:
        for cls, rel in cands.provenance.get(noun, ()):
            lines.append(f"{noun}\t{cls}\t{rel}")
    text = "\n".join(lines) + "\n"
    if out:
        Path(out).write_text(text)
    else:
        click.echo(text, nl=False)
    if cands.skipped:
        click.echo(f"skipped classes: {', '.join(cands.skipped)}", err=True)


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--catalog", type=click.Path(exists=True, dir_okay=False))
@click.option("--snapshot", type=click.Path(exists=True, dir_okay=False))
@click.option("--backend", type=click.Choice(["mock", "vlm"]), default=None)
@click.option("--M", "num_clusters", type=int, help="Number of image clusters (default: number of classes).")
@click.option("--top-k", type=int)
@click.option("--seed", type=int, help="k-means seed.")
@click.option("--out", type=click.Path(file_okay=False), required=True)
@_guard
def relax(config_path, catalog, snapshot, backend, num_clusters, top_k, seed, out):
    """Build the relaxed noun bank from the training-image embeddings."""
    from .lexicon import ClassCatalog
    from .training import build_relaxed_bank, prepare

    cfg = _config(config_path)
    lex_over, relax_over, data_over = {}, {}, {}
    if snapshot:
        lex_over.update(source="snapshot", snapshot=snapshot)
    if catalog:
        lex_over["classes"] = list(ClassCatalog.load(catalog).names)
        data_over["num_classes"] = len(lex_over["classes"])
    if num_clusters is not None:
        relax_over["num_clusters"] = num_clusters
    if top_k is not None:
        relax_over["top_k"] = top_k
    cfg = cfg.with_overrides(
        dataset=data_over, lexicon=lex_over, relaxation=relax_over, backend={"kind": backend} if backend else {}
    )
    if seed is not None:
        cfg = cfg.with_overrides(seeds={"kmeans": seed})
    ctx = prepare(cfg)
    bank, _ = build_relaxed_bank(ctx)
    bank.save(out)
    click.echo(f"bank of {len(bank)} nouns over {bank.num_clusters} clusters -> {out}")
    for row in bank.report_rows():
        click.echo(f"  {row['noun']:<24} cluster {row['cluster']:>3}  sim {row['similarity']:.4f}")


@main.command("train-teachers")
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", type=click.Path(file_okay=False), default="runs/latest", show_default=True)
@_guard
def train_teachers(config_path, out):
    """Train the two image-only teachers."""
    from .models import save_checkpoint
    from .training import prepare, train_unimodal_teachers

    cfg = load_config(config_path)
    out = Path(out)
    _write_config(out, cfg)
    ctx = prepare(cfg)
    members, rec = train_unimodal_teachers(ctx)
    for m in members:
        save_checkpoint(m, out / "teacher_m" / m.policy, {"arch": m.head.arch(), "policy": m.policy, "config": cfg.to_dict()})
    rec.save(out / "records" / "teacher_m.json")
    click.echo(json.dumps(rec.final, sort_keys=True))


@main.command("train-teacher-x")
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", type=click.Path(file_okay=False), default="runs/latest", show_default=True)
@_guard
def train_teacher_x(config_path, out):
    """Build the noun bank and train the multimodal teacher."""
    from .models import save_checkpoint
    from .training import build_relaxed_bank, prepare, train_multimodal_teacher

    cfg = load_config(config_path)
    out = Path(out)
    _write_config(out, cfg)
    ctx = prepare(cfg)
    bank, cm = build_relaxed_bank(ctx)
    tx = train_multimodal_teacher(ctx, bank, cm)
    t = tx.teacher
    save_checkpoint(
        t,
        out / "teacher_x",
        {"arch": t.head.arch(), "modality": t.modality, "d_img": t.d_img, "d_txt": t.d_txt, "config": cfg.to_dict()},
    )
    if tx.bank is not None:
        tx.bank.save(out / "bank")
    tx.record.save(out / "records" / "teacher_x.json")
    click.echo(json.dumps(tx.record.final, sort_keys=True))


@main.command()
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", type=click.Path(file_okay=False), default="runs/latest", show_default=True)
@click.option("--teachers-from", type=click.Path(exists=True, file_okay=False), help="Run directory with saved teachers (default: --out).")
@_guard
def distill(config_path, out, teachers_from):
    """Distill the image-only student; missing teachers are trained first."""
    from .models import save_checkpoint
    from .training import (
        build_relaxed_bank,
        distill_student,
        load_multimodal_teacher,
        load_unimodal_teachers,
        prepare,
        train_multimodal_teacher,
        train_unimodal_teachers,
    )

    cfg = load_config(config_path)
    out = Path(out)
    src = Path(teachers_from) if teachers_from else out
    _write_config(out, cfg)
    ctx = prepare(cfg)
    which = cfg.student.teachers
    members = tx = None
    if "m" in which:
        if (src / "teacher_m" / "strong" / "manifest.json").exists():
            members = load_unimodal_teachers(ctx, src)
        else:
            members, _ = train_unimodal_teachers(ctx)
    if "x" in which:
        if (src / "teacher_x" / "manifest.json").exists():
            tx = load_multimodal_teacher(ctx, src)
        else:
            tx = train_multimodal_teacher(ctx, *build_relaxed_bank(ctx))
    student, rec = distill_student(ctx, members, tx)
    save_checkpoint(student, out / "student", {"arch": student.head.arch(), "config": cfg.to_dict()})
    rec.save(out / "records" / "student.json")
    click.echo(json.dumps(rec.final, sort_keys=True))


@main.command()
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--axis", type=click.Choice(["wn", "noise"]), default="wn", show_default=True)
@click.option("--points", default="0,20,50,80,100", show_default=True, help="Percent of replaced gt text.")
@click.option("--seeds", default="0", show_default=True)
@click.option("--teachers", default="m+x", show_default=True, help="Comma-separated student teacher sets.")
@click.option("--attribution-steps", type=int, help="Also attribute each teacher with this many IG steps.")
@click.option("--out", type=click.Path(file_okay=False), default="runs/sweep", show_default=True)
@_guard
def sweep(config_path, axis, points, seeds, teachers, attribution_steps, out):
    """Run one pipeline per mix proportion and emit a comparison table."""
    from .training import axis_points, run_sweep

    cfg = load_config(config_path)
    pts = axis_points(axis, _floats(points))
    sets = tuple(t.strip() for t in teachers.split(",") if t.strip())
    res = run_sweep(cfg, pts, seeds=_ints(seeds), teacher_sets=sets, attribution_steps=attribution_steps)
    out = Path(out)
    _write_config(out, cfg)
    table = res.table()
    with open(out / "table.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(table[0]))
        w.writeheader()
        w.writerows(table)
    records.dump_json(out / "runs.json", [asdict(r) for r in res.rows])
    for s in sets:
        key = f"student:{s}_mean"
        lines = [f"{100 * p[1 if axis == 'wn' else 2]!r}\t{row['teacher_val_mean']!r}\t{row[key]!r}" for p, row in zip(res.points(), table)]
        (out / f"series_{s.replace('+', '')}.tsv").write_text("\n".join(lines) + "\n")
    for row in table:
        click.echo(f"{row['trial']:<28} teacher {_fmt(row['teacher_val_mean'])}  " + "  ".join(f"{s} {_fmt(row[f'student:{s}_mean'])}" for s in sets))
    failures = [r for r in res.rows if r.error]
    for r in failures:
        click.echo(f"point {r.point} seed {r.seed} failed: {r.error}", err=True)
    if failures:
        sys.exit(EXIT_RUN)


def _fmt(v) -> str:
    return "n/a" if v is None else f"{v:.4f}"


@main.command()
@click.option("--checkpoint", type=click.Path(exists=True, file_okay=False), required=True, help="Run directory holding teacher_x/.")
@click.option("--eval", "eval_path", type=click.Path(exists=True, file_okay=False), help="Dataset directory (default: regenerate from config).")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="Default: config echoed in the checkpoint.")
@click.option("--n-steps", type=int, default=64, show_default=True)
@click.option("--target", type=click.Choice(["predicted", "label"]), default="predicted", show_default=True)
@click.option("--max-samples", type=int)
@click.option("--out", type=click.Path(dir_okay=False), default="report.json", show_default=True)
@_guard
def attribute(checkpoint, eval_path, config_path, n_steps, target, max_samples, out):
    """Integrated-gradients modality shares of a trained multimodal teacher."""
    from .attribution import attribute_teacher
    from .datasets import SyntheticDataset
    from .models import load_state
    from .training import load_multimodal_teacher, prepare

    ckpt = Path(checkpoint)
    if (ckpt / "manifest.json").exists() and not (ckpt / "teacher_x").exists():
        ckpt = ckpt.parent
    if config_path:
        cfg = load_config(config_path)
    else:
        _, meta = load_state(ckpt / "teacher_x")
        cfg = from_dict(meta["config"])
    dataset = SyntheticDataset.load(eval_path) if eval_path else None
    ctx = prepare(cfg, dataset)
    tx = load_multimodal_teacher(ctx, ckpt)
    image, text = tx.inputs("val")
    labels = ctx.dataset.val.labels
    if max_samples is not None:
        image, text, labels = image[:max_samples], text[:max_samples], labels[:max_samples]
    rep = attribute_teacher(
        tx.teacher, image, text, n_steps=n_steps, labels=labels if target == "label" else None,
        trial=tx.record.extra.get("trial", ""),
    )
    rep.save(out)
    series = Path(out).with_name(Path(out).stem + "_shares.tsv")
    series.write_text("".join(f"{i}\t{s[0]!r}\t{s[1]!r}\n" for i, s in enumerate(rep.sample_shares)))
    click.echo(json.dumps(rep.summary(), sort_keys=True))


@main.command()
@click.argument("experiment", type=click.Choice(["table2", "fig2", "table3", "fig3"]))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="Default: shipped leakage config.")
@click.option("--seeds", default="0,1,2,3,4", show_default=True)
@click.option("--out", type=click.Path(file_okay=False), default="reports", show_default=True)
@_guard
def reproduce(experiment, config_path, seeds, out):
    """Run a pre-wired desk-scale experiment and check its trend."""
    from .reproduce import run_experiment

    bundle = run_experiment(experiment, _config(config_path), seeds=_ints(seeds))
    bundle.save(out)
    click.echo(bundle.summary())
    if not bundle.passed:
        failed = "; ".join(c.line() for c in bundle.checks if not c.passed)
        raise TrendCheckError(failed)


if __name__ == "__main__":
    main()
