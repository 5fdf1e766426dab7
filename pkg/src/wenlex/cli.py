"""Command-line pipeline: dataset synthesis, pretraining, database building,
training, generation, evaluation, ablation grids, and report rendering.

Exit codes: 0 success, 2 configuration error, 3 missing upstream artifact,
4 numeric failure (non-finite guard tripped).
"""

import argparse
import dataclasses
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .codec import TextCodec
from .config import Config, config_hash, dump_toml, load_config
from .domain import dataset_from_jsonl, dataset_to_jsonl
from .losses import NleDatabase
from .metrics import MetricsReport, evaluate_run
from .models import Classifier, load_checkpoint, save_checkpoint
from .tensor import NonFiniteError
from .trainer import (
    Explanation, MissingArtifactError, build_database, generate_explanations,
    load_run_models, log_to_csv, make_schema, make_splits, pretrain_classifier,
    save_run_checkpoint, train_wenlex,
)

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


def _write(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _manifest(out_dir, command, cfg, config_path):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config_file": str(config_path) if config_path else None,
        "config_sha256": config_hash(cfg),
        "output_dir": str(out_dir),
        "written_at": datetime.now(timezone.utc).isoformat(),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    _write(out_dir / "config.toml", dump_toml(cfg))


def _load_cfg(args, overrides=None):
    try:
        return load_config(getattr(args, "config", None), overrides=overrides)
    except (ValueError, KeyError, OSError) as exc:
        raise ConfigError(str(exc)) from exc


def _flag_overrides(args, mapping):
    overrides = {}
    for attr, key in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = value
    return overrides


def _require(path, producer):
    if not Path(path).exists():
        raise MissingArtifactError(f"missing artifact {path}; produce it with `{producer}`")
    return Path(path)


def _load_dataset(data_dir, schema):
    splits = {}
    for split in ("train", "val", "test"):
        path = _require(Path(data_dir) / f"{split}.jsonl", "wenlex synth-data")
        splits[split] = dataset_from_jsonl(path.read_text(), schema)
    return splits


def _schema_snapshot(schema):
    return json.dumps({
        "diagnosis_labels": list(schema.diagnosis_labels),
        "evidence_labels": list(schema.evidence_labels),
        "image_shape": list(schema.image_shape),
        "noise_sigma": schema.noise_sigma,
        "tau_read": schema.tau_read,
        "class_intensity": list(schema.class_intensity),
        "class_jitter": list(schema.class_jitter),
        "n_intensity_levels": schema.n_intensity_levels,
        "render_rules": {lb: {"quadrant": r.quadrant, "shape": r.shape}
                         for lb, r in sorted(schema.render_rules.items())},
    }, indent=1, sort_keys=True)


# ---------------------------------------------------------------------------
# commands

def cmd_synth_data(args):
    overrides = _flag_overrides(args, {"seed": "data.seed"})
    cfg = _load_cfg(args, overrides)
    _manifest(args.out, "synth-data", cfg, args.config)
    schema = make_schema(cfg)
    splits = make_splits(cfg, schema)
    for split, images in splits.items():
        _write(Path(args.out) / f"{split}.jsonl", dataset_to_jsonl(images, split, schema))
    _write(Path(args.out) / "schema.json", _schema_snapshot(schema))
    print(f"wrote {', '.join(f'{k}={len(v)}' for k, v in splits.items())} to {args.out}")
    return EXIT_OK


def cmd_pretrain(args):
    overrides = _flag_overrides(args, {"seed": "pretrain.seed", "epochs": "pretrain.epochs"})
    cfg = _load_cfg(args, overrides)
    _manifest(args.out, "pretrain", cfg, args.config)
    schema = make_schema(cfg)
    splits = _load_dataset(args.data, schema)
    clf, info = pretrain_classifier(cfg, schema, splits)
    save_checkpoint(Path(args.out) / "classifier.wnlx", clf.state_arrays("clf"))
    _write(Path(args.out) / "history.json",
           json.dumps(info, indent=1, sort_keys=True))
    from .metrics import macro_auc

    auc, _ = macro_auc(schema, clf, splits["val"])
    print(f"pretrained classifier: best val loss {info['best_val_loss']:.6f}, "
          f"val macro AUC {auc:.4f}")
    return EXIT_OK


def cmd_build_db(args):
    overrides = _flag_overrides(args, {"seed": "train.db_seed", "size": "train.db_size",
                                       "grammar": "train.grammar"})
    cfg = _load_cfg(args, overrides)
    schema = make_schema(cfg)
    codec = TextCodec(schema, dim=cfg.codec.dim, seed=cfg.codec.seed)
    splits = _load_dataset(args.data, schema)
    db = build_database(schema, codec, splits["train"], n=cfg.train.db_size,
                        seed=cfg.train.db_seed, grammar_name=cfg.train.grammar)
    _write(args.out, db.to_json())
    print(f"database: {db.size} explanations per diagnosis "
          f"({cfg.train.grammar} grammar) -> {args.out}")
    return EXIT_OK


_TRAIN_FLAGS = {
    "mode": "train.mode", "plaus": "train.plausibility", "recons": "train.recons",
    "nle_clf": "train.nle_clf", "tap": "train.tap", "seed": "train.seed",
    "epochs": "train.epochs", "grammar": "train.grammar",
}


def _train_overrides(args):
    overrides = {}
    for attr, key in _TRAIN_FLAGS.items():
        value = getattr(args, attr, None)
        if value is None:
            continue
        if attr == "mode":
            value = value.replace("-", "_")
        if attr == "plaus":
            value = {"adv": "adversarial", "mmd": "mmd"}.get(value, value)
        if attr in ("recons", "nle_clf"):
            value = value == "on"
        overrides[key] = value
    return overrides


def cmd_train(args):
    cfg = _load_cfg(args, _train_overrides(args))
    _manifest(args.out, "train", cfg, args.config)
    schema = make_schema(cfg)
    codec = TextCodec(schema, dim=cfg.codec.dim, seed=cfg.codec.seed)
    splits = _load_dataset(args.data, schema)
    db = NleDatabase.from_json(_require(args.db, "wenlex build-db").read_text())
    classifier = None
    if cfg.train.mode == "post_hoc":
        path = _require(args.classifier, "wenlex pretrain")
        classifier = Classifier(schema, seed=0)
        classifier.load_state_arrays(load_checkpoint(path), "clf")
    artifacts = train_wenlex(cfg, schema, codec, classifier, db, splits)
    out = Path(args.out)
    save_run_checkpoint(out / "checkpoint.wnlx", artifacts)
    _write(out / "train_log.csv", log_to_csv(artifacts.log_rows))
    summary = {
        "mode": artifacts.mode, "plausibility": artifacts.plausibility,
        "grammar": artifacts.grammar, "tap": artifacts.tap,
        "best_val_loss": artifacts.best_val_loss, "best_epoch": artifacts.best_epoch,
        "final_val_loss": artifacts.final_val_loss, "sync_steps": artifacts.sync_steps,
        "classifier_hash_before": artifacts.classifier_hash_before,
        "classifier_hash_after": artifacts.classifier_hash_after,
    }
    _write(out / "summary.json", json.dumps(summary, indent=1, sort_keys=True))
    print(f"trained {artifacts.mode}/{artifacts.plausibility}: "
          f"best val loss {artifacts.best_val_loss:.6f} (epoch {artifacts.best_epoch})")
    return EXIT_OK


def _explanations_to_jsonl(explanations, counts):
    lines = [json.dumps({"counts": counts}, sort_keys=True)]
    for e in explanations:
        lines.append(json.dumps({
            "image_index": e.image_index, "image_seed": e.image_seed,
            "diagnosis": e.diagnosis, "embedding": list(map(float, e.embedding)),
            "tokens": list(e.tokens),
            "pred_states": list(e.prediction.states),
            "pred_probs": [list(p) for p in e.prediction.probs],
            "target_states": list(e.target.states),
        }, sort_keys=True))
    return "\n".join(lines) + "\n"


def _explanations_from_jsonl(text):
    from .domain import LabelVector

    lines = text.strip().splitlines()
    counts = json.loads(lines[0])["counts"]
    out = []
    for line in lines[1:]:
        r = json.loads(line)
        out.append(Explanation(
            image_index=r["image_index"], image_seed=r["image_seed"],
            diagnosis=r["diagnosis"], embedding=np.array(r["embedding"]),
            tokens=tuple(r["tokens"]),
            prediction=LabelVector(states=tuple(r["pred_states"]),
                                   probs=tuple(tuple(p) for p in r["pred_probs"])),
            target=LabelVector(states=tuple(r["target_states"])),
        ))
    return out, counts


def _run_world(args):
    run_dir = Path(args.run)
    cfg = _load_cfg(argparse.Namespace(config=_require(run_dir / "config.toml", "wenlex train")))
    schema = make_schema(cfg)
    codec = TextCodec(schema, dim=cfg.codec.dim, seed=cfg.codec.seed)
    arrays = load_checkpoint(_require(run_dir / "checkpoint.wnlx", "wenlex train"))
    classifier, generator, text2img, critic = load_run_models(cfg, schema, codec, arrays)
    return run_dir, cfg, schema, codec, classifier, generator


def cmd_generate(args):
    run_dir, cfg, schema, codec, classifier, generator = _run_world(args)
    splits = _load_dataset(args.data, schema)
    images = splits[args.split]
    explanations, counts = generate_explanations(
        schema, codec, classifier, generator, images, grammar_name=cfg.train.grammar)
    _write(run_dir / f"explanations_{args.split}.jsonl",
           _explanations_to_jsonl(explanations, counts))
    print(f"generated {counts['total']} explanations "
          f"({counts['correct']} for correctly classified cases)")
    return EXIT_OK


def _report_csv(report):
    fields = [f.name for f in dataclasses.fields(MetricsReport)]
    row = report.as_row()
    values = ["" if row[f] is None else repr(row[f]) for f in fields]
    return ",".join(fields) + "\n" + ",".join(values) + "\n"


def _report_text(report):
    lines = ["metric                     value", "-" * 33]
    for name, value in report.as_row().items():
        shown = "absent" if value is None else (
            f"{value:.4f}" if isinstance(value, float) else str(value))
        lines.append(f"{name:<26} {shown}")
    return "\n".join(lines) + "\n"


METRIC_FAMILIES = {
    "faithfulness": ("clev_macro_f1", "flip_pct", "flip_pct_random", "delta_p"),
    "simulatability": ("y_given_img", "y_given_nle", "y_given_img_nle"),
    "diversity": ("self_bleu", "retrieval_distance"),
    "plausibility": ("cxbs",),
    "classifier": ("auc",),
    "readability": ("readability_gen", "readability_db"),
}


def _svg_bars(title, named_values):
    # deterministic, dependency-free horizontal bar chart
    width, bar_h, gap, left = 420, 18, 8, 150
    items = [(n, v) for n, v in named_values if v is not None]
    height = 30 + len(items) * (bar_h + gap)
    vmax = max((abs(v) for _, v in items), default=1.0) or 1.0
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<text x="8" y="16" font-family="monospace" font-size="13">{title}</text>']
    y = 28
    for name, value in items:
        w = max(1.0, abs(value) / vmax * (width - left - 60))
        parts.append(f'<text x="8" y="{y + 13}" font-family="monospace" font-size="11">{name}</text>')
        parts.append(f'<rect x="{left}" y="{y}" width="{w:.1f}" height="{bar_h}" fill="#4878a8"/>')
        parts.append(f'<text x="{left + w + 4:.1f}" y="{y + 13}" font-family="monospace" '
                     f'font-size="11">{value:.4g}</text>')
        y += bar_h + gap
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_evaluate(args):
    run_dir, cfg, schema, codec, classifier, generator = _run_world(args)
    splits = _load_dataset(args.data, schema)
    images = splits[args.split]
    dump = _require(run_dir / f"explanations_{args.split}.jsonl", "wenlex generate")
    explanations, counts = _explanations_from_jsonl(dump.read_text())
    db = None
    if args.db:
        db = NleDatabase.from_json(_require(args.db, "wenlex build-db").read_text())
    train_mean = float(np.mean([im.pixels.mean() for im in splits["train"]]))
    report = evaluate_run(schema, codec, classifier, generator, explanations, images,
                          counts, db=db, train_mean_pixel=train_mean)
    _write(run_dir / f"metrics_{args.split}.csv", _report_csv(report))
    _write(run_dir / f"metrics_{args.split}.txt", _report_text(report))
    row = report.as_row()
    for family, names in METRIC_FAMILIES.items():
        svg = _svg_bars(family, [(n, row[n]) for n in names])
        _write(run_dir / "plots" / f"{family}.svg", svg)
    print(_report_text(report), end="")
    return EXIT_OK


def cmd_ablate(args):
    cfg = _load_cfg(args)
    if args.axis not in ("db_size", "tap"):
        raise ConfigError(f"unknown ablation axis '{args.axis}'")
    values = args.values.split(",")
    if args.axis == "db_size":
        values = [int(v) for v in values]
    seeds = [int(s) for s in args.seeds.split(",")]
    out = Path(args.out)
    _manifest(out, "ablate", cfg, args.config)
    schema = make_schema(cfg)
    codec = TextCodec(schema, dim=cfg.codec.dim, seed=cfg.codec.seed)
    splits = _load_dataset(args.data, schema)
    classifier = Classifier(schema, seed=0)
    classifier.load_state_arrays(
        load_checkpoint(_require(args.classifier, "wenlex pretrain")), "clf")
    rows = []
    fields = [f.name for f in dataclasses.fields(MetricsReport)]
    train_mean = float(np.mean([im.pixels.mean() for im in splits["train"]]))
    for value in values:
        per_seed = []
        for seed in seeds:
            member = dataclasses.replace(cfg.train)
            member.seed = seed
            if args.axis == "db_size":
                member.db_size = value
            else:
                member.tap = value
                member.recons = True  # the tap axis only matters with the loss on
            member_cfg = Config(data=cfg.data, domain=cfg.domain, codec=cfg.codec,
                                pretrain=cfg.pretrain, train=member)
            db = build_database(schema, codec, splits["train"], n=member.db_size,
                                seed=member.db_seed, grammar_name=member.grammar)
            artifacts = train_wenlex(member_cfg, schema, codec, classifier, db, splits)
            clf2, gen2, _, _ = load_run_models(member_cfg, schema, codec, artifacts.checkpoint)
            explanations, counts = generate_explanations(
                schema, codec, clf2, gen2, splits["test"], grammar_name=member.grammar)
            report = evaluate_run(schema, codec, clf2, gen2, explanations,
                                  splits["test"], counts, db=db,
                                  train_mean_pixel=train_mean)
            per_seed.append(report.as_row())
            partial = {"axis": args.axis, "value": value, "seed": seed}
            partial.update({k: per_seed[-1][k] for k in fields})
            rows.append(partial)
            _write(out / "members.json", json.dumps(rows, indent=1, sort_keys=True,
                                                    default=float))
        print(f"{args.axis}={value}: {len(per_seed)} seeds done")
    lines = ["axis,value," + ",".join(f"{f}_mean,{f}_std" for f in fields)]
    for value in values:
        members = [r for r in rows if r["value"] == value]
        cells = [args.axis, str(value)]
        for f in fields:
            vals = [m[f] for m in members if m[f] is not None]
            if vals:
                cells.append(repr(float(np.mean(vals))))
                cells.append(repr(float(np.std(vals))))
            else:
                cells.extend(["", ""])
        lines.append(",".join(cells))
    _write(out / f"ablation_{args.axis}.csv", "\n".join(lines) + "\n")
    print(f"wrote {out / f'ablation_{args.axis}.csv'}")
    return EXIT_OK


def cmd_report(args):
    runs = []
    for run in args.runs:
        path = _require(Path(run) / f"metrics_{args.split}.csv", "wenlex evaluate")
        header, values = path.read_text().strip().splitlines()
        parsed = dict(zip(header.split(","), values.split(",")))
        runs.append((Path(run).name, parsed))
    if not runs:
        raise MissingArtifactError("report needs at least one evaluated run")
    fields = [f.name for f in dataclasses.fields(MetricsReport)]
    name_w = max(len(f) for f in fields) + 2
    col_w = max(max(len(name) for name, _ in runs) + 2, 12)
    lines = [" " * name_w + "".join(name.ljust(col_w) for name, _ in runs)]
    for f in fields:
        row = f.ljust(name_w)
        for _, parsed in runs:
            raw = parsed.get(f, "")
            shown = "absent" if raw == "" else (
                f"{float(raw):.4f}" if "." in raw or "e" in raw else raw)
            row += shown.ljust(col_w)
        lines.append(row)
    table = "\n".join(lines) + "\n"
    out = Path(args.out)
    _write(out / "comparison.txt", table)
    for family, names in METRIC_FAMILIES.items():
        named = []
        for run_name, parsed in runs:
            for m in names:
                raw = parsed.get(m, "")
                if raw != "":
                    named.append((f"{run_name}:{m}", float(raw)))
        _write(out / "plots" / f"{family}.svg", _svg_bars(family, named))
    print(table, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing

def build_parser():
    parser = argparse.ArgumentParser(prog="wenlex",
                                     description="synthetic weak-supervision explanation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--config", default=None, help="TOML configuration file")
        if out:
            p.add_argument("--out", required=True)

    p = sub.add_parser("synth-data", help="render the dataset splits")
    common(p)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_synth_data)

    p = sub.add_parser("pretrain", help="pretrain the classifier being explained")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("build-db", help="sample the ground-truth explanation database")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--grammar", choices=["medical", "layman"], default=None)
    p.set_defaults(fn=cmd_build_db)

    p = sub.add_parser("train", help="train the explanation generator")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--db", required=True)
    p.add_argument("--classifier", default=None,
                   help="pretrained checkpoint (required for post-hoc mode)")
    p.add_argument("--mode", choices=["post-hoc", "in-model"], default=None)
    p.add_argument("--plaus", choices=["mmd", "adv"], default=None)
    p.add_argument("--recons", choices=["on", "off"], default=None)
    p.add_argument("--nle-clf", dest="nle_clf", choices=["on", "off"], default=None)
    p.add_argument("--tap", choices=["block1", "block2", "block3", "gap", "heads"],
                   default=None)
    p.add_argument("--grammar", choices=["medical", "layman"], default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("generate", help="decode explanations for a split")
    p.add_argument("--run", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("evaluate", help="compute the full metric report")
    p.add_argument("--run", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--db", default=None)
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("ablate", help="run an ablation grid with aggregates")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--classifier", required=True)
    p.add_argument("--axis", required=True)
    p.add_argument("--values", required=True, help="comma-separated axis values")
    p.add_argument("--seeds", required=True, help="comma-separated seeds")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("report", help="side-by-side comparison of evaluated runs")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_report)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingArtifactError, FileNotFoundError) as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except NonFiniteError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
