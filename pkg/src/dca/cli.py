"""Command-line entry point.

Subcommands: gen-data, embed-classes, train, eval, analyze-forgetting,
sweep-beta. Every run lands in a fresh numbered directory under the run root
(flag --run-root or env DCA_RUN_ROOT, default ./runs) with a manifest written
before any training starts, so a finished run is reproducible from its
manifest alone.

Exit codes: 0 success, 1 usage error, 2 data/configuration error, 3 numeric
failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import datagen, evaluation, semantics, trainer
from .detector import ModelConfig, load_state
from .errors import DCAError, FormatError, NumericError
from .evaluation import (evaluate_model, forgetting_report, gap_metrics,
                         write_feature_csv, write_forgetting_csv)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _run_root(args) -> Path:
    if getattr(args, "run_root", None):
        return Path(args.run_root)
    return Path(os.environ.get("DCA_RUN_ROOT", "runs"))


def _new_run_dir(root: Path) -> Path:
    root.mkdir(parents=True, exist_ok=True)
    taken = {p.name for p in root.iterdir() if p.is_dir()}
    n = 1
    while f"run-{n:04d}" in taken:
        n += 1
    run_dir = root / f"run-{n:04d}"
    run_dir.mkdir()
    return run_dir


def _config_hash(payload: dict) -> str:
    canon = json.dumps(payload, sort_keys=True)
    return hashlib.sha256(canon.encode()).hexdigest()


def write_manifest(run_dir: Path, command: str, config: dict, paths: dict) -> dict:
    for name, p in paths.items():
        if p is not None and not Path(p).exists():
            raise FormatError(f"{name} path {p} does not exist")
    manifest = {
        "run_id": run_dir.name,
        "command": command,
        "config": config,
        "paths": {k: str(v) if v is not None else None for k, v in paths.items()},
        "config_hash": _config_hash(config),
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest


# -- data plumbing ----------------------------------------------------------------


def _load_dataset(data_dir: Path):
    train = datagen.load_corpus(data_dir / "train")
    held = datagen.load_corpus(data_dir / "eval")
    protocol = datagen.load_protocol(data_dir / "protocol.json", train.taxonomy)
    return train, held, protocol


def _load_table(source: str, taxonomy, dim: int, seed: int):
    if source == "synthetic":
        return semantics.synth_embeddings(taxonomy, dim=dim, seed=seed)
    if source.startswith("file:"):
        return semantics.load_embedding_table(source[5:], taxonomy)
    raise FormatError(f"semantic source {source!r} is neither 'synthetic' nor 'file:<path>'")


def _parse_ablation(text: str) -> dict:
    """'HKD=off,kd_vis=on' -> {'hkd': False, 'kd_vis': True}"""
    known = {"dlr", "srd", "dcf", "hkd", "kd_out", "kd_vis", "kd_proj",
             "pseudo_labels"}
    out = {}
    if not text:
        return out
    for item in text.split(","):
        if "=" not in item:
            raise FormatError(f"ablation item {item!r} is not FLAG=on|off")
        key, value = item.split("=", 1)
        key = key.strip().lower()
        if key not in known:
            raise FormatError(f"unknown ablation flag {key!r}; known: {sorted(known)}")
        value = value.strip().lower()
        if value not in ("on", "off", "true", "false"):
            raise FormatError(f"ablation value for {key} must be on/off")
        out[key] = value in ("on", "true")
    return out


def _build_train_config(args) -> trainer.TrainConfig:
    if args.config:
        payload = json.loads(Path(args.config).read_text())
        cfg = trainer.TrainConfig.from_dict(payload)
    else:
        cfg = trainer.TrainConfig()
    overrides = {}
    for name in ("epochs", "batch_size", "lr", "seed", "beta"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    overrides.update(_parse_ablation(args.ablate or ""))
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    model_over = {}
    for flag, field in (("model_dim", "d"), ("decoder_layers", "decoder_layers"),
                        ("queries", "num_queries")):
        value = getattr(args, flag, None)
        if value is not None:
            model_over[field] = value
    if model_over:
        cfg = dataclasses.replace(cfg, model=dataclasses.replace(cfg.model,
                                                                 **model_over))
    return cfg


# -- subcommands --------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    shapes, colors = datagen.parse_class_grid(args.classes)
    spec = datagen.CorpusSpec(n_samples=args.samples, image_size=args.image_size,
                              shapes=shapes, colors=colors,
                              max_objects=args.max_objects, noise=args.noise,
                              seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    corpus = datagen.generate_corpus(spec)
    datagen.save_corpus(corpus, out / "train")
    eval_spec = dataclasses.replace(spec, n_samples=args.eval_samples,
                                    seed=spec.seed + 10_000)
    datagen.save_corpus(datagen.generate_corpus(eval_spec), out / "eval")
    split = [int(s) for s in args.split.split(",")]
    protocol = datagen.build_protocol(corpus.taxonomy, split)
    datagen.save_protocol(protocol, out / "protocol.json")
    config = {"spec": dataclasses.asdict(spec), "eval_samples": args.eval_samples,
              "split": split}
    write_manifest(out, "gen-data", config,
                   {"train": out / "train", "eval": out / "eval",
                    "protocol": out / "protocol.json"})
    print(f"wrote corpus ({len(corpus.taxonomy)} classes, {args.samples} train / "
          f"{args.eval_samples} eval samples) under {out}")
    return EXIT_OK


def cmd_embed_classes(args) -> int:
    corpus = datagen.load_corpus(Path(args.data) / "train")
    if args.validate:
        table = semantics.load_embedding_table(args.validate, corpus.taxonomy)
        semantics.check_table(table, corpus.taxonomy)
        print(f"{args.validate}: {table.num_classes} classes, dim {table.dim}, "
              "all rows unit-norm")
        return EXIT_OK
    table = semantics.synth_embeddings(corpus.taxonomy, dim=args.dim,
                                       seed=args.seed)
    semantics.save_embedding_table(table, args.out)
    print(f"wrote synthetic embedding table ({table.num_classes} classes, "
          f"dim {table.dim}) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    data_dir = Path(args.data)
    train_corpus, held, protocol = _load_dataset(data_dir)
    if args.protocol == "joint":
        protocol = datagen.build_protocol(train_corpus.taxonomy,
                                          [len(train_corpus.taxonomy)])
    elif args.protocol:
        protocol = datagen.load_protocol(args.protocol, train_corpus.taxonomy)
    cfg = _build_train_config(args)
    table = _load_table(args.semantic_source, train_corpus.taxonomy,
                        cfg.model.d_se, cfg.seed)
    run_dir = _new_run_dir(_run_root(args))
    write_manifest(run_dir, "train", cfg.to_dict(),
                   {"data": data_dir, "protocol_file":
                    None if args.protocol in (None, "joint")
                    else args.protocol})
    (run_dir / "semantic_source.txt").write_text(args.semantic_source)
    results, upper = trainer.run_protocol(train_corpus, held, protocol, table,
                                          cfg, run_dir=run_dir,
                                          with_upper_bound=args.with_upper_bound)
    final = results[-1].report
    print(f"{run_dir}: {len(results)} phase(s); final all-class mAP50 "
          f"{final.map50:.3f}, mAP {final.map_coco:.3f}")
    return EXIT_OK


def _latest_phase_checkpoint(run_dir: Path, phase: int | None):
    ck_dir = run_dir / "checkpoints"
    if not ck_dir.exists():
        raise FormatError(f"{run_dir} has no checkpoints directory")
    if phase is None:
        candidates = sorted(ck_dir.glob("phase_*.npz"),
                            key=lambda p: int(p.stem.split("_")[1]))
        if not candidates:
            raise FormatError(f"{ck_dir} holds no phase checkpoints")
        return candidates[-1]
    path = ck_dir / f"phase_{phase}.npz"
    if not path.exists():
        raise FormatError(f"missing checkpoint {path}")
    return path


def _table_for_run(run_dir: Path, taxonomy, d_se: int, seed: int):
    source_file = run_dir / "semantic_source.txt"
    source = source_file.read_text().strip() if source_file.exists() else "synthetic"
    return _load_table(source, taxonomy, d_se, seed)


def cmd_eval(args) -> int:
    run_dir = Path(args.run)
    _, held, protocol = _load_dataset(Path(args.data))
    ck = _latest_phase_checkpoint(run_dir, args.phase)
    state = load_state(ck)
    table = _table_for_run(run_dir, protocol.taxonomy, state.config.d_se,
                           args.seed)
    t = state.phase
    view = datagen.visible_view(held, protocol, t)
    old_ids = protocol.visible_classes(t - 1) if t > 1 else None
    report = evaluate_model(state, table, view.samples, old_class_ids=old_ids)
    if args.upper_bound:
        upper_report_path = sorted(Path(args.upper_bound).glob("report_phase_*.json"))
        if not upper_report_path:
            raise FormatError(f"{args.upper_bound} holds no phase reports")
        upper = json.loads(upper_report_path[-1].read_text())
        report.abs_gap, report.rel_gap = gap_metrics(report.map_coco,
                                                     upper["map_coco"])
    out = Path(args.out) if args.out else run_dir / f"eval_phase_{t}.json"
    out.write_text(report.to_json())
    print(f"phase {t}: mAP50 {report.map50:.3f} mAP {report.map_coco:.3f} "
          f"recall {report.class_agnostic_recall} -> {out}")
    return EXIT_OK


def cmd_analyze_forgetting(args) -> int:
    run_dir = Path(args.run)
    _, held, protocol = _load_dataset(Path(args.data))
    ck_dir = run_dir / "checkpoints"
    checkpoints = sorted(ck_dir.glob("phase_*.npz"),
                         key=lambda p: int(p.stem.split("_")[1]))
    if not checkpoints:
        raise FormatError(f"{ck_dir} holds no phase checkpoints")
    state = load_state(checkpoints[0])
    table = _table_for_run(run_dir, protocol.taxonomy, state.config.d_se,
                           args.seed)
    rows, features = forgetting_report(checkpoints, held.samples, protocol, table)
    out_dir = Path(args.out_dir) if args.out_dir else run_dir
    write_forgetting_csv(rows, out_dir / "forgetting.csv")
    write_feature_csv(features, out_dir / "features.csv")
    for row in rows:
        cells = ", ".join(f"{k} {row[k]:.3f}" for k in
                          ("recall_seen", "acc_seen") if row[k] is not None)
        print(f"phase {row['phase']}: {cells}")
    print(f"wrote {out_dir / 'forgetting.csv'} and {out_dir / 'features.csv'}")
    return EXIT_OK


def cmd_sweep_beta(args) -> int:
    run_dir = Path(args.run)
    _, held, protocol = _load_dataset(Path(args.data))
    ck = _latest_phase_checkpoint(run_dir, None)
    state = load_state(ck)
    table = _table_for_run(run_dir, protocol.taxonomy, state.config.d_se,
                           args.seed)
    t = state.phase
    view = datagen.visible_view(held, protocol, t)
    betas = [float(b) for b in args.betas.split(",")]
    old_ids = protocol.visible_classes(t - 1) if t > 1 else []
    new_ids = protocol.phases[t - 1]
    rows = []
    for beta in betas:
        report = evaluate_model(state, table, view.samples, beta=beta)
        per = report.per_class_ap
        old_vals = [per[c] for c in old_ids if c in per]
        new_vals = [per[c] for c in new_ids if c in per]
        old_ap = float(np.mean(old_vals)) if old_vals else float("nan")
        new_ap = float(np.mean(new_vals)) if new_vals else float("nan")
        rows.append((beta, report.map50, old_ap, new_ap, (old_ap + new_ap) / 2.0
                     if old_vals and new_vals else float("nan")))
    out = Path(args.out) if args.out else run_dir / "sweep_beta.csv"
    with open(out, "w") as fh:
        fh.write("beta,all,old,new,avg\n")
        for row in rows:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    print(f"wrote {len(rows)}-row sweep to {out}")
    return EXIT_OK


# -- argument wiring ---------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="dca", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic corpus + protocol")
    g.add_argument("--out", required=True)
    g.add_argument("--classes", default="4x5", help="shapes x colors, e.g. 4x5")
    g.add_argument("--samples", type=int, default=2000)
    g.add_argument("--eval-samples", type=int, default=300)
    g.add_argument("--image-size", type=int, default=64)
    g.add_argument("--max-objects", type=int, default=6)
    g.add_argument("--noise", type=float, default=0.1)
    g.add_argument("--split", default="15,5", help="comma phase sizes, e.g. 15,5")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    e = sub.add_parser("embed-classes",
                       help="build a synthetic embedding table or validate a file")
    e.add_argument("--data", required=True, help="gen-data output directory")
    e.add_argument("--out", help="where to write the synthetic table")
    e.add_argument("--validate", help="existing embedding file to check")
    e.add_argument("--dim", type=int, default=64)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_embed_classes)

    t = sub.add_parser("train", help="run the incremental protocol")
    t.add_argument("--data", required=True, help="gen-data output directory")
    t.add_argument("--semantic-source", default="synthetic",
                   help="'synthetic' or 'file:<path>'")
    t.add_argument("--config", help="TrainConfig JSON file")
    t.add_argument("--protocol", help="protocol JSON path or 'joint'")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--beta", type=float)
    t.add_argument("--model-dim", type=int)
    t.add_argument("--decoder-layers", type=int)
    t.add_argument("--queries", type=int)
    t.add_argument("--ablate", help="e.g. HKD=off,SRD=on,kd_vis=off")
    t.add_argument("--with-upper-bound", action="store_true")
    t.add_argument("--run-root")
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("eval", help="evaluate a run's checkpoint")
    v.add_argument("--run", required=True)
    v.add_argument("--data", required=True)
    v.add_argument("--phase", type=int)
    v.add_argument("--upper-bound", help="run directory of a joint upper bound")
    v.add_argument("--out")
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze-forgetting",
                       help="per-phase recall/recognition forgetting report")
    a.add_argument("--run", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--out-dir")
    a.add_argument("--seed", type=int, default=0)
    a.set_defaults(func=cmd_analyze_forgetting)

    s = sub.add_parser("sweep-beta", help="re-score a checkpoint across betas")
    s.add_argument("--run", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--betas", default="0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0")
    s.add_argument("--out")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_sweep_beta)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DCAError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
