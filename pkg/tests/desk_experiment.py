"""Shared desk-scale incremental experiment used by the acceptance tests.

One 20-class corpus with a [10, 10] protocol, trained under seven flag
variants (naive fine-tune, pseudo-label baseline, single-module ablations,
full method). Phase-1 checkpoints are shared between variants with the same
architecture flags, and every result is cached on disk keyed by the
experiment configuration hash, so repeated pytest runs reuse finished work.

Run directly to populate the cache:  python tests/desk_experiment.py
Set DCA_FORCE_RERUN=1 to ignore the cache.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from dca import datagen, detector, semantics, trainer
from dca.datagen import build_protocol, generate_corpus, phase_view, visible_view
from dca.evaluation import (_subset_recall, evaluate_model,
                            recognition_accuracy)

CACHE_DIR = Path(__file__).parent / "_experiment_cache"

CORPUS = dict(n_samples=2000, image_size=32, max_objects=2, noise=0.08, seed=5)
EVAL_CORPUS = dict(n_samples=300, image_size=32, max_objects=2, noise=0.08, seed=99)
SPLIT = [10, 10]
TABLE = dict(dim=32, seed=0)
MODEL = dict(d=64, decoder_layers=3, num_queries=16, n_heads=4, d_se=32,
             encoder_layers=2, aux_supervision=True)
# pseudo threshold sits below the spec default: focal-trained fused scores on
# this corpus peak near 0.2-0.4, and the baseline needs live pseudo labels
TRAIN = dict(epochs=25, batch_size=16, seed=1, lr=1e-3, focal_cls=True,
             lr_final_factor=0.05, pseudo_threshold=0.2)

# (dlr, srd, dcf, hkd, pseudo_labels)
VARIANTS = {
    "naive": (False, False, False, False, False),
    "baseline": (False, False, False, False, True),
    "dlr": (True, False, False, False, True),
    "srd": (False, True, False, False, True),
    "dlr_srd": (True, True, False, False, True),
    "dlr_srd_dcf": (True, True, True, False, True),
    "full": (True, True, True, True, True),
}


def config_hash() -> str:
    payload = json.dumps([CORPUS, EVAL_CORPUS, SPLIT, TABLE, MODEL, TRAIN,
                          {k: list(v) for k, v in VARIANTS.items()}],
                         sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:12]


def _build_cfg(flags) -> trainer.TrainConfig:
    dlr, srd, dcf, hkd, pseudo = flags
    return trainer.TrainConfig(dlr=dlr, srd=srd, dcf=dcf, hkd=hkd,
                               pseudo_labels=pseudo,
                               model=detector.ModelConfig(**MODEL), **TRAIN)


def _data():
    corpus = generate_corpus(datagen.CorpusSpec(**CORPUS))
    held = generate_corpus(datagen.CorpusSpec(**EVAL_CORPUS))
    protocol = build_protocol(corpus.taxonomy, SPLIT)
    table = semantics.synth_embeddings(corpus.taxonomy, **TABLE)
    return corpus, held, protocol, table


def _query_outputs(state, table, samples, batch=16):
    boxes, probs = [], []
    for lo in range(0, len(samples), batch):
        chunk = samples[lo:lo + batch]
        out = detector.forward(state, np.stack([s.image for s in chunk]), table)
        for i in range(len(chunk)):
            boxes.append(out.boxes.data[i])
            probs.append(out.p.data[i])
    return boxes, probs


def _phase_metrics(state, table, samples, protocol, t) -> dict:
    seen = protocol.visible_classes(t)
    old = protocol.visible_classes(t - 1) if t > 1 else []
    future = protocol.future_classes(t)
    boxes, probs = _query_outputs(state, table, samples)
    gt = [([a.class_id for a in s.annotations], [a.box for a in s.annotations])
          for s in samples]
    out = {
        "recall_seen": _subset_recall(boxes, samples, seen),
        "recall_future": _subset_recall(boxes, samples, future) if future else None,
        "recall_old": _subset_recall(boxes, samples, old) if old else None,
        "acc_seen": recognition_accuracy(boxes, probs, gt, seen,
                                         state.visible_class_ids),
        "acc_old": recognition_accuracy(boxes, probs, gt, old,
                                        state.visible_class_ids) if old else None,
    }
    return out


def _mean_ap_over(report, class_ids):
    vals = [report.per_class_ap[c] for c in class_ids if c in report.per_class_ap]
    return float(np.mean(vals)) if vals else 0.0


def _phase1_state(arch_key, cache: Path, corpus, protocol, table, log):
    name = "p1_" + "".join("t" if b else "f" for b in arch_key)
    path = cache / f"{name}.npz"
    if path.exists():
        return detector.load_state(path)
    cfg = _build_cfg(arch_key + (False, False))
    data = phase_view(corpus, protocol, 1)
    state = detector.init_state(cfg.resolve_model(), protocol.visible_classes(1),
                                cfg.seed)
    t0 = time.time()
    state, _ = trainer.train_phase(state, data, None, table, cfg)
    log(f"phase-1 {name} trained in {time.time() - t0:.0f}s")
    detector.save_state(state, path)
    return detector.load_state(path)


def _variant_summary(name, flags, cache: Path, corpus, held, protocol, table,
                     log) -> dict:
    out_path = cache / f"{name}.json"
    if out_path.exists():
        return json.loads(out_path.read_text())
    arch_key = flags[:3]
    state1 = _phase1_state(arch_key, cache, corpus, protocol, table, log)
    cfg = _build_cfg(flags)

    held1 = visible_view(held, protocol, 1)
    # recall/accuracy splits need the raw eval samples: future-class ground
    # truth must stay visible for the generalization probe
    phase1 = _phase_metrics(state1, table, held.samples, protocol, 1)
    rep1 = evaluate_model(state1, table, held1.samples)

    old = trainer.snapshot_old(state1)
    state2 = detector.expand_head(state1, protocol.phases[1], cfg.seed)
    data2 = phase_view(corpus, protocol, 2)
    t0 = time.time()
    state2, _ = trainer.train_phase(state2, data2, old if (flags[3] or flags[4])
                                    else None, table, cfg)
    log(f"phase-2 {name} trained in {time.time() - t0:.0f}s")

    held2 = visible_view(held, protocol, 2)
    rep2 = evaluate_model(state2, table, held2.samples,
                          old_class_ids=protocol.visible_classes(1))
    phase2 = _phase_metrics(state2, table, held.samples, protocol, 2)
    summary = {
        "flags": list(flags),
        "phase1": {**phase1, "map50": rep1.map50},
        "phase2": {
            **phase2,
            "map50_all": rep2.map50,
            "map50_old": _mean_ap_over(rep2, protocol.visible_classes(1)),
            "map50_new": _mean_ap_over(rep2, protocol.phases[1]),
            "recall": rep2.class_agnostic_recall,
            "old_acc": rep2.old_class_accuracy,
        },
    }
    out_path.write_text(json.dumps(summary, indent=1))
    return summary


def run_all(log=print) -> dict:
    cache = CACHE_DIR / config_hash()
    if os.environ.get("DCA_FORCE_RERUN") == "1" and cache.exists():
        import shutil
        shutil.rmtree(cache)
    cache.mkdir(parents=True, exist_ok=True)
    summary_path = cache / "summary.json"
    if summary_path.exists():
        return json.loads(summary_path.read_text())
    corpus, held, protocol, table = _data()
    summary = {}
    for name, flags in VARIANTS.items():
        summary[name] = _variant_summary(name, flags, cache, corpus, held,
                                         protocol, table, log)
        log(f"variant {name}: phase-2 all-mAP50 "
            f"{summary[name]['phase2']['map50_all']:.3f}")
    summary_path.write_text(json.dumps(summary, indent=1))
    return summary


def get_summary() -> dict:
    return run_all(log=lambda *_: None)


if __name__ == "__main__":
    t0 = time.time()
    final = run_all()
    print(json.dumps({k: v["phase2"]["map50_all"] for k, v in final.items()},
                     indent=1))
    print(f"total {time.time() - t0:.0f}s", file=sys.stderr)
