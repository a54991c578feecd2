"""Multi-phase incremental training.

Each phase sees only its own class annotations. From phase 2 on, the previous
model is frozen and contributes pseudo labels for old classes plus the hybrid
distillation targets. The classifier head grows by the new classes at every
phase boundary with old rows carried over bit for bit.
"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import matching_losses as ml
from .datagen import Corpus, IncrementalProtocol, PhaseDataset, check_protocol, \
    phase_view, visible_view
from .detector import ModelConfig, ModelState, Tensor, expand_head, forward, \
    init_state, save_state
from .errors import ConfigurationError, CoverageError
from .evaluation import EvalReport, evaluate_model, gap_metrics
from .matching_losses import LossBreakdown, MatchWeights, Targets
from .semantics import SemanticTable


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    lr: float = 2e-4
    weight_decay: float = 1e-4
    backbone_lr_mult: float = 0.1
    clip_norm: float = 0.1
    seed: int = 0
    # ablation switches (architecture + distillation)
    dlr: bool = True            # decoupled localization / recognition passes
    srd: bool = True            # semantic tokens join recognition decoding
    dcf: bool = True            # duplex classifier fusion
    hkd: bool = True            # hybrid knowledge distillation
    kd_out: bool = True
    kd_vis: bool = True
    kd_proj: bool = True
    pseudo_labels: bool = True
    focal_cls: bool = False     # focal classification variant of the BCE term
    lr_final_factor: float = 1.0  # cosine-decay the lr to lr * factor (1 = constant)
    beta: float | None = None   # override of model.beta when set
    pseudo_threshold: float = 0.4
    pseudo_gt_iou_drop: float = 0.7
    eval_top_k: int = 50
    match_weights: MatchWeights = field(default_factory=MatchWeights)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        for name in ("epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        for name in ("lr", "clip_norm"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be >= 0")

    def resolve_model(self) -> ModelConfig:
        return dataclasses.replace(
            self.model, decoupled=self.dlr, semantic_queries=self.srd,
            duplex=self.dcf,
            beta=self.model.beta if self.beta is None else self.beta)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["model"] = self.model.to_dict()
        out["match_weights"] = dataclasses.asdict(self.match_weights)
        return out

    @classmethod
    def from_dict(cls, payload: dict) -> "TrainConfig":
        payload = dict(payload)
        if "model" in payload:
            payload["model"] = ModelConfig.from_dict(payload["model"])
        if "match_weights" in payload:
            payload["match_weights"] = MatchWeights(**payload["match_weights"])
        return cls(**payload)


@dataclass
class PhaseResult:
    phase_index: int
    checkpoint_path: str | None
    epoch_losses: list
    report: EvalReport | None = None


class AdamW:
    """Adaptive moments with decoupled weight decay.

    The conv stem runs at a reduced learning rate (backbone multiplier);
    decay skips vectors and scalars (biases, norms, the fusion temperature).
    """

    def __init__(self, state: ModelState, cfg: TrainConfig,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.state = state
        self.cfg = cfg
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.lr_scale = 1.0
        self.m = {k: np.zeros_like(v) for k, v in state.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in state.params.items()}

    def _lr(self, name: str) -> float:
        mult = self.cfg.backbone_lr_mult if name.startswith("stem.") else 1.0
        return self.cfg.lr * mult * self.lr_scale

    def step(self, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, p in self.state.params.items():
            g = grads.get(name)
            if g is None:
                continue
            self.m[name] = self.b1 * self.m[name] + (1.0 - self.b1) * g
            self.v[name] = self.b2 * self.v[name] + (1.0 - self.b2) * g * g
            update = (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)
            lr = self._lr(name)
            if p.ndim > 1 and self.cfg.weight_decay > 0:
                p -= lr * self.cfg.weight_decay * p
            p -= lr * update


def clip_gradients(grads: dict, max_norm: float) -> float:
    """Scale all gradients in place so their global L2 norm is <= max_norm."""
    total = 0.0
    for g in grads.values():
        total += float((g * g).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def snapshot_old(state: ModelState) -> ModelState:
    """Frozen copy of the current model; callers bind it without gradients."""
    return state.clone()


def _column_index(visible_class_ids) -> dict:
    return {int(cid): col for col, cid in enumerate(visible_class_ids)}


def _build_targets(samples, col_of: dict) -> list:
    out = []
    for sample in samples:
        cols = [col_of[ann.class_id] for ann in sample.annotations]
        boxes = [ann.box for ann in sample.annotations]
        out.append(Targets(columns=np.asarray(cols, dtype=np.int64),
                           boxes=np.asarray(boxes, dtype=np.float64)))
    return out


def _augment_with_pseudo(targets: list, pseudo_sets: list, col_of: dict) -> list:
    out = []
    for tgt, pseudo in zip(targets, pseudo_sets):
        if pseudo is None or len(pseudo) == 0:
            out.append(tgt)
            continue
        cols = np.concatenate([tgt.columns,
                               [col_of[int(c)] for c in pseudo.class_ids]])
        boxes = np.concatenate([tgt.boxes, pseudo.boxes], axis=0)
        out.append(Targets(columns=cols.astype(np.int64), boxes=boxes,
                           n_real=len(tgt.columns)))
    return out


def _detection_terms(out, targets, weights, extra_outputs=(), focal=False):
    """Match and score the main output plus any auxiliary decoder levels."""
    assignments = []
    for i, tgt in enumerate(targets):
        cost = ml.match_cost(out.p.data[i], out.boxes.data[i], tgt, weights)
        assignments.append(ml.hungarian_match(cost))
    l_cls, l_l1, l_giou = ml.detection_loss(out, targets, assignments, weights,
                                            focal)
    for boxes_l, p_l in extra_outputs:
        aux_asg = []
        for i, tgt in enumerate(targets):
            cost = ml.match_cost(p_l.data[i], boxes_l.data[i], tgt, weights)
            aux_asg.append(ml.hungarian_match(cost))
        fake = dataclasses.replace(out, p=p_l, boxes=boxes_l)
        a_cls, a_l1, a_giou = ml.detection_loss(fake, targets, aux_asg, weights,
                                                focal)
        l_cls = l_cls + a_cls
        l_l1 = l_l1 + a_l1
        l_giou = l_giou + a_giou
    return l_cls, l_l1, l_giou, assignments


def train_phase(state: ModelState, phase_data: PhaseDataset,
                old_state: ModelState | None, table: SemanticTable,
                cfg: TrainConfig, csv_writer=None) -> tuple[ModelState, PhaseResult]:
    """Optimize one phase; returns the trained state and its loss series."""
    t = phase_data.phase_index
    missing = [c for c in state.visible_class_ids if c >= table.num_classes]
    if missing:
        raise CoverageError(f"semantic table has no rows for classes {missing}")
    if t > 1 and old_state is None and (cfg.pseudo_labels or cfg.hkd):
        raise ConfigurationError("phase > 1 with pseudo labels or distillation "
                                 "requires the previous model")
    col_of = _column_index(state.visible_class_ids)
    k_old = old_state.num_classes if old_state is not None else 0
    use_old = old_state is not None and (cfg.pseudo_labels or cfg.hkd) and t > 1
    rng = np.random.default_rng([cfg.seed, 211, t])
    opt = AdamW(state, cfg)
    samples = phase_data.samples
    epoch_losses = []
    for epoch in range(cfg.epochs):
        if cfg.lr_final_factor < 1.0 and cfg.epochs > 1:
            frac = epoch / (cfg.epochs - 1)
            opt.lr_scale = cfg.lr_final_factor + 0.5 * (1.0 - cfg.lr_final_factor) \
                * (1.0 + np.cos(np.pi * frac))
        order = rng.permutation(len(samples))
        sums = {name: 0.0 for name in LossBreakdown.FIELDS}
        n_batches = 0
        for lo in range(0, len(order), cfg.batch_size):
            batch = [samples[i] for i in order[lo:lo + cfg.batch_size]]
            breakdown = _train_step(state, batch, old_state if use_old else None,
                                    table, cfg, opt, col_of, k_old, t)
            for name in LossBreakdown.FIELDS:
                sums[name] += getattr(breakdown, name)
            n_batches += 1
        means = LossBreakdown(**{n: sums[n] / n_batches for n in LossBreakdown.FIELDS})
        epoch_losses.append(means)
        if csv_writer is not None:
            csv_writer.writerow([t, epoch] + [repr(getattr(means, n))
                                              for n in LossBreakdown.FIELDS])
    return state, PhaseResult(phase_index=t, checkpoint_path=None,
                              epoch_losses=epoch_losses)


def _train_step(state, batch, old_state, table, cfg, opt, col_of, k_old, phase):
    images = np.stack([s.image for s in batch])
    targets = _build_targets(batch, col_of)

    pseudo_sets = [None] * len(batch)
    old_out = None
    if old_state is not None:
        old_out = forward(old_state, images, table)
        pseudo_sets = [
            ml.pseudo_labels_from_output(
                old_out.image(i), old_state.visible_class_ids,
                cfg.pseudo_threshold,
                current_gt_boxes=targets[i].boxes,
                overlap_iou=cfg.pseudo_gt_iou_drop, top_k=cfg.eval_top_k)
            for i in range(len(batch))]
    if cfg.pseudo_labels and old_state is not None:
        targets = _augment_with_pseudo(targets, pseudo_sets, col_of)

    params = state.bind(True)
    out = forward(state, images, table, params=params)
    weights = cfg.match_weights
    l_cls, l_l1, l_giou, assignments = _detection_terms(out, targets, weights,
                                                        out.aux, cfg.focal_cls)
    terms = {"cls": l_cls, "box_l1": l_l1, "box_giou": l_giou}

    if cfg.srd and out.e_se:
        q_raw = table.lookup(state.visible_class_ids)
        q_adapted = Tensor(q_raw) @ params["adapter.w"] + params["adapter.b"]
        terms["cons"] = ml.consistency_loss(q_adapted, out.e_se)

    if old_state is not None and cfg.hkd:
        _kd_terms(terms, out, old_out, pseudo_sets, targets, assignments,
                  cfg, k_old)

    total, breakdown = ml.total_loss(terms, phase)
    total.backward()
    grads = {name: t.grad for name, t in params.items() if t.grad is not None}
    clip_gradients(grads, cfg.clip_norm)
    opt.step(grads)
    return breakdown


def _kd_terms(terms, out, old_out, pseudo_sets, targets, assignments, cfg,
              k_old):
    n_old = sum(len(p) for p in pseudo_sets if p is not None)
    fg_pairs = [(b, int(q)) for b, p in enumerate(pseudo_sets)
                if p is not None for q in p.source_query]
    if cfg.kd_out:
        terms["kd_out"] = ml.kd_output_loss(out, old_out, fg_pairs, k_old,
                                            cfg.match_weights)
    if n_old == 0:
        return
    batch_size, n_queries = out.p.shape[0], out.p.shape[1]
    query_mask = np.zeros((batch_size, n_queries), dtype=bool)
    for b, (tgt, asg) in enumerate(zip(targets, assignments)):
        for q, j in asg.pairs:
            if j >= tgt.n_real:  # matched to a pseudo label
                query_mask[b, q] = True
    if cfg.kd_vis:
        n_tokens = out.v_e.shape[1]
        side = int(round(np.sqrt(n_tokens)))
        token_mask = np.zeros((batch_size, n_tokens), dtype=bool)
        for b, pseudo in enumerate(pseudo_sets):
            if pseudo is not None and len(pseudo):
                token_mask[b] = ml.token_mask_for_boxes(side, side, pseudo.boxes)
        terms["kd_vis"] = (
            ml.masked_feature_distill(out.v_e, old_out.v_e, token_mask, n_old)
            + ml.masked_feature_distill(out.e_cls, old_out.e_cls, query_mask, n_old))
    if cfg.kd_proj:
        terms["kd_proj"] = ml.masked_feature_distill(out.e_proj, old_out.e_proj,
                                                     query_mask, n_old)


METRIC_COLUMNS = ["phase", "epoch", "l_det", "l_cls", "l_box_l1", "l_box_giou",
                  "l_cons", "l_kd_out", "l_kd_vis", "l_kd_proj", "l_total"]


def run_protocol(train_corpus: Corpus, eval_corpus: Corpus,
                 protocol: IncrementalProtocol, table: SemanticTable,
                 cfg: TrainConfig, run_dir: str | Path | None = None,
                 with_upper_bound: bool = False):
    """Sequential phase training with held-out evaluation after every phase.

    Returns (phase_results, upper_bound_result_or_None). When `run_dir` is
    given, checkpoints, per-epoch metrics CSV, and per-phase reports are
    persisted there; partial results stay on disk if a later phase aborts.
    """
    check_protocol(protocol)
    run_dir = Path(run_dir) if run_dir is not None else None
    writer, fh = None, None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "checkpoints").mkdir(exist_ok=True)
        fh = open(run_dir / "metrics.csv", "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)

    model_cfg = cfg.resolve_model()
    results: list[PhaseResult] = []
    state: ModelState | None = None
    try:
        for t in range(1, protocol.num_phases + 1):
            data = phase_view(train_corpus, protocol, t)
            old = None
            if t == 1:
                state = init_state(model_cfg, protocol.visible_classes(1), cfg.seed)
            else:
                old = snapshot_old(state)
                state = expand_head(state, protocol.phases[t - 1], cfg.seed)
            state, result = train_phase(state, data, old, table, cfg, writer)
            if fh is not None:
                fh.flush()
            if run_dir is not None:
                path = run_dir / "checkpoints" / f"phase_{t}.npz"
                save_state(state, path)
                result.checkpoint_path = str(path)
            held_out = visible_view(eval_corpus, protocol, t)
            old_ids = protocol.visible_classes(t - 1) if t > 1 else None
            result.report = evaluate_model(state, table, held_out.samples,
                                           old_class_ids=old_ids,
                                           top_k=cfg.eval_top_k)
            if run_dir is not None:
                (run_dir / f"report_phase_{t}.json").write_text(
                    result.report.to_json())
            results.append(result)
    finally:
        if fh is not None:
            fh.close()

    upper = None
    if with_upper_bound:
        upper = joint_upper_bound(train_corpus, eval_corpus, protocol, table, cfg,
                                  run_dir)
        final = results[-1].report
        final.abs_gap, final.rel_gap = gap_metrics(final.map_coco,
                                                   upper.report.map_coco)
        if run_dir is not None:
            (run_dir / f"report_phase_{len(results)}.json").write_text(
                final.to_json())
    return results, upper


def joint_upper_bound(train_corpus: Corpus, eval_corpus: Corpus,
                      protocol: IncrementalProtocol, table: SemanticTable,
                      cfg: TrainConfig, run_dir: str | Path | None = None
                      ) -> PhaseResult:
    """Train once on all classes jointly with the same total epoch budget."""
    from .datagen import build_protocol

    joint = build_protocol(protocol.taxonomy, [len(protocol.taxonomy)])
    joint_cfg = dataclasses.replace(cfg, epochs=cfg.epochs * protocol.num_phases)
    sub_dir = Path(run_dir) / "upper_bound" if run_dir is not None else None
    results, _ = run_protocol(train_corpus, eval_corpus, joint, table, joint_cfg,
                              run_dir=sub_dir, with_upper_bound=False)
    return results[0]
