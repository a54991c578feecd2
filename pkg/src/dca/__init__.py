"""Desk-scale exemplar-free incremental object detection.

The detector decodes localization first and recognition second, guides
recognition with per-class semantic query tokens, fuses a linear and a
semantic classifier head, and preserves old-class behaviour across phases
with pseudo labels plus hybrid knowledge distillation.
"""

from .datagen import (BoxAnnotation, Corpus, CorpusSpec, DetectionSample,
                      IncrementalProtocol, PhaseDataset, build_protocol,
                      generate_corpus, load_corpus, load_protocol, phase_view,
                      save_corpus, save_protocol, visible_view)
from .detector import (Detection, ForwardOutput, ModelConfig, ModelState,
                       decode_localization, decode_recognition, duplex_fusion,
                       expand_head, extract_features, forward, init_state,
                       load_state, postprocess, predict_boxes, save_state)
from .evaluation import (EvalReport, average_precision, class_agnostic_recall,
                         evaluate_model, forgetting_report, gap_metrics, giou,
                         iou, mean_average_precision, old_class_accuracy)
from .matching_losses import (LossBreakdown, MatchAssignment, MatchWeights,
                              PseudoLabelSet, Targets, consistency_loss,
                              detection_loss, hungarian_match,
                              kd_output_loss, masked_feature_distill,
                              match_cost, pseudo_label, total_loss)
from .semantics import (SemanticTable, fill_template, load_embedding_table,
                        lookup, save_embedding_table, synth_embeddings)
from .trainer import (AdamW, PhaseResult, TrainConfig, joint_upper_bound,
                      run_protocol, snapshot_old, train_phase)

__version__ = "0.1.0"
