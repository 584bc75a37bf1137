"""Desk-scale unsupervised domain adaptation.

An exactly invertible affine style map pairs a labeled source domain with a
manufactured target domain; a frozen source CNN guides the target CNN through
attention alignment while modified EM self-training exploits the unlabeled
target streams.
"""

from .translation import (
    Direction,
    GanLossInputs,
    StyleMapConfig,
    StyleMapParams,
    analytic_translate,
    build_style_map,
    cycle_consistency_loss,
    cyclegan_full_loss,
    gan_adversarial_loss,
)
from .datagen import (
    Batch,
    BatchComposition,
    Dataset,
    Domain,
    compose_batch,
    load_idx_dataset,
    make_domain_pair_datasets,
    synth_glyph_dataset,
)
from .model import (
    ConvLayerSpec,
    ConvNetSpec,
    Network,
    ParamsSnapshot,
    build_network,
    convnet_spec,
    load_checkpoint,
    predict_probs,
    save_checkpoint,
    snapshot_params,
    sync_params,
)
from .attention import (
    alignment_loss_for_batch,
    attention_alignment_loss,
    attention_discrepancy_loss,
    attention_map,
    normalize_attention,
)
from .discrepancy import KernelSet, attention_l1_distance, gaussian_mmd, joint_mmd, median_heuristic_kernels
from .em_trainer import (
    EMConfig,
    MetricsRecord,
    PosteriorBatch,
    ScheduleConfig,
    TrainFlags,
    TrainerState,
    em_loss,
    estimate_posterior,
    full_objective,
    maybe_sync_posterior,
    run_training,
    supervised_ce_loss,
    train_step,
)
from .harness import (
    DatasetConfig,
    DomainBundle,
    ExperimentConfig,
    build_bundle,
    cmd_ablate,
    cmd_adapt,
    cmd_compare_measures,
    cmd_sweep,
    cmd_train_source,
    cmd_visualize,
    evaluate_accuracy,
    export_attention_overlay,
)

__version__ = "0.1.0"
