"""fewsar: robust few-shot classification of SAR-style image chips.

Pipeline: (1) self-supervised pretraining of a convolutional feature
extractor on an unlabeled chip pool; (2) few-shot classifier heads on the
frozen features, optionally with outlier-exposure training; (3)
temperature-scaled max-softmax-probability scoring for out-of-distribution
detection, evaluated episodically with paired basic/OE comparisons.
"""

from .augment import AugmentationConfig, ViewPair, make_view_pair, stage2_augment
from .data import (
    Chip,
    DatasetPool,
    SyntheticSpec,
    generate_synthetic_pool,
    generate_task_pool,
    load_manifest,
    make_fake_data,
    merge_pools,
    save_manifest,
)
from .evaluate import (
    AccuracySummary,
    OODReport,
    export_score_densities,
    run_accuracy_experiment,
    run_eoc_experiment,
    run_ood_experiment,
)
from .fsl import (
    Classifier,
    Episode,
    FSLTrainConfig,
    predict,
    sample_episode,
    train_classifier_basic,
    train_classifier_oe,
    train_scratch_baseline,
)
from .ood import (
    DetectorConfig,
    ScoreSet,
    auroc,
    decide,
    msp_score,
    msp_scores,
    tpr_threshold,
)
from .pretrain import (
    Encoder,
    SSLConfig,
    extract_features,
    load_encoder,
    make_encoder,
    nt_xent_loss,
    pretrain_byol,
    pretrain_simclr,
    save_encoder,
)

__version__ = "0.1.0"
