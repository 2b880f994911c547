"""Semi-supervised semantic segmentation with a two-student cohort.

A small convolutional segmenter and a small patch-attention segmenter are
trained jointly on a few labeled images plus a pool of unlabeled ones.  The
students exchange knowledge through two consistency losses: a bidirectional
KL term between their pixel-wise predictions, and an MSE term between their
prototype-similarity maps built from each other's pseudo labels.
"""

from segcohort.models import (
    AttentionStudent,
    ConvStudent,
    StudentConfig,
    StudentOutput,
    build_student,
    patchify,
    pseudo_labels,
    unpatchify,
)
from segcohort.prototypes import (
    ClassPrototypes,
    class_prototypes,
    cross_feature_consistency,
    downsample_labels,
    prototype_similarity_map,
    similarity_mse,
)
from segcohort.losses import (
    LossBundle,
    cross_distillation_loss,
    dice_loss,
    kl_divergence,
    rampup,
    supervised_loss,
    total_loss,
)
from segcohort.data import (
    LabeledBatch,
    Partition,
    SegSample,
    UnlabeledBatch,
    cutmix,
    generate_shapes_dataset,
    load_dataset,
    partition_dataset,
    save_dataset,
)
from segcohort.evaluation import accumulate_confusion, evaluate_pair, miou, new_confusion
from segcohort.training import TrainState, load_checkpoint, poly_lr, save_checkpoint, train, train_step

__version__ = "0.1.0"
