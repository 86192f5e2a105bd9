"""faceaudit: fairness auditing and bias mitigation for face classifiers.

Capabilities: deterministic adversarial variants of a labeled face corpus,
demographic accuracy/disparity audits over pluggable prediction backends,
Grad-CAM explanations of the local model, and few-shot / triplet-contrastive
fine-tuning to reduce measured disparity.
"""

from .audit import AuditReport, GroupKey, GroupMetrics, disparity_from_cells, run_audit
from .backends import (
    BackendDescriptor,
    LocalModelBackend,
    Prediction,
    PredictionCache,
    RateLimiter,
    predict,
    predict_batch,
)
from .corpus import (
    FaceRecord,
    Manifest,
    SplitSpec,
    VariantKind,
    build_holdout,
    ingest,
    normalize_crop,
    region_of,
    sample_kshot,
)
from .explain import SaliencyMap, gradcam, group_average_map, region_profile
from .mitigation import (
    TrainingConfig,
    TripletSpec,
    build_triplets,
    contrastive_train,
    finetune_kshot,
    triplet_loss,
    two_stage_country,
)
from .model import (
    Checkpoint,
    ClassifierConfig,
    embed,
    forward,
    load_checkpoint,
    new_checkpoint,
    save_checkpoint,
    train_step,
)
from .variants import (
    apply_mask,
    generate_variants,
    greyscale,
    rgb_noise,
    spread,
)

__version__ = "0.1.0"
