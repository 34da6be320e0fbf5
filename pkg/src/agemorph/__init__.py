"""Identity-preserving age transformation on procedural brain phantoms."""

from .agecode import (
    AgeCodeConfig,
    expected_age,
    expected_age_batch,
    kl_age_loss,
    normalize_age,
    soft_label,
    soft_label_batch,
)
from .image import Image, augment, center_crop
from .losses import (
    LossWeights,
    NonFiniteLossError,
    adv_d_loss,
    adv_g_loss,
    cycle_loss,
    feature_cosine,
    identity_loss,
    rec_loss,
    rec_weight,
    total_generator_loss,
)
from .nets import AgeTransformer, Encoder, EncoderFeatures, NetworkConfig, transform_image
from .critic import PatchCritic
from .phantom import (
    DatasetManifest,
    PhantomIdentity,
    SubjectRecord,
    build_dataset,
    generate_phantom,
    render_record,
    skull_mask,
    ventricle_area,
)
from .train import (
    AblationConfig,
    FrozenSnapshot,
    TrainConfig,
    Trainer,
    freeze_snapshot,
    load_transformer,
    run_training,
    sample_targets,
)
from .evaluate import (
    MetricReport,
    PadReport,
    aging_trajectory,
    difference_map,
    evaluate_pairs,
    export_features,
    load_regressor,
    mse,
    pad_metric,
    psnr,
    ssim,
    train_age_regressor,
)
from .volio import (
    load_manifest,
    load_volume,
    read_grid,
    save_manifest,
    save_png,
    save_volume,
    write_grid,
)

__version__ = "0.1.0"
