"""Region-separated contrastive pretraining and distillation for CT segmentation.

The pipeline separates CT slices into superpixel regions, pretrains a
region-level contrastive model, clusters regions into pseudo-organ
subsets, distills per-subset teachers into one student encoder, and
fine-tunes a U-Net from that encoder.
"""

from .errors import ConfigError, FormatError, SepaRegError, StageError, ValidationError
from .imaging_io import (
    DatasetManifest,
    ImageSlice,
    SyntheticSpec,
    Volume,
    extract_slices,
    generate_synthetic_dataset,
    load_volume,
    save_volume,
)
from .superpixel import (
    RegionRecord,
    RegionSetManifest,
    SlicConfig,
    SuperpixelLabelMap,
    build_region_set,
    extract_regions,
    regular_separation,
    slic_segment,
)
from .nets import (
    Checkpoint,
    NetworkSpec,
    load_checkpoint,
    make_encoder,
    make_predictor,
    make_projector,
    make_unet,
    save_checkpoint,
)
from .contrastive import (
    AugmentationPolicy,
    PretrainConfig,
    collapse_metric,
    cosine_similarity_loss,
    pretrain_inter,
    simsiam_loss,
)
from .organcluster import ClusterModel, cluster_purity, embed_regions, fit_cluster_model, kmeans, split_region_set
from .distill import DistillConfig, TeacherBundle, distill, inter_loss, intra_loss, pretrain_intra
from .finetune_eval import (
    FinetuneConfig,
    MetricsReport,
    dice_loss,
    dsc,
    evaluate,
    finetune,
    hd95,
    predict_volume,
)
from .pipeline import AblationSection, RunConfig, RunLedger, run, summarize_runs

__version__ = "0.1.0"
