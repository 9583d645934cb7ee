"""pointbox: upgrade single-point object annotations into pseudo boxes.

The pipeline predicts per-category semantic scores from per-pixel features
(optionally guided by category prototypes pooled from single-object images),
then grows instance labels from the annotated points along minimum-cost
paths over the semantic and edge maps. Synthetic scenes with exact ground
truth back the evaluation and study tooling.
"""

from .core import (
    AssignmentMap,
    Box,
    ImageAnnotations,
    ImageGrid,
    LabColor,
    PointAnnotation,
    load_annotations,
    load_image,
    load_pseudo_labels,
    rle_decode,
    rle_encode,
    save_image,
    srgb_to_lab,
    stream_rng,
    write_annotations,
)
from .features import (
    FeatureMap,
    FilterBankSpec,
    extract_features,
    load_features,
    save_features,
)
from .semantic import (
    AggregatorParams,
    PrototypeBank,
    PredictorParams,
    SemanticMap,
    aggregate,
    encode_prototypes,
    load_checkpoint,
    masked_average_pool,
    prototype_similarity_matrix,
    predict_semantic,
    predict_semantic_plain,
    save_checkpoint,
)
from .losses import (
    AffinityGraph,
    LossReport,
    build_affinity,
    color_prior_loss,
    grad_check,
    negative_loss,
    positive_loss,
    total_loss,
)
from .instances import (
    CostMap,
    EdgeMap,
    LabelGenConfig,
    LabelGenResult,
    PseudoInstance,
    assign,
    bilinear_upsample,
    compute_cost_map,
    extract_instances,
    likelihood_maps,
    neighbor_cost,
    generate_instance_labels,
    sobel_edge_map,
)
from .metrics import MiouReport, evaluate, iou
from .scenes import (
    Scene,
    SceneSpec,
    adjacent_pair_scene,
    copy_paste_synthesize,
    generate_scene,
    indicator_semantics,
    place_objects_scene,
    sample_dataset_specs,
    scene_to_annotations,
)
from .studies import LAMBDA_GRID, density_study, lambda_sweep, shift_and_fuse, write_study_csv
from .training import (
    TrainConfig,
    TrainResult,
    TrainSample,
    TrainedModel,
    init_params,
    predict_scores,
    train,
    write_training_log,
)
from .errors import (
    ConfigError,
    FormatError,
    PointboxError,
    TrainingDivergedError,
    ValidationError,
)

__version__ = "0.1.0"
