"""posefuse: hand-pose training-data generation toolkit.

Retrieval of best-matching poses from a bank (affine-aligned pairwise
difference similarity with product-quantization acceleration), compositing
onto real backgrounds with consistent keypoint annotations, loss scoring,
and keypoint evaluation metrics.
"""

from .affine import Affine2D, Match, fit_affine, retrieve_exact, similarity
from .errors import PosefuseError
from .imageops import (
    ColorHistogram,
    CompositeJob,
    Image,
    blur_average,
    color_histogram,
    composite,
    edge_map,
    load_png,
    save_png,
)
from .losses import LossReport, LossWeights, color_loss, gan_objective, shape_loss, ta_loss
from .metrics import PckCurve, PredictionSet, epe, pck, pck_curve, stb_root_convert
from .pose import (
    FEATURE_DIM,
    JOINT_COUNT,
    HandPose,
    extract_feature,
    extract_features_batch,
    load_poses_jsonl,
    normalize_feature,
    parse_pose,
    save_poses_jsonl,
)
from .pq import (
    PQIndex,
    SearchParams,
    adc_distances,
    adc_search,
    encode,
    load_index,
    retrieve_pq,
    save_index,
    train_codebooks,
)
from .toygan import (
    ProceduralSample,
    TinyNet,
    ToyConfig,
    TrainingReport,
    backward,
    forward,
    gen_procedural_sample,
    train_toy_gan,
)

__version__ = "0.1.0"
