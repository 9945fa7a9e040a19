"""Example-based image synthesis by randomised patch-prior upscaling, plus scoring tools."""
from .assess import (
    LlConfig,
    ParzenModel,
    ScoreReport,
    SpreadConfig,
    image_log_likelihood,
    log_likelihoods,
    originality,
    originality_batch,
    patch_log_density,
    rank_aware_log_density,
    spread,
)
from .dictionary import ContextSpec, LayerBank, PatchDictionary, build_dictionaries, knn_batch, knn_query
from .errors import (
    BoundsError,
    ConfigurationError,
    DimensionError,
    IngestionError,
    NumericalError,
    PatchSynthError,
)
from .image import PatchLocation, build_pyramid, downsample, upsample_bilinear
from .schedule import PRESETS, SynthesisSchedule, load_schedule
from .synthesis import RunRecord, SynthesisModel, make_seed, synthesize, synthesize_batch

__version__ = "0.1.0"
