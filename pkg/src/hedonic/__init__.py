"""Property valuation from tabular features and overhead imagery.

Three architectures (closed-form hedonic regression, tabular MLP, and a
one-stage tabular+image fusion CNN), occlusion-based heatmap explanations,
a Web-Mercator tile client, and a synthetic ground-truth dataset generator
for end-to-end verification.
"""

from .data import (
    DatasetSplit,
    FeatureSchema,
    PropertyRecord,
    apply_normalizer,
    fit_normalizer,
    load_image_patch,
    load_tabular_csv,
    split_dataset,
)
from .explain import Heatmap, OcclusionSpec, normalize_heatmap, occlusion_sweep
from .models import (
    ModelConfig,
    build_model,
    linreg_fit,
    linreg_predict,
    load_checkpoint,
    predict,
    save_checkpoint,
)
from .synth import SynthSpec, generate_synthetic_dataset
from .tiles import (
    TileClient,
    TileClientConfig,
    TileCoord,
    compose_patch,
    ground_resolution,
    latlon_to_pixel_xy,
    pixel_to_tile,
    quadkey_to_tile,
    tile_to_quadkey,
)
from .training import Metrics, TrainingConfig, TrainReport, compare_models, evaluate_metrics, train

__version__ = "0.1.0"

__all__ = [
    "DatasetSplit", "FeatureSchema", "PropertyRecord", "apply_normalizer",
    "fit_normalizer", "load_image_patch", "load_tabular_csv", "split_dataset",
    "Heatmap", "OcclusionSpec", "normalize_heatmap", "occlusion_sweep",
    "ModelConfig", "build_model", "linreg_fit", "linreg_predict",
    "load_checkpoint", "predict", "save_checkpoint",
    "SynthSpec", "generate_synthetic_dataset",
    "TileClient", "TileClientConfig", "TileCoord", "compose_patch",
    "ground_resolution", "latlon_to_pixel_xy", "pixel_to_tile",
    "quadkey_to_tile", "tile_to_quadkey",
    "Metrics", "TrainingConfig", "TrainReport", "compare_models",
    "evaluate_metrics", "train",
]
