"""Matrix factorization with convolutional image priors on users and items."""

from .data import (
    ImageStore,
    RatingsDataset,
    SparseRatings,
    SplitSpec,
    UserImageBundle,
    build_user_bundles,
    filter_dataset,
    load_images,
    load_ratings,
    split_dataset,
)
from .evaluation import GridSpec, compare_models, evaluate, grid_search, image_count_sweep, rmse
from .factorization import (
    Checkpoint,
    Hyperparams,
    ModelKind,
    NetworkConfig,
    joint_loss,
    pmf_loss,
    predict,
    train,
    update_item_factors,
    update_user_factors,
)
from .network import Tower
from .synthetic import SyntheticConfig, generate_synthetic

__version__ = "0.1.0"
