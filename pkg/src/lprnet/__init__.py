"""Self-supervised masked-autoencoder features for rigid point cloud registration."""

from .cloud import PointCloud, load_cloud, save_cloud, normalize, normalize_pair, ground_filter, build_dsm
from .evaluation import EvalReport, dsm_diff, rmse_nn, rmse_t, run_ablation_suite
from .geometry import RigidTransform, compose, invert, se3_exp, se3_log
from .network import MaskedAutoencoder, NetworkConfig, chamfer_l2
from .registration import ICLKConfig, LearnedFeature, MomentFeature, iclk_register, icp_register
from .simdata import SimPairSpec, base_cloud_library, generate_pair
from .training import TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "PointCloud", "load_cloud", "save_cloud", "normalize", "normalize_pair", "ground_filter",
    "build_dsm", "EvalReport", "dsm_diff", "rmse_nn", "rmse_t", "run_ablation_suite",
    "RigidTransform", "compose", "invert", "se3_exp", "se3_log", "MaskedAutoencoder",
    "NetworkConfig", "chamfer_l2", "ICLKConfig", "LearnedFeature", "MomentFeature",
    "iclk_register", "icp_register", "SimPairSpec", "base_cloud_library", "generate_pair",
    "TrainConfig", "load_checkpoint", "save_checkpoint", "train",
]
