"""Occlusion, CAM, Grad-CAM and integrated-gradients saliency maps for small
numpy CNNs, with synthetic scenes and goal-based evaluation."""

from .attribution import (
    SaliencyMap,
    cam_map,
    completeness_residual,
    gradcam_map,
    integrated_gradients_map,
    occlusion_map,
    sensitivity_probe,
    upsample_bilinear,
)
from .estimators import (
    CAMExplainer,
    CNNClassifier,
    GradCAMExplainer,
    IntegratedGradientsExplainer,
    OcclusionExplainer,
)
from .goals import GoalMetricConfig, GoalReport, goal_report
from .io import export_saliency, read_pgm, write_pgm
from .layers import Conv2D, Dense, Flatten, GlobalAvgPool, MaxPool2D, ReLU, ShapeError, softmax
from .network import (
    Network,
    backward_from_class,
    build_network,
    finite_difference_gradient,
    gapnet_layers,
    network_forward,
    permute_channels,
    plainnet_layers,
)
from .scenes import Scene, SceneSpec, generate_dataset, generate_scene
from .training import TrainConfig, predict, train_sgd
from .weights import load_weights, save_weights

__version__ = "0.1.0"
