"""Parametric 3D keypoint edits turned into 2D drag instructions, and a latent drag optimiser."""

from .evalharness import (DragInstruction, SyntheticSpec, generate_synthetic_case, mean_distance,
                          run_benchmark)
from .features import FeatureExtractor, detect_points, loss_gradient, patch_l1, sample_patch
from .optimizer import DragConfig, DragState, run_drag
from .scene3d import (CameraPose, ReferenceObject, TranslationRuleSet, camera_matrix, load_reference,
                      project_pairs, render_wireframe, translate_points)

__version__ = "0.1.0"
