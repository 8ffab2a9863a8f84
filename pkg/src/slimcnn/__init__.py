"""A numpy-only slim CNN for four-stage dementia MRI classification, with Grad-CAM."""

from .gradcam import gradcam_heatmap, render_cases, superimpose
from .model import Model, build_slim_cnn, load_checkpoint, save_checkpoint
from .training import fit, init_weights

__version__ = "0.1.0"
