"""pcarmor: a desk-scale workbench for attacking and defending point-cloud classifiers.

The pieces compose in pipeline order: geometry builds synthetic labeled clouds,
model trains a compact permutation-invariant classifier with hand-derived
gradients, attacks crafts shifted/added/dropped adversarial clouds, defense
answers with a k-nearest-neighbor vote in the classifier's own feature space,
and harness measures everything into deterministic reports.
"""

__version__ = "0.1.0"

from .geometry import PointCloud, ShapeSpec, build_dataset, generate_shape  # noqa: F401
from .model import ModelConfig, ModelWeights, predict, train  # noqa: F401
from .attacks import AttackConfig, AdvExample, attack  # noqa: F401
from .defense import DefenseConfig, DefenseVerdict, build_feature_db, defend_classify  # noqa: F401
