"""Point-cloud semantic segmentation with geometric features and contrastive boundary learning."""

from ._geoseg import *  # noqa: F401,F403

__version__ = "0.1.0"
