"""ahdc-lab: adversarial domain mapping and hierarchical dual-consistency segmentation."""

__version__ = "0.1.0"

from ahdc_lab.config import load_config
from ahdc_lab.env import ENV

__all__ = [
    "ENV",
    "load_config",
    "__version__",
]
