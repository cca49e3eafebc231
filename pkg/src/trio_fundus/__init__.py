"""Per-disease fundus image detectors built from three feature networks.

Each disease gets its own bundle: two binary CNN heads and a siamese
embedding produce features that are concatenated, reduced with PCA and
classified by a five-member voting ensemble.
"""

from .dataset import DISEASE_NAMES, DISEASES, NORMAL

__version__ = "0.1.0"

__all__ = ["DISEASES", "DISEASE_NAMES", "NORMAL", "__version__"]
