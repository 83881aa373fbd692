"""Toy training stack for the masked-inference engine.

Trains BagNet-style models (small-kernel valid convolutions, GAP + linear
head) on procedurally generated datasets, folds normalization into the conv
weights, and exports the weight bundles and tensor-file datasets that the
engine consumes.  The engine is only ever driven through its file formats
and CLI, never imported.
"""

from bagnetlite.data import DATASETS, generate_image, make_split
from bagnetlite.model import ARCH_PRESETS, BagnetLite
from bagnetlite.export import export_bundle, export_dataset, fold_batchnorm
from bagnetlite.train import train_and_export

__version__ = "0.1.0"
