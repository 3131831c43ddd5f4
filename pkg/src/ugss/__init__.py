"""Uncertainty-guided semi-supervised organ segmentation on synthetic phantoms.

Library layout:

- :mod:`ugss.core_data` — scan records, label sets, container I/O, manifests
- :mod:`ugss.phantom` — deterministic synthetic abdominal phantom generator
- :mod:`ugss.preprocess` — label standardization, overlap removal, resampling, windowing
- :mod:`ugss.autoclean` — landmark-relative histograms and crop/delete/discard cleaning
- :mod:`ugss.model` — K-head 3D U-Net, mean prediction, entropy uncertainty
- :mod:`ugss.losses` — cross-entropy and the uncertainty-weighted variant
- :mod:`ugss.augment` — basic and additional augmentation tiers
- :mod:`ugss.impute` — sliding-window inference and annotation imputation
- :mod:`ugss.training` — teacher/student loops, folds, iterated self-training
- :mod:`ugss.metrics` — Dice, Surface Dice, HD95, Wilcoxon signed-rank
- :mod:`ugss.cli` — pipeline orchestration (``ugss`` console script)
"""

__version__ = "0.1.0"

from .core_data import (  # noqa: F401
    ORGANS,
    NUM_CLASSES,
    IntensityUnit,
    LabelSet,
    LabelSource,
    OrganId,
    ScanRecord,
    Volume,
)
