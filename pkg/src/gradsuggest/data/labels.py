import numpy as np

from ..exceptions import ContractViolation, DegenerateInputError

WHOLE_TUMOUR_CODES = (1, 2, 4)


def whole_tumour_label(label_map) -> np.ndarray:
    """Merge tumour sub-region codes {1, 2, 4} into one binary mask (uint8)."""
    labels = np.asarray(label_map)
    valid = np.isin(labels, (0,) + WHOLE_TUMOUR_CODES)
    if not np.all(valid):
        bad = np.unique(labels[~valid])
        raise ContractViolation(f"unexpected label values {bad.tolist()}; expected 0, 1, 2 or 4")
    return (labels != 0).astype(np.uint8)


def zscore_normalize(image) -> np.ndarray:
    """Shift and scale an image to zero mean and unit (population) standard deviation."""
    img = np.asarray(image, dtype=np.float64)
    mean = img.mean()
    std = img.std()
    if not np.isfinite(std) or std == 0.0:
        raise DegenerateInputError("cannot z-score an image with zero variance")
    out = (img - mean) / std
    # one refinement pass absorbs the rounding left by the first
    return (out - out.mean()) / out.std()
