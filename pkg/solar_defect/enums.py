from enum import Enum


class Partition(Enum):
    """
    Where a record lives once the corpus is split.
    UNASSIGNED: freshly loaded, not split yet.
    TRAIN: the only partition that may be oversampled or augmented.
    VAL, TEST: kept raw.
    """

    UNASSIGNED = "unassigned"
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


class ScheduleMode(Enum):
    """
    Learning rate policy over the epochs.
    COSINE: half a cosine from lr_max to lr_min over horizon_T.
    FIXED: lr_max for every epoch.
    """

    COSINE = "cosine"
    FIXED = "fixed"


class Reduction(Enum):
    MEAN = "mean"
    SUM = "sum"
    NONE = "none"


class CurveMode(Enum):
    """
    Which one-vs-rest curves to build.
    PER_CLASS: one curve per class.
    MICRO: pooled binarized (sample, class) pairs.
    BOTH: the per class curves and the micro curve.
    """

    PER_CLASS = "per_class"
    MICRO = "micro"
    BOTH = "both"
