"""Chronological train/test pairing of temporal partitions."""
import math
from dataclasses import dataclass

from ..errors import ConfigError, LeakageError
from .dataset import Dataset

VAL_FRACTION = 0.2


@dataclass
class ChronoPair:
    train: Dataset
    val: Dataset
    test: Dataset

    @property
    def name(self):
        return f"{self.train.partition_id}-{self.test.partition_id}"


def check_order(earlier, later):
    """Raise :class:`LeakageError` unless every ``earlier`` instance precedes ``later``."""
    a, b = earlier.time_range(), later.time_range()
    if a is None or b is None:
        return
    if not a[1] < b[0]:
        raise LeakageError(f"partition {earlier.partition_id} ends at {a[1].isoformat()} but "
                           f"{later.partition_id} starts at {b[0].isoformat()}; time ranges overlap")


def split_validation(dataset, fraction=VAL_FRACTION):
    """Hold out the latest ``fraction`` of ``dataset`` by start time.

    Instances sharing the boundary timestamp all go to validation, so every
    validation instance is strictly later than every retained training one.
    """
    if not 0.0 <= fraction < 1.0:
        raise ConfigError(f"validation fraction must lie in [0, 1), got {fraction}")
    ordered = sorted(dataset.instances, key=lambda i: (i.start_time, i.source_id))
    n_val = int(math.floor(fraction * len(ordered) + 0.5))
    if n_val == 0:
        return dataset.derive(ordered, split="train"), dataset.derive([], split="val")
    cut = len(ordered) - n_val
    while cut > 0 and ordered[cut - 1].start_time == ordered[cut].start_time:
        cut -= 1
    return (dataset.derive(ordered[:cut], split="train"),
            dataset.derive(ordered[cut:], split="val"))


def chronological_pairs(partitions, val_fraction=VAL_FRACTION):
    """``(P1, P2), (P2, P3), ...`` with a chronological validation tail cut from
    each training partition. Five partitions give four pairs."""
    partitions = list(partitions)
    for earlier, later in zip(partitions, partitions[1:]):
        check_order(earlier, later)
    pairs = []
    for train, test in zip(partitions, partitions[1:]):
        tr, val = split_validation(train, val_fraction)
        pairs.append(ChronoPair(train=tr, val=val, test=test.with_split("test")))
    return pairs
