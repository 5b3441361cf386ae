"""Domain types shared across modules: phase labels and CT scans."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np


class PhaseLabel(enum.IntEnum):
    """Contrast phase. Ordinals are fixed and used for tie-breaking."""

    NON_CONTRAST = 0
    ARTERIAL = 1
    VENOUS = 2
    OTHER = 3

    @property
    def slug(self) -> str:
        return _SLUGS[self]

    @classmethod
    def from_slug(cls, text: str) -> "PhaseLabel":
        try:
            return _FROM_SLUG[text.strip().lower()]
        except KeyError:
            raise ValueError(
                f"unknown phase {text!r}; expected one of {', '.join(_FROM_SLUG)}"
            ) from None


_SLUGS = {
    PhaseLabel.NON_CONTRAST: "non_contrast",
    PhaseLabel.ARTERIAL: "arterial",
    PhaseLabel.VENOUS: "venous",
    PhaseLabel.OTHER: "other",
}
_FROM_SLUG = {v: k for k, v in _SLUGS.items()}

N_CLASSES = len(PhaseLabel)


@dataclass(frozen=True)
class RescaleSpec:
    slope: float = 1.0
    intercept: float = 0.0

    def __post_init__(self):
        if self.slope == 0:
            raise ValueError("rescale slope must be nonzero")


@dataclass(frozen=True)
class CtSlice:
    """One 2D image in Hounsfield units."""

    hu: np.ndarray
    instance_number: int
    rescale: RescaleSpec = field(default_factory=RescaleSpec)


@dataclass(eq=False)
class CtScan:
    """Ordered slices of one series.

    ``volume`` has shape (n_slices, rows, cols) and holds HU values, ordered
    by ascending instance number.
    """

    series_uid: str
    study_uid: str
    volume: np.ndarray
    instance_numbers: tuple = ()
    label: Optional[PhaseLabel] = None

    def __post_init__(self):
        self.volume = np.asarray(self.volume, dtype=np.float64)
        if self.volume.ndim != 3:
            raise ValueError(f"scan volume must be 3-D, got shape {self.volume.shape}")
        if not self.instance_numbers:
            self.instance_numbers = tuple(range(1, self.volume.shape[0] + 1))
        if len(self.instance_numbers) != self.volume.shape[0]:
            raise ValueError("one instance number per slice required")

    def __len__(self) -> int:
        return self.volume.shape[0]

    def slice(self, i: int) -> CtSlice:
        return CtSlice(self.volume[i], int(self.instance_numbers[i]))
