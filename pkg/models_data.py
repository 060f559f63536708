from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field

from errors import DatasetError


class ShapeMotionSpec(BaseModel):
    count: int = Field(4000, ge=1)
    size: int = Field(64, ge=1)
    length: int = Field(16, ge=1)
    shapes: Tuple[str, ...] = ("circle", "square")
    motions: Tuple[str, ...] = ("left_to_right", "top_down")
    min_color_sum: int = Field(96, ge=0, le=765)
    seed: int = 0

    @property
    def extent_range(self) -> Tuple[int, int]:
        """Inclusive range of circle radius / square half-side, in pixels"""
        return -(-self.size // 8), self.size // 4


@dataclass
class VideoClip:
    frames: np.ndarray  # (K, H, W, 3) uint8
    label: Optional[int] = None

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise DatasetError(f"clip frames must be (K, H, W, 3), got {self.frames.shape}")
        if self.frames.shape[0] < 1:
            raise DatasetError("clip has no frames")
        if self.frames.dtype != np.uint8:
            raise DatasetError(f"clip frames must be uint8, got {self.frames.dtype}")

    @property
    def length(self) -> int:
        return self.frames.shape[0]

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        return self.frames.shape[2]


@dataclass
class PackedDataset:
    clips: List[VideoClip]
    p_k: Dict[int, float]
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.clips)

    @property
    def labels(self) -> List[Optional[int]]:
        return [clip.label for clip in self.clips]
