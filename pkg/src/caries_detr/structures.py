from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Detection:
    box: np.ndarray  # normalized cxcywh
    class_id: int
    score: float

    def to_json(self, image_id: int) -> dict:
        cx, cy, w, h = (float(v) for v in self.box)
        return {"image_id": int(image_id), "class": int(self.class_id), "cx": cx, "cy": cy,
                "w": w, "h": h, "score": float(self.score)}


@dataclass
class GroundTruthSet:
    image_id: int
    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))  # normalized cxcywh
    classes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    file_name: str = ""
    width: int = 0
    height: int = 0

    def __len__(self) -> int:
        return len(self.classes)
