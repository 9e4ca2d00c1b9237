from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .decoder import Decoder
from .tree import TreeGrid


@dataclass
class TreeNerv:
    """A feature tree plus the decoder that renders its embeddings."""

    grid: TreeGrid
    decoder: Decoder

    def render(self, t: float) -> np.ndarray:
        return self.decoder.forward(self.grid.time_embedding(t)).data

    def render_all(self, times) -> list[np.ndarray]:
        return [self.render(float(t)) for t in times]

    def parameter_count(self) -> int:
        n = sum(p.size for p in self.decoder.parameters())
        return n + sum(p.size for p in self.grid.parameters())
