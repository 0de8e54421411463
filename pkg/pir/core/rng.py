from __future__ import annotations

from typing import Any, Dict, Sequence, Union

import numpy as np
import torch

Shape = Union[int, Sequence[int]]


class Rng:
    """Seeded PCG64 stream; the bit generator is platform independent.

    Every stochastic step (pixel batches, lobe samples, stratification jitter,
    smoothness perturbations) draws from one of these so that a seed fixes the
    whole run.
    """

    def __init__(self, seed: int, stream: int = 0) -> None:
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream = int(stream)
        self._seed_seq = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream,))
        self._gen = np.random.Generator(np.random.PCG64(self._seed_seq))

    def fork(self, stream: int) -> "Rng":
        """Independent child stream; depends only on (seed, stream), not on draws so far."""
        return Rng(self.seed, stream=self.stream * 1_000_003 + int(stream) + 1)

    def uniform(self, shape: Shape, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        return torch.from_numpy(self._gen.random(shape)).to(dtype)

    def normal(self, shape: Shape, std: float = 1.0, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        return torch.from_numpy(self._gen.normal(0.0, std, shape)).to(dtype)

    def integers(self, high: int, size: Shape) -> torch.Tensor:
        return torch.from_numpy(self._gen.integers(0, high, size=size, dtype=np.int64))

    def choice(self, high: int) -> int:
        return int(self._gen.integers(0, high))

    def get_state(self) -> Dict[str, Any]:
        return {"seed": self.seed, "stream": self.stream, "bit_generator": self._gen.bit_generator.state}

    def set_state(self, state: Dict[str, Any]) -> None:
        self._gen.bit_generator.state = state["bit_generator"]
