"""Per-block Adam state for the training stages.

Every parameter block owns its own Adam optimiser, so freezing a block keeps
its values and moments exactly. Steps are all-or-nothing across the listed
blocks: a non-finite gradient in any of them aborts the step before anything
moves.
"""

from __future__ import annotations

from typing import Dict, Iterable, List, Mapping, Optional, Tuple

import numpy as np
import torch

from pir.core.errors import DivergenceError, NonFiniteGradientError
from pir.render.fields import ParamBlock

BETAS = (0.9, 0.999)
EPS = 1e-8


class OptimizerState:
    """One Adam state per parameter block.

    Blocks are stepped independently, so a frozen block keeps both its values
    and its moments while the others move.
    """

    def __init__(self, blocks: Mapping[str, ParamBlock], lr: float) -> None:
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.lr = float(lr)
        self.blocks: Dict[str, ParamBlock] = dict(blocks)
        self.optimizers: Dict[str, torch.optim.Adam] = {
            name: torch.optim.Adam(block.params, lr=self.lr, betas=BETAS, eps=EPS)
            for name, block in self.blocks.items()
            if block.params
        }

    def zero_grad(self) -> None:
        for block in self.blocks.values():
            block.zero_grad()

    def step(self, names: Iterable[str]) -> None:
        """Step every listed block, or none of them if any gradient is non-finite."""
        stepping = [self.blocks[name] for name in names if name in self.optimizers]
        for block in stepping:
            if not bool(torch.isfinite(block.grads()).all()):
                for other in stepping:
                    other.zero_grad()
                raise NonFiniteGradientError(block.name)
        for block in stepping:
            adam_step(self, block)

    def step_count(self, name: str) -> int:
        state = self.optimizers[name].state
        counts = [int(entry["step"]) for entry in state.values() if "step" in entry]
        return max(counts) if counts else 0

    # checkpoint payload

    def moment_arrays(self) -> Dict[str, np.ndarray]:
        """``{"<block>/<index>_m": ..., "<block>/<index>_v": ...}`` for every stepped parameter."""
        arrays: Dict[str, np.ndarray] = {}
        for name, opt in self.optimizers.items():
            for index, param in enumerate(self.blocks[name].params):
                entry = opt.state.get(param)
                if not entry:
                    continue
                arrays[f"{name}/{index}_m"] = entry["exp_avg"].detach().cpu().numpy()
                arrays[f"{name}/{index}_v"] = entry["exp_avg_sq"].detach().cpu().numpy()
        return arrays

    def step_table(self) -> Dict[str, Dict[str, int]]:
        table: Dict[str, Dict[str, int]] = {}
        for name, opt in self.optimizers.items():
            rows = {}
            for index, param in enumerate(self.blocks[name].params):
                entry = opt.state.get(param)
                if entry:
                    rows[str(index)] = int(entry["step"])
            table[name] = rows
        return table

    def load_moments(self, arrays: Mapping[str, np.ndarray], steps: Mapping[str, Mapping[str, int]]) -> None:
        for name, rows in steps.items():
            opt = self.optimizers.get(name)
            if opt is None:
                continue
            params: List[torch.nn.Parameter] = self.blocks[name].params
            for key, count in rows.items():
                param = params[int(key)]
                m = torch.from_numpy(np.array(arrays[f"{name}/{key}_m"])).reshape(param.shape).to(param.dtype)
                v = torch.from_numpy(np.array(arrays[f"{name}/{key}_v"])).reshape(param.shape).to(param.dtype)
                opt.state[param] = {
                    "step": torch.tensor(float(count)),
                    "exp_avg": m,
                    "exp_avg_sq": v,
                }


def adam_step(state: OptimizerState, block: ParamBlock) -> None:
    """Apply one Adam update to ``block`` and clear its gradients.

    A non-finite gradient aborts the step with the block untouched.
    """
    grads = block.grads()
    if not bool(torch.isfinite(grads).all()):
        block.zero_grad()
        raise NonFiniteGradientError(block.name)
    state.optimizers[block.name].step()
    block.zero_grad()
    if not block.is_finite():
        raise DivergenceError(f"parameter block '{block.name}' became non-finite after an update")


def block_checksums(blocks: Mapping[str, ParamBlock], names: Optional[Iterable[str]] = None) -> Dict[str, str]:
    keys = list(blocks) if names is None else [n for n in names if n in blocks]
    return {name: blocks[name].checksum() for name in keys}


def set_frozen(blocks: Mapping[str, ParamBlock], names: Iterable[str], frozen: bool) -> Tuple[str, ...]:
    touched = []
    for name in names:
        if name in blocks:
            blocks[name].set_trainable(not frozen)
            touched.append(name)
    return tuple(touched)
