"""AdamW with decoupled weight decay over named parameter dicts."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .autodiff import Tensor
from .errors import ContractError


class AdamW:
    """Decoupled-weight-decay Adam.

    Moments are kept per parameter name and created lazily, so one optimizer
    instance can serve disjoint parameter subsets (e.g. child steps updating
    only the encoders, parent steps updating the aggregator as well). Each
    parameter carries its own step counter, incremented once per update.
    """

    def __init__(
        self,
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        if lr <= 0.0:
            raise ContractError(f"invalid lr: {lr}")
        if not (0.0 <= betas[0] < 1.0 and 0.0 <= betas[1] < 1.0):
            raise ContractError(f"invalid betas: {betas}")
        if eps <= 0.0:
            raise ContractError(f"invalid eps: {eps}")
        if weight_decay < 0.0:
            raise ContractError(f"invalid weight_decay: {weight_decay}")
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        # name -> {"m": ndarray, "v": ndarray, "step": int}
        self.state: dict[str, dict] = {}

    def step(self, params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray]) -> None:
        """Apply one update to every named parameter, in place."""
        beta1, beta2 = self.betas
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ContractError(
                    f"grad shape {g.shape} does not match param '{name}' shape {p.shape}"
                )
            st = self.state.get(name)
            if st is None:
                st = {
                    "m": np.zeros_like(p.data),
                    "v": np.zeros_like(p.data),
                    "step": 0,
                }
                self.state[name] = st
            st["step"] += 1
            t = st["step"]
            if self.weight_decay != 0.0:
                p.data *= 1.0 - self.lr * self.weight_decay
            m, v = st["m"], st["v"]
            m *= beta1
            m += (1.0 - beta1) * g
            v *= beta2
            v += (1.0 - beta2) * g * g
            m_hat = m / (1.0 - beta1**t)
            v_hat = v / (1.0 - beta2**t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Flat view of moment arrays for checkpointing."""
        out: dict[str, np.ndarray] = {}
        for name, st in self.state.items():
            out[f"{name}.m"] = st["m"]
            out[f"{name}.v"] = st["v"]
        return out

    def step_counters(self) -> dict[str, int]:
        return {name: st["step"] for name, st in self.state.items()}

    def load_state(self, arrays: Mapping[str, np.ndarray], steps: Mapping[str, int]) -> None:
        self.state = {}
        for name, t in steps.items():
            self.state[name] = {
                "m": np.array(arrays[f"{name}.m"]),
                "v": np.array(arrays[f"{name}.v"]),
                "step": int(t),
            }
