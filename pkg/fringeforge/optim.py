"""
optim.py - Adam オプティマイザ

m ← β1·m + (1−β1)·g
v ← β2·v + (1−β2)·g²
p ← p − lr · m̂ / (√v̂ + ε)     （m̂, v̂ はバイアス補正済み）

ステップ数はパラメータ毎に数える（凍結中のパラメータはステップが進まない）。
"""

import logging
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from .errors import ConfigError
from .tensor import Parameter


logger = logging.getLogger(__name__)


class Adam:
    def __init__(self, params: Sequence[Parameter], lr: float = 0.008,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise ConfigError(f"learning rate must be > 0, got {lr}")
        self.params: List[Parameter] = list(params)
        self.lr = float(lr)
        self.b1, self.b2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.m: Dict[str, np.ndarray] = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v: Dict[str, np.ndarray] = {p.name: np.zeros_like(p.data) for p in self.params}
        self.t: Dict[str, int] = {p.name: 0 for p in self.params}

    def step(self, params: Optional[Sequence[Parameter]] = None) -> None:
        """
        1 ステップ更新

        Args:
            params: 更新対象（None なら全パラメータ）
        """
        for p in (self.params if params is None else params):
            g = p.grad
            name = p.name
            self.t[name] += 1
            t = self.t[name]
            self.m[name] = self.b1 * self.m[name] + (1.0 - self.b1) * g
            self.v[name] = self.b2 * self.v[name] + (1.0 - self.b2) * g * g
            m_hat = self.m[name] / (1.0 - self.b1 ** t)
            v_hat = self.v[name] / (1.0 - self.b2 ** t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {}
        for p in self.params:
            state[f"adam.m.{p.name}"] = self.m[p.name].copy()
            state[f"adam.v.{p.name}"] = self.v[p.name].copy()
            state[f"adam.t.{p.name}"] = np.full((1, 1, 1, 1), float(self.t[p.name]))
        return state

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        for p in self.params:
            key = f"adam.m.{p.name}"
            if key not in state:
                logger.warning(f"No optimizer state for {p.name}; starting its moments from zero")
                continue
            self.m[p.name] = np.array(state[key], dtype=np.float64)
            self.v[p.name] = np.array(state[f"adam.v.{p.name}"], dtype=np.float64)
            self.t[p.name] = int(np.asarray(state[f"adam.t.{p.name}"]).reshape(-1)[0])
