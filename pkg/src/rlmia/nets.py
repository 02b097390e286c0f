"""Small torch helpers shared by the behaviour oracle and the batch trainer."""

from __future__ import annotations

import contextlib
import random

import numpy as np
import torch
from torch import nn


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


@contextlib.contextmanager
def torch_seed(seed: int):
    """Seed torch's global generator inside the block and restore it afterwards."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


def mlp(in_dim: int, out_dim: int, hidden: tuple[int, ...], activation=nn.ReLU) -> nn.Sequential:
    layers: list[nn.Module] = []
    d = in_dim
    for h in hidden:
        layers += [nn.Linear(d, h), activation()]
        d = h
    layers.append(nn.Linear(d, out_dim))
    return nn.Sequential(*layers)


@torch.no_grad()
def soft_update(target: nn.Module, source: nn.Module, tau: float) -> None:
    tp = list(target.parameters())
    sp = list(source.parameters())
    torch._foreach_mul_(tp, 1.0 - tau)
    torch._foreach_add_(tp, sp, alpha=tau)


class ActionScaler:
    """Affine map between the environment's action box and [-1, 1]^d."""

    def __init__(self, low, high):
        self.low = np.asarray(low, dtype=np.float64)
        self.high = np.asarray(high, dtype=np.float64)
        self.center = (self.high + self.low) / 2
        self.half = (self.high - self.low) / 2

    def to_unit(self, a: np.ndarray) -> np.ndarray:
        return (a - self.center) / self.half

    def from_unit(self, u: np.ndarray) -> np.ndarray:
        return np.clip(u * self.half + self.center, self.low, self.high)


def state_dict_to_numpy(module: nn.Module, prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def load_numpy_state(module: nn.Module, arrays: dict[str, np.ndarray], prefix: str) -> None:
    sd = {k[len(prefix) + 1:]: torch.from_numpy(np.array(v)) for k, v in arrays.items()
          if k.startswith(prefix + "/")}
    module.load_state_dict(sd)


class FourierFeatures(nn.Module):
    """Fixed random Fourier encoding ``[sin(sB), cos(sB)]`` of a low-dimensional input.

    ``B`` has i.i.d. N(0, scale^2) entries drawn from ``seed``; it is a buffer,
    so it is saved with the module but never trained.
    """

    def __init__(self, in_dim: int, n_features: int, scale: float, seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(int(seed))
        self.register_buffer("B", torch.randn(in_dim, n_features, generator=g) * scale)
        self.out_dim = 2 * n_features

    def forward(self, x):
        proj = x @ self.B
        return torch.cat([torch.sin(proj), torch.cos(proj)], dim=-1)


def state_encoder(in_dim: int, n_features: int, scale: float, seed: int = 0) -> tuple[nn.Module, int]:
    """Identity when ``n_features`` is 0, otherwise a :class:`FourierFeatures` map."""
    if n_features <= 0:
        return nn.Identity(), in_dim
    enc = FourierFeatures(in_dim, n_features, scale, seed)
    return enc, enc.out_dim
