"""Low-rank adapters for the diffusion backbone's attention projections.

Each adapter owns one (down, up) pair per targeted projection and adds
up(down(x)) to the base projection's output. The up matrices start at zero,
so a freshly built adapter leaves the base model bit-identical.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .errors import ConfigError
from .nets import zero_init

ROLES = ("foreground", "background")
TOY_RANK = 8
PAPER_RANK = 256


class LoRAWeights(nn.Module):
    """Adapter set for one branch role.

    targets: (block key, projection name, in_features, out_features) rows,
    normally `model.lora_targets()`. `delta(key, name, tokens)` is the hook
    the attention forward calls; it returns None for untargeted slots.
    """

    def __init__(
        self,
        targets: list[tuple[str, str, int, int]],
        rank: int = TOY_RANK,
        role: str = "foreground",
        seed: int = 0,
    ):
        super().__init__()
        if role not in ROLES:
            raise ConfigError(f"unknown adapter role {role!r}")
        if rank <= 0:
            raise ConfigError(f"rank must be positive, got {rank}")
        if not targets:
            raise ConfigError("adapter needs at least one target projection")
        self.rank = rank
        self.role = role
        self.down = nn.ModuleDict()
        self.up = nn.ModuleDict()
        g = torch.Generator().manual_seed(seed)
        for key, name, fin, fout in targets:
            slot = self._slot(key, name)
            down = nn.Linear(fin, rank, bias=False)
            with torch.no_grad():
                down.weight.copy_(torch.randn(rank, fin, generator=g) / math.sqrt(fin))
            self.down[slot] = down
            self.up[slot] = zero_init(nn.Linear(rank, fout, bias=False))

    @staticmethod
    def _slot(key: str, name: str) -> str:
        return f"{key}/{name}"

    def delta(self, key: str, name: str, x: torch.Tensor) -> torch.Tensor | None:
        slot = self._slot(key, name)
        if slot not in self.down:
            return None
        return self.up[slot](self.down[slot](x))

    def dense_delta(self, key: str, name: str) -> torch.Tensor:
        """The adapter's effective additive weight matrix (out x in)."""
        slot = self._slot(key, name)
        return self.up[slot].weight @ self.down[slot].weight

    def load_dense(self, key: str, name: str, delta: torch.Tensor) -> None:
        """Factor a dense additive weight into this slot's (down, up) pair.

        Exact when rank >= min(delta.shape); best rank-r approximation
        otherwise.
        """
        slot = self._slot(key, name)
        if slot not in self.down:
            raise ConfigError(f"no adapter slot {slot!r}")
        fout, fin = self.up[slot].weight.shape[0], self.down[slot].weight.shape[1]
        if delta.shape != (fout, fin):
            raise ValueError(f"delta shape {tuple(delta.shape)} != ({fout}, {fin})")
        a, b = fit_lora_pair(delta, self.rank)
        with torch.no_grad():
            self.down[slot].weight.copy_(
                torch.cat([a, torch.zeros(self.rank - a.shape[0], fin)], dim=0)
            )
            self.up[slot].weight.copy_(
                torch.cat([b, torch.zeros(fout, self.rank - b.shape[1])], dim=1)
            )


def fit_lora_pair(delta: torch.Tensor, rank: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Least-squares factorization delta ~= B @ A with A (r x in), B (out x r)."""
    u, s, vh = torch.linalg.svd(delta, full_matrices=False)
    r = min(rank, s.shape[0])
    root = s[:r].sqrt()
    a = root[:, None] * vh[:r]
    b = u[:, :r] * root
    return a, b


def apply_lora(base, lora: LoRAWeights):
    """Adapted single-branch forward: base projections plus this adapter's
    low-rank deltas. Base weights are untouched."""

    def adapted(x: torch.Tensor, t: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        return base.forward_joint([x], t, [labels], adapters=[lora], share=False)[0]

    return adapted
