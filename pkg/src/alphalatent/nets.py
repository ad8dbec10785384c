"""Shared network building blocks: normalized conv stacks, residual blocks
with timestep conditioning, self-attention with an optional multi-branch
joint-softmax path, sinusoidal embeddings, and numpy<->torch helpers.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn


def group_norm(channels: int) -> nn.GroupNorm:
    groups = 8
    while channels % groups != 0:
        groups -= 1
    return nn.GroupNorm(groups, channels)


def conv_block(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
        group_norm(cout),
        nn.SiLU(),
    )


def zero_init(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal features of shape (len(t), dim); t is a 1-d float tensor."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / half
    )
    args = t[:, None] * freqs[None, :]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class ResBlock(nn.Module):
    """Two 3x3 convolutions with group norm, SiLU, an additive timestep
    projection after the first convolution, and a residual shortcut. `key`
    names the block for adapters, which may add a low-rank delta to the
    timestep projection."""

    def __init__(self, cin: int, cout: int, tdim: int | None = None, key: str = ""):
        super().__init__()
        self.key = key
        self.norm1 = group_norm(cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb_proj = nn.Linear(tdim, cout) if tdim else None
        self.norm2 = group_norm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(
        self, x: torch.Tensor, temb: torch.Tensor | None = None, adapter=None
    ) -> torch.Tensor:
        h = self.conv1(torch.nn.functional.silu(self.norm1(x)))
        if self.temb_proj is not None:
            if temb is None:
                raise ValueError("block built with timestep conditioning but none given")
            cond_in = torch.nn.functional.silu(temb)
            cond = self.temb_proj(cond_in)
            if adapter is not None:
                delta = adapter.delta(self.key, "temb_proj", cond_in)
                if delta is not None:
                    cond = cond + delta
            h = h + cond[:, :, None, None]
        h = self.conv2(torch.nn.functional.silu(self.norm2(h)))
        return h + self.skip(x)


class SelfAttention2d(nn.Module):
    """Single-head self-attention over spatial tokens with addressable
    query/key/value/out projections. `key` names the block for adapters."""

    def __init__(self, channels: int, key: str = ""):
        super().__init__()
        self.channels = channels
        self.key = key
        self.norm = group_norm(channels)
        self.to_q = nn.Linear(channels, channels)
        self.to_k = nn.Linear(channels, channels)
        self.to_v = nn.Linear(channels, channels)
        self.to_out = nn.Linear(channels, channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return attention_forward(self, [x])[0]


def _project(block: SelfAttention2d, name: str, tokens: torch.Tensor, adapter) -> torch.Tensor:
    out = getattr(block, name)(tokens)
    if adapter is not None:
        delta = adapter.delta(block.key, name, tokens)
        if delta is not None:
            out = out + delta
    return out


def attention_forward(
    block: SelfAttention2d,
    xs: list[torch.Tensor],
    adapters: list | None = None,
    share: bool = False,
    logit_mask: torch.Tensor | None = None,
) -> list[torch.Tensor]:
    """Run one attention block over one or more branches.

    Each branch is a (b, c, h, w) tensor. With share=False every branch runs
    standalone attention; with share=True the q/k/v token sequences of all
    branches are concatenated along the token axis, one softmax runs over the
    joint sequence, and outputs are split back in branch order. `adapters` is
    an optional per-branch list of objects exposing delta(block_key, proj_name,
    tokens); their outputs are added to the matching projection.
    `logit_mask` is added to the joint attention logits (share=True only).
    """
    if adapters is None:
        adapters = [None] * len(xs)
    if len(adapters) != len(xs):
        raise ValueError("one adapter slot per branch required")
    for x in xs:
        if x.shape[1] != block.channels:
            raise ValueError(f"expected {block.channels} channels, got {x.shape[1]}")

    shapes = [x.shape for x in xs]
    token_lists = []
    for x in xs:
        b, c, h, w = x.shape
        token_lists.append(block.norm(x).reshape(b, c, h * w).transpose(1, 2))

    qs = [_project(block, "to_q", tok, ad) for tok, ad in zip(token_lists, adapters)]
    ks = [_project(block, "to_k", tok, ad) for tok, ad in zip(token_lists, adapters)]
    vs = [_project(block, "to_v", tok, ad) for tok, ad in zip(token_lists, adapters)]
    scale = block.channels ** -0.5

    if share:
        # The joint softmax over the concatenated token sequence is computed
        # block-by-block: per query branch, cross-branch partial sums (max,
        # exp-sum, weighted value sum) are combined with commutative pairwise
        # ops, so swapping the two branches permutes the outputs bit-exactly.
        starts = np.cumsum([0] + [t.shape[1] for t in token_lists])
        pieces = []
        for i, q in enumerate(qs):
            rows = slice(starts[i], starts[i + 1])
            blocks = []
            for j, k in enumerate(ks):
                logits = torch.bmm(q, k.transpose(1, 2)) * scale
                if logit_mask is not None:
                    cols = slice(starts[j], starts[j + 1])
                    logits = logits + logit_mask[rows, cols]
                blocks.append(logits)
            m = blocks[0].amax(dim=-1, keepdim=True)
            for blk in blocks[1:]:
                m = torch.maximum(m, blk.amax(dim=-1, keepdim=True))
            exps = [torch.exp(blk - m) for blk in blocks]
            denom = exps[0].sum(dim=-1, keepdim=True)
            num = torch.bmm(exps[0], vs[0])
            for e, v in zip(exps[1:], vs[1:]):
                denom = denom + e.sum(dim=-1, keepdim=True)
                num = num + torch.bmm(e, v)
            pieces.append(num / denom)
    else:
        if logit_mask is not None:
            raise ValueError("logit_mask requires share=True")
        pieces = []
        for q, k, v in zip(qs, ks, vs):
            logits = torch.bmm(q, k.transpose(1, 2)) * scale
            pieces.append(torch.bmm(torch.softmax(logits, dim=-1), v))

    outs = []
    for x, (b, c, h, w), piece, ad in zip(xs, shapes, pieces, adapters):
        out = _project(block, "to_out", piece, ad)
        outs.append(x + out.transpose(1, 2).reshape(b, c, h, w))
    return outs


def cross_branch_mask(n_tokens: list[int], blocked: list[int], dtype=torch.float32) -> torch.Tensor:
    """Additive logit mask over the joint token sequence that hides the
    listed branches from every query row (their own rows included)."""
    total = sum(n_tokens)
    mask = torch.zeros(total, total, dtype=dtype)
    start = 0
    spans = []
    for n in n_tokens:
        spans.append((start, start + n))
        start += n
    for idx in blocked:
        s, e = spans[idx]
        mask[:, s:e] = float("-inf")
    return mask


def hwc_to_batch(arrs: list[np.ndarray]) -> torch.Tensor:
    """List of (h, w, c) arrays -> (n, c, h, w) float32 tensor."""
    stacked = np.stack([np.moveaxis(a, -1, 0) for a in arrs])
    return torch.from_numpy(np.ascontiguousarray(stacked)).float()


def batch_to_hwc(t: torch.Tensor) -> list[np.ndarray]:
    arr = t.detach().cpu().numpy()
    return [np.ascontiguousarray(np.moveaxis(a, 0, -1)) for a in arr]
