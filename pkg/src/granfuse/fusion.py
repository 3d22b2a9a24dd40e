"""Fusion stage: cascaded factorized bilinear blocks over the granularity
channels, with residual state and block-averaged pooling.

Each block projects every present channel to the factor width, multiplies
the projections elementwise (together with the projected incoming state,
when there is one), then row-normalizes and applies a learned affine.
Blocks after the first add their output to the incoming state.  The pooled
representation r averages the block outputs and then the aspect-token rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

CHANNEL_ORDER = ("dep", "con", "sem", "kge")


@dataclass
class FusionBlock:
    channel_maps: dict  # name -> Tensor (dim, factor_dim)
    state_map: Tensor  # (factor_dim, factor_dim)
    gain: Tensor  # (factor_dim,)
    bias: Tensor  # (factor_dim,)


def init_fusion_blocks(channels, n_blocks: int, dim: int, factor_dim: int, rng) -> list:
    if not channels:
        raise ValueError("fusion needs at least one channel")
    blocks = []
    limit = np.sqrt(6.0 / (dim + factor_dim))
    limit_s = np.sqrt(6.0 / (2 * factor_dim))
    for i in range(n_blocks):
        maps = {
            name: Tensor(
                rng.uniform(-limit, limit, size=(dim, factor_dim)),
                requires_grad=True,
                name=f"fusion.block{i}.U_{name}",
            )
            for name in CHANNEL_ORDER
            if name in channels
        }
        blocks.append(
            FusionBlock(
                channel_maps=maps,
                state_map=Tensor(
                    rng.uniform(-limit_s, limit_s, size=(factor_dim, factor_dim)),
                    requires_grad=True,
                    name=f"fusion.block{i}.U_state",
                ),
                gain=Tensor(np.ones(factor_dim), requires_grad=True, name=f"fusion.block{i}.gain"),
                bias=Tensor(np.zeros(factor_dim), requires_grad=True, name=f"fusion.block{i}.bias"),
            )
        )
    return blocks


def _row_l2_normalize(x: Tensor) -> Tensor:
    norms = T.l2norm_rows(x)
    inv = T.div(Tensor(1.0), T.clip_min(norms, 1e-12))
    return T.rowscale(x, inv)


def fusion_block_forward(block: FusionBlock, channels: dict, state: Tensor | None) -> Tensor:
    """One block: normalized elementwise product of projections, plus residual.

    With a state the projected state joins the product and the result is
    added back onto the state; the first block has no state and returns
    the fused features directly.
    """
    product = None
    for name in CHANNEL_ORDER:
        if name not in channels:
            continue
        if name not in block.channel_maps:
            raise T.ShapeError(f"block has no projection for channel {name!r}")
        term = T.matmul(channels[name], block.channel_maps[name])
        product = term if product is None else T.mul(product, term)
    if product is None:
        raise ValueError("fusion block called with zero channels")
    if state is not None:
        product = T.mul(product, T.matmul(state, block.state_map))
    fused = T.add_rowvec(T.mul_rowvec(_row_l2_normalize(product), block.gain), block.bias)
    if state is not None:
        return T.add(state, fused)
    return fused


@dataclass
class FusionState:
    """Outputs of each block plus the pooled representation."""

    block_outputs: list
    r: Tensor


def run_cascade(blocks, channels: dict, aspect_span) -> FusionState:
    """Run every block in sequence and pool over blocks, then aspect rows."""
    if not blocks:
        raise ValueError("cascade needs at least one block")
    outputs = []
    state = None
    for block in blocks:
        state = fusion_block_forward(block, channels, state)
        outputs.append(state)
    total = outputs[0]
    for z in outputs[1:]:
        total = T.add(total, z)
    z_mean = T.scale(total, 1.0 / len(outputs))
    n = z_mean.shape[0]
    s, e = aspect_span
    pool = np.zeros((1, n))
    pool[0, s:e] = 1.0 / (e - s)
    r = T.matmul(Tensor(pool), z_mean)
    return FusionState(block_outputs=outputs, r=r)
