"""Fuse multi-layer target hiddens into compact context features and project
them into per-draft-layer Key/Value cache entries.

Context indexing convention (used consistently by trainer and engine): the
context entry at position p is fused from the target hidden produced while
processing the token at position p-1, i.e. the state that predicted token p.
This makes the entry set available at inference exactly match what training
conditioned on: a block anchored at p sees context entries at positions <= p.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tk
from .errors import ShapeError
from .tensor import Tensor


@dataclass
class FusedContext:
    """Append-ready cache entries for one token position."""

    position: int
    fused: np.ndarray  # (d_draft,)
    per_layer_kv: list[tuple[np.ndarray, np.ndarray]]  # [(k, v)] head-shaped, (H, dh)


class FusionParams:
    """Single affine map from concatenated tap hiddens to the drafter width."""

    def __init__(self, n_feat: int, d_target: int, d_draft: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.n_feat = n_feat
        self.d_target = d_target
        self.d_draft = d_draft
        self.w = Tensor(
            rng.normal(0.0, 0.02, size=(n_feat * d_target, d_draft)).astype(np.float32),
            requires_grad=True,
        )
        self.b = Tensor(np.zeros(d_draft, dtype=np.float32), requires_grad=True)

    def parameters(self) -> list[Tensor]:
        return [self.w, self.b]


def fuse(tapped, params: FusionParams) -> Tensor:
    """projection(concat over tap layers), per position.

    tapped: array or Tensor (..., n_feat, d_target); returns (..., d_draft).
    """
    if not isinstance(tapped, Tensor):
        tapped = Tensor(np.asarray(tapped, dtype=np.float32))
    if tapped.shape[-2:] != (params.n_feat, params.d_target):
        raise ShapeError(
            f"fuse: tapped {tapped.shape} vs params ({params.n_feat}, {params.d_target})"
        )
    flat = tapped.reshape(*tapped.shape[:-2], params.n_feat * params.d_target)
    return tk.linear(flat, params.w, params.b)


def project_kv(fused: Tensor, drafter, positions: np.ndarray) -> list[FusedContext]:
    """Project fused vectors into each draft layer's K/V space.

    fused: (N, d_draft); positions: (N,) absolute entry positions. Keys are
    rotary-encoded at their source position; values are not. Entries are
    computed once and appended to the cache for reuse across cycles.
    """
    positions = np.asarray(positions, dtype=np.int64)
    n = fused.shape[0]
    if positions.shape != (n,):
        raise ShapeError("project_kv: positions shape mismatch")
    cfg = drafter.config
    h, dh = cfg.n_heads, cfg.head_dim
    with tk.no_grad():
        per_layer = []
        for lyr in drafter.layers:
            k = tk.linear(fused, lyr["wk"]).reshape(n, h, dh).transpose(1, 0, 2)
            if cfg.use_rope:
                k = tk.rope_apply(k, positions, cfg.rope_theta)
            v = tk.linear(fused, lyr["wv"]).reshape(n, h, dh).transpose(1, 0, 2)
            per_layer.append((k.data, v.data))
    entries = []
    for i in range(n):
        entries.append(
            FusedContext(
                position=int(positions[i]),
                fused=fused.data[i].copy(),
                per_layer_kv=[(k[:, i].copy(), v[:, i].copy()) for k, v in per_layer],
            )
        )
    return entries
