"""Block-diffusion drafter.

A shallow transformer that fills a block of masked slots in exactly one
forward pass. Every layer attends to persistent context KV (injected target
features for the conditioned drafter, its own causal token KV for the
unconditioned baseline) plus the current block, bidirectionally within the
block. Token embedding and LM head are the target's, frozen.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tk
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, ContractError
from .fusion import FusedContext, FusionParams
from .rng import STREAM_DRAFT, keyed_categorical
from .tensor import MASK_VALUE, Tensor, no_grad


@dataclass
class DraftConfig:
    n_layers: int = 5
    d_model: int = 128
    n_heads: int = 4
    block_size: int = 16
    n_feat: int = 5
    conditioning: bool = True
    use_rope: bool = True
    rope_theta: float = 10000.0
    d_ff: int | None = None

    def __post_init__(self):
        if self.block_size < 2:
            raise ConfigError("block_size must be >= 2")
        if self.n_layers < 1:
            raise ConfigError("n_layers must be >= 1")
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.d_ff is None:
            self.d_ff = 2 * self.d_model

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "block_size": self.block_size,
            "n_feat": self.n_feat,
            "conditioning": self.conditioning,
            "use_rope": self.use_rope,
            "rope_theta": self.rope_theta,
            "d_ff": self.d_ff,
        }

    @staticmethod
    def from_dict(d: dict) -> "DraftConfig":
        return DraftConfig(**d)


@dataclass
class DraftBlock:
    """One speculation cycle's proposal: gamma = block_size - 1 tokens."""

    anchor_pos: int
    anchor_token: int
    tokens: list[int]
    qdists: np.ndarray | None = None  # (gamma, vocab), sample mode only


class DraftKVCache:
    """Persistent per-layer context K/V for one decode session.

    Conditioned: holds ONLY injected context entries at positions
    1..entry_count; block-token KV is transient per forward.
    committed_len == entry_count + 1 (position 0 is vacuously covered),
    so drafting at anchor_pos requires committed_len == anchor_pos + 1.

    Unconditioned: holds the drafter's own causal token KV at positions
    0..entry_count-1; committed_len == entry_count.
    """

    def __init__(self, config: DraftConfig, cap: int = 512):
        self.config = config
        self.cap = cap
        h, dh = config.n_heads, config.head_dim
        self.k = [np.zeros((h, cap, dh), dtype=np.float32) for _ in range(config.n_layers)]
        self.v = [np.zeros((h, cap, dh), dtype=np.float32) for _ in range(config.n_layers)]
        self.positions = np.zeros(cap, dtype=np.int64)
        self.entry_count = 0

    @property
    def committed_len(self) -> int:
        """Positions covered: last entry position + 1 (empty conditioned
        caches cover the vacuous position 0)."""
        if self.entry_count == 0:
            return 1 if self.config.conditioning else 0
        return int(self.positions[self.entry_count - 1]) + 1

    def append_entries(self, entries: list[FusedContext]):
        if not self.config.conditioning:
            raise ContractError("unconditioned cache rejects injected context entries")
        for e in entries:
            i = self.entry_count
            if i >= self.cap:
                raise ContractError("draft cache capacity exceeded")
            if i > 0 and e.position != int(self.positions[i - 1]) + 1:
                raise ContractError("context entries must be appended contiguously")
            for li, (k, v) in enumerate(e.per_layer_kv):
                self.k[li][:, i] = k
                self.v[li][:, i] = v
            self.positions[i] = e.position
            self.entry_count += 1

    def append_raw(self, per_layer_kv: list[tuple[np.ndarray, np.ndarray]], positions: np.ndarray):
        """Append token K/V rows (unconditioned path); k/v are (H, n, dh)."""
        n = len(positions)
        i = self.entry_count
        if i + n > self.cap:
            raise ContractError("draft cache capacity exceeded")
        for li, (k, v) in enumerate(per_layer_kv):
            self.k[li][:, i : i + n] = k
            self.v[li][:, i : i + n] = v
        self.positions[i : i + n] = positions
        self.entry_count += n

    def truncate(self, n_entries: int):
        if n_entries > self.entry_count:
            raise ContractError("cannot truncate cache forward")
        self.entry_count = n_entries

    def cache_bytes(self) -> bytes:
        parts = [self.positions[: self.entry_count].tobytes()]
        for li in range(self.config.n_layers):
            parts.append(self.k[li][:, : self.entry_count].tobytes())
            parts.append(self.v[li][:, : self.entry_count].tobytes())
        return b"".join(parts)


class DraftModel:
    """Shares the target's frozen embedding/head; owns its own layers, the
    trainable MASK embedding, and (when conditioning) the fusion projection."""

    def __init__(self, config: DraftConfig, target, seed: int = 1):
        if config.d_model != target.config.d_model:
            raise ConfigError(
                "drafter width must equal target d_model to share embedding/head"
            )
        self.config = config
        self.target = target
        self.vocab = target.vocab
        self.forward_count = 0
        rng = np.random.default_rng(seed)
        d, ff = config.d_model, config.d_ff
        self.mask_emb = Tensor(
            rng.normal(0.0, 0.02, size=(d,)).astype(np.float32), requires_grad=True
        )
        self.layers = []
        for _ in range(config.n_layers):
            self.layers.append(
                {
                    "attn_norm": Tensor(np.ones(d, dtype=np.float32), requires_grad=True),
                    "wq": Tensor(rng.normal(0, 0.02, (d, d)).astype(np.float32), requires_grad=True),
                    "wk": Tensor(rng.normal(0, 0.02, (d, d)).astype(np.float32), requires_grad=True),
                    "wv": Tensor(rng.normal(0, 0.02, (d, d)).astype(np.float32), requires_grad=True),
                    "wo": Tensor(rng.normal(0, 0.02, (d, d)).astype(np.float32), requires_grad=True),
                    "mlp_norm": Tensor(np.ones(d, dtype=np.float32), requires_grad=True),
                    "w_gate": Tensor(rng.normal(0, 0.02, (d, ff)).astype(np.float32), requires_grad=True),
                    "w_up": Tensor(rng.normal(0, 0.02, (d, ff)).astype(np.float32), requires_grad=True),
                    "w_down": Tensor(rng.normal(0, 0.02, (ff, d)).astype(np.float32), requires_grad=True),
                }
            )
        self.final_norm = Tensor(np.ones(d, dtype=np.float32), requires_grad=True)
        self.fusion = (
            FusionParams(config.n_feat, target.config.d_model, d, seed=seed + 1)
            if config.conditioning
            else None
        )
        self.target_hash = target.emb_head_hash()
        # logit mask: MASK and PAD are never proposable
        lm = np.zeros(self.vocab.size, dtype=np.float32)
        lm[self.vocab.MASK] = MASK_VALUE
        lm[self.vocab.PAD] = MASK_VALUE
        self._logit_mask = lm

    # ---- parameters ----

    def parameters(self) -> list[Tensor]:
        ps = [self.mask_emb]
        for lyr in self.layers:
            ps.extend(lyr.values())
        ps.append(self.final_norm)
        if self.fusion is not None:
            ps.extend(self.fusion.parameters())
        return ps

    def named_parameters(self) -> dict[str, Tensor]:
        named = {"mask_emb": self.mask_emb, "final_norm": self.final_norm}
        for i, lyr in enumerate(self.layers):
            for k, t in lyr.items():
                named[f"layer{i:02d}.{k}"] = t
        if self.fusion is not None:
            named["fusion.w"] = self.fusion.w
            named["fusion.b"] = self.fusion.b
        return named

    def freeze(self):
        for p in self.parameters():
            p.requires_grad = False

    # ---- core forward ----

    def block_forward(
        self,
        x: Tensor,
        positions: np.ndarray,
        extra_kv,
        mask: np.ndarray | None,
        collect_token_kv: bool = False,
    ):
        """Transformer stack over query embeddings x (B, T, d).

        positions: (T,) or (B, T). extra_kv: per-layer (k, v) with shape
        (B, H, C, dh) (Tensor or ndarray), or None. mask: additive, broadcast
        to (B, 1, T, C+T). Returns (hidden, token_kv) where token_kv is the
        per-layer rope-encoded block K/V (for the unconditioned cache).
        """
        cfg = self.config
        bsz, tlen, _ = x.shape
        h, dh = cfg.n_heads, cfg.head_dim
        positions = np.asarray(positions, dtype=np.int64)
        pos_b = positions if positions.ndim == 1 else positions[:, None, :]
        token_kv = [] if collect_token_kv else None

        for li, lyr in enumerate(self.layers):
            xn = tk.rmsnorm(x, lyr["attn_norm"])
            q = tk.linear(xn, lyr["wq"]).reshape(bsz, tlen, h, dh).transpose(0, 2, 1, 3)
            k = tk.linear(xn, lyr["wk"]).reshape(bsz, tlen, h, dh).transpose(0, 2, 1, 3)
            v = tk.linear(xn, lyr["wv"]).reshape(bsz, tlen, h, dh).transpose(0, 2, 1, 3)
            if cfg.use_rope:
                q = tk.rope_apply(q, pos_b, cfg.rope_theta)
                k = tk.rope_apply(k, pos_b, cfg.rope_theta)
            if token_kv is not None:
                token_kv.append((k.data.copy(), v.data.copy()))
            if extra_kv is not None:
                ck, cv = extra_kv[li]
                ck = ck if isinstance(ck, Tensor) else Tensor(ck)
                cv = cv if isinstance(cv, Tensor) else Tensor(cv)
                k_all = tk.concat([ck, k], axis=2)
                v_all = tk.concat([cv, v], axis=2)
            else:
                k_all, v_all = k, v
            att = tk.masked_attention(q, k_all, v_all, mask)
            att = att.transpose(0, 2, 1, 3).reshape(bsz, tlen, cfg.d_model)
            x = x + tk.linear(att, lyr["wo"])
            xm = tk.rmsnorm(x, lyr["mlp_norm"])
            x = x + tk.linear(
                tk.silu(tk.linear(xm, lyr["w_gate"])) * tk.linear(xm, lyr["w_up"]),
                lyr["w_down"],
            )
        return x, token_kv

    def logits_head(self, hidden: Tensor) -> Tensor:
        """Vocabulary logits through the target's frozen LM head; MASK/PAD
        are forced to the mask floor so argmax/sampling can never emit them."""
        if hidden.shape[-1] != self.target.head.shape[0]:
            raise ConfigError("drafter hidden width does not match LM head input")
        logits = tk.linear(tk.rmsnorm(hidden, self.final_norm), self.target.head)
        return logits + Tensor(self._logit_mask)

    def embed_tokens(self, tokens: np.ndarray) -> Tensor:
        return tk.embedding_lookup(self.target.emb, np.asarray(tokens, dtype=np.int64))

    def block_inputs(self, anchor_token: int, block_size: int) -> Tensor:
        """[anchor embedding, B-1 MASK embeddings], shape (B, d)."""
        anchor = self.embed_tokens(np.array([anchor_token]))
        masks = self.mask_emb.reshape(1, -1)
        reps = [anchor] + [masks] * (block_size - 1)
        return tk.concat(reps, axis=0)

    # ---- drafting ----

    def new_cache(self, cap: int = 512) -> DraftKVCache:
        return DraftKVCache(self.config, cap=cap)

    def draft_block(
        self,
        anchor_token: int,
        anchor_pos: int,
        cache: DraftKVCache,
        block_size: int | None = None,
        mode: str = "greedy",
        temperature: float = 1.0,
        seed: int = 0,
    ) -> DraftBlock:
        """One drafter forward over [anchor, B-1 MASK slots]; returns the
        gamma = B-1 proposed tokens (plus per-slot distributions in sample
        mode, as required by lossless verification)."""
        if not self.config.conditioning:
            raise ContractError("conditioned draft_block called on unconditioned drafter")
        bsize = block_size or self.config.block_size
        if cache.committed_len != anchor_pos + 1:
            raise ContractError(
                f"cache committed_len {cache.committed_len} != anchor_pos+1 {anchor_pos + 1}"
            )
        with no_grad():
            self.forward_count += 1
            x = self.block_inputs(anchor_token, bsize).reshape(1, bsize, -1)
            positions = np.arange(anchor_pos, anchor_pos + bsize)
            n = cache.entry_count
            extra = [
                (cache.k[li][None, :, :n], cache.v[li][None, :, :n])
                for li in range(self.config.n_layers)
            ]
            hidden, _ = self.block_forward(x, positions, extra, mask=None)
            logits = self.logits_head(hidden).data[0]  # (B, V)
        return self._pick_block(logits, anchor_token, anchor_pos, bsize, mode, temperature, seed)

    def draft_block_unconditioned(
        self,
        pending_tokens: list[int],
        anchor_token: int,
        anchor_pos: int,
        cache: DraftKVCache,
        block_size: int | None = None,
        mode: str = "greedy",
        temperature: float = 1.0,
        seed: int = 0,
    ) -> DraftBlock:
        """Single-pass drafting without target features: the block attends to
        the drafter's own causal KV over the committed prefix. Pending tokens
        (committed since the last call) are folded into the same forward and
        their K/V appended to the cache."""
        if self.config.conditioning:
            raise ContractError("unconditioned draft called on conditioned drafter")
        bsize = block_size or self.config.block_size
        npend = len(pending_tokens)
        if cache.entry_count + npend != anchor_pos:
            raise ContractError(
                f"prefix cache {cache.entry_count} + pending {npend} != anchor_pos {anchor_pos}"
            )
        with no_grad():
            self.forward_count += 1
            c = cache.entry_count
            tlen = npend + bsize
            if npend:
                pend = self.embed_tokens(np.asarray(pending_tokens))
                x = tk.concat([pend, self.block_inputs(anchor_token, bsize)], axis=0)
            else:
                x = self.block_inputs(anchor_token, bsize)
            x = x.reshape(1, tlen, -1)
            positions = np.arange(c, c + tlen)
            extra = [
                (cache.k[li][None, :, :c], cache.v[li][None, :, :c])
                for li in range(self.config.n_layers)
            ]
            # rows: pending (causal), then block (sees prefix + own block)
            cols = c + tlen
            mask = np.full((tlen, cols), MASK_VALUE, dtype=np.float32)
            col_pos = np.concatenate([cache.positions[:c], positions])
            for i in range(npend):
                mask[i, col_pos <= c + i] = 0.0
            mask[npend:, col_pos <= anchor_pos - 1] = 0.0
            mask[npend:, c + npend :] = 0.0
            hidden, token_kv = self.block_forward(
                x, positions, extra, mask, collect_token_kv=True
            )
            if npend:
                cache.append_raw(
                    [(k[0][:, :npend], v[0][:, :npend]) for k, v in token_kv],
                    positions[:npend],
                )
            logits = self.logits_head(hidden).data[0, npend:]
        return self._pick_block(logits, anchor_token, anchor_pos, bsize, mode, temperature, seed)

    def _pick_block(self, logits, anchor_token, anchor_pos, bsize, mode, temperature, seed) -> DraftBlock:
        slot_logits = logits[1:]  # proposals for positions anchor+1..anchor+B-1
        if mode == "greedy":
            tokens = [int(t) for t in slot_logits.argmax(axis=-1)]
            return DraftBlock(anchor_pos, anchor_token, tokens, None)
        if mode != "sample":
            raise ConfigError(f"unknown draft mode {mode!r}")
        z = slot_logits.astype(np.float64) / max(temperature, 1e-8)
        z -= z.max(axis=-1, keepdims=True)
        q = np.exp(z)
        q /= q.sum(axis=-1, keepdims=True)
        tokens = [
            keyed_categorical(q[j], seed, anchor_pos + 1 + j, STREAM_DRAFT)
            for j in range(bsize - 1)
        ]
        return DraftBlock(anchor_pos, anchor_token, tokens, q.astype(np.float64))

    # ---- persistence ----

    def save(self, path):
        tensors = {n: p.data for n, p in self.named_parameters().items()}
        save_checkpoint(
            path,
            "draft",
            self.config.to_dict(),
            tensors,
            extra={"target_hash": self.target_hash, "d_target": self.target.config.d_model},
        )

    @staticmethod
    def load(path, target) -> "DraftModel":
        header, tensors = load_checkpoint(path)
        if header["kind"] != "draft":
            raise ConfigError(f"not a draft checkpoint: kind={header['kind']!r}")
        if header["extra"]["target_hash"] != target.emb_head_hash():
            raise ContractError(
                "drafter/target hash mismatch: this drafter was trained against a "
                "different embedding/head"
            )
        cfg = DraftConfig.from_dict(header["config"])
        model = DraftModel(cfg, target, seed=0)
        for name, p in model.named_parameters().items():
            if name not in tensors:
                raise ConfigError(f"checkpoint missing tensor {name}")
            p.data = tensors[name].copy()
        model.freeze()
        return model
