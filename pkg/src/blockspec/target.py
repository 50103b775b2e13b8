"""Toy decoder-only autoregressive transformer (the frozen verification target).

RMSNorm + rotary attention + SwiGLU blocks. Supports KV-cached incremental
decoding, parallel verification forwards, and read-only hidden-state taps
(the residual-stream output of selected blocks, pre final norm) that feed
the drafter's context fusion.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tk
from .corpus import Sample, Vocab
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, ContractError, NumericError
from .optim import AdamW, cosine_lr
from .rng import STREAM_AR, keyed_categorical
from .tensor import MASK_VALUE, Tensor, no_grad


@dataclass
class TargetConfig:
    n_layers: int = 12
    d_model: int = 128
    n_heads: int = 4
    vocab: Vocab = field(default_factory=Vocab)
    max_seq: int = 512
    d_ff: int | None = None
    rope_theta: float = 10000.0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.n_layers < 4:
            raise ConfigError("n_layers must be >= 4 (tap-layer selection rule)")
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
            "max_seq": self.max_seq,
            "d_ff": self.d_ff,
            "rope_theta": self.rope_theta,
            "vocab_size": self.vocab.size,
        }

    @staticmethod
    def from_dict(d: dict) -> "TargetConfig":
        return TargetConfig(
            n_layers=d["n_layers"],
            d_model=d["d_model"],
            n_heads=d["n_heads"],
            vocab=Vocab(size=d["vocab_size"]),
            max_seq=d["max_seq"],
            d_ff=d["d_ff"],
            rope_theta=d["rope_theta"],
        )


@dataclass(frozen=True)
class TapSet:
    layer_indices: tuple[int, ...]  # 1-based block indices, post-block outputs

    def __post_init__(self):
        idx = self.layer_indices
        if list(idx) != sorted(set(idx)):
            raise ConfigError("tap layers must be strictly increasing")

    def __len__(self):
        return len(self.layer_indices)


def select_tap_layers(n_layers: int, n_feat: int) -> TapSet:
    """n_feat block indices evenly spread over [2, n_layers - 2]."""
    if n_layers < 4:
        raise ConfigError("n_layers must be >= 4")
    if not 1 <= n_feat <= n_layers - 3:
        raise ConfigError(f"n_feat must be in [1, {n_layers - 3}]")
    lo, hi = 2, n_layers - 2
    if n_feat == 1:
        # single-point convention: midpoint of the span, rounded half up
        return TapSet((int(round((lo + hi) / 2)),))
    pts = np.linspace(lo, hi, n_feat)
    return TapSet(tuple(int(round(p)) for p in pts))


class TargetKVCache:
    """Per-layer rope-encoded K/V buffers for one (possibly batched) session."""

    def __init__(self, config: TargetConfig, batch: int = 1, cap: int | None = None):
        self.config = config
        self.batch = batch
        h, dh, cap = config.n_heads, config.head_dim, cap or config.max_seq
        self.k = [np.zeros((batch, h, cap, dh), dtype=np.float32) for _ in range(config.n_layers)]
        self.v = [np.zeros((batch, h, cap, dh), dtype=np.float32) for _ in range(config.n_layers)]
        self.committed_len = 0

    def truncate(self, n: int):
        if n > self.committed_len:
            raise ContractError("cannot truncate cache forward")
        self.committed_len = n

    def clone(self) -> "TargetKVCache":
        other = TargetKVCache.__new__(TargetKVCache)
        other.config = self.config
        other.batch = self.batch
        other.k = [a.copy() for a in self.k]
        other.v = [a.copy() for a in self.v]
        other.committed_len = self.committed_len
        return other


def _init_param(rng: np.random.Generator, shape, scale=0.02, requires_grad=True) -> Tensor:
    return Tensor(rng.normal(0.0, scale, size=shape).astype(np.float32), requires_grad=requires_grad)


class TargetModel:
    def __init__(self, config: TargetConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.vocab = config.vocab
        self.forward_count = 0
        rng = np.random.default_rng(seed)
        d, ff, v = config.d_model, config.d_ff, config.vocab.size
        self.emb = _init_param(rng, (v, d))
        self.head = _init_param(rng, (d, v))
        self.layers = []
        for _ in range(config.n_layers):
            self.layers.append(
                {
                    "attn_norm": Tensor(np.ones(d, dtype=np.float32), requires_grad=True),
                    "wq": _init_param(rng, (d, d)),
                    "wk": _init_param(rng, (d, d)),
                    "wv": _init_param(rng, (d, d)),
                    "wo": _init_param(rng, (d, d)),
                    "mlp_norm": Tensor(np.ones(d, dtype=np.float32), requires_grad=True),
                    "w_gate": _init_param(rng, (d, ff)),
                    "w_up": _init_param(rng, (d, ff)),
                    "w_down": _init_param(rng, (ff, d)),
                }
            )
        self.final_norm = Tensor(np.ones(d, dtype=np.float32), requires_grad=True)
        if dtype is not np.float32:
            for p in self.parameters():
                p.data = p.data.astype(dtype)

    # ---- parameter plumbing ----

    def parameters(self) -> list[Tensor]:
        ps = [self.emb, self.head]
        for lyr in self.layers:
            ps.extend(lyr.values())
        ps.append(self.final_norm)
        return ps

    def named_parameters(self) -> dict[str, Tensor]:
        named = {"emb": self.emb, "head": self.head, "final_norm": self.final_norm}
        for i, lyr in enumerate(self.layers):
            for k, t in lyr.items():
                named[f"layer{i:02d}.{k}"] = t
        return named

    def freeze(self):
        for p in self.parameters():
            p.requires_grad = False

    def param_checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in sorted(self.named_parameters().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
        return h.hexdigest()

    def emb_head_hash(self) -> str:
        """Identity of the shared embedding + LM head (drafter compatibility)."""
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.emb.data, dtype="<f4").tobytes())
        h.update(np.ascontiguousarray(self.head.data, dtype="<f4").tobytes())
        return h.hexdigest()

    # ---- forward ----

    def forward_with_taps(
        self,
        tokens: np.ndarray,
        cache: TargetKVCache | None = None,
        taps: TapSet | None = None,
    ) -> tuple[Tensor, np.ndarray | None]:
        """Process tokens (B, T); returns (logits (B, T, V), tapped hiddens).

        Tapped hiddens are (B, T, n_feat, d_model), detached (taps are
        read-only and never perturb the forward). With a cache, positions
        start at cache.committed_len and the cache is extended by T.
        """
        tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
        bsz, tlen = tokens.shape
        cfg = self.config
        start = 0
        if cache is not None:
            if cache.batch != bsz:
                raise ContractError("cache batch size mismatch")
            start = cache.committed_len
        if start + tlen > cfg.max_seq:
            raise ContractError(f"sequence overflows max_seq={cfg.max_seq}")
        if cache is not None and start + tlen > cache.k[0].shape[2]:
            raise ContractError("sequence overflows cache capacity")
        self.forward_count += 1

        positions = np.arange(start, start + tlen)
        # causal additive mask over (new queries, all keys)
        mask = np.where(
            positions[:, None] >= np.arange(start + tlen)[None, :], 0.0, MASK_VALUE
        ).astype(np.float32)

        h, dh = cfg.n_heads, cfg.head_dim
        x = tk.embedding_lookup(self.emb, tokens)  # (B, T, d)
        tapped = []
        tap_idx = set(taps.layer_indices) if taps is not None else set()

        for li, lyr in enumerate(self.layers):
            xn = tk.rmsnorm(x, lyr["attn_norm"])
            q = tk.linear(xn, lyr["wq"]).reshape(bsz, tlen, h, dh).transpose(0, 2, 1, 3)
            k = tk.linear(xn, lyr["wk"]).reshape(bsz, tlen, h, dh).transpose(0, 2, 1, 3)
            v = tk.linear(xn, lyr["wv"]).reshape(bsz, tlen, h, dh).transpose(0, 2, 1, 3)
            q = tk.rope_apply(q, positions, cfg.rope_theta)
            k = tk.rope_apply(k, positions, cfg.rope_theta)
            if cache is not None:
                cache.k[li][:, :, start : start + tlen] = k.data
                cache.v[li][:, :, start : start + tlen] = v.data
                k_all = Tensor(cache.k[li][:, :, : start + tlen])
                v_all = Tensor(cache.v[li][:, :, : start + tlen])
            else:
                k_all, v_all = k, v
            att = tk.masked_attention(q, k_all, v_all, mask)
            att = att.transpose(0, 2, 1, 3).reshape(bsz, tlen, cfg.d_model)
            x = x + tk.linear(att, lyr["wo"])
            xm = tk.rmsnorm(x, lyr["mlp_norm"])
            x = x + tk.linear(tk.silu(tk.linear(xm, lyr["w_gate"])) * tk.linear(xm, lyr["w_up"]), lyr["w_down"])
            if (li + 1) in tap_idx:
                tapped.append(x.data.copy())

        if cache is not None:
            cache.committed_len = start + tlen
        logits = tk.linear(tk.rmsnorm(x, self.final_norm), self.head)
        tapped_arr = np.stack(tapped, axis=2) if tapped else None  # (B, T, n_feat, d)
        return logits, tapped_arr

    # ---- decoding ----

    def ar_decode(
        self, prompt: list[int], max_new: int, temperature: float = 0.0, seed: int = 0
    ) -> list[int]:
        """Plain autoregressive decoding; greedy at temperature 0."""
        if temperature < 0:
            raise ConfigError("temperature must be >= 0")
        with no_grad():
            cap = min(self.config.max_seq, len(prompt) + max_new + 1)
            cache = TargetKVCache(self.config, batch=1, cap=cap)
            logits, _ = self.forward_with_taps(np.array([prompt]), cache=cache)
            out: list[int] = []
            row = logits.data[0, -1]
            for _ in range(max_new):
                pos = cache.committed_len  # absolute position of the emitted token
                tok = self._pick(row, temperature, seed, pos)
                out.append(tok)
                if tok == self.vocab.EOS:
                    break
                logits, _ = self.forward_with_taps(np.array([[tok]]), cache=cache)
                row = logits.data[0, -1]
        return out

    def ar_decode_batch(self, prompts: list[list[int]], max_new: int) -> list[list[int]]:
        """Greedy batched decoding for equal-length prompts."""
        plen = len(prompts[0])
        if any(len(p) != plen for p in prompts):
            raise ContractError("ar_decode_batch requires equal-length prompts")
        bsz = len(prompts)
        with no_grad():
            cap = min(self.config.max_seq, plen + max_new + 1)
            cache = TargetKVCache(self.config, batch=bsz, cap=cap)
            logits, _ = self.forward_with_taps(np.array(prompts), cache=cache)
            rows = logits.data[:, -1]
            outs: list[list[int]] = [[] for _ in range(bsz)]
            done = np.zeros(bsz, dtype=bool)
            for _ in range(max_new):
                toks = rows.argmax(axis=-1)
                for i in range(bsz):
                    if not done[i]:
                        outs[i].append(int(toks[i]))
                        if toks[i] == self.vocab.EOS:
                            done[i] = True
                if done.all():
                    break
                logits, _ = self.forward_with_taps(toks[:, None], cache=cache)
                rows = logits.data[:, -1]
        return outs

    def _pick(self, logit_row: np.ndarray, temperature: float, seed: int, pos: int) -> int:
        if temperature == 0.0:
            return int(logit_row.argmax())
        z = logit_row.astype(np.float64) / temperature
        z -= z.max()
        p = np.exp(z)
        p /= p.sum()
        return keyed_categorical(p, seed, pos, STREAM_AR)

    # ---- persistence ----

    def save(self, path):
        tensors = {n: p.data for n, p in self.named_parameters().items()}
        save_checkpoint(path, "target", self.config.to_dict(), tensors)

    @staticmethod
    def load(path) -> "TargetModel":
        header, tensors = load_checkpoint(path)
        if header["kind"] != "target":
            raise ConfigError(f"not a target checkpoint: kind={header['kind']!r}")
        cfg = TargetConfig.from_dict(header["config"])
        model = TargetModel(cfg, seed=0)
        for name, p in model.named_parameters().items():
            if name not in tensors:
                raise ConfigError(f"checkpoint missing tensor {name}")
            p.data = tensors[name].copy()
        model.freeze()
        return model


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def train_target(
    samples: list[Sample],
    config: TargetConfig,
    epochs: int = 3,
    lr: float = 1e-3,
    batch_size: int = 32,
    seed: int = 0,
    warmup_ratio: float = 0.04,
    log_fn=None,
) -> TargetModel:
    """Next-token cross-entropy on prompt+response, loss on response only."""
    if not samples:
        raise ConfigError("empty corpus")
    model = TargetModel(config, seed=seed)
    params = model.parameters()
    opt = AdamW(params, lr=lr, weight_decay=0.01, grad_clip_norm=1.0)
    order_rng = np.random.default_rng(seed + 1)

    batches = _length_batches(samples, batch_size)
    total_steps = epochs * len(batches)
    step = 0
    for epoch in range(epochs):
        perm = order_rng.permutation(len(batches))
        epoch_loss, epoch_tok = 0.0, 0
        for bi in perm:
            toks, labels, weights = batches[bi]
            opt.lr = cosine_lr(step, total_steps, lr, warmup_ratio)
            bsz, tlen = toks.shape
            logits, _ = model.forward_with_taps(toks[:, :-1])
            nll = tk.nll_lastdim(
                logits.reshape(bsz * (tlen - 1), config.vocab.size), labels.reshape(-1)
            )
            wsum = float(weights.sum())
            loss = (nll * Tensor(weights.reshape(-1))).sum() * (1.0 / wsum)
            if not np.isfinite(loss.item()):
                raise NumericError("target training diverged (NaN loss)")
            loss.backward()
            opt.step()
            epoch_loss += loss.item() * wsum
            epoch_tok += wsum
            step += 1
        if log_fn:
            log_fn({"epoch": epoch, "loss": epoch_loss / max(1.0, epoch_tok)})
    model.freeze()
    return model


def _length_batches(samples: list[Sample], batch_size: int):
    """Right-padded batches grouped by similar length; labels on response only."""
    vocab_pad = 0
    ordered = sorted(samples, key=lambda s: len(s.tokens()))
    batches = []
    for i in range(0, len(ordered), batch_size):
        chunk = ordered[i : i + batch_size]
        tmax = max(len(s.tokens()) for s in chunk)
        toks = np.full((len(chunk), tmax), vocab_pad, dtype=np.int64)
        labels = np.zeros((len(chunk), tmax - 1), dtype=np.int64)
        weights = np.zeros((len(chunk), tmax - 1), dtype=np.float32)
        for r, s in enumerate(chunk):
            seq = s.tokens()
            toks[r, : len(seq)] = seq
            plen = len(s.prompt)
            for p in range(tmax - 1):
                nxt = p + 1
                if nxt < len(seq) and nxt >= plen:
                    labels[r, p] = seq[nxt]
                    weights[r, p] = 1.0
        batches.append((toks, labels, weights))
    return batches
