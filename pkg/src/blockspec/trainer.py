"""Drafter training.

Each sequence contributes K randomly anchored blocks, concatenated into one
query sequence and processed under a sparse attention mask: bidirectional
within a block, context visibility up to each block's anchor position, and
no attention between blocks. The per-slot cross-entropy is weighted by an
exponentially decaying factor so early slots dominate.

Training cost per sequence depends on K and the block size, not on response
length (response length only enters as attention key count).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tk
from .corpus import Sample
from .drafter import DraftModel
from .engine import spec_decode
from .errors import ConfigError, ContractError, NumericError
from .fusion import fuse
from .optim import AdamW, cosine_lr
from .target import TargetModel, select_tap_layers
from .tensor import MASK_VALUE, Tensor, no_grad

# Appendix-style decay defaults per block size.
DEFAULT_DECAY_GAMMA = {16: 7.0, 10: 5.0, 8: 4.0}


def decay_gamma_for_block_size(block_size: int) -> float:
    return DEFAULT_DECAY_GAMMA.get(block_size, max(1.0, block_size / 2.0))


@dataclass
class TrainConfig:
    epochs: int = 6
    lr: float = 6e-4
    warmup_ratio: float = 0.04
    grad_clip: float = 1.0
    anchors_per_seq: int = 32
    block_size: int | None = None  # defaults to the drafter's block size
    decay_gamma: float | None = None  # defaults per block size
    uniform_weights: bool = False  # loss-decay ablation switch
    feature_mode: str = "online"  # {online | offline}
    feature_cache_path: str | None = None
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.anchors_per_seq < 1:
            raise ConfigError("anchors_per_seq must be >= 1")
        if self.decay_gamma is not None and self.decay_gamma <= 0:
            raise ConfigError("decay_gamma must be > 0")
        if self.feature_mode not in ("online", "offline"):
            raise ConfigError(f"unknown feature_mode {self.feature_mode!r}")


@dataclass
class AnchorPlan:
    sequence_id: int
    positions: np.ndarray  # sorted absolute indices into prompt+response


def sample_anchors(sample: Sample, k: int, block_size: int, seed: int, epoch: int, sequence_id: int = 0) -> AnchorPlan:
    """min(K, valid) response anchors without replacement, fresh per epoch.

    Valid anchors are response positions with at least one following token;
    labels past the response end are handled as ignores downstream.
    """
    if len(sample.response) < 2:
        raise ConfigError("response too short to anchor")
    lo = len(sample.prompt)
    hi = len(sample.tokens()) - 2  # inclusive; the final token has no label
    valid = np.arange(lo, hi + 1)
    rng = np.random.default_rng([seed, sequence_id, epoch])
    take = min(k, len(valid))
    chosen = np.sort(rng.permutation(valid)[:take])
    return AnchorPlan(sequence_id, chosen)


class BlockMask:
    """Cell-testable attention structure for concatenated anchor blocks.

    Query rows: blocks in anchor order, each [anchor, B-1 mask slots].
    Columns: context columns first (at context_positions), then the query
    rows themselves. A row of the block anchored at p may attend (a) context
    columns with position <= p and (b) every column of its own block.
    """

    def __init__(self, anchors, block_size: int, context_len: int, context_positions=None):
        anchors = np.asarray(anchors, dtype=np.int64)
        if context_positions is None:
            context_positions = np.arange(context_len)
        context_positions = np.asarray(context_positions, dtype=np.int64)
        if context_positions.shape != (context_len,):
            raise ConfigError("context_positions length must equal context_len")
        self.anchors = anchors
        self.block_size = block_size
        self.context_len = context_len
        self.context_positions = context_positions
        nb = len(anchors)
        q = nb * block_size
        allowed = np.zeros((q, context_len + q), dtype=bool)
        for b, p in enumerate(anchors):
            rows = slice(b * block_size, (b + 1) * block_size)
            allowed[rows, :context_len] = context_positions[None, :] <= p
            allowed[rows, context_len + b * block_size : context_len + (b + 1) * block_size] = True
        self.allowed = allowed

    def additive(self, dtype=np.float32) -> np.ndarray:
        return np.where(self.allowed, 0.0, MASK_VALUE).astype(dtype)


def build_block_mask(anchors, block_size: int, context_len: int, context_positions=None) -> BlockMask:
    return BlockMask(anchors, block_size, context_len, context_positions)


def loss_weights(block_size: int, decay_gamma: float, uniform: bool = False) -> np.ndarray:
    """w_k = exp(-(k-1)/decay_gamma) for slots k = 1..B-1."""
    if uniform:
        return np.ones(block_size - 1, dtype=np.float64)
    k = np.arange(1, block_size, dtype=np.float64)
    return np.exp(-(k - 1.0) / decay_gamma)


def block_ce_loss(slot_logits: Tensor, labels: np.ndarray, decay_gamma: float, uniform: bool = False) -> Tensor:
    """Weighted CE over block slots.

    slot_logits: (n_blocks, B-1, V); labels: (n_blocks, B-1) with -1 = ignore.
    loss = sum_k w_k * CE_k / sum_k w_k over non-ignored slots.
    """
    nb, g, v = slot_logits.shape
    w = loss_weights(g + 1, decay_gamma, uniform)
    flat_labels = labels.reshape(-1)
    active = flat_labels >= 0
    weights = (np.tile(w, nb) * active).astype(np.float32)
    wsum = float(weights.sum())
    if wsum == 0.0:
        raise ContractError("block_ce_loss: every label is ignored")
    safe_labels = np.where(active, flat_labels, 0)
    nll = tk.nll_lastdim(slot_logits.reshape(nb * g, v), safe_labels)
    return (nll * Tensor(weights)).sum() * (1.0 / wsum)


# ---------------------------------------------------------------------------
# Target feature extraction (online / offline)
# ---------------------------------------------------------------------------


def corpus_hash(samples: list[Sample]) -> str:
    h = hashlib.sha256()
    for s in samples:
        h.update(json.dumps([s.prompt, s.response]).encode())
    return h.hexdigest()


def extract_tapped(target: TargetModel, samples: list[Sample], taps, batch_size: int = 16) -> list[np.ndarray]:
    """Tapped hiddens per sequence: (L, n_feat, d) for inputs 0..L-1."""
    out: list[np.ndarray | None] = [None] * len(samples)
    order = sorted(range(len(samples)), key=lambda i: len(samples[i].tokens()))
    with no_grad():
        for i in range(0, len(order), batch_size):
            idx = order[i : i + batch_size]
            lens = [len(samples[j].tokens()) for j in idx]
            tmax = max(lens)
            toks = np.zeros((len(idx), tmax), dtype=np.int64)
            for r, j in enumerate(idx):
                toks[r, : lens[r]] = samples[j].tokens()
            _, tapped = target.forward_with_taps(toks, taps=taps)
            for r, j in enumerate(idx):
                out[j] = tapped[r, : lens[r]].astype(np.float32)
    return out


def write_feature_cache(path, features: list[np.ndarray], target: TargetModel, taps, samples: list[Sample]):
    header = {
        "target_hash": target.param_checksum(),
        "tap_layers": list(taps.layer_indices),
        "corpus_hash": corpus_hash(samples),
        "n_feat": len(taps),
        "d_model": target.config.d_model,
        "seq_lens": [int(f.shape[0]) for f in features],
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for arr in features:
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_feature_cache(path, target: TargetModel, taps, samples: list[Sample]) -> list[np.ndarray]:
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode())
        blob = f.read()
    if header["target_hash"] != target.param_checksum():
        raise ConfigError("stale feature cache: target hash mismatch")
    if header["tap_layers"] != list(taps.layer_indices):
        raise ConfigError("stale feature cache: tap set mismatch")
    if header["corpus_hash"] != corpus_hash(samples):
        raise ConfigError("stale feature cache: corpus hash mismatch")
    n_feat, d = header["n_feat"], header["d_model"]
    feats = []
    off = 0
    for L in header["seq_lens"]:
        n = L * n_feat * d
        feats.append(
            np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(L, n_feat, d).copy()
        )
        off += n * 4
    return feats


# ---------------------------------------------------------------------------
# Batch assembly
# ---------------------------------------------------------------------------


def _pad_plan(plan: AnchorPlan, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Pad an anchor plan to exactly k blocks by cycling real anchors; padded
    blocks carry a flag so their labels become ignores (blocks are
    independent, so duplicates are harmless)."""
    pos = plan.positions
    real = len(pos)
    if real >= k:
        return pos[:k], np.ones(k, dtype=bool)
    reps = int(np.ceil(k / real))
    padded = np.tile(pos, reps)[:k]
    flags = np.zeros(k, dtype=bool)
    flags[:real] = True
    return padded, flags


def _build_batch(
    batch: list[tuple[Sample, np.ndarray | None]],
    plans: list[AnchorPlan],
    k: int,
    bsize: int,
    vocab,
):
    """Shared geometry for a batch: query ids/positions, labels, anchor grid."""
    bsz = len(batch)
    q = k * bsize
    lens = [len(s.tokens()) for s, _ in batch]
    anchors = np.zeros((bsz, k), dtype=np.int64)
    real_flags = np.zeros((bsz, k), dtype=bool)
    ids = np.zeros((bsz, q), dtype=np.int64)
    is_anchor = np.zeros((bsz, q, 1), dtype=np.float32)
    q_pos = np.zeros((bsz, q), dtype=np.int64)
    labels = np.full((bsz, k, bsize - 1), -1, dtype=np.int64)
    for r, ((s, _), plan) in enumerate(zip(batch, plans)):
        toks = s.tokens()
        padded, flags = _pad_plan(plan, k)
        anchors[r], real_flags[r] = padded, flags
        for b, (p, real) in enumerate(zip(padded, flags)):
            base = b * bsize
            ids[r, base] = toks[p]
            is_anchor[r, base, 0] = 1.0
            q_pos[r, base : base + bsize] = np.arange(p, p + bsize)
            if real:
                for slot in range(1, bsize):
                    tgt = p + slot
                    if tgt < lens[r]:
                        labels[r, b, slot - 1] = toks[tgt]
    return lens, anchors, real_flags, ids, is_anchor, q_pos, labels


def _query_embeddings(drafter: DraftModel, ids: np.ndarray, is_anchor: np.ndarray) -> Tensor:
    dtype = drafter.mask_emb.data.dtype
    emb = tk.embedding_lookup(drafter.target.emb, ids)
    sel = Tensor(is_anchor.astype(dtype))
    inv = Tensor((1.0 - is_anchor).astype(dtype))
    return emb * sel + drafter.mask_emb.reshape(1, 1, -1) * inv


def drafter_train_loss(
    drafter: DraftModel,
    batch: list[tuple[Sample, np.ndarray | None]],
    plans: list[AnchorPlan],
    cfg: TrainConfig,
    bsize: int,
    decay_gamma: float,
) -> Tensor:
    """Forward + loss for one batch. batch pairs each Sample with its tapped
    target hiddens (conditioned) or None (unconditioned)."""
    vocab = drafter.vocab
    k = cfg.anchors_per_seq
    bsz = len(batch)
    lens, anchors, real_flags, ids, is_anchor, q_pos, labels = _build_batch(
        batch, plans, k, bsize, vocab
    )
    x = _query_embeddings(drafter, ids, is_anchor)
    q = k * bsize

    if drafter.config.conditioning:
        # context columns at positions 1..C: entry p is fused from the
        # target hidden at input p-1
        c = max(lens) - 1
        nf, d = drafter.config.n_feat, drafter.target.config.d_model
        ctx = np.zeros((bsz, c, nf, d), dtype=drafter.mask_emb.data.dtype)
        for r, (s, tapped) in enumerate(batch):
            ctx[r, : lens[r] - 1] = tapped[: lens[r] - 1]
        fused = fuse(Tensor(ctx), drafter.fusion)  # (bsz, c, d_draft)
        h, dh = drafter.config.n_heads, drafter.config.head_dim
        ctx_positions = np.arange(1, c + 1)
        extra = []
        for lyr in drafter.layers:
            ck = tk.linear(fused, lyr["wk"]).reshape(bsz, c, h, dh).transpose(0, 2, 1, 3)
            if drafter.config.use_rope:
                ck = tk.rope_apply(ck, ctx_positions, drafter.config.rope_theta)
            cv = tk.linear(fused, lyr["wv"]).reshape(bsz, c, h, dh).transpose(0, 2, 1, 3)
            extra.append((ck, cv))
        mask = np.empty((bsz, 1, q, c + q), dtype=np.float32)
        for r in range(bsz):
            bm = build_block_mask(anchors[r], bsize, c, ctx_positions)
            mask[r, 0] = bm.additive()
        hidden, _ = drafter.block_forward(x, q_pos, extra, mask)
        block_hidden = hidden
        offset = 0
    else:
        # prefix tokens ride along causally in the same forward
        lmax = max(lens)
        ptoks = np.zeros((bsz, lmax), dtype=np.int64)
        for r, (s, _) in enumerate(batch):
            ptoks[r, : lens[r]] = s.tokens()
        prefix = tk.embedding_lookup(drafter.target.emb, ptoks)
        x = tk.concat([prefix, x], axis=1)
        positions = np.concatenate(
            [np.tile(np.arange(lmax), (bsz, 1)), q_pos], axis=1
        )
        t = lmax + q
        mask = np.full((bsz, 1, t, t), MASK_VALUE, dtype=np.float32)
        for r in range(bsz):
            li = lens[r]
            tri = np.tril(np.ones((lmax, lmax), dtype=bool))
            tri[:, li:] = False
            mask[r, 0, :lmax, :lmax][tri] = 0.0
            for b, (p, real) in enumerate(zip(anchors[r], real_flags[r])):
                rows = slice(lmax + b * bsize, lmax + (b + 1) * bsize)
                mask[r, 0, rows, : min(p, li)] = 0.0  # prefix cols <= anchor-1
                mask[r, 0, rows, rows] = 0.0
        hidden, _ = drafter.block_forward(x, positions, None, mask)
        block_hidden = hidden
        offset = lmax

    logits = drafter.logits_head(block_hidden)
    v = vocab.size
    slot = logits[:, offset:, :].reshape(bsz, k, bsize, v)[:, :, 1:, :]
    return block_ce_loss(
        slot.reshape(bsz * k, bsize - 1, v),
        labels.reshape(bsz * k, bsize - 1),
        decay_gamma,
        cfg.uniform_weights,
    )


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def train_drafter(
    samples: list[Sample],
    target: TargetModel,
    drafter: DraftModel,
    cfg: TrainConfig,
    val_samples: list[Sample] | None = None,
    log_fn=None,
) -> list[dict]:
    """Train the drafter (layers, fusion, MASK embedding) against a frozen
    target. Returns the per-epoch metrics log."""
    if not samples:
        raise ConfigError("empty corpus")
    if any(p.requires_grad for p in target.parameters()):
        raise ContractError("target must be frozen before drafter training")
    bsize = cfg.block_size or drafter.config.block_size
    decay_gamma = cfg.decay_gamma if cfg.decay_gamma is not None else decay_gamma_for_block_size(bsize)

    usable = [s for s in samples if len(s.response) >= 2]
    skipped = len(samples) - len(usable)
    if skipped and log_fn:
        log_fn({"warning": "skipped_short_responses", "count": skipped})
    if not usable:
        raise ConfigError("no usable sequences (all responses too short)")

    conditioned = drafter.config.conditioning
    taps = select_tap_layers(target.config.n_layers, drafter.config.n_feat)
    features: list[np.ndarray | None]
    if conditioned:
        if cfg.feature_mode == "offline":
            path = cfg.feature_cache_path
            if path is None:
                raise ConfigError("offline feature_mode requires feature_cache_path")
            if Path(path).exists():
                features = read_feature_cache(path, target, taps, usable)
            else:
                features = extract_tapped(target, usable, taps)
                write_feature_cache(path, features, target, taps, usable)
        else:
            features = [None] * len(usable)  # computed per batch
    else:
        features = [None] * len(usable)

    params = drafter.parameters()
    opt = AdamW(params, lr=cfg.lr, weight_decay=0.01, grad_clip_norm=cfg.grad_clip)
    order_rng = np.random.default_rng(cfg.seed + 7)

    # stable length-bucketed batches of sequence indices
    order = sorted(range(len(usable)), key=lambda i: (len(usable[i].tokens()), i))
    batches = [order[i : i + cfg.batch_size] for i in range(0, len(order), cfg.batch_size)]
    total_steps = cfg.epochs * len(batches)
    metrics_log: list[dict] = []
    step = 0
    for epoch in range(cfg.epochs):
        perm = order_rng.permutation(len(batches))
        epoch_loss, nb = 0.0, 0
        for bi in perm:
            idx = batches[bi]
            plans = [
                sample_anchors(usable[i], cfg.anchors_per_seq, bsize, cfg.seed, epoch, i)
                for i in idx
            ]
            if conditioned and cfg.feature_mode == "online":
                feats = extract_tapped(target, [usable[i] for i in idx], taps, batch_size=len(idx))
            else:
                feats = [features[i] for i in idx]
            batch = [(usable[i], f) for i, f in zip(idx, feats)]
            opt.lr = cosine_lr(step, total_steps, cfg.lr, cfg.warmup_ratio)
            loss = drafter_train_loss(drafter, batch, plans, cfg, bsize, decay_gamma)
            if not math.isfinite(loss.item()):
                raise NumericError("drafter training diverged (NaN loss)")
            loss.backward()
            opt.step()
            epoch_loss += loss.item()
            nb += 1
            step += 1
        entry = {"epoch": epoch, "loss": epoch_loss / max(1, nb)}
        if val_samples:
            entry["val_tau"] = validation_tau(target, drafter, val_samples, bsize)
        metrics_log.append(entry)
        if log_fn:
            log_fn(entry)
    drafter.freeze()
    return metrics_log


def validation_tau(target, drafter, val_samples, bsize: int, max_new: int = 24) -> float:
    taus = []
    for s in val_samples:
        _, m = spec_decode(s.prompt, target, drafter, block_size=bsize, max_new=max_new)
        if m.cycles:
            taus.append(m.mean_tau)
    return float(np.mean(taus)) if taus else 0.0


def loss_decay_ablation(
    samples: list[Sample],
    target: TargetModel,
    make_drafter,
    cfg: TrainConfig,
) -> dict:
    """Paired training curves (decayed vs uniform weights) from identical
    seeds; the expected faster/better convergence is reported, not asserted."""
    curves = {}
    for label, uniform in (("decayed", False), ("uniform", True)):
        drafter = make_drafter()
        run_cfg = TrainConfig(**{**cfg.__dict__, "uniform_weights": uniform})
        log = train_drafter(samples, target, drafter, run_cfg)
        curves[label] = [e["loss"] for e in log]
    return curves
