"""The speculative decoding loop.

Cycle: single-pass block draft -> one parallel target forward verifying all
gamma proposals (and producing the bonus token) -> cache rollback -> context
injection for the newly committed positions -> bonus token anchors the next
block. Greedy verification reproduces the target's argmax sequence exactly;
sampled verification uses the standard lossless rejection rule.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .drafter import DraftBlock, DraftKVCache, DraftModel
from .errors import ConfigError, ContractError
from .fusion import fuse, project_kv
from .rng import STREAM_ACCEPT, STREAM_AR, STREAM_BONUS, keyed_categorical, keyed_uniform
from .target import TargetKVCache, TargetModel, select_tap_layers
from .tensor import no_grad


@dataclass
class VerifyResult:
    accepted: int  # a in [0, gamma]
    bonus_token: int
    cycle_tau: int  # tokens committed this cycle, in [1, gamma + 1]


@dataclass
class DecodeMetrics:
    cycles: int = 0
    total_accepted: int = 0
    tokens_emitted: int = 0
    draft_forward_count: int = 0
    verify_forward_count: int = 0
    tau_values: list[int] = field(default_factory=list)
    draft_s: float = 0.0
    verify_s: float = 0.0
    fuse_s: float = 0.0
    prefill_s: float = 0.0

    @property
    def mean_tau(self) -> float:
        """Tokens committed per cycle. The prefill's first token is emitted
        outside any cycle, so sum(tau_values) == tokens_emitted - 1."""
        return sum(self.tau_values) / self.cycles if self.cycles else 0.0

    def tau_histogram(self) -> dict[int, float]:
        if not self.tau_values:
            return {}
        vals, counts = np.unique(self.tau_values, return_counts=True)
        return {int(v): float(c) / len(self.tau_values) for v, c in zip(vals, counts)}

    def to_dict(self) -> dict:
        return {
            "cycles": self.cycles,
            "mean_tau": self.mean_tau,
            "tau_histogram": {str(k): v for k, v in sorted(self.tau_histogram().items())},
            "phase_ms": {
                "draft": self.draft_s * 1e3,
                "verify": self.verify_s * 1e3,
                "fuse": self.fuse_s * 1e3,
            },
            "prefill_ms": self.prefill_s * 1e3,
            "tokens_emitted": self.tokens_emitted,
        }


def _softmax_rows(logits: np.ndarray, temperature: float) -> np.ndarray:
    z = logits.astype(np.float64) / temperature
    z -= z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=-1, keepdims=True)


def verify_greedy(
    block: DraftBlock, target: TargetModel, target_cache: TargetKVCache, taps=None
) -> tuple[VerifyResult, np.ndarray | None]:
    """One target forward over [anchor, d_1..d_gamma]; accept the matching
    prefix, roll the cache back to the committed length, and hand back the
    tapped hiddens for the committed inputs (anchor through last accepted)."""
    ap = block.anchor_pos
    if target_cache.committed_len != ap:
        raise ContractError(
            f"target cache desync: committed {target_cache.committed_len}, anchor {ap}"
        )
    gamma = len(block.tokens)
    tokens = np.array([[block.anchor_token] + block.tokens], dtype=np.int64)
    with no_grad():
        logits, tapped = target.forward_with_taps(tokens, cache=target_cache, taps=taps)
    yhat = logits.data[0].argmax(axis=-1)  # predictions for positions ap+1..ap+gamma+1
    a = 0
    while a < gamma and block.tokens[a] == int(yhat[a]):
        a += 1
    bonus = int(yhat[a])
    target_cache.truncate(ap + a + 1)
    valid_taps = tapped[0, : a + 1] if tapped is not None else None
    return VerifyResult(accepted=a, bonus_token=bonus, cycle_tau=a + 1), valid_taps


def verify_sampled(
    block: DraftBlock,
    target: TargetModel,
    target_cache: TargetKVCache,
    temperature: float,
    seed: int,
    taps=None,
) -> tuple[VerifyResult, np.ndarray | None]:
    """Lossless rejection-rule verification at temperature > 0.

    Accept d_j iff u < min(1, p_j(d_j)/q_j(d_j)); on first rejection sample
    the replacement from normalize(max(0, p_j - q_j)); on full acceptance
    sample the bonus from the next-position target distribution. All draws
    are keyed by (seed, absolute position), independent of cycle boundaries.
    """
    if block.qdists is None:
        raise ContractError("sampled verification requires drafter distributions")
    if temperature <= 0:
        raise ConfigError("sampled verification requires temperature > 0")
    ap = block.anchor_pos
    if target_cache.committed_len != ap:
        raise ContractError(
            f"target cache desync: committed {target_cache.committed_len}, anchor {ap}"
        )
    gamma = len(block.tokens)
    tokens = np.array([[block.anchor_token] + block.tokens], dtype=np.int64)
    with no_grad():
        logits, tapped = target.forward_with_taps(tokens, cache=target_cache, taps=taps)
    p = _softmax_rows(logits.data[0], temperature)  # rows j -> position ap+1+j

    a = gamma
    bonus = None
    for j in range(gamma):
        d = block.tokens[j]
        qj = block.qdists[j]
        if qj[d] <= 0.0:
            raise ContractError("drafter proposed a token outside its own support")
        u = keyed_uniform(seed, ap + 1 + j, STREAM_ACCEPT)
        if u < min(1.0, p[j][d] / qj[d]):
            continue
        a = j
        residual = np.maximum(p[j] - qj, 0.0)
        total = residual.sum()
        if total <= 0.0:
            # p == q at this position; the rule cannot actually reject here,
            # but guard the degenerate draw anyway
            residual, total = p[j].copy(), 1.0
        bonus = keyed_categorical(residual / total, seed, ap + 1 + j, STREAM_BONUS)
        break
    if bonus is None:
        bonus = keyed_categorical(p[gamma], seed, ap + gamma + 1, STREAM_AR)
    target_cache.truncate(ap + a + 1)
    valid_taps = tapped[0, : a + 1] if tapped is not None else None
    return VerifyResult(accepted=a, bonus_token=bonus, cycle_tau=a + 1), valid_taps


def spec_decode(
    prompt: list[int],
    target: TargetModel,
    drafter: DraftModel,
    block_size: int | None = None,
    mode: str = "greedy",
    temperature: float = 1.0,
    max_new: int = 64,
    seed: int = 0,
) -> tuple[list[int], DecodeMetrics]:
    """Full pipeline: prefill -> inject prompt context -> {draft, verify,
    inject, re-anchor} until EOS or the token budget."""
    if drafter.target_hash != target.emb_head_hash():
        raise ContractError("drafter/target hash mismatch: shared embedding/head differ")
    if mode not in ("greedy", "sample"):
        raise ConfigError(f"unknown decode mode {mode!r}")
    bsize = block_size or drafter.config.block_size
    gamma = bsize - 1
    conditioned = drafter.config.conditioning
    vocab = target.vocab
    metrics = DecodeMetrics()
    n = len(prompt)
    cap = n + max_new + bsize + 2

    taps = select_tap_layers(target.config.n_layers, drafter.config.n_feat) if conditioned else None

    t0 = time.perf_counter()
    target_cache = TargetKVCache(target.config, batch=1, cap=min(cap, target.config.max_seq))
    with no_grad():
        logits, tapped = target.forward_with_taps(np.array([prompt]), cache=target_cache, taps=taps)
    if mode == "greedy":
        first = int(logits.data[0, -1].argmax())
    else:
        p0 = _softmax_rows(logits.data[0, -1:], temperature)[0]
        first = keyed_categorical(p0, seed, n, STREAM_AR)
    metrics.prefill_s = time.perf_counter() - t0

    emitted = [first]
    if first == vocab.EOS or max_new <= 1:
        metrics.tokens_emitted = len(emitted[:max_new])
        return emitted[:max_new], metrics

    draft_cache = drafter.new_cache(cap=cap)
    pending: list[int] = []
    if conditioned:
        t0 = time.perf_counter()
        fused = fuse(tapped[0], drafter.fusion)  # entries for positions 1..n
        draft_cache.append_entries(project_kv(fused, drafter, np.arange(1, n + 1)))
        metrics.fuse_s += time.perf_counter() - t0
    else:
        pending = list(prompt)

    anchor, ap = first, n
    while True:
        t0 = time.perf_counter()
        if conditioned:
            block = drafter.draft_block(
                anchor, ap, draft_cache, bsize, mode=mode, temperature=temperature, seed=seed
            )
        else:
            block = drafter.draft_block_unconditioned(
                pending, anchor, ap, draft_cache, bsize, mode=mode, temperature=temperature, seed=seed
            )
            pending = []
        metrics.draft_s += time.perf_counter() - t0

        t0 = time.perf_counter()
        if mode == "greedy":
            result, valid_taps = verify_greedy(block, target, target_cache, taps=taps)
        else:
            result, valid_taps = verify_sampled(
                block, target, target_cache, temperature, seed, taps=taps
            )
        metrics.verify_s += time.perf_counter() - t0

        a = result.accepted
        cycle_tokens = block.tokens[:a] + [result.bonus_token]
        # EOS inside the accepted prefix: discard the rest, no bonus
        stop = False
        for j, tok in enumerate(block.tokens[:a]):
            if tok == vocab.EOS:
                cycle_tokens = block.tokens[: j + 1]
                stop = True
                break
        if not stop and result.bonus_token == vocab.EOS:
            stop = True
        # budget clamp: final cycle truncated to the remaining token budget
        remaining = max_new - len(emitted)
        if len(cycle_tokens) >= remaining:
            cycle_tokens = cycle_tokens[:remaining]
            stop = True

        emitted.extend(cycle_tokens)
        metrics.cycles += 1
        metrics.total_accepted += a
        metrics.tau_values.append(len(cycle_tokens))
        metrics.draft_forward_count += 1
        metrics.verify_forward_count += 1
        if stop:
            break

        if conditioned:
            t0 = time.perf_counter()
            fused = fuse(valid_taps, drafter.fusion)  # positions ap+1..ap+a+1
            draft_cache.append_entries(
                project_kv(fused, drafter, np.arange(ap + 1, ap + a + 2))
            )
            metrics.fuse_s += time.perf_counter() - t0
        else:
            pending = [anchor] + block.tokens[:a]
        anchor, ap = result.bonus_token, ap + a + 1

    metrics.tokens_emitted = len(emitted)
    return emitted, metrics
