"""Synthetic task generators, the toy vocabulary, and corpus I/O.

Tasks are deliberately predictable so a trained drafter can realize long
acceptance runs: copy_repeat repeats a prefix, modular_chain iterates an
affine map, pattern_grammar cycles short fixed patterns. Generators are pure
functions of (task, seed, index).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError

TASKS = ("copy_repeat", "modular_chain", "pattern_grammar")


@dataclass(frozen=True)
class Vocab:
    """Token id space. MASK is drafter-internal and never appears in data."""

    size: int = 64
    PAD: int = 0
    BOS: int = 1
    EOS: int = 2
    MASK: int = 3

    @property
    def first_payload(self) -> int:
        return 4

    def __post_init__(self):
        ids = (self.PAD, self.BOS, self.EOS, self.MASK)
        if len(set(ids)) != 4 or max(ids) >= self.size:
            raise ConfigError("reserved ids must be distinct and < size")
        if self.size <= self.first_payload:
            raise ConfigError("vocab needs at least one payload id")


@dataclass
class Sample:
    prompt: list[int]
    response: list[int]
    source_task: str = ""

    def tokens(self) -> list[int]:
        return self.prompt + self.response


def _payload(rng: np.random.Generator, vocab: Vocab, n: int, lo: int = 0, hi: int | None = None):
    hi = vocab.size if hi is None else hi
    return [int(t) for t in rng.integers(vocab.first_payload + lo, hi, size=n)]


def _gen_copy_repeat(rng: np.random.Generator, vocab: Vocab) -> Sample:
    # Prompt encodes the repeat count so the continuation (incl. EOS) is
    # fully determined by the prompt.
    plen = int(rng.integers(3, 7))
    k = int(rng.integers(2, 5))
    prefix = _payload(rng, vocab, plen)
    prompt = [vocab.BOS, vocab.first_payload + k] + prefix
    response = prefix * k + [vocab.EOS]
    return Sample(prompt, response, "copy_repeat")


_CHAIN_M = 60  # payload values 0..59 map to token ids 4..63 in a 64-vocab
_CHAIN_LEN = 20


def _gen_modular_chain(rng: np.random.Generator, vocab: Vocab) -> Sample:
    if vocab.first_payload + _CHAIN_M > vocab.size:
        raise ConfigError("vocab too small for modular_chain values")
    a = int(rng.integers(1, 4))
    b = int(rng.integers(0, 5))
    x = int(rng.integers(0, _CHAIN_M))
    prompt = [
        vocab.BOS,
        vocab.first_payload + a,
        vocab.first_payload + b,
        vocab.first_payload + x,
    ]
    seq = []
    for _ in range(_CHAIN_LEN):
        x = (a * x + b) % _CHAIN_M
        seq.append(vocab.first_payload + x)
    return Sample(prompt, seq + [vocab.EOS], "modular_chain")


# Fixed 3-rule regular grammar: each rule repeats one short pattern.
_GRAMMAR = ([7, 8, 9], [10, 11], [12, 13, 14, 15])


def _gen_pattern_grammar(rng: np.random.Generator, vocab: Vocab) -> Sample:
    rule = int(rng.integers(0, 3))
    reps = int(rng.integers(3, 7))
    pattern = _GRAMMAR[rule]
    prompt = [vocab.BOS, vocab.first_payload + rule, vocab.first_payload + reps]
    response = pattern * reps + [vocab.EOS]
    return Sample(prompt, response, "pattern_grammar")


_GENERATORS = {
    "copy_repeat": _gen_copy_repeat,
    "modular_chain": _gen_modular_chain,
    "pattern_grammar": _gen_pattern_grammar,
}


def gen_task(task: str, seed: int, count: int, vocab: Vocab | None = None) -> list[Sample]:
    if task not in _GENERATORS:
        raise ConfigError(f"unknown task {task!r}; expected one of {TASKS}")
    if count < 1:
        raise ConfigError("count must be >= 1")
    vocab = vocab or Vocab()
    gen = _GENERATORS[task]
    out = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        out.append(gen(rng, vocab))
    return out


def gen_mixture(seed: int, count: int, vocab: Vocab | None = None) -> list[Sample]:
    """Round-robin mix of all tasks, deterministic per seed."""
    per = [count // len(TASKS) + (1 if i < count % len(TASKS) else 0) for i in range(len(TASKS))]
    mixed: list[Sample] = []
    lists = [gen_task(t, seed + i, n, vocab) for i, (t, n) in enumerate(zip(TASKS, per))]
    idx = [0] * len(lists)
    for j in range(count):
        k = j % len(lists)
        while idx[k] >= len(lists[k]):
            k = (k + 1) % len(lists)
        mixed.append(lists[k][idx[k]])
        idx[k] += 1
    return mixed


def distill_responses(samples: list[Sample], target, max_new: int) -> list[Sample]:
    """Replace every response with the target's greedy continuation.

    Samples whose continuation is immediately EOS (empty response) are
    dropped. The target's own tokens become the drafter's training signal.
    """
    if max_new < 1:
        raise ConfigError("max_new must be >= 1")
    eos = target.vocab.EOS
    out = []
    for batch_prompts, batch_samples in _group_by_prompt_len(samples):
        continuations = target.ar_decode_batch(batch_prompts, max_new=max_new)
        for s, resp in zip(batch_samples, continuations):
            if not resp or resp == [eos]:
                continue  # immediate EOS: empty response, dropped
            out.append(Sample(list(s.prompt), resp, s.source_task))
    return out


def _group_by_prompt_len(samples: list[Sample]):
    by_len: dict[int, list[Sample]] = {}
    for s in samples:
        by_len.setdefault(len(s.prompt), []).append(s)
    for plen in sorted(by_len):
        group = by_len[plen]
        for i in range(0, len(group), 64):
            chunk = group[i : i + 64]
            yield [s.prompt for s in chunk], chunk


# ---- JSONL I/O ----


def save_jsonl(samples: list[Sample], path: str | Path):
    with open(path, "w") as f:
        for s in samples:
            f.write(
                json.dumps(
                    {"prompt": s.prompt, "response": s.response, "task": s.source_task}
                )
                + "\n"
            )


def load_jsonl(path: str | Path) -> list[Sample]:
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            out.append(
                Sample(
                    [int(t) for t in obj["prompt"]],
                    [int(t) for t in obj["response"]],
                    obj.get("task", ""),
                )
            )
    return out
