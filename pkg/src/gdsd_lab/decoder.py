"""Iterative re-masking samplers and exact enumeration of their output law."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .mdm import PolicySnapshot, TokenSequence, batch_logits

SELECTIONS = ("low_confidence", "random")


@dataclass(frozen=True)
class DecodeSchedule:
    """Unmasking plan for a completion of known length.

    ``block_size=None`` decodes the whole completion as one block. ``steps``
    is the total count over all blocks and must split evenly across them.
    ``temperature=0`` means greedy argmax sampling.
    """

    steps: int
    selection: str = "low_confidence"
    block_size: int | None = None
    temperature: float = 0.9

    def validate(self, completion_len: int) -> None:
        if self.steps < 1:
            raise ValueError(f"steps must be positive, got {self.steps}")
        if self.selection not in SELECTIONS:
            raise ValueError(f"unknown selection {self.selection!r}")
        if self.temperature < 0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")
        b = completion_len if self.block_size is None else self.block_size
        if b < 1 or completion_len % b:
            raise ValueError(f"block size {b} does not divide completion length {completion_len}")
        n_blocks = completion_len // b
        if self.steps % n_blocks:
            raise ValueError(f"{self.steps} steps do not split over {n_blocks} blocks")
        if self.steps // n_blocks > b:
            raise ValueError(f"{self.steps // n_blocks} steps per block exceed block size {b}")

    def plan(self, completion_len: int) -> list[tuple[range, int]]:
        """List of (block positions relative to completion start, tokens to finalize)."""
        self.validate(completion_len)
        b = completion_len if self.block_size is None else self.block_size
        n_blocks = completion_len // b
        per_block = self.steps // n_blocks
        base, extra = divmod(b, per_block)
        out = []
        for j in range(n_blocks):
            block = range(j * b, (j + 1) * b)
            for s in range(per_block):
                out.append((block, base + (1 if s < extra else 0)))
        return out

    def times(self, completion_len: int) -> list[float]:
        """Fraction of the completion still masked at the start of each step."""
        remaining, out = completion_len, []
        for _, c in self.plan(completion_len):
            out.append(remaining / completion_len)
            remaining -= c
        return out


@dataclass
class Rollout:
    completion: TokenSequence
    schedule: DecodeSchedule
    steps: list = field(default_factory=list)  # [(positions, tokens)] per step


def _probs(logits: np.ndarray, temperature: float) -> np.ndarray:
    """Sampling distribution per row; temperature 0 is a one-hot argmax."""
    if temperature == 0:
        out = np.zeros_like(logits)
        np.put_along_axis(out, logits.argmax(-1)[..., None], 1.0, axis=-1)
        return out
    z = logits / temperature
    z = z - z.max(-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(-1, keepdims=True)


def _select(conf: np.ndarray, count: int, selection: str, rng) -> np.ndarray:
    """Column indices (rows x count) to finalize; ``conf`` is untempered p(sampled)."""
    if selection == "random":
        keys = rng.random(conf.shape)
        return np.argsort(keys, axis=1, kind="stable")[:, :count]
    # highest confidence first; stable sort keeps lower index on ties
    return np.argsort(-conf, axis=1, kind="stable")[:, :count]


def decode_batch(
    policy: PolicySnapshot,
    prompt: TokenSequence,
    sched: DecodeSchedule,
    rng: np.random.Generator,
    n: int,
) -> list[Rollout]:
    """Run ``n`` independent re-masking decodes in lockstep."""
    fam = policy.family
    n_c = fam.seq_len - prompt.prompt_len
    plan = sched.plan(n_c)
    mask_id = fam.vocab.mask_id
    p0 = prompt.prompt_len
    x = np.full((n, fam.seq_len), mask_id, dtype=np.int64)
    x[:, :p0] = prompt.prompt
    records = [[] for _ in range(n)]
    rows = np.arange(n)[:, None]
    for block, count in plan:
        cand_all = np.array([p0 + j for j in block])
        still = x[:, cand_all] == mask_id  # same count per row, different positions
        cand = np.broadcast_to(cand_all, still.shape)[still].reshape(n, -1)
        logits = np.take_along_axis(batch_logits(policy, x).value, cand[..., None], 1)
        probs = _probs(logits, sched.temperature)
        plain = _probs(logits, 1.0)
        cum = probs.cumsum(-1)
        u = rng.random(probs.shape[:2] + (1,))
        sampled = np.minimum((u > cum).sum(-1), probs.shape[-1] - 1)
        if sched.temperature == 0:
            sampled = probs.argmax(-1)
        conf = np.take_along_axis(plain, sampled[..., None], -1)[..., 0]
        pick = _select(conf, count, sched.selection, rng)
        pos = np.take_along_axis(cand, pick, 1)
        x[rows, pos] = np.take_along_axis(sampled, pick, 1)
        for i in range(n):
            order = np.argsort(pos[i])
            records[i].append((tuple(int(p) for p in pos[i][order]),
                               tuple(int(v) for v in x[i, pos[i][order]])))
    return [Rollout(TokenSequence(x[i], p0), sched, records[i]) for i in range(n)]


def decode(policy: PolicySnapshot, prompt: TokenSequence, sched: DecodeSchedule, rng) -> Rollout:
    """Single re-masking decode starting from a fully masked completion."""
    return decode_batch(policy, prompt, sched, rng, 1)[0]


# -- exact sampler distribution ---------------------------------------------------

MAX_V, MAX_NC, MAX_T = 4, 4, 4


def rm_exact_log_prob(policy: PolicySnapshot, x0: TokenSequence, sched: DecodeSchedule) -> float:
    """Exact log pi^rm(x0) by summing over every selection/token trajectory."""
    fam = policy.family
    v, n_c = fam.vocab.size, x0.completion_len
    if v > MAX_V or n_c > MAX_NC or sched.steps > MAX_T:
        raise ValueError(
            f"instance too large for exact enumeration: V={v}, N_c={n_c}, T={sched.steps} "
            f"(limits V<={MAX_V}, N_c<={MAX_NC}, T<={MAX_T})"
        )
    plan = sched.plan(n_c)
    p0, mask_id = x0.prompt_len, fam.vocab.mask_id
    target = np.array(x0.tokens)

    @lru_cache(maxsize=None)
    def probs_at(revealed: frozenset) -> tuple[np.ndarray, np.ndarray]:
        x = np.full(fam.seq_len, mask_id, dtype=np.int64)
        x[:p0] = target[:p0]
        for p in revealed:
            x[p] = target[p]
        logits = batch_logits(policy, x[None, :]).value[0]
        return _probs(logits, sched.temperature), _probs(logits, 1.0)

    def step_prob(revealed: frozenset, block: range, count: int, chosen: tuple) -> float:
        cand = [p0 + j for j in block if p0 + j not in revealed]
        probs, plain = probs_at(revealed)
        if sched.selection == "random":
            p = 1.0 / math.comb(len(cand), count)
            for q in chosen:
                p *= probs[q, target[q]]
            return p
        # low confidence: sum over every token assignment at the candidates
        total = 0.0
        for assign in itertools.product(range(v), repeat=len(cand)):
            if any(assign[cand.index(q)] != target[q] for q in chosen):
                continue
            pr = 1.0
            conf = np.empty(len(cand))
            for i, (q, tok) in enumerate(zip(cand, assign)):
                pr *= probs[q, tok]
                conf[i] = plain[q, tok]
            if pr == 0.0:
                continue
            top = np.argsort(-conf, kind="stable")[:count]
            if tuple(sorted(cand[i] for i in top)) == chosen:
                total += pr
        return total

    @lru_cache(maxsize=None)
    def rec(k: int, revealed: frozenset) -> float:
        if k == len(plan):
            return 1.0
        block, count = plan[k]
        cand = [p0 + j for j in block if p0 + j not in revealed]
        total = 0.0
        for chosen in itertools.combinations(cand, count):
            sp = step_prob(revealed, block, count, chosen)
            if sp > 0.0:
                total += sp * rec(k + 1, revealed | frozenset(chosen))
        return total

    prob = rec(0, frozenset())
    return math.log(prob) if prob > 0 else -math.inf
