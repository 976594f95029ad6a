"""Masked diffusion model core.

Sequences are ``prompt + completion``; only completion positions are ever
masked. Policies are flat parameter vectors interpreted by a denoiser family
(tabular or mlp). Every family evaluates a whole batch of masked inputs in a
single call and returns raw logits of shape ``(batch, N, V)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .numerics import ParamVector, Tensor, as_tensor, concat, matmul

MASK_RULES = ("count", "bernoulli")


@dataclass(frozen=True)
class Vocabulary:
    size: int

    def __post_init__(self):
        if self.size < 2:
            raise ValueError(f"vocabulary needs at least 2 tokens, got {self.size}")

    @property
    def mask_id(self) -> int:
        return self.size


@dataclass(frozen=True)
class TokenSequence:
    tokens: tuple
    prompt_len: int = 0

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if not 0 <= self.prompt_len <= len(self.tokens):
            raise ValueError(f"prompt_len {self.prompt_len} outside [0, {len(self.tokens)}]")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def prompt(self) -> tuple:
        return self.tokens[: self.prompt_len]

    @property
    def completion(self) -> tuple:
        return self.tokens[self.prompt_len :]

    @property
    def completion_len(self) -> int:
        return len(self.tokens) - self.prompt_len

    def completion_positions(self) -> range:
        return range(self.prompt_len, len(self.tokens))

    def validate(self, vocab: Vocabulary) -> None:
        for t in self.tokens:
            if not 0 <= t < vocab.size:
                raise ValueError(f"token {t} outside vocabulary [0, {vocab.size})")

    def with_completion(self, completion: Sequence[int]) -> "TokenSequence":
        return TokenSequence(self.prompt + tuple(completion), self.prompt_len)


@dataclass(frozen=True)
class MaskedSequence:
    tokens: tuple
    t: float
    masked_positions: frozenset
    prompt_len: int = 0
    rule: str = "count"

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def completion_len(self) -> int:
        return len(self.tokens) - self.prompt_len


def _masked_count(t: float, n: int) -> int:
    # round half up; exact halves have measure zero under t ~ U(0, 1)
    return int(math.floor(t * n + 0.5))


def apply_mask(x0: TokenSequence, positions, t: float, mask_id: int, rule: str = "count") -> MaskedSequence:
    positions = frozenset(int(p) for p in positions)
    for p in positions:
        if not x0.prompt_len <= p < len(x0):
            raise ValueError(f"position {p} is not a completion position")
    tokens = tuple(mask_id if i in positions else tok for i, tok in enumerate(x0.tokens))
    return MaskedSequence(tokens, float(t), positions, x0.prompt_len, rule)


def forward_mask(
    x0: TokenSequence,
    t: float,
    rng: np.random.Generator,
    mask_id: int,
    rule: str = "count",
) -> MaskedSequence:
    """Sample x_t ~ q(x_t | x0).

    ``count`` masks exactly ``round(t * N_c)`` completion positions chosen
    uniformly without replacement; ``bernoulli`` masks each completion
    position independently with probability ``t``.
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"diffusion time must lie in [0, 1], got {t}")
    n_c = x0.completion_len
    if rule == "count":
        k = _masked_count(t, n_c)
        picked = rng.choice(n_c, size=k, replace=False) if k else np.empty(0, dtype=int)
    elif rule == "bernoulli":
        picked = np.flatnonzero(rng.random(n_c) < t)
    else:
        raise ValueError(f"unknown mask rule {rule!r}; expected one of {MASK_RULES}")
    return apply_mask(x0, (x0.prompt_len + int(i) for i in picked), t, mask_id, rule)


def complementary_mask(m: MaskedSequence, x0: TokenSequence, mask_id: int) -> MaskedSequence:
    """Mask exactly the completion positions ``m`` leaves visible, at t' = 1 - t.

    ``x0`` supplies the clean tokens for the positions ``m`` had masked.
    """
    if len(x0) != len(m) or x0.prompt_len != m.prompt_len:
        raise ValueError("clean sequence does not match the masked sequence")
    comp = frozenset(x0.completion_positions()) - m.masked_positions
    t_new = 1.0 - m.t
    if m.rule == "count" and _masked_count(t_new, m.completion_len) != len(comp):
        raise ValueError(
            f"complement masks {len(comp)} positions but round((1-t)*N_c) = "
            f"{_masked_count(t_new, m.completion_len)} at t={m.t}"
        )
    return apply_mask(x0, comp, t_new, mask_id, m.rule)


# -- denoiser families -----------------------------------------------------------


class DenoiserFamily:
    """Maps (flat params, batch of x_t token arrays) to logits (batch, N, V)."""

    kind: str = "abstract"

    def __init__(self, seq_len: int, vocab: Vocabulary, prompt_len: int = 0):
        self.seq_len = seq_len
        self.vocab = vocab
        self.prompt_len = prompt_len

    @property
    def num_params(self) -> int:
        raise NotImplementedError

    def init_params(self, rng: np.random.Generator, scale: float = 0.0) -> ParamVector:
        raise NotImplementedError

    def logits(self, params, tokens: np.ndarray) -> Tensor:
        raise NotImplementedError

    def check_tokens(self, tokens: np.ndarray) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        if tokens.shape[1] != self.seq_len:
            raise ValueError(
                f"{self.kind} denoiser expects length {self.seq_len}, got {tokens.shape[1]}"
            )
        if tokens.min() < 0 or tokens.max() > self.vocab.mask_id:
            raise ValueError("token ids outside vocabulary plus mask")
        return tokens

    def describe(self) -> dict:
        return {"family": self.kind, "seq_len": self.seq_len, "vocab": self.vocab.size,
                "prompt_len": self.prompt_len}


class TabularDenoiser(DenoiserFamily):
    """One free logits row per (full masked context, position).

    Only feasible when (V+1)^N <= 4096; used by every exact oracle.
    """

    kind = "tabular"
    MAX_CONTEXTS = 4096

    def __init__(self, seq_len: int, vocab: Vocabulary, prompt_len: int = 0):
        super().__init__(seq_len, vocab, prompt_len)
        self.num_contexts = (vocab.size + 1) ** seq_len
        if self.num_contexts > self.MAX_CONTEXTS:
            raise ValueError(
                f"tabular denoiser needs (V+1)^N = {self.num_contexts} contexts "
                f"(limit {self.MAX_CONTEXTS})"
            )
        self._radix = (vocab.size + 1) ** np.arange(seq_len - 1, -1, -1)

    @property
    def num_params(self) -> int:
        return self.num_contexts * self.seq_len * self.vocab.size

    def init_params(self, rng, scale=0.0):
        if scale == 0.0:
            return np.zeros(self.num_params)
        return rng.normal(0.0, scale, self.num_params)

    def context_index(self, tokens: np.ndarray) -> np.ndarray:
        return np.asarray(tokens, dtype=np.int64) @ self._radix

    def logits(self, params, tokens):
        tokens = self.check_tokens(tokens)
        table = as_tensor(params).reshape(self.num_contexts, self.seq_len, self.vocab.size)
        return table[self.context_index(tokens)]


def position_features(n: int, dim: int) -> np.ndarray:
    """Sinusoidal position features, shape (n, dim)."""
    pos = np.arange(n)[:, None]
    i = np.arange(dim // 2)[None, :]
    ang = pos / (10.0 ** (2.0 * i / max(dim, 1)))
    feats = np.zeros((n, dim))
    feats[:, 0::2] = np.sin(ang)
    feats[:, 1 : 2 * (dim // 2) : 2] = np.cos(ang)
    return feats


class MLPDenoiser(DenoiserFamily):
    """One-hidden-layer head per completion position.

    Input is the one-hot encoding of x_t (vocabulary plus mask) concatenated
    with sinusoidal features of the head's position. Each completion position
    owns its hidden layer and output layer; prompt rows are all-zero logits.
    """

    kind = "mlp"

    def __init__(self, seq_len, vocab, prompt_len=0, hidden: int = 32, pos_dim: int = 8):
        super().__init__(seq_len, vocab, prompt_len)
        self.hidden = hidden
        self.pos_dim = pos_dim
        self.n_heads = seq_len - prompt_len
        self.in_dim = seq_len * (vocab.size + 1) + pos_dim
        h, d, v, c = hidden, self.in_dim, vocab.size, self.n_heads
        self._shapes = {"w1": (c, d, h), "b1": (c, 1, h), "w2": (c, h, v), "b2": (c, 1, v)}
        self._pos = position_features(seq_len, pos_dim)[prompt_len:]

    @property
    def num_params(self) -> int:
        return sum(int(np.prod(s)) for s in self._shapes.values())

    def _split(self, params: Tensor) -> dict:
        out, off = {}, 0
        for k, s in self._shapes.items():
            n = int(np.prod(s))
            out[k] = params[off : off + n].reshape(*s)
            off += n
        return out

    def init_params(self, rng, scale=1.0):
        parts = []
        for k, s in self._shapes.items():
            if k == "w1":
                parts.append(rng.normal(0.0, scale / math.sqrt(self.seq_len), s).ravel())
            elif k == "w2":
                parts.append(rng.normal(0.0, 0.1 * scale / math.sqrt(self.hidden), s).ravel())
            else:
                parts.append(np.zeros(int(np.prod(s))))
        return np.concatenate(parts)

    def logits(self, params, tokens):
        tokens = self.check_tokens(tokens)
        m = tokens.shape[0]
        onehot = np.zeros((m, self.seq_len, self.vocab.size + 1))
        np.put_along_axis(onehot, tokens[:, :, None], 1.0, axis=2)
        flat = onehot.reshape(m, -1)
        # (heads, m, in_dim)
        x = np.concatenate(
            [np.broadcast_to(flat, (self.n_heads, m, flat.shape[1])),
             np.broadcast_to(self._pos[:, None, :], (self.n_heads, m, self.pos_dim))],
            axis=2,
        )
        w = self._split(as_tensor(params))
        hid = (matmul(Tensor(x), w["w1"]) + w["b1"]).tanh()
        out = (matmul(hid, w["w2"]) + w["b2"]).transpose(1, 0, 2)  # (m, heads, V)
        if self.prompt_len == 0:
            return out
        pad = Tensor(np.zeros((m, self.prompt_len, self.vocab.size)))
        return concat([pad, out], axis=1)

    def describe(self):
        d = super().describe()
        d.update(hidden=self.hidden, pos_dim=self.pos_dim)
        return d


def make_family(kind: str, seq_len: int, vocab: Vocabulary, prompt_len: int = 0, **kw) -> DenoiserFamily:
    if kind == "tabular":
        return TabularDenoiser(seq_len, vocab, prompt_len)
    if kind == "mlp":
        return MLPDenoiser(seq_len, vocab, prompt_len, **kw)
    raise ValueError(f"unknown denoiser family {kind!r}")


# -- policies -------------------------------------------------------------------

TAGS = ("theta", "old", "ref")


@dataclass(frozen=True)
class PolicySnapshot:
    family: DenoiserFamily
    params: np.ndarray = field(repr=False)
    tag: str = "theta"
    frozen: bool = False

    def __post_init__(self):
        if self.tag not in TAGS:
            raise ValueError(f"unknown policy tag {self.tag!r}")
        if self.tag in ("old", "ref") and not self.frozen:
            raise ValueError(f"{self.tag} snapshot must be frozen")
        if self.params.shape != (self.family.num_params,):
            raise ValueError(
                f"params length {self.params.shape} != family size {self.family.num_params}"
            )

    def frozen_copy(self, tag: str) -> "PolicySnapshot":
        return PolicySnapshot(self.family, self.params.copy(), tag=tag, frozen=True)

    def with_params(self, params: np.ndarray) -> "PolicySnapshot":
        return replace(self, params=np.asarray(params, dtype=np.float64))


@dataclass
class DenoiserOutput:
    """Raw logits for one masked input (N, V) or a batch (M, N, V)."""

    logits: Tensor
    source: str = "theta"
    x_t: MaskedSequence | None = None

    @property
    def values(self) -> np.ndarray:
        return self.logits.value


def tokens_array(xs: Sequence[MaskedSequence]) -> np.ndarray:
    return np.array([x.tokens for x in xs], dtype=np.int64)


def denoiser_logits(policy: PolicySnapshot, x_t: MaskedSequence, params=None) -> DenoiserOutput:
    """Logits for every position of ``x_t`` in one evaluation.

    ``params`` overrides the snapshot's vector (used to differentiate w.r.t. theta).
    """
    p = policy.params if params is None else params
    out = policy.family.logits(p, np.asarray(x_t.tokens)[None, :])
    return DenoiserOutput(out[0], policy.tag, x_t)


def batch_logits(policy: PolicySnapshot, xs: Sequence[MaskedSequence] | np.ndarray, params=None) -> Tensor:
    tokens = xs if isinstance(xs, np.ndarray) else tokens_array(xs)
    p = policy.params if params is None else params
    return policy.family.logits(p, tokens)


def seq_log_prob(out: DenoiserOutput, x0: TokenSequence, positions) -> Tensor:
    """Sum over ``positions`` of log softmax(logits[n])[x0[n]]."""
    positions = sorted(int(p) for p in positions)
    n = out.logits.shape[-2]
    for p in positions:
        if not 0 <= p < n:
            raise ValueError(f"position {p} outside [0, {n})")
    if not positions:
        return Tensor(0.0)
    logp = out.logits.log_softmax(-1)
    return logp[positions, [x0.tokens[p] for p in positions]].sum()


def mask_matrix(xs: Sequence[MaskedSequence]) -> np.ndarray:
    m = np.zeros((len(xs), len(xs[0])))
    for i, x in enumerate(xs):
        for p in x.masked_positions:
            m[i, p] = 1.0
    return m


def target_onehot(x0s: Sequence[TokenSequence], vocab_size: int) -> np.ndarray:
    toks = np.array([x.tokens for x in x0s], dtype=np.int64)
    onehot = np.zeros(toks.shape + (vocab_size,))
    np.put_along_axis(onehot, toks[..., None], 1.0, axis=-1)
    return onehot


def token_log_probs(logits: Tensor, onehot: np.ndarray, centralize: bool = False) -> Tensor:
    """Per-position log-prob of the clean token, shape (M, N).

    With ``centralize`` the row's vocabulary mean is removed first; this
    equals the centralized log-softmax because log-sum-exp is row-constant.
    """
    rows = logits.centered(-1) if centralize else logits.log_softmax(-1)
    return (rows * onehot).sum(-1)


# -- ELBO -----------------------------------------------------------------------


def weight_fn(name: str) -> Callable[[float], float]:
    if name in ("inv_t", "1/t"):
        return lambda t: 1.0 / t
    if name in ("const", "constant", "1"):
        return lambda t: 1.0
    raise ValueError(f"unknown time weight {name!r}")


def sample_time(rng: np.random.Generator) -> float:
    # t in (0, 1]; t = 0 would make 1/t undefined
    return 1.0 - rng.random()


def sample_views(
    x0: TokenSequence,
    k: int,
    rng: np.random.Generator,
    mask_id: int,
    rule: str = "bernoulli",
    coupled: bool = False,
) -> list[list[MaskedSequence]]:
    """Draw ``k`` (t, x_t) samples; each entry is [x_t] or [x_t, complement].

    Under the count rule, times that would mask nothing are redrawn.
    """
    if k < 1:
        raise ValueError(f"need at least one time sample, got {k}")
    views = []
    for _ in range(k):
        while True:
            t = sample_time(rng)
            if rule != "count" or _masked_count(t, x0.completion_len) > 0:
                break
        m = forward_mask(x0, t, rng, mask_id, rule)
        group = [m]
        if coupled:
            group.append(complementary_mask(m, x0, mask_id))
        views.append(group)
    return views


def elbo_terms(
    policy: PolicySnapshot,
    x0: TokenSequence,
    views: list[list[MaskedSequence]],
    w: Callable[[float], float],
    params=None,
    centralize: bool = False,
    logits: Tensor | None = None,
) -> Tensor:
    """Per-sample weighted masked log-prob sums, shape (k,).

    Entry i averages ``w(t) * sum_{masked n} log p(x0[n] | x_t)`` over the
    views in ``views[i]`` (one view, or a mask and its complement).
    """
    flat = [v for group in views for v in group]
    if logits is None:
        logits = batch_logits(policy, flat, params)
    lp = token_log_probs(logits, target_onehot([x0] * len(flat), policy.family.vocab.size), centralize)
    weights = np.array([w(v.t) if v.masked_positions else 0.0 for v in flat])
    per_view = (lp * mask_matrix(flat)).sum(-1) * weights
    sizes = {len(g) for g in views}
    if len(sizes) == 1:
        g = sizes.pop()
        return per_view.reshape(len(views), g).mean(-1)
    sel = np.zeros((len(views), len(flat)))
    j = 0
    for i, group in enumerate(views):
        sel[i, j : j + len(group)] = 1.0 / len(group)
        j += len(group)
    return matmul(Tensor(sel), per_view)


def elbo_estimate(
    policy: PolicySnapshot,
    x0: TokenSequence,
    k: int,
    rng: np.random.Generator,
    w: str | Callable[[float], float] = "inv_t",
    rule: str = "bernoulli",
    params=None,
) -> float:
    """Monte-Carlo ELBO: mean over k draws of w(t) * masked log-likelihood."""
    wf = weight_fn(w) if isinstance(w, str) else w
    views = sample_views(x0, k, rng, policy.family.vocab.mask_id, rule)
    return elbo_terms(policy, x0, views, wf, params).mean().item()
