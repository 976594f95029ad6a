"""Training losses: GDSD teacher construction and matching, plus ELBO baselines.

All losses return :class:`~gdsd_lab.numerics.Tensor` scalars so they can be
differentiated with respect to theta's flat parameter vector. Old/reference
logits and advantages always enter as constants.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .mdm import (
    DenoiserOutput,
    MaskedSequence,
    PolicySnapshot,
    TokenSequence,
    batch_logits,
    mask_matrix,
    sample_views,
    target_onehot,
    token_log_probs,
    weight_fn,
)
from .numerics import Tensor, as_tensor, clip, matmul, minimum

GDSD_MODES = ("direct", "tlc")
AWELBO_MAX_EXPONENT = 50.0


@dataclass(frozen=True)
class AdvantageRecord:
    reward: float
    advantage: float
    group: int = 0


def compute_advantages(rewards: Sequence[float], group: int = 0) -> list[AdvantageRecord]:
    """Group-mean-centred advantages; no std scaling."""
    if len(rewards) < 2:
        raise ValueError(f"advantage groups need at least 2 rewards, got {len(rewards)}")
    r = np.asarray(rewards, dtype=np.float64)
    adv = r - r.mean()
    return [AdvantageRecord(float(a), float(b), group) for a, b in zip(r, adv)]


def tlc(logits):
    """Token-level logit centralization: subtract each row's vocabulary mean."""
    if isinstance(logits, Tensor):
        return logits.centered(-1)
    x = np.asarray(logits, dtype=np.float64)
    return x - x.mean(axis=-1, keepdims=True)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(-1, keepdims=True)
    return z - np.log(np.exp(z).sum(-1, keepdims=True))


def _rows(logits: np.ndarray, mode: str) -> np.ndarray:
    if mode not in GDSD_MODES:
        raise ValueError(f"unknown GDSD mode {mode!r}; expected one of {GDSD_MODES}")
    lp = _log_softmax(np.asarray(logits, dtype=np.float64))
    return tlc(lp) if mode == "tlc" else lp


@dataclass
class TeacherTarget:
    target_logits: np.ndarray  # (len(positions), V)
    positions: tuple
    mode: str
    psi: float
    beta: float

    def sequence_score(self, completion_tokens: Sequence[int]) -> float:
        """Sum of target logits at ``positions`` for full-sequence tokens."""
        return float(sum(self.target_logits[i, completion_tokens[p]] for i, p in enumerate(self.positions)))


def _check_beta(beta: float, upper_open: bool = False) -> None:
    if not 0.0 <= beta <= 1.0 or (upper_open and beta == 1.0):
        bound = "[0, 1)" if upper_open else "[0, 1]"
        raise ValueError(f"beta must lie in {bound}, got {beta}")


def teacher_logits(
    old: DenoiserOutput,
    ref: DenoiserOutput,
    advantage: float,
    psi: float,
    beta: float,
    mode: str = "tlc",
    positions=None,
    spread: str = "uniform",
    x0: TokenSequence | None = None,
) -> TeacherTarget:
    """Per-position guided-teacher logits at the supervised (masked) positions.

    ``(1-beta) * l_old + beta * l_ref`` plus the advantage shift ``psi * A``
    split over the positions: evenly across every entry (``uniform``) or onto
    the realized token of ``x0`` only (``realized``). Summed over a sequence
    the target equals the unnormalized log teacher up to an x_t-constant.
    """
    _check_beta(beta)
    if positions is None:
        if old.x_t is None:
            raise ValueError("positions required when outputs carry no masked sequence")
        positions = old.x_t.masked_positions
    positions = tuple(sorted(positions))
    if old.x_t is not None and ref.x_t is not None and old.x_t.tokens != ref.x_t.tokens:
        raise ValueError("old and reference outputs were computed on different x_t")
    lo = _rows(old.values, mode)[list(positions)]
    lr = _rows(ref.values, mode)[list(positions)]
    target = (1.0 - beta) * lo + beta * lr
    m = len(positions)
    if m:
        if spread == "uniform":
            target = target + psi * advantage / m
        elif spread == "realized":
            if x0 is None:
                raise ValueError("realized-token spreading needs the clean sequence")
            for i, p in enumerate(positions):
                target[i, x0.tokens[p]] += psi * advantage / m
        else:
            raise ValueError(f"unknown advantage spread {spread!r}")
    return TeacherTarget(target, positions, mode, psi, beta)


@dataclass
class LossBreakdown:
    total: Tensor
    match_term: Tensor
    reg_term: Tensor
    weights: list = field(default_factory=list)

    def as_floats(self) -> dict:
        return {"total": self.total.item(), "match": self.match_term.item(), "reg": self.reg_term.item()}


def gdsd_from_sums(s_theta: Tensor, s_old, s_ref, advantages, psi: float, beta: float) -> LossBreakdown:
    """Vectorised GDSD over samples given per-sample log-prob sums.

    match = mean (s_theta - s_old - psi*A)^2, reg = mean (s_theta - s_ref)^2,
    total = match + beta/(1-beta) * reg.
    """
    _check_beta(beta, upper_open=True)
    adv = np.asarray(advantages, dtype=np.float64)
    match = (s_theta - as_tensor(s_old) - psi * adv).square().mean()
    reg = (s_theta - as_tensor(s_ref)).square().mean()
    return LossBreakdown(match + (beta / (1.0 - beta)) * reg, match, reg)


def _same_mask(outs: Sequence[DenoiserOutput], x_t: MaskedSequence) -> None:
    for o in outs:
        if o.x_t is not None and o.x_t.masked_positions != x_t.masked_positions:
            raise ValueError(f"{o.source} output was computed on a different mask")


def gdsd_loss(
    theta_out: DenoiserOutput,
    old_out: DenoiserOutput,
    ref_out: DenoiserOutput,
    advantage: float,
    psi: float,
    beta: float,
    mode: str,
    x0: TokenSequence,
    x_t: MaskedSequence,
    weight: float = 1.0,
) -> LossBreakdown:
    """GDSD loss on one masked view with the k2 reference regularizer."""
    if mode not in GDSD_MODES:
        raise ValueError(f"unknown GDSD mode {mode!r}")
    _same_mask([theta_out, old_out, ref_out], x_t)
    centralize = mode == "tlc"
    mask = mask_matrix([x_t])[0]
    onehot = target_onehot([x0], theta_out.logits.shape[-1])[0]

    def s(out: DenoiserOutput) -> Tensor:
        return (token_log_probs(out.logits, onehot, centralize) * mask).sum() * weight

    res = gdsd_from_sums(
        s(theta_out).reshape(1), s(old_out).detach().reshape(1), s(ref_out).detach().reshape(1),
        [advantage], psi, beta,
    )
    res.weights = [weight]
    return res


# -- batched view bookkeeping ---------------------------------------------------------


@dataclass
class ViewBatch:
    """Flattened masked views for a set of (completion, time-sample) pairs.

    ``sel`` (samples x views) averages each sample's views (mask and, when
    coupled, its complement); ``weights`` holds w(t) per view.
    """

    x0s: list
    views: list
    weights: np.ndarray
    sel: np.ndarray
    sample_owner: np.ndarray  # completion index per sample

    @classmethod
    def build(cls, x0s, view_groups, w: Callable[[float], float]) -> "ViewBatch":
        flat_x0, flat, owner, sizes = [], [], [], []
        for ci, (x0, groups) in enumerate(zip(x0s, view_groups)):
            for g in groups:
                owner.append(ci)
                sizes.append(len(g))
                for v in g:
                    flat.append(v)
                    flat_x0.append(x0)
        sel = np.zeros((len(sizes), len(flat)))
        j = 0
        for i, n in enumerate(sizes):
            sel[i, j : j + n] = 1.0 / n
            j += n
        weights = np.array([w(v.t) if v.masked_positions else 0.0 for v in flat])
        return cls(flat_x0, flat, weights, sel, np.array(owner))

    def tokens(self) -> np.ndarray:
        return np.array([v.tokens for v in self.views], dtype=np.int64)

    def token_terms(self, logits: Tensor, centralize: bool = False) -> Tensor:
        """w(t) * 1[masked] * log p(x0[n] | x_t), shape (views, N)."""
        lp = token_log_probs(logits, target_onehot(self.x0s, logits.shape[-1]), centralize)
        return lp * (mask_matrix(self.views) * self.weights[:, None])

    def sample_sums(self, logits: Tensor, centralize: bool = False) -> Tensor:
        return matmul(Tensor(self.sel), self.token_terms(logits, centralize).sum(-1))


def _views_for(policy, x0, k, rng, rule, coupled, views):
    if views is not None:
        return views
    return sample_views(x0, k, rng, policy.family.vocab.mask_id, rule, coupled)


def awelbo_loss(
    theta: PolicySnapshot,
    x0: TokenSequence,
    advantage: float,
    psi: float,
    k: int,
    rng: np.random.Generator | None = None,
    params=None,
    w: str = "inv_t",
    rule: str = "bernoulli",
    views=None,
) -> Tensor:
    """exp(psi*A) times the negative ELBO estimate; the weight is a constant."""
    expo = psi * advantage
    if expo > AWELBO_MAX_EXPONENT:
        raise OverflowError(
            f"psi*A = {expo:.3g} exceeds {AWELBO_MAX_EXPONENT}; use a smaller psi"
        )
    views = _views_for(theta, x0, k, rng, rule, False, views)
    vb = ViewBatch.build([x0], [views], weight_fn(w))
    elbo = vb.sample_sums(batch_logits(theta, vb.tokens(), params)).mean()
    return -elbo * math.exp(expo)


def pg_ppo_elbo_loss(
    theta: PolicySnapshot,
    old: PolicySnapshot,
    x0: TokenSequence,
    advantage: float,
    k: int,
    eps: float = 0.2,
    variant: str = "pg",
    rng: np.random.Generator | None = None,
    params=None,
    w: str = "inv_t",
    rule: str = "bernoulli",
    views=None,
) -> Tensor:
    """ELBO-surrogate policy-gradient / PPO losses with shared (t, mask) draws.

    ``pg``: -exp(ELBO_theta - ELBO_old) * A.
    ``ppo``: token-level clipped objective averaged over completion tokens,
    with per-token ratios built from each token's ELBO contribution.
    """
    views = _views_for(theta, x0, k, rng, rule, False, views)
    vb = ViewBatch.build([x0], [views], weight_fn(w))
    tok = vb.tokens()
    th = vb.token_terms(batch_logits(theta, tok, params))
    ol = vb.token_terms(batch_logits(old, tok)).detach()
    if variant == "pg":
        diff = matmul(Tensor(vb.sel), (th - ol).sum(-1)).mean()
        return -(diff.exp() * advantage)
    if variant == "ppo":
        per_tok = matmul(Tensor(vb.sel), th - ol).mean(0)  # (N,)
        comp = list(x0.completion_positions())
        ratio = per_tok[comp].exp()
        obj = minimum(ratio * advantage, clip(ratio, 1.0 - eps, 1.0 + eps) * advantage)
        return -obj.mean()
    raise ValueError(f"unknown variant {variant!r}; expected 'pg' or 'ppo'")


# -- exact reverse KL on one masked state -------------------------------------------------


def consistent_completions(x_t: MaskedSequence, vocab_size: int) -> list[tuple]:
    """Every full token tuple agreeing with x_t's unmasked tokens."""
    masked = sorted(x_t.masked_positions)
    out = []
    for fill in itertools.product(range(vocab_size), repeat=len(masked)):
        toks = list(x_t.tokens)
        for p, v in zip(masked, fill):
            toks[p] = v
        out.append(tuple(toks))
    return out


def _factorized_logp(logits, x_t: MaskedSequence, seqs: list[tuple]):
    """log p(y | x_t) for each y, as a Tensor if ``logits`` is one."""
    masked = sorted(x_t.masked_positions)
    v = logits.shape[-1]
    sel = np.zeros((len(seqs), len(x_t), v))
    for i, y in enumerate(seqs):
        for p in masked:
            sel[i, p, y[p]] = 1.0
    lp = as_tensor(logits).log_softmax(-1)
    return (lp.reshape(1, *lp.shape) * sel).sum(-1).sum(-1)


MAX_EXACT_COMPLETIONS = 256


def _exact_guard(x_t: MaskedSequence, v: int) -> None:
    n = v ** len(x_t.masked_positions)
    if n > MAX_EXACT_COMPLETIONS:
        raise ValueError(f"{n} consistent completions exceed the enumeration limit {MAX_EXACT_COMPLETIONS}")


def _teacher_log_probs(old_lp: np.ndarray, ref_lp: np.ndarray, adv: np.ndarray, psi, beta):
    score = (1.0 - beta) * old_lp + beta * ref_lp + psi * adv
    m = score.max()
    return score - (m + math.log(np.exp(score - m).sum()))


def reverse_kl_loss_exact(
    theta: PolicySnapshot,
    old: PolicySnapshot,
    ref: PolicySnapshot,
    advantage_fn: Callable[[tuple], float],
    psi: float,
    beta: float,
    x_t: MaskedSequence,
    params=None,
) -> Tensor:
    """KL(p_theta(.|x_t) || p*(.|x_t)) summed over every consistent completion."""
    _check_beta(beta)
    v = theta.family.vocab.size
    _exact_guard(x_t, v)
    seqs = consistent_completions(x_t, v)
    tok = np.array(x_t.tokens)[None, :]
    lt = _factorized_logp(batch_logits(theta, tok, params)[0], x_t, seqs)
    lo = _factorized_logp(batch_logits(old, tok).value[0], x_t, seqs).value
    lr = _factorized_logp(batch_logits(ref, tok).value[0], x_t, seqs).value
    adv = np.array([advantage_fn(y) for y in seqs])
    lstar = _teacher_log_probs(lo, lr, adv, psi, beta)
    return (lt.exp() * (lt - lstar)).sum()


def reverse_kl_terms(theta, old, ref, advantage_fn, psi, beta, x_t) -> dict:
    """Three-term split of the reverse KL at x_t: reward, baseline A_t, regularization.

    reward = E_theta[-psi*A]; baseline = log E_{p_old^ref}[exp(psi*A)];
    regularization = E_theta[log p_theta - log p_old^ref].
    """
    v = theta.family.vocab.size
    _exact_guard(x_t, v)
    seqs = consistent_completions(x_t, v)
    tok = np.array(x_t.tokens)[None, :]
    lt, lo, lr = (
        _factorized_logp(batch_logits(p, tok).value[0], x_t, seqs).value for p in (theta, old, ref)
    )
    adv = np.array([advantage_fn(y) for y in seqs])
    mix = (1.0 - beta) * lo + beta * lr
    mix = mix - np.logaddexp.reduce(mix)
    pt = np.exp(lt)
    return {
        "reward": float(pt @ (-psi * adv)),
        "baseline": float(np.logaddexp.reduce(mix + psi * adv)),
        "regularization": float(pt @ (lt - mix)),
    }
