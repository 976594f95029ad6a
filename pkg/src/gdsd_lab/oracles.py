"""Brute-force ground truth on instances small enough to enumerate.

Models are either factorized tabular denoisers (what the library trains) or
:class:`SequenceModel` objects whose conditionals are exact posteriors of a
distribution over the whole completion space. The latter are needed wherever
an identity relies on the denoiser being the posterior of a joint over
(x0, x_t), e.g. the forward-KL / weighted-ELBO gradient equivalence.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .decoder import DecodeSchedule, rm_exact_log_prob
from .mdm import (
    MaskedSequence,
    PolicySnapshot,
    TabularDenoiser,
    TokenSequence,
    Vocabulary,
    apply_mask,
    batch_logits,
    sample_views,
    weight_fn,
)
from .numerics import Tensor, as_tensor
from .objectives import consistent_completions

MAX_SPACE = 256


def logsumexp(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    m = x.max()
    if not np.isfinite(m):
        return float(m)
    return float(m + math.log(np.exp(x - m).sum()))


@dataclass
class EnumerableInstance:
    vocab: Vocabulary
    completion_len: int
    prompt: tuple = ()
    policies: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.vocab.size > 4 or self.completion_len > 4:
            raise ValueError("enumerable instances need V <= 4 and N_c <= 4")
        if self.vocab.size**self.completion_len > MAX_SPACE:
            raise ValueError(f"completion space exceeds {MAX_SPACE}")

    @property
    def prompt_len(self) -> int:
        return len(self.prompt)

    @property
    def seq_len(self) -> int:
        return len(self.prompt) + self.completion_len

    def completions(self) -> list[TokenSequence]:
        return [TokenSequence(self.prompt + c, self.prompt_len)
                for c in itertools.product(range(self.vocab.size), repeat=self.completion_len)]

    def family(self) -> TabularDenoiser:
        return TabularDenoiser(self.seq_len, self.vocab, self.prompt_len)

    def fully_masked(self) -> MaskedSequence:
        x0 = TokenSequence(self.prompt + (0,) * self.completion_len, self.prompt_len)
        return apply_mask(x0, x0.completion_positions(), 1.0, self.vocab.mask_id)


def random_instance(rng, v=3, n_c=2, scale=1.0, prompt=()) -> EnumerableInstance:
    """Instance with independently random tabular theta/old/ref logits."""
    inst = EnumerableInstance(Vocabulary(v), n_c, tuple(prompt))
    fam = inst.family()
    inst.policies = {
        "theta": PolicySnapshot(fam, fam.init_params(rng, scale)),
        "old": PolicySnapshot(fam, fam.init_params(rng, scale), "old", True),
        "ref": PolicySnapshot(fam, fam.init_params(rng, scale), "ref", True),
    }
    return inst


# -- conditional sequence log-probs -----------------------------------------------------


class SequenceModel:
    """A distribution over completions; p(x0 | x_t) is its exact posterior."""

    def __init__(self, inst: EnumerableInstance, log_weights: np.ndarray):
        self.inst = inst
        self.seqs = [c.tokens for c in inst.completions()]
        lw = np.asarray(log_weights, dtype=np.float64)
        self.log_probs = lw - logsumexp(lw)
        self._index = {s: i for i, s in enumerate(self.seqs)}

    @classmethod
    def random(cls, inst, rng, scale=1.0) -> "SequenceModel":
        return cls(inst, rng.normal(0.0, scale, len(inst.completions())))

    def log_prob(self, seq: tuple) -> float:
        return float(self.log_probs[self._index[tuple(seq)]])


def cond_log_probs(model, x_t: MaskedSequence) -> tuple[list[tuple], np.ndarray]:
    """(consistent completions, log p(y | x_t)) for a tabular policy or SequenceModel."""
    if isinstance(model, SequenceModel):
        seqs = consistent_completions(x_t, model.inst.vocab.size)
        lp = np.array([model.log_prob(y) for y in seqs])
        return seqs, lp - logsumexp(lp)
    v = model.family.vocab.size
    seqs = consistent_completions(x_t, v)
    if len(seqs) > MAX_SPACE:
        raise ValueError(f"{len(seqs)} consistent completions exceed {MAX_SPACE}")
    logits = batch_logits(model, np.array(x_t.tokens)[None, :]).value[0]
    z = logits - logits.max(-1, keepdims=True)
    lsm = z - np.log(np.exp(z).sum(-1, keepdims=True))
    masked = sorted(x_t.masked_positions)
    lp = np.array([sum(lsm[p, y[p]] for p in masked) for y in seqs])
    return seqs, lp


def _geometric_mix(lo: np.ndarray, lr: np.ndarray, beta: float) -> np.ndarray:
    return (1.0 - beta) * lo + beta * lr


def brute_force_partition(inst, x_t, advantage_fn, psi, beta, old=None, ref=None, order=None) -> float:
    """Z_t = sum over consistent x0 of p_old^(1-beta) p_ref^beta exp(psi A)."""
    old = inst.policies["old"] if old is None else old
    ref = inst.policies["ref"] if ref is None else ref
    seqs, lo = cond_log_probs(old, x_t)
    _, lr = cond_log_probs(ref, x_t)
    terms = _geometric_mix(lo, lr, beta) + psi * np.array([advantage_fn(y) for y in seqs])
    if order is not None:
        terms = terms[np.asarray(order)]
    return math.exp(logsumexp(terms))


@dataclass
class TeacherDistribution:
    seqs: list
    probs: np.ndarray
    log_probs: np.ndarray
    a_t: float  # log E_{p_old^ref}[exp(psi A)]
    log_z: float

    def as_dict(self) -> dict:
        return dict(zip(self.seqs, self.probs))


def brute_force_teacher(inst, x_t, advantage_fn, psi, beta, old=None, ref=None) -> TeacherDistribution:
    """p*(x0|x_t) = p_old^ref(x0|x_t) exp(psi A(x0) - A_t(x_t)), enumerated."""
    old = inst.policies["old"] if old is None else old
    ref = inst.policies["ref"] if ref is None else ref
    seqs, lo = cond_log_probs(old, x_t)
    _, lr = cond_log_probs(ref, x_t)
    mix = _geometric_mix(lo, lr, beta)
    log_mix = mix - logsumexp(mix)
    adv = np.array([advantage_fn(y) for y in seqs])
    a_t = logsumexp(log_mix + psi * adv)
    lp = log_mix + psi * adv - a_t
    return TeacherDistribution(seqs, np.exp(lp), lp, a_t, logsumexp(mix + psi * adv))


def sequence_centralize(model, x_t) -> dict:
    """log p(y|x_t) minus its mean over the consistent completions, by enumeration."""
    seqs, lp = cond_log_probs(model, x_t)
    return dict(zip(seqs, lp - lp.mean()))


# -- exact masking laws -----------------------------------------------------------------


def mask_law(n_c: int, rule: str = "bernoulli", w: str | None = None) -> list[tuple[tuple, float]]:
    """Exact (mask subset of completion indices, E[w(t) * 1{mask}]) pairs, t ~ U(0,1).

    With ``w=None`` the second entry is the plain probability of the subset.
    ``bernoulli``: each index masked independently with probability t.
    ``count``: round(t*N_c) indices uniformly, t redrawn while the count is 0.
    """
    out = []
    subsets = [s for k in range(n_c + 1) for s in itertools.combinations(range(n_c), k)]
    if rule == "bernoulli":
        for s in subsets:
            k = len(s)
            if w in ("inv_t", "1/t"):
                # int_0^1 t^(k-1) (1-t)^(n-k) dt ; contributes nothing when k = 0
                val = 0.0 if k == 0 else math.factorial(k - 1) * math.factorial(n_c - k) / math.factorial(n_c)
            else:
                val = math.factorial(k) * math.factorial(n_c - k) / math.factorial(n_c + 1)
            out.append((s, val))
        return out
    if rule == "count":
        z = 1.0 - 0.5 / n_c
        for s in subsets:
            k = len(s)
            if k == 0:
                continue
            lo, hi = (k - 0.5) / n_c, min((k + 0.5) / n_c, 1.0)
            mass = (math.log(hi / lo) if w in ("inv_t", "1/t") else hi - lo) / z
            out.append((s, mass / math.comb(n_c, k)))
        return out
    raise ValueError(f"unknown mask rule {rule!r}")


def exact_elbo(policy, x0: TokenSequence, w: str = "inv_t", rule: str = "bernoulli", params=None):
    """E_t E_{x_t}[w(t) sum_{masked n} log p(x0[n] | x_t)] by enumerating masks.

    Returns a Tensor when ``params`` is given (differentiable), else a float.
    """
    law = mask_law(x0.completion_len, rule, w)
    xs = [apply_mask(x0, (x0.prompt_len + i for i in s), 0.0, policy.family.vocab.mask_id) for s, _ in law]
    coef = np.array([c for _, c in law])
    tok = np.array([x.tokens for x in xs])
    logits = batch_logits(policy, tok, params)
    v = policy.family.vocab.size
    onehot = np.zeros(tok.shape + (v,))
    np.put_along_axis(onehot, np.array(x0.tokens)[None, :, None].repeat(len(xs), 0), 1.0, -1)
    mask = (tok == policy.family.vocab.mask_id).astype(float)
    per = ((logits.log_softmax(-1) * onehot).sum(-1) * mask).sum(-1)
    out = (per * coef).sum()
    return out if params is not None else out.item()


def default_schedule(n_c: int) -> DecodeSchedule:
    """One token per step, uniformly random order, temperature 1."""
    return DecodeSchedule(steps=n_c, selection="random", block_size=None, temperature=1.0)


def exact_log_likelihood(policy, x0: TokenSequence, sched: DecodeSchedule | None = None) -> float:
    """log pi^rm(x0) under ``sched`` (default: random-order one-token-per-step)."""
    return rm_exact_log_prob(policy, x0, sched or default_schedule(x0.completion_len))


def elbo_draws(policy, x0: TokenSequence, draws: int, rng, w: str = "inv_t", rule: str = "bernoulli") -> np.ndarray:
    """``draws`` independent single-sample ELBO estimates, evaluated in one batch."""
    from .mdm import elbo_terms

    if rule != "bernoulli":
        views = sample_views(x0, draws, rng, policy.family.vocab.mask_id, rule)
        return elbo_terms(policy, x0, views, weight_fn(w)).value
    # vectorised Bernoulli masking: t in (0, 1], each completion slot masked w.p. t
    n, p0 = len(x0), x0.prompt_len
    t = 1.0 - rng.random(draws)
    masked = np.zeros((draws, n), dtype=bool)
    masked[:, p0:] = rng.random((draws, n - p0)) < t[:, None]
    tok = np.where(masked, policy.family.vocab.mask_id, np.array(x0.tokens)[None, :])
    lsm = batch_logits(policy, tok).log_softmax(-1).value
    ll = np.take_along_axis(lsm, np.broadcast_to(np.array(x0.tokens), (draws, n))[..., None], -1)[..., 0]
    wt = np.array([weight_fn(w)(ti) for ti in t]) if w not in ("inv_t", "1/t") else 1.0 / t
    return (ll * masked).sum(1) * wt


def elbo_gap_check(policy, x0, draws: int, rng, rule: str = "bernoulli",
                   sched: DecodeSchedule | None = None) -> dict:
    """Exact log-likelihood vs mean of ``draws`` Monte-Carlo ELBO estimates."""
    vals = elbo_draws(policy, x0, draws, rng, "inv_t", rule)
    mean, se = vals.mean(), vals.std(ddof=1) / math.sqrt(draws)
    ll = exact_log_likelihood(policy, x0, sched)
    return {"exact": ll, "elbo_mean": float(mean), "stderr": float(se),
            "gap_in_se": float((ll - mean) / se) if se > 0 else math.inf}


# -- forward / reverse KL identities on posterior models ------------------------------------


def _all_masked_states(inst, rule="bernoulli"):
    """Yield (x_t, mask probability) with x_t over every (mask, visible tokens) pair."""
    law = mask_law(inst.completion_len, rule, None)
    mid, p0 = inst.vocab.mask_id, inst.prompt_len
    for s, pm in law:
        visible = [i for i in range(inst.completion_len) if i not in s]
        for fill in itertools.product(range(inst.vocab.size), repeat=len(visible)):
            toks = list(inst.prompt) + [mid] * inst.completion_len
            for i, v in zip(visible, fill):
                toks[p0 + i] = v
            yield MaskedSequence(tuple(toks), 0.0, frozenset(p0 + i for i in s), p0), pm


def _guided_sequence_law(inst, old, ref, advantage_fn, psi, beta) -> np.ndarray:
    """log pi*(x0) over the completion space, pi* ∝ pi_old^(1-b) pi_ref^b exp(psi A)."""
    seqs = [c.tokens for c in inst.completions()]
    s = np.array([(1 - beta) * old.log_prob(y) + beta * ref.log_prob(y) + psi * advantage_fn(y) for y in seqs])
    return s - logsumexp(s)


def forward_kl_exact(inst, theta: PolicySnapshot, old: SequenceModel, ref: SequenceModel,
                     advantage_fn, psi, beta, params=None):
    """E_t E_{x_t ~ p*_t} KL(p*(.|x_t) || p_theta(.|x_t)), x_t over the Bernoulli law."""
    log_pi_star = _guided_sequence_law(inst, old, ref, advantage_fn, psi, beta)
    index = {c.tokens: i for i, c in enumerate(inst.completions())}
    total = Tensor(0.0)
    for x_t, pm in _all_masked_states(inst):
        teach = brute_force_teacher(inst, x_t, advantage_fn, psi, beta, old, ref)
        marg = math.exp(logsumexp(np.array([log_pi_star[index[y]] for y in teach.seqs])))
        if not x_t.masked_positions:
            continue
        lt = _theta_cond(theta, x_t, teach.seqs, params)
        total = total + (pm * marg) * ((lt * -1.0 + teach.log_probs) * teach.probs).sum()
    return total


def _theta_cond(theta, x_t, seqs, params):
    logits = batch_logits(theta, np.array(x_t.tokens)[None, :], params)[0].log_softmax(-1)
    masked = sorted(x_t.masked_positions)
    sel = np.zeros((len(seqs),) + logits.shape)
    for i, y in enumerate(seqs):
        for p in masked:
            sel[i, p, y[p]] = 1.0
    return (logits.reshape(1, *logits.shape) * sel).sum(-1).sum(-1)


def awelbo_exact(inst, theta: PolicySnapshot, old: SequenceModel, ref: SequenceModel,
                 advantage_fn, psi, beta, params=None):
    """E_{x0 ~ p_old^ref}[exp(psi A) * (-E_{t,x_t}[log p_theta(x0|x_t)])], all exact."""
    seqs = [c for c in inst.completions()]
    mix = np.array([(1 - beta) * old.log_prob(c.tokens) + beta * ref.log_prob(c.tokens) for c in seqs])
    mix = mix - logsumexp(mix)
    total = Tensor(0.0)
    for c, lm in zip(seqs, mix):
        weight = math.exp(lm + psi * advantage_fn(c.tokens))
        total = total + weight * (-1.0 * as_tensor(exact_elbo(theta, c, w=None, params=params)))
    return total


def reverse_kl_decomposition(inst, theta: SequenceModel, old: SequenceModel, ref: SequenceModel,
                             advantage_fn, psi, beta) -> dict:
    """Both sides of the reverse-KL identity with every expectation enumerated.

    direct = E_t E_{x_t ~ p_theta,t} KL(p_theta(.|x_t) || p*(.|x_t));
    terms = E_{pi_theta}[-psi A] + E[A_t(x_t)] + E_{pi_theta}[L(x0;p_theta) - L(x0;p_old^ref)]
    with L(x0; p) = E_{t, x_t ~ q}[log p(x0 | x_t)].
    """
    index = {c.tokens: i for i, c in enumerate(inst.completions())}
    pt = np.exp(theta.log_probs)
    direct = baseline = reg = 0.0
    for x_t, pm in _all_masked_states(inst):
        seqs, lt = cond_log_probs(theta, x_t)
        marg = float(sum(pt[index[y]] for y in seqs))
        teach = brute_force_teacher(inst, x_t, advantage_fn, psi, beta, old, ref)
        _, lo = cond_log_probs(old, x_t)
        _, lr = cond_log_probs(ref, x_t)
        mix = _geometric_mix(lo, lr, beta)
        mix = mix - logsumexp(mix)
        ptc = np.exp(lt)
        direct += pm * marg * float(ptc @ (lt - teach.log_probs))
        baseline += pm * marg * teach.a_t
        # sum over x0 of pi_theta(x0) q(x_t|x0) [log p_theta - log p_mix]
        reg += pm * float(sum(pt[index[y]] * (a - b) for y, a, b in zip(seqs, lt, mix)))
    reward = float(pt @ np.array([-psi * advantage_fn(c.tokens) for c in inst.completions()]))
    return {"direct": direct, "reward": reward, "baseline": baseline, "regularization": reg,
            "sum_terms": reward + baseline + reg}


# -- TIM analysis --------------------------------------------------------------------


@dataclass
class TimReport:
    rows: list  # one dict per completion
    summary: dict


def perturbed(policy: PolicySnapshot, rng, sigma: float = 0.1) -> PolicySnapshot:
    return PolicySnapshot(policy.family, policy.params + rng.normal(0.0, sigma, policy.params.shape))


def tim_report(
    inst: EnumerableInstance,
    sched: DecodeSchedule,
    k: int,
    samples: int,
    rng: np.random.Generator,
    theta: PolicySnapshot | None = None,
    old: PolicySnapshot | None = None,
    w: str = "inv_t",
    rule: str = "bernoulli",
) -> TimReport:
    """Compare pi^rm, exact likelihood and ELBO surrogates per completion.

    Ratio bias per completion is (ELBO_theta - ELBO_old) - (log pi^rm_theta -
    log pi^rm_old) using exact ELBO expectations, so it is deterministic.
    """
    old = inst.policies["old"] if old is None else old
    theta = inst.policies.get("theta", old) if theta is None else theta
    rows = []
    for x0 in inst.completions():
        rm_old = rm_exact_log_prob(old, x0, sched)
        rm_th = rm_exact_log_prob(theta, x0, sched)
        e_old = exact_elbo(old, x0, w, rule)
        e_th = exact_elbo(theta, x0, w, rule)
        draws = elbo_draws(old, x0, samples * k, rng, w, rule).reshape(samples, k).mean(1)
        rows.append({
            "completion": list(x0.completion),
            "log_pi_rm": rm_old,
            "exact_log_likelihood": exact_log_likelihood(old, x0, sched),
            "elbo_exact": e_old,
            "elbo_mean": float(draws.mean()),
            "elbo_std": float(draws.std(ddof=1)) if samples > 1 else 0.0,
            "log_ratio_rm": rm_th - rm_old,
            "log_ratio_elbo": e_th - e_old,
            "ratio_bias": (e_th - e_old) - (rm_th - rm_old),
        })
    bias = np.array([r["ratio_bias"] for r in rows])
    p_rm = np.exp([r["log_pi_rm"] for r in rows])
    summary = {
        "completions": len(rows),
        "mean_abs_ratio_bias": float(np.abs(bias).mean()),
        "max_abs_ratio_bias": float(np.abs(bias).max()),
        "rm_weighted_abs_ratio_bias": float(p_rm @ np.abs(bias)),
        "mean_elbo_gap": float(np.mean([r["exact_log_likelihood"] - r["elbo_exact"] for r in rows])),
        "rm_mass": float(p_rm.sum()),
    }
    return TimReport(rows, summary)


def tim_fixture(seed: int = 7, v: int = 2, n_c: int = 2, sigma: float = 0.1, scale: float = 1.0,
                steps: int | None = None, selection: str = "random",
                temperature: float = 1.0) -> tuple[EnumerableInstance, DecodeSchedule]:
    """Perturbed-theta instance for TIM analysis; the defaults are the regression fixture."""
    rng = np.random.default_rng(seed)
    inst = EnumerableInstance(Vocabulary(v), n_c)
    fam = inst.family()
    old = PolicySnapshot(fam, fam.init_params(rng, scale), "old", True)
    theta = perturbed(old, rng, sigma)
    inst.policies = {"theta": theta, "old": old, "ref": old.frozen_copy("ref")}
    sched = DecodeSchedule(steps=steps or n_c, selection=selection, temperature=temperature)
    sched.validate(n_c)
    return inst, sched


def lemma1_optimality_gap(inst, x_t, advantage_fn, psi, beta, rng, iters: int = 4000) -> dict:
    """Check p* maximizes E_p[psi A] - (1-b) KL(p||p_old) - b KL(p||p_ref) on x_t's slice.

    The objective equals E_p[psi A] - KL(p || p_old^ref) + const, so the optimum
    is the tilted mixture. We run exponentiated-gradient ascent from random
    starts and compare the best objective reached with the value at p*.
    """
    seqs, lo = cond_log_probs(inst.policies["old"], x_t)
    _, lr = cond_log_probs(inst.policies["ref"], x_t)
    adv = np.array([advantage_fn(y) for y in seqs])

    def objective(p):
        lp = np.log(np.maximum(p, 1e-300))
        return float(p @ (psi * adv) - (1 - beta) * p @ (lp - lo) - beta * p @ (lp - lr))

    teach = brute_force_teacher(inst, x_t, advantage_fn, psi, beta)
    star = objective(teach.probs)
    best = -math.inf
    for _ in range(3):
        logits = rng.normal(size=len(seqs))
        for _ in range(iters):
            p = np.exp(logits - logsumexp(logits))
            g = psi * adv - (1 - beta) * (np.log(p) - lo) - beta * (np.log(p) - lr) - 1.0
            logits = logits + 0.5 * (g - p @ g)
        best = max(best, objective(np.exp(logits - logsumexp(logits))))
    return {"objective_at_teacher": star, "best_found": best, "gap": star - best}
