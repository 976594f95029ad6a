"""Group rollouts, loss assembly and parameter updates for every objective."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Iterator

import numpy as np

from .decoder import DecodeSchedule, decode_batch
from .mdm import PolicySnapshot, TokenSequence, make_family, sample_views, weight_fn
from .numerics import NonFiniteError, Tensor, clip, matmul, minimum, value_and_grad
from .objectives import (
    AWELBO_MAX_EXPONENT,
    AdvantageRecord,
    ViewBatch,
    compute_advantages,
    gdsd_from_sums,
)
from .tasks import Task, make_task

OBJECTIVES = ("gdsd_direct", "gdsd_tlc", "awelbo", "pg_elbo", "ppo_elbo")


@dataclass
class TrainConfig:
    objective: str = "gdsd_tlc"
    psi: float = 10.0
    beta: float = 1e-3
    eps: float = 0.2
    k: int = 2
    mu: int = 8
    group_size: int = 6
    prompts_per_step: int = 4
    lr: float = 0.5
    momentum: float = 0.9
    max_grad_norm: float = 0.2
    steps: int = 500
    seed: int = 0
    task: str = "copy_reverse"
    vocab_size: int = 8
    length: int = 8
    family: str = "mlp"
    hidden: int = 32
    init_scale: float = 1.0
    decode_steps: int = 0  # 0: two tokens per step within each block
    block_size: int = 0  # 0: N_c/4 when that divides N_c, else one block
    temperature: float = 0.9
    selection: str = "low_confidence"
    weight: str = "inv_t"
    mask_rule: str = "count"
    coupled: bool = True
    checkpoint_every: int = 0

    def validate(self) -> None:
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.mu < 1:
            raise ValueError(f"mu must be >= 1, got {self.mu}")
        if self.group_size < 2:
            raise ValueError(f"group_size must be >= 2, got {self.group_size}")
        if not self.lr >= 0:
            raise ValueError(f"lr must be non-negative, got {self.lr}")
        if self.decode_steps < 0 or self.block_size < 0:
            raise ValueError("decode_steps and block_size must be >= 0 (0 selects the default)")
        if self.k < 1 or self.prompts_per_step < 1 or self.steps < 0:
            raise ValueError("k and prompts_per_step must be positive, steps non-negative")
        if self.objective.startswith("gdsd") and not 0 <= self.beta < 1:
            raise ValueError(f"GDSD needs beta in [0, 1), got {self.beta}")
        weight_fn(self.weight)

    def schedule(self, completion_len: int) -> DecodeSchedule:
        """Decode schedule for a completion length, resolving the 0 = auto knobs."""
        block = self.block_size
        if block == 0:
            block = completion_len // 4 if completion_len % 4 == 0 and completion_len >= 4 else completion_len
        steps = self.decode_steps or (completion_len // block) * math.ceil(block / 2)
        sched = DecodeSchedule(steps, self.selection, None if block == completion_len else block, self.temperature)
        sched.validate(completion_len)
        return sched

    def make_task(self) -> Task:
        if self.task == "copy_reverse":
            return make_task(self.task, vocab_size=self.vocab_size, length=self.length)
        return make_task(self.task)


@dataclass
class RolloutGroup:
    prompt: TokenSequence
    completions: list
    records: list  # AdvantageRecord per completion

    @property
    def rewards(self) -> list:
        return [r.reward for r in self.records]

    @property
    def advantages(self) -> list:
        return [r.advantage for r in self.records]


@dataclass
class TrainState:
    step: int
    theta: PolicySnapshot
    old: PolicySnapshot
    ref: PolicySnapshot
    velocity: np.ndarray
    metrics: list = field(default_factory=list)
    refreshes: int = 0


def init_state(cfg: TrainConfig, task: Task) -> TrainState:
    rng = np.random.default_rng([cfg.seed, 0])
    kw = {"hidden": cfg.hidden} if cfg.family == "mlp" else {}
    fam = make_family(cfg.family, task.seq_len, task.vocab, task.prompt_len, **kw)
    params = fam.init_params(rng, cfg.init_scale)
    theta = PolicySnapshot(fam, params)
    return TrainState(0, theta, theta.frozen_copy("old"), theta.frozen_copy("ref"), np.zeros_like(params))


def rollout_group(state: TrainState, prompt: TokenSequence, g: int, sched: DecodeSchedule,
                  rng: np.random.Generator, task: Task, group_id: int = 0) -> RolloutGroup:
    """Decode ``g`` completions under the old policy and score them."""
    if g < 2:
        raise ValueError(f"group size must be >= 2, got {g}")
    rolls = decode_batch(state.old, prompt, sched, rng, g)
    rewards = []
    for r in rolls:
        try:
            rewards.append(float(task.reward(prompt, r.completion)))
        except Exception as exc:  # noqa: BLE001 - surface the completion that broke the reward
            raise RuntimeError(f"reward failed on completion {r.completion.completion}: {exc}") from exc
    return RolloutGroup(prompt, [r.completion for r in rolls], compute_advantages(rewards, group_id))


def build_loss(cfg: TrainConfig, state: TrainState, groups: list[RolloutGroup],
               rng: np.random.Generator) -> tuple[Callable[[Tensor], Tensor], dict]:
    """Sample (t, x_t) per completion and return a theta -> scalar loss closure.

    One shared set of masked views serves theta, old and ref; each policy is
    evaluated once on the whole batch of views.
    """
    x0s, advs, view_groups = [], [], []
    mask_id = state.theta.family.vocab.mask_id
    coupled = cfg.coupled and cfg.objective.startswith("gdsd")
    for grp in groups:
        for x0, rec in zip(grp.completions, grp.records):
            x0s.append(x0)
            advs.append(rec.advantage)
            view_groups.append(sample_views(x0, cfg.k, rng, mask_id, cfg.mask_rule, coupled))
    vb = ViewBatch.build(x0s, view_groups, weight_fn(cfg.weight))
    tok = vb.tokens()
    adv = np.asarray(advs)[vb.sample_owner]
    fam = state.theta.family
    old_logits = fam.logits(state.old.params, tok)
    info: dict = {}

    if cfg.objective.startswith("gdsd"):
        centralize = cfg.objective == "gdsd_tlc"
        s_old = vb.sample_sums(old_logits, centralize).value
        s_ref = vb.sample_sums(fam.logits(state.ref.params, tok), centralize).value

        def loss(p: Tensor) -> Tensor:
            res = gdsd_from_sums(vb.sample_sums(fam.logits(p, tok), centralize), s_old, s_ref,
                                 adv, cfg.psi, cfg.beta)
            info.update(match=res.match_term.item(), reg=res.reg_term.item())
            return res.total

        return loss, info

    if cfg.objective == "awelbo":
        expo = cfg.psi * adv
        if expo.max(initial=-math.inf) > AWELBO_MAX_EXPONENT:
            raise OverflowError(f"psi*A = {expo.max():.3g} exceeds {AWELBO_MAX_EXPONENT}; use a smaller psi")
        wts = np.exp(expo)

        def loss(p: Tensor) -> Tensor:
            out = -(vb.sample_sums(fam.logits(p, tok)) * wts).mean()
            info.update(match=out.item(), reg=0.0)
            return out

        return loss, info

    ol_terms = vb.token_terms(old_logits).value
    n_samples = vb.sel.shape[0]
    comp_mask = np.zeros(tok.shape[1])
    comp_mask[fam.prompt_len:] = 1.0

    def loss(p: Tensor) -> Tensor:
        diff = vb.token_terms(fam.logits(p, tok)) - ol_terms  # (views, N)
        if cfg.objective == "pg_elbo":
            per_sample = matmul(Tensor(vb.sel), diff.sum(-1))
            # average the k samples of each completion before exponentiating
            owners = np.zeros((len(x0s), n_samples))
            owners[vb.sample_owner, np.arange(n_samples)] = 1.0
            owners /= owners.sum(1, keepdims=True)
            d = matmul(Tensor(owners), per_sample)
            out = -(d.exp() * np.asarray(advs)).mean()
        else:
            owners = np.zeros((len(x0s), n_samples))
            owners[vb.sample_owner, np.arange(n_samples)] = 1.0
            owners /= owners.sum(1, keepdims=True)
            per_tok = matmul(Tensor(owners @ vb.sel), diff)  # (completions, N)
            ratio = per_tok.exp()
            a = np.asarray(advs)[:, None]
            obj = minimum(ratio * a, clip(ratio, 1 - cfg.eps, 1 + cfg.eps) * a)
            out = -((obj * comp_mask).sum(-1) * (1.0 / comp_mask.sum())).mean()
        info.update(match=out.item(), reg=0.0)
        return out

    return loss, info


def clip_by_norm(g: np.ndarray, max_norm: float) -> tuple[np.ndarray, float]:
    norm = float(np.linalg.norm(g))
    if max_norm > 0 and norm > max_norm:
        g = g * (max_norm / norm)
    return g, norm


def train_step(state: TrainState, groups: list[RolloutGroup], cfg: TrainConfig,
               rng: np.random.Generator) -> TrainState:
    """One gradient step; returns a new state and leaves ``state`` untouched."""
    loss_fn, info = build_loss(cfg, state, groups, rng)
    try:
        total, g = value_and_grad(loss_fn, state.theta.params)
    except NonFiniteError as exc:
        raise NonFiniteError(f"step {state.step} aborted: {exc}") from exc
    g, norm = clip_by_norm(g, cfg.max_grad_norm)
    vel = cfg.momentum * state.velocity + g
    params = state.theta.params - cfg.lr * vel
    if not np.all(np.isfinite(params)):
        raise NonFiniteError(f"step {state.step} aborted: non-finite parameters after update")
    rewards = [r for grp in groups for r in grp.rewards]
    record = {
        "step": state.step,
        "mean_reward": float(np.mean(rewards)),
        "loss_total": float(total),
        "loss_match": float(info.get("match", total)),
        "loss_reg": float(info.get("reg", 0.0)),
        "grad_norm": norm,
        "old_refreshed": False,
    }
    return replace(state, step=state.step + 1, theta=state.theta.with_params(params),
                   velocity=vel, metrics=state.metrics + [record])


def refresh_old(state: TrainState, cfg: TrainConfig) -> TrainState:
    """Copy theta into the frozen old snapshot; only legal every ``mu`` steps."""
    if state.step == 0 or state.step % cfg.mu:
        raise ValueError(f"old-policy refresh at step {state.step} is off the mu={cfg.mu} schedule")
    metrics = list(state.metrics)
    if metrics:
        metrics[-1] = dict(metrics[-1], old_refreshed=True)
    return replace(state, old=state.theta.frozen_copy("old"), metrics=metrics, refreshes=state.refreshes + 1)


def run_training(cfg: TrainConfig, task: Task | None = None) -> Iterator[tuple[TrainState, dict]]:
    """Yield (state, metrics record) after every step of the full loop."""
    cfg.validate()
    task = task or cfg.make_task()
    state = init_state(cfg, task)
    sched = cfg.schedule(task.completion_len)
    for step in range(cfg.steps):
        rng = np.random.default_rng([cfg.seed, 1, step])
        groups = [
            rollout_group(state, task.sample_prompt(rng), cfg.group_size, sched, rng, task, j)
            for j in range(cfg.prompts_per_step)
        ]
        state = train_step(state, groups, cfg, rng)
        if state.step % cfg.mu == 0:
            state = refresh_old(state, cfg)
        yield state, state.metrics[-1]


def train(cfg: TrainConfig, task: Task | None = None) -> TrainState:
    state = None
    for state, _ in run_training(cfg, task):
        pass
    return state


def reward_gain(metrics: list, window: int = 20) -> float:
    """Mean reward of the last ``window`` steps minus that of the first ``window``."""
    r = np.array([m["mean_reward"] for m in metrics])
    return float(r[-window:].mean() - r[:window].mean())


def config_dict(cfg: TrainConfig) -> dict:
    return {f.name: getattr(cfg, f.name) for f in fields(cfg)}
