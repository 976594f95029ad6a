import itertools
import math
from dataclasses import replace

import numpy as np
import pytest

from gdsd_lab.numerics import NonFiniteError, Tensor
from gdsd_lab.objectives import compute_advantages
from gdsd_lab.tasks import CopyReverse
from gdsd_lab.trainer import (
    RolloutGroup,
    TrainConfig,
    build_loss,
    clip_by_norm,
    init_state,
    refresh_old,
    reward_gain,
    rollout_group,
    run_training,
    train,
    train_step,
)

SMALL = dict(vocab_size=4, length=4, hidden=8, group_size=4, prompts_per_step=2)


def small_cfg(**kw):
    return TrainConfig(**{**SMALL, **kw})


def groups_for(cfg, state, rng, task=None):
    task = task or cfg.make_task()
    sched = cfg.schedule(task.completion_len)
    return [rollout_group(state, task.sample_prompt(rng), cfg.group_size, sched, rng, task, j)
            for j in range(cfg.prompts_per_step)]


class ScriptedReward(CopyReverse):
    """Returns rewards from a fixed script regardless of the completion."""

    def __init__(self, script, **kw):
        super().__init__(**kw)
        self._it = itertools.cycle(script)

    def reward(self, prompt, completion):
        return next(self._it)


class BrokenReward(CopyReverse):
    def reward(self, prompt, completion):
        raise KeyError("boom")


# -- config -------------------------------------------------------------------------------


@pytest.mark.parametrize("bad", [
    dict(mu=0), dict(group_size=1), dict(lr=-1.0), dict(objective="sft"),
    dict(beta=1.0), dict(weight="log"), dict(k=0), dict(block_size=-1),
])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad).validate()


def test_schedule_defaults_per_task():
    cfg = TrainConfig()
    s = cfg.schedule(8)
    assert (s.steps, s.block_size) == (4, 2)
    s = cfg.schedule(5)
    assert (s.steps, s.block_size) == (3, None)
    s = cfg.schedule(16)
    assert (s.steps, s.block_size) == (8, 4)
    assert TrainConfig(decode_steps=2, block_size=4).schedule(8).block_size == 4


# -- rollouts ------------------------------------------------------------------------------


def test_greedy_group_is_degenerate():
    cfg = small_cfg(temperature=0.0)
    task = cfg.make_task()
    state = init_state(cfg, task)
    rng = np.random.default_rng(0)
    grp = rollout_group(state, task.sample_prompt(rng), 5, cfg.schedule(4), rng, task)
    assert len({c.tokens for c in grp.completions}) == 1
    assert grp.advantages == [0.0] * 5


def test_two_member_group_advantages():
    cfg = small_cfg()
    task = ScriptedReward([1.0, 0.0], vocab_size=4, length=4)
    state = init_state(cfg, task)
    rng = np.random.default_rng(0)
    grp = rollout_group(state, task.sample_prompt(rng), 2, cfg.schedule(4), rng, task)
    assert grp.rewards == [1.0, 0.0]
    assert grp.advantages == [0.5, -0.5]


def test_rollout_errors():
    cfg = small_cfg()
    task = BrokenReward(vocab_size=4, length=4)
    state = init_state(cfg, task)
    rng = np.random.default_rng(0)
    with pytest.raises(RuntimeError, match="completion"):
        rollout_group(state, task.sample_prompt(rng), 3, cfg.schedule(4), rng, task)
    with pytest.raises(ValueError):
        rollout_group(state, task.sample_prompt(rng), 1, cfg.schedule(4), rng, task)


def test_seeded_rollouts_replay():
    cfg = small_cfg()
    task = cfg.make_task()
    state = init_state(cfg, task)
    a = groups_for(cfg, state, np.random.default_rng(5), task)
    b = groups_for(cfg, state, np.random.default_rng(5), task)
    assert [g.completions for g in a] == [g.completions for g in b]


# -- steps -------------------------------------------------------------------------------------


@pytest.mark.parametrize("objective", ["gdsd_tlc", "gdsd_direct"])
def test_zero_advantage_self_match_gives_zero_update(objective):
    cfg = small_cfg(objective=objective, beta=0.0)
    task = cfg.make_task()
    state = init_state(cfg, task)
    rng = np.random.default_rng(1)
    groups = groups_for(cfg, state, rng, task)
    flat = [RolloutGroup(g.prompt, g.completions, compute_advantages([0.3] * len(g.completions))) for g in groups]
    new = train_step(state, flat, cfg, rng)
    assert new.metrics[-1]["loss_total"] == 0.0
    assert np.array_equal(new.theta.params, state.theta.params)


@pytest.mark.parametrize("objective", ["gdsd_tlc", "gdsd_direct", "awelbo", "pg_elbo", "ppo_elbo"])
def test_zero_learning_rate_keeps_params(objective):
    cfg = small_cfg(objective=objective, lr=0.0, psi=1.0)
    task = cfg.make_task()
    state = init_state(cfg, task)
    rng = np.random.default_rng(2)
    new = train_step(state, groups_for(cfg, state, rng, task), cfg, rng)
    assert np.array_equal(new.theta.params, state.theta.params)
    assert new.step == state.step + 1
    assert list(new.metrics[-1]) == ["step", "mean_reward", "loss_total", "loss_match", "loss_reg",
                                     "grad_norm", "old_refreshed"]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts_and_leaves_state():
    cfg = small_cfg(psi=math.inf)
    task = cfg.make_task()
    state = init_state(cfg, task)
    before = state.theta.params.copy()
    rng = np.random.default_rng(3)
    groups = groups_for(cfg, state, rng, task)
    with pytest.raises(NonFiniteError, match="step 0"):
        train_step(state, groups, cfg, rng)
    assert np.array_equal(state.theta.params, before) and state.step == 0 and not state.metrics


def test_awelbo_overflow_guard_in_trainer():
    cfg = small_cfg(objective="awelbo", psi=1000.0)
    task = cfg.make_task()
    state = init_state(cfg, task)
    rng = np.random.default_rng(4)
    groups = [RolloutGroup(g.prompt, g.completions, compute_advantages([1.0] + [0.0] * (len(g.completions) - 1)))
              for g in groups_for(cfg, state, rng, task)]
    with pytest.raises(OverflowError):
        build_loss(cfg, state, groups, rng)


def test_clip_by_norm():
    g, n = clip_by_norm(np.array([3.0, 4.0]), 0.2)
    assert n == 5.0 and np.linalg.norm(g) <= 0.2 + 1e-9
    g, _ = clip_by_norm(np.array([0.1, 0.0]), 0.2)
    assert np.array_equal(g, [0.1, 0.0])


# -- refresh schedule ---------------------------------------------------------------------------


def test_refresh_off_schedule_errors():
    cfg = small_cfg(mu=4)
    state = init_state(cfg, cfg.make_task())
    with pytest.raises(ValueError, match="schedule"):
        refresh_old(replace(state, step=3), cfg)
    with pytest.raises(ValueError):
        refresh_old(state, cfg)


def test_mu8_over_100_steps_refreshes_12_times():
    cfg = small_cfg(mu=8, steps=100, prompts_per_step=1, group_size=2)
    state = train(cfg)
    assert state.refreshes == 12
    flagged = [m["step"] for m in state.metrics if m["old_refreshed"]]
    assert flagged == [8 * j - 1 for j in range(1, 13)]


def test_old_tracks_theta_only_at_refresh_and_ref_is_fixed():
    cfg = small_cfg(mu=3, steps=10, prompts_per_step=1)
    ref0 = None
    old_prev = None
    for state, rec in run_training(cfg):
        if ref0 is None:
            ref0 = state.ref.params.copy()
        assert np.array_equal(state.ref.params, ref0)
        if state.step % 3 == 0:
            assert np.array_equal(state.old.params, state.theta.params)
        elif old_prev is not None:
            assert np.array_equal(state.old.params, old_prev)
        assert rec["grad_norm"] >= 0
        old_prev = state.old.params.copy()


def test_mu1_old_equals_theta_every_step():
    cfg = small_cfg(mu=1, steps=5, prompts_per_step=1)
    for state, _ in run_training(cfg):
        assert np.array_equal(state.old.params, state.theta.params)
        assert state.old.frozen


def test_match_zero_right_after_refresh():
    cfg = small_cfg(mu=1, steps=3, prompts_per_step=1, beta=0.0)
    state = train(cfg)
    rng = np.random.default_rng(9)
    groups = [RolloutGroup(g.prompt, g.completions, compute_advantages([0.0] * len(g.completions)))
              for g in groups_for(cfg, state, rng)]
    loss, info = build_loss(cfg, state, groups, rng)
    assert loss(Tensor(state.theta.params)).item() == 0.0
    assert info["match"] == 0.0


# -- whole runs -----------------------------------------------------------------------------------


def test_identical_runs_identical_metrics():
    cfg = small_cfg(steps=15)
    assert train(cfg).metrics == train(cfg).metrics
    other = train(replace(cfg, seed=1)).metrics
    assert other != train(cfg).metrics


def test_reward_gain_window():
    m = [{"mean_reward": float(i >= 20)} for i in range(40)]
    assert reward_gain(m) == 1.0


def test_gdsd_tlc_200_steps_improves():
    state = train(TrainConfig(steps=200, seed=0))
    assert reward_gain(state.metrics) > 0
