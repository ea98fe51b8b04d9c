import copy

import numpy as np
import pytest

from most import engine as E
from most.config import STRATEGIES
from most.tensor import Tensor

from conftest import tiny_config


def _rng(seed=0):
    return np.random.default_rng(seed)


def _fill(buf, setup, names, state):
    for name in names:
        data = setup.recon_data if name == E.RECON_TASK else setup.tasks[name]
        E.buffer_update(buf, data, state.recon, state.mask, _rng(len(buf.task_order)))
    return buf


# ---------------------------------------------------------------- buffer


def test_quota_two_tasks(tiny_setup):
    cfg, setup = tiny_setup
    state = E.initial_state(setup, cfg)
    buf = _fill(E.ReplayBuffer(10), setup, ["recon", "seg_A"], state)
    assert buf.counts() == {"recon": 5, "seg_A": 5}


def test_quota_three_tasks(tiny_setup):
    cfg, setup = tiny_setup
    state = E.initial_state(setup, cfg)
    buf = _fill(E.ReplayBuffer(10), setup, ["recon", "seg_A", "seg_B"], state)
    assert sorted(buf.counts().values()) == [3, 3, 4]
    assert len(buf) == 10


@pytest.mark.parametrize("capacity", [1, 3, 4, 7, 10])
def test_buffer_never_exceeds_capacity(tiny_setup, capacity):
    cfg, setup = tiny_setup
    state = E.initial_state(setup, cfg)
    buf = E.ReplayBuffer(capacity)
    for name in ["recon", "seg_A", "seg_B", "cls_A"]:
        _fill(buf, setup, [name], state)
        counts = list(buf.counts().values())
        assert len(buf) <= capacity
        assert max(counts) - min(counts) <= 1


def test_stored_reconstruction_matches_forward(tiny_setup):
    cfg, setup = tiny_setup
    state = E.initial_state(setup, cfg)
    buf = _fill(E.ReplayBuffer(4), setup, ["seg_A"], state)
    arr, stored = E.group_arrays(buf.entries)
    np.testing.assert_array_equal(E.reconstruct(state.recon, arr, state.mask).data, stored)
    assert all(e.y is not None for e in buf.entries)


def test_classification_entries_have_no_image_label(tiny_setup):
    cfg, setup = tiny_setup
    state = E.initial_state(setup, cfg)
    buf = _fill(E.ReplayBuffer(4), setup, ["cls_A"], state)
    assert all(e.y is None for e in buf.entries)


def test_zero_capacity_rejected(tiny_setup):
    cfg, setup = tiny_setup
    with pytest.raises(E.TrainingError, match="capacity is 0"):
        _fill(E.ReplayBuffer(0), setup, ["seg_A"], E.initial_state(setup, cfg))


def test_round_robin_cycles(tiny_setup):
    cfg, setup = tiny_setup
    state = E.initial_state(setup, cfg)
    buf = _fill(E.ReplayBuffer(9), setup, ["seg_A", "seg_B", "cls_A"], state)
    assert [buf.next_task() for _ in range(6)] == ["seg_A", "seg_B", "cls_A"] * 2


def test_round_robin_two_tasks(tiny_setup):
    cfg, setup = tiny_setup
    state = E.initial_state(setup, cfg)
    buf = _fill(E.ReplayBuffer(6), setup, ["recon", "seg_A"], state)
    assert [buf.next_task() for _ in range(5)] == ["recon", "seg_A", "recon", "seg_A", "recon"]


def test_empty_buffer_rejected(tiny_setup):
    cfg, setup = tiny_setup
    with pytest.raises(E.TrainingError, match="empty buffer"):
        E.replay_step(E.ReplayBuffer(4), E.initial_state(setup, cfg), True, True, _rng())


# ---------------------------------------------------------------- schedule


@pytest.mark.parametrize("period", [1, 3, 5])
def test_schedule_fires_on_multiples(period):
    sched = E.ReplaySchedule(period)
    fired = [i for i in range(1, 31) if sched.tick()]
    assert fired == [i for i in range(1, 31) if i % period == 0]
    assert len(fired) == 30 // period


def test_schedule_k3_first_nine():
    sched = E.ReplaySchedule(3)
    assert [i for i in range(1, 10) if sched.tick()] == [3, 6, 9]


def test_schedule_reset_and_validation():
    sched = E.ReplaySchedule(2)
    sched.tick()
    sched.reset()
    assert not sched.tick() and sched.tick()
    with pytest.raises(ValueError):
        E.ReplaySchedule(0)


# ---------------------------------------------------------------- losses


def test_replay_flags_off_is_zero(tiny_setup):
    cfg, setup = tiny_setup
    state = E.initial_state(setup, cfg)
    buf = _fill(E.ReplayBuffer(4), setup, ["seg_A"], state)
    assert E.replay_step(buf, state, False, False, _rng()).item() == 0.0


def test_replay_ig_zero_when_theta_unchanged(tiny_setup):
    cfg, setup = tiny_setup
    state = E.initial_state(setup, cfg)
    buf = _fill(E.ReplayBuffer(4), setup, ["seg_A", "recon"], state)
    for _ in range(2):
        assert E.replay_step(buf, state, False, True, _rng(), batch_size=2).item() == 0.0


def test_replay_task_loss_on_recon_entries_is_ssim_to_y(tiny_setup):
    cfg, setup = tiny_setup
    state = E.initial_state(setup, cfg)
    buf = _fill(E.ReplayBuffer(2), setup, ["recon"], state)
    loss = E.replay_step(buf, state, True, False, _rng(), batch_size=2).item()
    arr, _ = E.group_arrays(buf.entries)
    ref = E.ssim_loss(E.reconstruct(state.recon, arr, state.mask), Tensor(arr.y)).item()
    assert loss == ref


def test_image_guided_loss_basics():
    x = np.random.default_rng(0).random((1, 1, 16, 16)) + 0.1
    assert E.image_guided_loss(Tensor(x), x).item() == 0.0
    assert E.image_guided_loss(Tensor(np.zeros_like(x)), x).item() > 0
    with pytest.raises(E.T.ShapeError):
        E.image_guided_loss(Tensor(x), x[..., :8])


def test_image_guided_gradient_16():
    rng = np.random.default_rng(1)
    target = rng.random((1, 1, 16, 16))
    rep = E.T.finite_diff_check(lambda t: E.image_guided_loss(t, target), rng.random((1, 1, 16, 16)))
    assert rep.max_rel_error <= 1e-4


def test_ewc_zero_at_anchor_and_with_zero_fisher(tiny_setup):
    cfg, setup = tiny_setup
    state = E.initial_state(setup, cfg)
    strat = E.StrategyState("ewc", fisher=[np.ones_like(p.data) for p in state.params()], anchor=[p.data.copy() for p in state.params()])
    assert E.ewc_penalty(state, strat, 100.0).item() == 0.0
    shifted = E.StrategyState("ewc", fisher=[np.zeros_like(p.data) for p in state.params()], anchor=[p.data + 1 for p in state.params()])
    assert E.ewc_penalty(state, shifted, 100.0).item() == 0.0
    moved = E.StrategyState("ewc", fisher=strat.fisher, anchor=shifted.anchor)
    assert E.ewc_penalty(state, moved, 2.0).item() == pytest.approx(sum(p.size for p in state.params()))


def test_ewc_missing_state(tiny_setup):
    cfg, setup = tiny_setup
    with pytest.raises(E.TrainingError, match="EWC state"):
        E.strategy_regularizer(E.initial_state(setup, cfg), E.StrategyState("ewc"), cfg)


def test_lwf_zero_at_snapshot(tiny_setup):
    cfg, setup = tiny_setup
    state = E.initial_state(setup, cfg)
    strat = E.StrategyState("lwf", snapshot=copy.deepcopy(state.recon), learned=["seg_A", "cls_A"])
    arr = setup.tasks["seg_B"].train.take([0, 1])
    recon = E.reconstruct(state.recon, arr, state.mask)
    assert E.lwf_penalty(state, strat, arr, recon, cfg).item() == 0.0


def test_fisher_nonnegative(tiny_setup):
    cfg, setup = tiny_setup
    state = E.initial_state(setup, cfg)
    fisher = E.fisher_diagonal(state, setup.tasks["seg_A"], cfg, _rng())
    assert all((f >= 0).all() for f in fisher) and any(f.sum() > 0 for f in fisher)


def test_unknown_strategy_state(tiny_setup):
    cfg, setup = tiny_setup
    with pytest.raises(E.TrainingError, match="missing"):
        E.strategy_regularizer(E.initial_state(setup, cfg), E.StrategyState("bogus"), cfg)


# ---------------------------------------------------------------- training


def test_pretrain_zero_epochs_keeps_theta(tiny_setup):
    cfg, setup = tiny_setup
    state = E.initial_state(setup, cfg)
    before = state.recon.param_hash()
    E.pretrain_recon(state, setup.recon_data, 0, cfg)
    assert state.recon.param_hash() == before


def test_pretrain_deterministic():
    cfg = tiny_config(seeds=(1,))
    a = E.prepare(cfg, 1, use_cache=False)
    b = E.prepare(cfg, 1, use_cache=False)
    assert a.recon_state.keys() == b.recon_state.keys()
    assert all(a.recon_state[k].tobytes() == b.recon_state[k].tobytes() for k in a.recon_state)


def test_pretrain_beats_zero_filled():
    cfg = tiny_config(pretrain_epochs=3, n_recon=40)
    setup = E.prepare(cfg, 0, use_cache=False)
    val = setup.recon_data.val
    zero_filled = E.ssim(Tensor(val.x), Tensor(val.y)).item()
    assert setup.pretrain_val_ssim > zero_filled


def test_replay_fires_every_k(tiny_setup):
    cfg, setup = tiny_setup
    cfg = cfg.replace(strategy="most", replay_period=2, finetune_epochs=2, buffer_size=4)
    res = E.run_sequence(cfg, 0, setup=setup)
    for log in res.stage_logs:
        assert log.replay_iterations == [i for i in range(1, log.iterations + 1) if i % 2 == 0]


def test_frozen_nets_unchanged_and_violation_detected(tiny_setup):
    cfg, setup = tiny_setup
    before = {k: n.param_hash() for k, n in setup.downstream.items()}
    res = E.run_sequence(cfg.replace(strategy="most"), 0, setup=setup)
    assert {k: n.param_hash() for k, n in res.state.downstream.items()} == before
    state = res.state.clone()
    state.downstream = {k: copy.deepcopy(n) for k, n in state.downstream.items()}
    p = state.downstream["seg_A"].params["head.b"]
    p.data = p.data + 1
    with pytest.raises(E.FreezeViolation):
        state.check_frozen()


def test_traces_cover_every_learned_stage(tiny_setup):
    cfg, setup = tiny_setup
    res = E.run_sequence(cfg.replace(strategy="naive"), 0, setup=setup)
    assert [s for s, _ in res.traces["recon"].entries] == [0, 1, 2, 3, 4]
    for i, name in enumerate(cfg.task_order, start=1):
        assert [s for s, _ in res.traces[name].entries] == list(range(i, 5))
    assert res.forgetting(cfg.task_order[-1]) is None
    assert res.forgetting("recon") == E.forgetting_measure(res.traces["recon"].since(1))


def test_naive_theta_independent_of_buffer_and_period(tiny_setup):
    cfg, setup = tiny_setup
    hashes = {
        E.run_sequence(cfg.replace(strategy="naive", buffer_size=b, replay_period=k), 0, setup=setup).theta_hash()
        for b, k in [(4, 3), (10, 3), (50, 3), (10, 1)]
    }
    assert len(hashes) == 1


def test_most_without_replay_and_ig_equals_naive(tiny_setup):
    cfg, setup = tiny_setup
    naive = E.run_sequence(cfg.replace(strategy="naive"), 0, setup=setup)
    corner = E.run_sequence(cfg.replace(strategy="most", replay=False, ig=False), 0, setup=setup)
    assert naive.theta_hash() == corner.theta_hash()


def test_most_ig_off_matches_der(tiny_setup):
    cfg, setup = tiny_setup
    cfg = cfg.replace(finetune_epochs=2, buffer_size=6)
    expected = []
    der_cfg = cfg.replace(strategy="der")

    def hook(state, buf, rng):
        cursor = buf.cursor
        expected.append(E.strategy_regularizer(state, E.StrategyState("der"), der_cfg, buf=buf, rng=copy.deepcopy(rng)).item())
        buf.cursor = cursor

    most = E.run_sequence(cfg.replace(strategy="most", ig=False), 0, setup=setup, on_firing=hook)
    got = [v for log in most.stage_logs for v in log.firing_losses]
    assert got == expected and len(got) > 0
    der = E.run_sequence(der_cfg, 0, setup=setup)
    assert der.theta_hash() == most.theta_hash()


@pytest.mark.parametrize("strategy", STRATEGIES)
def test_every_strategy_runs(tiny_setup, strategy):
    cfg, setup = tiny_setup
    res = E.run_sequence(cfg.replace(strategy=strategy), 0, setup=setup)
    assert res.state.stage == 4
    assert all(np.isfinite(v) for tr in res.traces.values() for v in tr.values)


def test_sequence_deterministic(tiny_setup):
    cfg, setup = tiny_setup
    a = E.run_sequence(cfg.replace(strategy="ewc"), 0, setup=setup)
    b = E.run_sequence(cfg.replace(strategy="ewc"), 0, setup=setup)
    assert a.theta_hash() == b.theta_hash()
    assert a.traces["recon"].entries == b.traces["recon"].entries


def test_stop_after_then_continue_matches(tiny_setup):
    cfg, setup = tiny_setup
    cfg = cfg.replace(strategy="most")
    full = E.run_sequence(cfg, 0, setup=setup)
    part = E.run_sequence(cfg, 0, setup=setup, stop_after=2)
    assert part.state.stage == 2
    run = E.RunState(part.state, part.buffer, E.StrategyState("most", learned=list(cfg.task_order[:2])), part.traces, part.baseline)
    rest = E.run_sequence(cfg, 0, setup=setup, run=run)
    assert rest.theta_hash() == full.theta_hash()


def test_stage_error_is_tagged(tiny_setup):
    cfg, setup = tiny_setup
    cfg = cfg.replace(strategy="ewc")
    run = E.start_run(cfg, setup)
    run.strategy.fisher = None  # corrupt the prepared state
    with pytest.raises(E.TrainingError, match=r"stage 1 \(seg_A\)"):
        E.run_stage(run, setup, cfg)
