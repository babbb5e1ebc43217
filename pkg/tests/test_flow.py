import numpy as np
import pytest

from conftest import oracle_field, small_widths
from spfm import flow
from spfm.data import corrupt_labels, gen_spiral, gen_two_circles
from spfm.errors import ConfigError, InputError, NumericError, TrainingAborted
from spfm.flow import (
    Decision,
    GateRecords,
    TrainBatch,
    TrainingConfig,
    apply_update,
    cfg_dropout,
    fm_target,
    interpolate,
    run_gate,
    sample_draws,
    spfm_gate,
    train_run,
    train_step,
)
from spfm.net import OptimizerState, init_params, zero_params
from spfm.rng import Stream

SMALL = dict(hidden=(16, 16), batch_size=32)


@pytest.fixture(scope="module")
def noisy():
    return corrupt_labels(gen_two_circles(256, 3), 0.4, 3)


def small_config(**kw):
    return TrainingConfig(**{**SMALL, **kw})


# -- interpolate / fm_target ----------------------------------------------------

@pytest.mark.parametrize("t,expected", [(0.0, [0, 0]), (1.0, [2, 4]), (0.5, [1, 2])])
def test_interpolate_examples(t, expected):
    assert np.array_equal(interpolate([0.0, 0.0], [2.0, 4.0], t), expected)


def test_interpolate_rejects_t():
    with pytest.raises(InputError):
        interpolate([0, 0], [1, 1], 1.2)


def test_interpolate_per_row_t():
    x0 = np.zeros((3, 2))
    x1 = np.ones((3, 2))
    np.testing.assert_array_equal(interpolate(x0, x1, np.array([0, 0.5, 1])), [[0, 0], [0.5, 0.5], [1, 1]])


def test_fm_target(rng):
    assert np.array_equal(fm_target([1, 1], [1, 1]), [0, 0])
    assert np.array_equal(fm_target([0, 0], [3, -4]), [3, -4])
    a, b = rng.standard_normal((20, 2)), rng.standard_normal((20, 2))
    assert np.array_equal(fm_target(a, b), -fm_target(b, a))


# -- spfm_gate ----------------------------------------------------------------

def test_gate_zero_params_tie(rng):
    x1, x0 = rng.standard_normal(2), rng.standard_normal(2)
    rec = spfm_gate(zero_params(), x1, (0.4, 1.0), x0, 0.5)
    assert rec.l_cond == rec.l_uncond == pytest.approx(np.sum((x1 - x0) ** 2), rel=0, abs=0)
    assert rec.decision is Decision.CONDITIONAL


def test_gate_constructed_conditional_wins():
    x1, x0 = np.array([1.5, -0.5]), np.array([0.2, 0.1])
    p = oracle_field(x1 - x0, radius=2.0)
    rec = spfm_gate(p, x1, (1.0, 2.0), x0, 0.5, sample_index=4, epoch=7)
    assert rec.l_cond < 1e-20 < rec.l_uncond
    assert rec.l_uncond == pytest.approx(np.sum((x1 - x0) ** 2))
    assert rec.decision is Decision.CONDITIONAL
    assert (rec.sample_index, rec.epoch, rec.t_prime) == (4, 7, 0.5)


def test_gate_flags_when_conditional_worse():
    x1, x0 = np.array([1.5, -0.5]), np.array([0.2, 0.1])
    p = oracle_field(-3 * (x1 - x0), radius=2.0)
    rec = spfm_gate(p, x1, (1.0, 2.0), x0, 0.5)
    assert rec.l_cond > rec.l_uncond
    assert rec.decision is Decision.UNCONDITIONAL


def test_gate_non_finite():
    p = init_params(0, small_widths(4))
    p.weights[0][0, 0] = np.inf
    with pytest.raises(NumericError, match="sample 3"):
        spfm_gate(p, [1.0, 1.0], (0.0, 1.0), [0.5, 0.5], 0.5, sample_index=3)


# -- cfg_dropout ----------------------------------------------------------------

def test_dropout_bounds():
    assert not cfg_dropout(Stream(0), 0.0, 1000).any()
    assert cfg_dropout(Stream(0), 1.0, 1000).all()
    assert cfg_dropout(Stream(0), 0.0) is False
    with pytest.raises(InputError):
        cfg_dropout(Stream(0), 1.5)


def test_dropout_rate_concentration():
    # binomial sd at n=1e5, p=0.1 is ~0.00095, so +-0.005 is > 5 sd
    rate = cfg_dropout(Stream(17), 0.1, 100_000).mean()
    assert 0.095 <= rate <= 0.105


# -- config -------------------------------------------------------------------

@pytest.mark.parametrize("kw,field", [
    (dict(warmup_epochs=5, epochs=4), "warmup_epochs"),
    (dict(cfg_dropout_rate=1.5), "cfg_dropout_rate"),
    (dict(gate_time=0.0), "gate_time"),
    (dict(gate_time=1.0), "gate_time"),
    (dict(gate_reuse_mode="both"), "gate_reuse_mode"),
    (dict(batch_size=0), "batch_size"),
])
def test_config_invariants(kw, field):
    with pytest.raises(ConfigError) as exc:
        TrainingConfig(**kw)
    assert exc.value.field == field


# -- train_step ---------------------------------------------------------------

def _batch(ds, n=32):
    return TrainBatch.from_dataset(ds, np.arange(n))


def test_step_features_off(noisy):
    cfg = small_config(spfm_enabled=False, cfg_dropout_rate=0.0)
    p = init_params(0, cfg.widths)
    _, _, m, recs = train_step(p, OptimizerState.zeros_like(p), _batch(noisy), cfg, epoch=10)
    assert len(recs) == 0
    assert m.n_conditional == m.n == 32 and m.n_dropped == 0 and m.n_gated == 0


def test_step_no_gate_during_warmup(noisy):
    cfg = small_config(epochs=10, warmup_epochs=4)
    p = init_params(0, cfg.widths)
    for epoch in range(1, 5):
        assert len(train_step(p, OptimizerState.zeros_like(p), _batch(noisy), cfg, epoch)[3]) == 0
    assert len(train_step(p, OptimizerState.zeros_like(p), _batch(noisy), cfg, 5)[3]) == 32


def test_step_deterministic(noisy):
    cfg = small_config(warmup_epochs=0)
    p = init_params(1, cfg.widths)
    a = train_step(p, OptimizerState.zeros_like(p), _batch(noisy), cfg, 3)
    b = train_step(p, OptimizerState.zeros_like(p), _batch(noisy), cfg, 3)
    assert a[0].flat().tobytes() == b[0].flat().tobytes()
    assert a[3].l_cond.tobytes() == b[3].l_cond.tobytes()


def test_step_counts_add_up(noisy):
    cfg = small_config(warmup_epochs=0, cfg_dropout_rate=0.5)
    p = init_params(1, cfg.widths)
    _, _, m, recs = train_step(p, OptimizerState.zeros_like(p), _batch(noisy), cfg, 1)
    assert m.n_gated == int(recs.unconditional.sum())
    assert m.n_conditional + m.n_gated + m.n_dropped == m.n


# -- invariants ---------------------------------------------------------------

def test_gate_rule_exact(noisy):
    cfg = small_config(warmup_epochs=1, epochs=3)
    res = train_run(noisy, cfg, keep_gates="all")
    assert len(res.gates) == 2 * len(noisy)
    assert np.array_equal(res.gates.unconditional, res.gates.l_cond > res.gates.l_uncond)
    for rec in list(res.gates)[:5]:
        assert (rec.decision is Decision.UNCONDITIONAL) == (rec.l_cond > rec.l_uncond)


def test_gate_shares_noise_and_time(noisy, monkeypatch):
    seen = []
    real = flow.per_sample_loss

    def spy(params, inp, target):
        seen.append((inp.x_t.copy(), inp.t.copy(), inp.use_null.copy(), np.asarray(target).copy()))
        return real(params, inp, target)

    monkeypatch.setattr(flow, "per_sample_loss", spy)
    cfg = small_config(warmup_epochs=0)
    batch = _batch(noisy)
    p = init_params(0, cfg.widths)
    run_gate(p, batch, cfg, 2)
    (x_t, t, use_null, target), = seen
    n = len(batch)
    assert np.array_equal(x_t[:n], x_t[n:]) and np.array_equal(t[:n], t[n:]) and np.all(t == 0.5)
    assert not use_null[:n].any() and use_null[n:].all()
    draws = sample_draws(cfg.seed, 2, batch.indices)
    assert np.array_equal(x_t[:n], interpolate(draws.gate_x0, batch.x1, 0.5))
    assert np.array_equal(target[:n], batch.x1 - draws.gate_x0)


def test_gate_is_gradient_free(noisy):
    cfg = small_config(warmup_epochs=0)
    batch = _batch(noisy)
    p = init_params(2, cfg.widths)
    s = OptimizerState.zeros_like(p)
    p1, s1, _, recs = train_step(p, s, batch, cfg, 6)
    p2, s2, _ = apply_update(p, s, batch, cfg, 6, unconditional=recs.unconditional.copy())
    assert p1.flat().tobytes() == p2.flat().tobytes()


def test_per_sample_independence(noisy):
    cfg = small_config(warmup_epochs=0)
    p = train_run(noisy, small_config(epochs=3, warmup_epochs=0, spfm_enabled=False)).params
    batch = _batch(noisy, 64)
    perm = np.random.default_rng(0).permutation(64)
    shuffled = TrainBatch(batch.indices[perm], batch.x1[perm], batch.conditions[perm])
    a = run_gate(p, batch, cfg, 9)
    b = run_gate(p, shuffled, cfg, 9)
    order = np.argsort(b.sample_index)
    assert np.array_equal(a.unconditional, b.unconditional[order])
    np.testing.assert_allclose(a.l_cond, b.l_cond[order], rtol=1e-12)


def test_reuse_mode_trains_at_gate_time(noisy, monkeypatch):
    seen = []
    real = flow.loss_and_grad
    monkeypatch.setattr(flow, "loss_and_grad", lambda p, inp, tg: seen.append(inp.t.copy()) or real(p, inp, tg))
    cfg = small_config(warmup_epochs=0, gate_reuse_mode="reuse")
    p = init_params(0, cfg.widths)
    train_step(p, OptimizerState.zeros_like(p), _batch(noisy), cfg, 1)
    assert np.all(seen[0] == 0.5)
    seen.clear()
    train_step(p, OptimizerState.zeros_like(p), _batch(noisy), small_config(warmup_epochs=0), 1)
    assert len(np.unique(seen[0])) == 32


# -- train_run ----------------------------------------------------------------

def test_run_zero_epochs(noisy):
    cfg = small_config(epochs=0, warmup_epochs=0)
    res = train_run(noisy, cfg)
    assert res.metrics == [] and len(res.gates) == 0
    assert res.params.flat().tobytes() == init_params(cfg.seed, cfg.widths).flat().tobytes()


def test_run_loss_decreases():
    ds = gen_spiral(500, 2)
    res = train_run(ds, small_config(epochs=100, warmup_epochs=4, spfm_enabled=False))
    assert res.metrics[-1].mean_loss < res.metrics[0].mean_loss


def test_warmup_equivalence(noisy):
    on = train_run(noisy, small_config(epochs=6, warmup_epochs=4, spfm_enabled=True))
    off = train_run(noisy, small_config(epochs=6, warmup_epochs=4, spfm_enabled=False))
    assert [m.mean_loss for m in on.metrics[:4]] == [m.mean_loss for m in off.metrics[:4]]
    assert on.metrics[4].gated_fraction > 0 and off.metrics[4].gated_fraction == 0
    on4 = train_run(noisy, small_config(epochs=4, warmup_epochs=4, spfm_enabled=True))
    off4 = train_run(noisy, small_config(epochs=4, warmup_epochs=4, spfm_enabled=False))
    assert on4.params.flat().tobytes() == off4.params.flat().tobytes()


def test_run_keeps_final_epoch_gates(noisy):
    res = train_run(noisy, small_config(epochs=5, warmup_epochs=2))
    assert set(res.gates.epoch.tolist()) == {5}
    assert np.array_equal(res.gates.sample_index, np.arange(len(noisy)))
    res_all = train_run(noisy, small_config(epochs=5, warmup_epochs=2), keep_gates="all")
    assert sorted(set(res_all.gates.epoch.tolist())) == [3, 4, 5]


def test_run_aborts_with_state(noisy):
    cfg = small_config(epochs=3, warmup_epochs=0, lr=1e200)
    with pytest.raises(TrainingAborted) as exc:
        train_run(noisy, cfg)
    assert np.all(np.isfinite(exc.value.params.flat()))
    assert exc.value.epoch >= 1


def test_metrics_csv(tmp_path, noisy):
    res = train_run(noisy, small_config(epochs=2, warmup_epochs=1))
    flow.write_metrics_csv(tmp_path / "m.csv", res.metrics)
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "epoch,mean_loss,gated_fraction,dropped_fraction,wall_ms"
    assert len(lines) == 3 and lines[1].endswith(",0")
    flow.write_metrics_csv(tmp_path / "t.csv", res.metrics, timing=True)
    assert float((tmp_path / "t.csv").read_text().splitlines()[1].split(",")[-1]) > 0


def test_gate_csv_round_trip(tmp_path, noisy):
    res = train_run(noisy, small_config(epochs=2, warmup_epochs=1))
    res.gates.write_csv(tmp_path / "g.csv")
    back = flow.read_gate_csv(tmp_path / "g.csv", 0.5)
    assert np.array_equal(back.l_cond, res.gates.l_cond)
    assert np.array_equal(back.unconditional, res.gates.unconditional)
    assert GateRecords.concat([]).__len__() == 0
