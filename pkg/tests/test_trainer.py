import numpy as np
import pytest

from normlab import tensor as T
from normlab import trainer as Tr
from normlab.data import load_dataset, synthetic_dataset
from normlab.errors import ConfigError, Divergence, ParameterError
from normlab.models import ModelConfig, build
from normlab.normalizers import Mode


@pytest.fixture(scope="module")
def toy():
    return synthetic_dataset(400, (6,), 3, np.random.default_rng(0)).standardized()


def cfg(norm="none", **kw):
    model = ModelConfig(kind="mlp", depth=3, width=16, input_shape=(6,), num_classes=3, norm=norm, seed=kw.pop("seed", 0))
    return Tr.TrainConfig(**{"model": model, "lr": 0.1, "batch_size": 16, "steps": 60, **kw})


# ------------------------------------------------------------------ steps


def test_zero_lr_leaves_parameters():
    m = build(cfg("batch").model)
    before = [p.data.tobytes() for p in m.parameters()]
    x = np.random.default_rng(1).standard_normal((8, 6))
    Tr.sgd_step(m, x, np.arange(8) % 3, lr=0.0)
    assert [p.data.tobytes() for p in m.parameters()] == before
    # running statistics still update in the same pass
    assert m.normalizers()[0].stats.count == 1


def test_quadratic_step_exact():
    theta = T.parameter(np.array([1.0]))
    loss = (0.5 * theta * theta).sum()
    Tr.sgd_update([theta], T.backward(loss, [theta]), 0.1)
    assert theta.data[0] == 0.9


def test_negative_lr_rejected():
    with pytest.raises(ParameterError):
        Tr.sgd_step(build(cfg().model), np.zeros((2, 6)), np.zeros(2, int), -1.0)


def test_divergence_carries_step():
    m = build(cfg().model)
    m.layers[-1].weight.data *= 1e9
    x = np.random.default_rng(2).standard_normal((8, 6)) * 1e3
    with pytest.raises(Divergence) as info:
        Tr.sgd_step(m, x, np.arange(8) % 3, 0.1, step=17)
    assert info.value.step == 17


def test_regnorm_zero_lambda_matches_plain_loss(toy):
    c = cfg("regnorm", reg_lambda=0.0, steps=20)
    a = Tr.train(c, toy)
    # the same loop by hand, cross-entropy only
    m = build(c.model)
    stream = Tr.BatchStream(toy.x_train, toy.y_train, c.batch_size, T.make_rng(c.seed + 1))
    for _ in range(c.steps):
        xb, yb = stream.next()
        loss = T.softmax_cross_entropy(m.forward(xb, Mode.TRAIN).logits, yb)
        Tr.sgd_update(m.parameters(), T.backward(loss, m.parameters()), c.lr)
    assert a.model.state_hash() == m.state_hash()


def test_reg_lambda_only_for_regnorm():
    assert cfg("layer", reg_lambda=0.5).effective_reg_lambda == 0.0
    assert cfg("preregnorm", reg_lambda=0.5).effective_reg_lambda == 0.5


def test_config_validation():
    with pytest.raises(ConfigError):
        cfg(steps=0)
    with pytest.raises(ConfigError):
        cfg(reg_lambda=-1.0)
    with pytest.raises(ConfigError, match="unknown train keys"):
        Tr.TrainConfig.from_dict({"model": cfg().model.to_dict(), "momentum": 0.9})
    assert Tr.TrainConfig.from_dict(cfg().to_dict()) == cfg()


# ------------------------------------------------------------------ train


def test_training_is_reproducible(toy):
    a, b = Tr.train(cfg("batch"), toy), Tr.train(cfg("batch"), toy)
    assert a.model.state_hash() == b.model.state_hash()
    assert [r.train_loss for r in a.records] == [r.train_loss for r in b.records]


@pytest.mark.parametrize("norm", ["none", "batch", "layer", "prelayernorm", "regnorm"])
def test_training_reduces_loss(toy, norm):
    res = Tr.train(cfg(norm, steps=150), toy)
    init, _ = Tr.accuracy_and_loss(build(cfg(norm).model).forward(toy.x_test, Mode.EVAL).logits.data, toy.y_test)
    _, final = Tr.evaluate(res.model, toy.x_test, toy.y_test, mode=Mode.BATCH_TRAIN if norm == "batch" else Mode.EVAL)
    assert final < init
    assert 0.0 <= res.final.test_accuracy <= 1.0


def test_hook_schedule(toy):
    res = Tr.train(cfg(steps=25, diag_period=10), toy, hook=lambda step, m: {"s": step})
    assert [r.step for r in res.records if r.diagnostics] == [0, 10, 20, 25]


def test_diverged_run_is_reported(toy):
    res = Tr.train(cfg(steps=50), toy, lr=1e6)
    assert res.diverged_at is not None and res.final.step == res.diverged_at


def test_regnorm_penalty_pulls_means_to_zero():
    data = load_dataset({"id": "digits"})
    c = Tr.TrainConfig(
        ModelConfig(kind="mlp", depth=3, width=32, input_shape=(8, 8, 1), norm="regnorm", seed=1),
        lr=0.05, reg_lambda=1.0, batch_size=32, steps=2000,
    )
    probe = data.x_test[:128]

    def monitored(model):
        out = model.forward(probe, Mode.EVAL, capture=True)
        return float(np.abs(out.captures[1].zbar.data.mean(axis=0)).mean())

    start = monitored(build(c.model))
    res = Tr.train(c, data)
    assert monitored(res.model) < start


# --------------------------------------------------------------- grid search


def test_grid_picks_nonzero_lr(toy):
    g = Tr.lr_grid_search(cfg(), toy, [0.0, 0.1])
    assert g.best_lr == 0.1 and set(g.results) == {0.0, 0.1}


def test_single_grid(toy):
    g = Tr.lr_grid_search(cfg(steps=5), toy, [0.05])
    assert g.best_lr == 0.05 and g.best is g.results[0.05]


def test_all_diverged_grid(toy):
    g = Tr.lr_grid_search(cfg(steps=30), toy, [1e6, 1e7])
    assert g.failed and g.best is None and len(g.results) == 2


def test_empty_grid(toy):
    with pytest.raises(ParameterError):
        Tr.lr_grid_search(cfg(), toy, [])


def test_batch_norm_tolerates_larger_lr():
    # deep no-skip conv net: the largest stable lr under batch norm is at least layer norm's
    data = synthetic_dataset(200, (4, 4, 1), 3, np.random.default_rng(3)).standardized()
    largest = {}
    for norm in ("batch", "layer"):
        model = ModelConfig(kind="wideresnet", depth=14, width=1, input_shape=(4, 4, 1), num_classes=3, norm=norm)
        c = Tr.TrainConfig(model, batch_size=16, steps=30)
        ok = [lr for lr in (0.1, 1.0, 10.0, 100.0) if Tr.train(c, data, lr).diverged_at is None]
        largest[norm] = max(ok, default=0.0)
    assert largest["batch"] >= largest["layer"]


# ----------------------------------------------------------------- evaluate


def test_accuracy_of_random_logits():
    rng = T.make_rng(2024)
    acc, _ = Tr.accuracy_and_loss(rng.standard_normal((20000, 10)), rng.integers(0, 10, 20000))
    assert abs(acc - 0.1) < 0.03


def test_perfect_logits():
    y = np.array([2, 0, 1])
    assert Tr.accuracy_and_loss(np.eye(3)[y] * 50, y)[0] == 1.0


def test_evaluate_is_pure_and_includes_partial_batch(toy):
    m = Tr.train(cfg("batch", steps=10), toy).model
    h = m.state_hash()
    a = Tr.evaluate(m, toy.x_test, toy.y_test, batch_size=7)
    assert a == Tr.evaluate(m, toy.x_test, toy.y_test, batch_size=7)
    assert m.state_hash() == h
    n = len(toy.x_test)
    logits = m.forward(toy.x_test, Mode.EVAL).logits.data
    assert a[0] == pytest.approx(np.mean(np.argmax(logits, 1) == toy.y_test), abs=1e-12)
    assert n % 7 != 0
    with pytest.raises(ParameterError):
        Tr.evaluate(m, toy.x_test, toy.y_test, mode=Mode.TRAIN)


def test_batch_stream_epoch_covers_everything():
    x = np.arange(12).reshape(12, 1).astype(float)
    s = Tr.BatchStream(x, np.zeros(12, int), 4, T.make_rng(0))
    seen = np.concatenate([s.next()[0][:, 0] for _ in range(3)])
    assert sorted(seen) == list(range(12))


# ------------------------------------------------------------------- sweep


def test_sweep_layer_norm_independent_of_eval_size(toy):
    grid = Tr.batch_size_sweep(cfg("layer", steps=20), toy, [8], [2, 5, 80])
    assert len({grid[8, es, "eval"] for es in (2, 5, 80)}) == 1
    assert len({grid[8, es, "batch_train"] for es in (2, 5, 80)}) == 1


def test_batch_eval_mode_ignores_companions(toy):
    m = Tr.train(cfg("batch", steps=20), toy).model
    x = toy.x_test[:10]
    with T.batch_invariant():
        alone = m.forward(x[:1], Mode.EVAL).logits.data
        together = m.forward(x, Mode.EVAL).logits.data[:1]
    assert alone.tobytes() == together.tobytes()


def test_batch_invariant_products():
    rng = T.make_rng(5)
    a, w = rng.standard_normal((300, 576)), rng.standard_normal((576, 64))
    with T.batch_invariant():
        full = T.matmul(a, w).data
        for n in (1, 2, 7, 256):
            assert T.matmul(a[-n:], w).data[-1].tobytes() == full[-1].tobytes()
    np.testing.assert_allclose(full, a @ w, rtol=0, atol=1e-12 * np.abs(a @ w).max())
