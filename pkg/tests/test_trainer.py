import io

import numpy as np
import pytest

from loralab import adapters, autodiff as ad, matcore, model, tasks, trainer
from loralab.adapters import AdapterSpec
from loralab.model import ModelConfig
from loralab.trainer import AdamState, TrainConfig

SMALL = ModelConfig(n_layers=2, d_model=16, n_heads=4, d_ff=32, vocab_size=32,
                    max_len=16, n_outputs=4, seed=0)


@pytest.fixture(scope="module")
def small_weights():
    return model.build_model(SMALL)


def small_spec(method="lora", layers=(1, 2)):
    return AdapterSpec(method, 2, 2.0, ("query", "value"), layers)


def displaced_params(spec, seed=0):
    params = trainer.init_params(spec, SMALL.d_model, seed)
    tensors = {
        key: value + matcore.gaussian(*value.shape, 0.0, 0.2, seed + 50 + i)
        for i, (key, value) in enumerate(params.tensors.items())
    }
    return type(params)(tensors)


def small_batch(weights, seed=0, batch=4):
    task = tasks.TeacherTask(weights, rank=2, seed=seed, seq_len=8)
    return task.batch("test", batch)


# --- loss and gradients --------------------------------------------------------

def test_zero_signal_gives_zero_grads(small_weights):
    spec = small_spec()
    params = displaced_params(spec, seed=1)
    toks = small_batch(small_weights, seed=2)[0]
    logits, _ = adapters.forward_with_adapters(small_weights, params, spec, toks)
    loss, grads = trainer.loss_and_grads(small_weights, params, spec, (toks, logits), "mse")
    assert loss == 0.0
    for key, g in grads.items():
        assert np.abs(g).max() < 1e-12, key


def test_gradients_cover_exactly_the_trainable_tensors(small_weights):
    spec = small_spec(method="condlora")
    params = displaced_params(spec, seed=3)
    _, grads = trainer.loss_and_grads(small_weights, params, spec, small_batch(small_weights), "mse")
    assert set(grads) == {"cond.query.thetaA", "cond.query.thetaB",
                          "cond.value.thetaA", "cond.value.thetaB"}


@pytest.mark.parametrize("method", adapters.METHODS)
@pytest.mark.parametrize("loss_kind", trainer.LOSS_KINDS)
def test_finite_difference_oracle(small_weights, method, loss_kind):
    spec = small_spec(method=method)
    params = displaced_params(spec, seed=4)
    if loss_kind == "mse":
        batch = small_batch(small_weights, seed=5)
    else:
        task = tasks.ParityTask(small_weights, seed=5, seq_len=8)
        batch = task.batch("test", 4)
    errors = trainer.finite_difference_check(small_weights, params, spec, batch, loss_kind)
    assert max(errors.values()) < 1e-4, errors


def test_key_and_output_modules_trainable(small_weights):
    # query/value are the defaults, but all four projections are valid targets
    for method in adapters.METHODS:
        spec = AdapterSpec(method, 2, 2.0, ("key", "output"), (1, 2))
        params = trainer.generic_params(spec, SMALL.d_model, seed=13)
        batch = small_batch(small_weights, seed=14)
        errors = trainer.finite_difference_check(small_weights, params, spec, batch, "mse")
        assert max(errors.values()) < 1e-4, (method, errors)
        merged = adapters.merge(small_weights, params, spec)
        via_adapter, _ = adapters.forward_with_adapters(small_weights, params, spec, batch[0])
        direct, _ = model.forward(merged, None, batch[0])
        assert np.abs(via_adapter - direct).max() < 1e-9


def test_condlora_gradient_accumulates_over_layers(small_weights):
    spec = small_spec(method="condlora")
    params = displaced_params(spec, seed=6)
    batch = small_batch(small_weights, seed=7)
    _, full = trainer.loss_and_grads(small_weights, params, spec, batch, "mse")

    def grads_with_live_layers(live):
        leaves = {k: ad.leaf(v) for k, v in params.tensors.items()}
        projections = {}
        for m, l in spec.targets():
            w0 = small_weights.projection(m, l)
            if l in live:
                a_cond = ad.transpose(ad.matmul(ad.const(w0), leaves[f"cond.{m}.thetaA"]))
                b_cond = ad.matmul(ad.const(w0.T), leaves[f"cond.{m}.thetaB"])
                delta = ad.scale(ad.matmul(b_cond, a_cond), spec.alpha / spec.rank)
            else:
                delta = ad.const(adapters.delta_w(params, spec, w0, m, l))
            projections[(m, l)] = ad.add(ad.const(w0), delta)
        logits, _ = model.encode(small_weights, batch[0], projections)
        loss = trainer._loss_node(logits, batch[1], "mse")
        ad.backward(loss)
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.value))
                for k, t in leaves.items()}

    only_1 = grads_with_live_layers({1})
    only_2 = grads_with_live_layers({2})
    for key in full:
        combined = only_1[key] + only_2[key]
        assert np.allclose(full[key], combined, rtol=1e-9, atol=1e-12), key


def test_non_finite_loss_raises(small_weights):
    spec = small_spec()
    params = displaced_params(spec, seed=8)
    toks = small_batch(small_weights)[0]
    bad_targets = np.full((4, SMALL.n_outputs), np.inf)
    with pytest.raises(matcore.NumericError):
        trainer.loss_and_grads(small_weights, params, spec, (toks, bad_targets), "mse")


def test_train_run_numeric_abort_names_step(small_weights):
    class PoisonedTask:
        loss_kind = "mse"

        def __init__(self, inner):
            self.inner = inner

        def batch(self, index, n):
            toks, targets = self.inner.batch(index, n)
            if index == 3:
                targets = np.full_like(targets, np.inf)
            return toks, targets

        def eval_batch(self, n):
            return self.inner.eval_batch(n)

    task = PoisonedTask(tasks.TeacherTask(small_weights, rank=2, seed=5, seq_len=8))
    tc = TrainConfig(learning_rate=1e-2, max_steps=10, batch_size=4, seed=1)
    with pytest.raises(matcore.NumericError, match="step 3"):
        trainer.train_run(small_weights, small_spec(), task, tc)


def test_cross_entropy_rejects_bad_labels(small_weights):
    spec = small_spec()
    params = displaced_params(spec, seed=9)
    toks = small_batch(small_weights)[0]
    with pytest.raises(ValueError):
        trainer.loss_and_grads(small_weights, params, spec,
                               (toks, np.array([0, 1, 2, SMALL.n_outputs])), "cross_entropy")


# --- adam ------------------------------------------------------------------------

def cfg(lr=0.1, steps=1000):
    return TrainConfig(learning_rate=lr, max_steps=steps, batch_size=1, seed=0)


def test_adam_zero_gradients_fixed_point():
    tensors = {"p": np.array([[1.5, -2.0]])}
    grads = {"p": np.zeros((1, 2))}
    out = trainer.adam_step(tensors, grads, AdamState(), 1, cfg())
    assert np.array_equal(out["p"], tensors["p"])


def test_adam_schedule_endpoint_freezes():
    tensors = {"p": np.array([[1.0]])}
    grads = {"p": np.array([[3.0]])}
    out = trainer.adam_step(tensors, grads, AdamState(), 1000, cfg(steps=1000))
    assert np.array_equal(out["p"], tensors["p"])


def test_adam_first_step_closed_form():
    # bias-corrected first step with g = 1 moves by ~lr (times schedule ~1)
    tensors = {"p": np.array([[0.0]])}
    grads = {"p": np.array([[1.0]])}
    out = trainer.adam_step(tensors, grads, AdamState(), 1, cfg(lr=0.1, steps=10**6))
    assert abs(abs(float(out["p"][0, 0])) - 0.1) < 1e-6


def test_adam_step_requires_one_based():
    with pytest.raises(ValueError):
        trainer.adam_step({}, {}, AdamState(), 0, cfg())


def test_schedule_factor():
    assert trainer.schedule_factor(1, 0) == 0.0
    assert trainer.schedule_factor(500, 1000) == pytest.approx(0.5)
    assert trainer.schedule_factor(1000, 1000) == 0.0
    assert trainer.schedule_factor(2000, 1000) == 0.0


# --- train loop --------------------------------------------------------------------

def test_train_run_deterministic(small_weights):
    spec = small_spec()
    task = tasks.TeacherTask(small_weights, rank=2, seed=5, seq_len=8)
    tc = TrainConfig(learning_rate=2e-2, max_steps=30, batch_size=4, seed=1)
    p1, r1 = trainer.train_run(small_weights, spec, task, tc)
    p2, r2 = trainer.train_run(small_weights, spec, task, tc)
    assert r1.losses == r2.losses
    for key in p1.tensors:
        assert np.array_equal(p1.tensors[key], p2.tensors[key])


def test_train_run_zero_steps(small_weights):
    spec = small_spec()
    task = tasks.TeacherTask(small_weights, rank=2, seed=5, seq_len=8)
    tc = TrainConfig(learning_rate=1e-2, max_steps=0, batch_size=4, seed=1)
    params, report = trainer.train_run(small_weights, spec, task, tc)
    init = trainer.init_params(spec, SMALL.d_model, 1)
    for key in params.tensors:
        assert np.array_equal(params.tensors[key], init.tensors[key])
    assert report.losses == []
    assert report.final_loss == report.initial_loss


def test_train_run_reduces_loss_and_freezes_base(small_weights):
    spec = small_spec()
    task = tasks.TeacherTask(small_weights, rank=2, seed=6, seq_len=8)
    before = {name: small_weights[name].copy() for name in small_weights.names()}
    tc = TrainConfig(learning_rate=2e-2, max_steps=150, batch_size=8, seed=2)
    params, report = trainer.train_run(small_weights, spec, task, tc)
    assert report.final_loss < report.initial_loss
    assert report.trainable_param_count == adapters.count_trainable(spec, SMALL.d_model)
    assert len(report.losses) == 150
    assert report.examples_per_second > 0
    assert report.seed == 2
    for name, value in before.items():
        assert np.array_equal(small_weights[name], value), name


def test_write_report_format(small_weights):
    report = trainer.TrainReport(
        losses=[0.5, 0.25], initial_loss=1.0, final_loss=0.2,
        examples_per_second=123.4, trainable_param_count=256,
        wall_clock_seconds=1.5, seed=7,
    )
    buf = io.StringIO()
    trainer.write_report(buf, report)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "step,loss"
    assert lines[1] == "0,1"
    assert lines[2].startswith("1,0.5") and lines[3].startswith("2,0.25")
    footer = dict(item.split("=") for item in lines[4].split())
    assert float(footer["final_loss"]) == 0.2
    assert float(footer["examples_per_second"]) == 123.4
    assert footer["params"] == "256"
    assert float(footer["seconds"]) == 1.5


def test_bench_throughput_minimum(small_weights):
    spec = small_spec()
    task = tasks.TeacherTask(small_weights, rank=2, seed=5, seq_len=8)
    tc = TrainConfig(learning_rate=1e-2, max_steps=10**6, batch_size=4, seed=1)
    rate = trainer.bench_throughput(small_weights, spec, task, 1.0, tc, warmup=2)
    assert rate > 0
    with pytest.raises(ValueError):
        trainer.bench_throughput(small_weights, spec, task, 0.5, tc)
