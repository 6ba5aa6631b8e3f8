import numpy as np
import pytest

from mpsupernet.data import Dataset, gen_synthetic
from mpsupernet.model import ElasticViT, LoRASpec
from mpsupernet.space import SearchSpace, uniform_config
from mpsupernet.tensor import Tensor
from mpsupernet.train import (AdamW, EvalResult, MetricsWriter, TrainSchedule, Trainer,
                              TrainingError, evaluate, segmentation_metrics, smoothed, summarize)

from suites import params_digest, progressive_contracts

SPACE = SearchSpace()


def small_data(n=16, seed=0):
    return gen_synthetic("shapes-seg", n, 64, seed)


def test_schedule_defaults_and_validation():
    s = TrainSchedule(total_steps=10)
    assert s.phase1_steps == 5 and s.phase(4) == 1 and s.phase(5) == 2
    assert s.max_res(0) == 48 and s.max_res(9) == 64
    with pytest.raises(ValueError):
        TrainSchedule(total_steps=10, phase1_steps=11)
    with pytest.raises(ValueError):
        TrainSchedule(phase1_max_res=64, phase2_max_res=48)


def test_zero_steps_leave_model_unchanged():
    model = ElasticViT(SPACE, seed=0)
    before = params_digest(model)
    Trainer(model, small_data(), TrainSchedule(total_steps=0)).run()
    assert params_digest(model) == before


def test_contracts_short_run(tmp_path):
    out = progressive_contracts(tmp_path, steps=20)
    assert out == {"freeze": [], "split": [], "cap": []}


def test_phase_switch_attaches_lora_and_freezes():
    tr = Trainer(ElasticViT(SPACE, seed=0), small_data(), TrainSchedule(total_steps=4, batch_size=2))
    tr.run(until=2)
    assert not tr.model.lora
    tr.run()
    assert tr.model.lora and not tr.model.params["embed.w"].requires_grad
    assert all(t.requires_grad for t in tr.model.lora_parameters().values())
    assert tr.model.quant.trainable and len(tr.model.quant) > 0


def test_adamw_skips_missing_gradients_and_decay_rules():
    opt = AdamW(lr=0.1, weight_decay=0.5)
    w = Tensor(np.ones((2, 2)), requires_grad=True)
    b = Tensor(np.ones(2), requires_grad=True)
    idle = Tensor(np.ones((2, 2)), requires_grad=True)
    w.grad, b.grad = np.zeros((2, 2), np.float32), np.zeros(2, np.float32)
    opt.step({"w": w, "b": b, "idle": idle}, lambda n, p: p.ndim >= 2)
    np.testing.assert_allclose(w.data, 1 - 0.1 * 0.5)   # decayed only
    np.testing.assert_array_equal(b.data, 1.0)          # no decay for vectors
    np.testing.assert_array_equal(idle.data, 1.0)       # no gradient, untouched
    assert "idle" not in opt.state


def test_adamw_first_step_moves_by_lr():
    opt = AdamW(lr=0.01, weight_decay=0.0)
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.array([3.0, -0.5], np.float32)
    opt.step({"p": p}, lambda n, t: False)
    np.testing.assert_allclose(p.data, [0.99, -1.99], rtol=1e-5)


def test_nonfinite_loss_aborts():
    model = ElasticViT(SPACE, seed=0)
    model.params["head.b"].data[:] = np.nan
    tr = Trainer(model, small_data(4), TrainSchedule(total_steps=2, batch_size=2))
    with pytest.raises(TrainingError, match="non-finite"):
        tr.run()


def test_metrics_writer(tmp_path):
    path = tmp_path / "m.csv"
    w = MetricsWriter(path)
    Trainer(ElasticViT(SPACE, seed=0), small_data(), TrainSchedule(total_steps=3, batch_size=2)).run(metrics=w)
    w.close()
    lines = path.read_text().splitlines()
    assert lines[0] == "step,phase,config,loss,lr" and len(lines) == 4


def test_smoothed():
    assert smoothed([4, 4, 2, 2], window=2) == (4.0, 2.0)
    assert smoothed([1.0], window=20) == (1.0, 1.0)


def test_untrained_two_class_chance_accuracy():
    space = SearchSpace(classes=2)
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 2, size=(8, 32, 32)).astype(np.int32)
    data = Dataset(rng.uniform(0, 1, size=(8, 32, 32, 1)).astype(np.float32), labels)
    cfg = uniform_config(space, 32, (2, 2), 2.0, (8, 8))
    res = evaluate(ElasticViT(space, seed=0), cfg, data)
    assert abs(res.pixel_acc - 0.5) <= 0.1
    assert res == evaluate(ElasticViT(space, seed=0), cfg, data)


def test_perfect_logits_and_iou():
    labels = np.array([[0, 1], [2, 2]])
    logits = np.eye(3)[labels] * 50.0
    res = summarize(*segmentation_metrics(logits, labels, 3))
    assert res.loss < 1e-3 and res.pixel_acc == 1.0 and res.miou == 1.0
    wrong = summarize(*segmentation_metrics(np.eye(3)[[[1, 0], [2, 2]]] * 50.0, labels, 3))
    # class 0 and 1 swapped: IoU 0 for both, 1 for class 2
    assert wrong.miou == pytest.approx(1 / 3)


def test_evaluate_empty_set():
    with pytest.raises(ValueError):
        evaluate(ElasticViT(SPACE), SPACE.max_config(),
                 Dataset(np.zeros((0, 64, 64, 1), np.float32), np.zeros((0, 64, 64), np.int32)))
