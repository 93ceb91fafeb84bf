import csv
import json

import numpy as np
import pytest

from gcgrelu.checkpoint import load_checkpoint
from gcgrelu.data import synth_blobs
from gcgrelu.errors import ConfigError, NumericalError
from gcgrelu.gcnet import GCNet, build_smallnet, build_toy, gcnet_backward, gcnet_forward
from gcgrelu.kernels import softmax_xent
from gcgrelu.layers import Linear
from gcgrelu.trainer import CSV_HEADER, TrainConfig, evaluate, sgd_step, train


def _snapshot(net):
    return {f"{name}.{k}": v.copy() for name, layer in net.named_layers()
            for k, v in list(layer.params.items()) + list(layer.buffers().items())}


def _grelu_state(net):
    return [np.concatenate([p.endpoints, p.slopes]) for l in net.grelu_layers() for p in l.sets]


@pytest.fixture(scope="module")
def synth():
    return synth_blobs(4, 30, seed=0), synth_blobs(4, 10, seed=1, split="test")


def test_config_validation():
    for bad in (dict(lr=-1), dict(batch_size=1), dict(weight_decay=-1), dict(freeze_epochs=-1),
                dict(eval_every=0), dict(momentum=1.0), dict(lr=float("nan"))):
        with pytest.raises(ConfigError):
            TrainConfig(**bad).validate()


def test_lr_schedule():
    c = TrainConfig()
    assert c.lr_at(0) == 0.05 and c.lr_at(29) == 0.05
    assert c.lr_at(30) == pytest.approx(0.005) and c.lr_at(40) == pytest.approx(0.0005)


def test_zero_learning_rate_changes_no_parameter(synth):
    net = build_toy(classes=4)
    before = _snapshot(net)
    train(net, synth[0], synth[1], TrainConfig(lr=0.0, epochs=2, freeze_epochs=0, batch_size=16))
    after = _snapshot(net)
    for key, v in before.items():
        if "running" in key:
            continue  # batch-norm statistics are not parameters
        assert np.array_equal(v, after[key]), key


def test_freeze_keeps_grelu_at_init(synth):
    net = build_toy(classes=4)
    init = _grelu_state(net)
    w0 = net.classifier.params["weight"].copy()
    train(net, synth[0], None, TrainConfig(epochs=2, freeze_epochs=10**9, batch_size=16))
    for a, b in zip(init, _grelu_state(net)):
        assert np.array_equal(a, b)
    assert not np.array_equal(w0, net.classifier.params["weight"])


def test_grelu_moves_after_freeze(synth):
    net = build_toy(classes=4)
    init = _grelu_state(net)
    states = []
    train(net, synth[0], None, TrainConfig(epochs=3, freeze_epochs=2, batch_size=16),
          on_record=lambda r: states.append(_grelu_state(net)))
    assert all(np.array_equal(a, b) for a, b in zip(init, states[1]))  # after epoch 2
    assert any(not np.array_equal(a, b) for a, b in zip(init, states[2]))


def test_quadratic_step():
    # L = (w - 3)^2 / 2 on a single classifier weight: dL/dw = w - 3
    lin = Linear(1, 1, bias=False)
    lin.params["weight"][:] = 0.0
    net = GCNet.__new__(GCNet)
    net.named_layers = lambda: iter([("classifier", lin)])
    lin.grads = {"weight": lin.params["weight"] - 3.0}
    sgd_step(net, 0.1)
    assert lin.params["weight"][0, 0] == pytest.approx(0.3, abs=1e-15)


def test_weight_decay_exemption():
    net = build_toy(classes=4)
    for _, layer in net.named_layers():
        layer.grads = {k: np.zeros_like(v) for k, v in layer.params.items()}
    before = _snapshot(net)
    grelu0 = _grelu_state(net)
    lr, lam = 0.1, 0.5
    sgd_step(net, lr, lam)
    for name, layer in net.named_layers():
        for key, w in layer.params.items():
            if layer.kind == "grelu":
                continue
            np.testing.assert_allclose(w, before[f"{name}.{key}"] * (1 - lr * lam), rtol=1e-15)
    for a, b in zip(grelu0, _grelu_state(net)):
        assert np.array_equal(a, b)


def test_momentum_accumulates():
    lin = Linear(1, 1, bias=False)
    lin.params["weight"][:] = 0.0
    net = GCNet.__new__(GCNet)
    net.named_layers = lambda: iter([("classifier", lin)])
    vel = {}
    for _ in range(2):
        lin.grads = {"weight": np.array([[1.0]])}
        sgd_step(net, 0.1, 0.0, 0.9, vel)
    assert lin.params["weight"][0, 0] == pytest.approx(-0.1 - 0.19)


def test_loss_decreases_first_epoch():
    data = synth_blobs(4, 64, seed=2)
    net = build_toy(classes=4, seed=2)
    losses = []
    from gcgrelu.data import batches
    cfg = TrainConfig(freeze_epochs=0)
    for idx in batches(data, cfg.batch_size, cfg.seed, 0):
        logits, cache = gcnet_forward(net, data.images[idx])
        loss, g = softmax_xent(logits, data.labels[idx])
        losses.append(loss)
        gcnet_backward(net, cache, g)
        sgd_step(net, cfg.lr, cfg.weight_decay)
    assert losses[-1] < losses[0]


def test_evaluate_chance_level():
    data = synth_blobs(10, 20, seed=0)
    net = build_toy(classes=10)
    net.classifier.params["weight"][:] = 0
    net.classifier.params["bias"][:] = 0
    err, loss = evaluate(net, data)
    assert err == pytest.approx(0.9)
    assert loss == pytest.approx(np.log(10), abs=1e-12)
    assert evaluate(net, data) == (err, loss)


def test_evaluate_perfect_classifier(monkeypatch):
    import gcgrelu.trainer as T
    data = synth_blobs(3, 10, seed=0)
    # logits that always put the largest score on the true label
    by_image = {data.images[i].tobytes(): data.labels[i] for i in range(len(data))}

    def oracle_forward(net, x, train=False):
        labels = [by_image[img.tobytes()] for img in x]
        return np.eye(3)[labels] * 10.0, None

    monkeypatch.setattr(T, "gcnet_forward", oracle_forward)
    err, _ = evaluate(build_toy(classes=3), data)
    assert err == 0.0


def test_evaluate_does_not_mutate(synth):
    net = build_toy(classes=4)
    before = _snapshot(net)
    evaluate(net, synth[1])
    after = _snapshot(net)
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_outputs_written(tmp_path, synth):
    net = build_toy(classes=4)
    _, recs = train(net, synth[0], synth[1], TrainConfig(epochs=3, eval_every=2, batch_size=16),
                    out_dir=str(tmp_path))
    assert [r.epoch for r in recs] == [2, 3]
    rows = list(csv.reader(open(tmp_path / "metrics.csv")))
    assert tuple(rows[0]) == CSV_HEADER and len(rows) == 3
    lines = [json.loads(l) for l in open(tmp_path / "metrics.jsonl")]
    assert lines[0]["epoch"] == 2 and len(lines[0]["grelu"]) == 2
    assert all(0 <= r.test_error_rate <= 1 and 0 <= r.train_error_rate <= 1 for r in recs)
    loaded, meta = load_checkpoint(str(tmp_path / "checkpoint.bin"))
    assert meta["epoch"] == 3


def test_deterministic_runs_identical(tmp_path, synth):
    outs = []
    for k in range(2):
        net = build_toy(classes=4, seed=7)
        cfg = TrainConfig(epochs=3, freeze_epochs=1, batch_size=16, seed=7, deterministic=True)
        train(net, synth[0], synth[1], cfg, out_dir=str(tmp_path / str(k)))
        outs.append((tmp_path / str(k) / "metrics.csv").read_bytes())
        outs.append((tmp_path / str(k) / "metrics.jsonl").read_bytes())
    assert outs[0] == outs[2] and outs[1] == outs[3]
    assert b",0.000\n" in outs[0]


def test_nonfinite_loss_names_layer(synth):
    net = build_toy(classes=4)
    net.blocks[1].layers[0].params["weight"][0, 0, 0, 0] = np.nan
    with pytest.raises(NumericalError, match="block2.0.conv2d"):
        train(net, synth[0], None, TrainConfig(epochs=1, batch_size=16))


def test_overflowing_lr_reports_numerical_error(synth):
    net = build_toy(classes=4)
    with pytest.raises(NumericalError):
        with np.errstate(all="ignore"):
            train(net, synth[0], None, TrainConfig(lr=1e200, epochs=3, batch_size=16,
                                                   freeze_epochs=0, weight_decay=0))


def test_smallnet_learns_synth():
    data = synth_blobs(10, 100, seed=0)
    net = build_smallnet("grelu", "gc", seed=0)
    _, recs = train(net, data, None, TrainConfig(epochs=5, freeze_epochs=1))
    assert recs[-1].train_error_rate <= 0.05


def test_bias_free_classifier_variant_trains(synth):
    net = build_toy(classes=4, bias=False)
    assert "bias" not in net.classifier.params
    _, recs = train(net, synth[0], synth[1], TrainConfig(epochs=4, batch_size=16, freeze_epochs=1))
    assert recs[-1].train_loss < recs[0].train_loss
