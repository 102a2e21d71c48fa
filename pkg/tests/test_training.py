import math

import numpy as np
import pytest

from earlyexit.data import Dataset
from earlyexit.model import attach_exits, build_backbone, checksum, forward_all_exits
from earlyexit.tensor_core import ConfigError, TrainingAborted, backward_sequence, forward_sequence
from earlyexit.training import (
    GlobalTrainConfig, PersonalisationConfig, default_exit_weights, distill_loss, exit_loss_batch,
    personalisation_loss, personalise_exits, self_superv_loss, supervised_loss, train_global,
    training_flops,
)

from _helpers import central_diff, rel_error


def test_supervised_loss_values():
    assert supervised_loss(np.array([100.0, 0.0]), 0) == pytest.approx(0.0, abs=1e-12)
    assert supervised_loss(np.zeros(10), 4) == pytest.approx(math.log(10))
    assert supervised_loss(np.array([1.0, 0.0]), 1) == pytest.approx(1.313262, abs=1e-6)
    with pytest.raises(ConfigError):
        supervised_loss(np.zeros(3), 3)


def test_distill_loss_values():
    z = np.array([0.3, -1.0, 2.0])
    assert distill_loss(z, z, 4.0) == pytest.approx(0.0, abs=1e-12)
    # closed form: 2/3 ln(4/3) + 1/3 ln(2/3)
    assert distill_loss(np.zeros(2), np.array([math.log(2), 0.0]), 1.0) == pytest.approx(0.056633, abs=1e-6)


def test_distill_gradient_scale_stays_order_one():
    rng = np.random.default_rng(0)
    s, t = rng.standard_normal(10) * 3, rng.standard_normal(10) * 3
    norms = []
    for T in (1.0, 2.0, 4.0):
        g = central_diff(lambda: distill_loss(s, t, T), s)
        norms.append(np.linalg.norm(g))
    assert len({round(v, 6) for v in
                (distill_loss(s, t, 1.0), distill_loss(s, t, 2.0), distill_loss(s, t, 4.0))}) == 3
    assert max(norms) / min(norms) < 4 and min(norms) > 0.1


def test_distill_nonnegative_and_zero_iff_equal():
    rng = np.random.default_rng(1)
    for _ in range(200):
        s, t = rng.standard_normal(6), rng.standard_normal(6)
        assert distill_loss(s, t, 2.0) >= 0
        assert distill_loss(s, s + 5.0, 2.0) < 1e-7  # shift leaves softmax unchanged


def test_self_supervised_loss():
    teacher = np.zeros(10)
    teacher[3] = 5.0
    assert self_superv_loss(np.zeros(10), teacher) == pytest.approx(math.log(10))
    student = np.random.default_rng(2).standard_normal(10)
    other = teacher.copy()
    other[7] = 4.9
    assert self_superv_loss(student, teacher) == self_superv_loss(student, other)
    assert self_superv_loss(student, teacher) == pytest.approx(supervised_loss(student, 3))


def test_self_supervised_ties_take_lowest_index():
    assert self_superv_loss(np.array([0.0, 1.0, 2.0]), np.array([1.0, 1.0, 0.0])) == \
        pytest.approx(supervised_loss(np.array([0.0, 1.0, 2.0]), 0))


def _exit_outputs(rng, M=3, K=5):
    return [rng.standard_normal(K) for _ in range(M + 1)]


def test_gate_reductions():
    rng = np.random.default_rng(3)
    outs = _exit_outputs(rng)
    y = 2
    per, total = personalisation_loss(outs, y, PersonalisationConfig(alpha=1, beta=0, gamma=0))
    assert per == pytest.approx([supervised_loss(o, y) for o in outs[:-1]])
    assert total == pytest.approx(sum(per))
    cfg = PersonalisationConfig(alpha=0, beta=1, gamma=0, T=3.0)
    per, _ = personalisation_loss(outs, None, cfg)
    assert per == pytest.approx([distill_loss(o, outs[-1], 3.0) for o in outs[:-1]])
    cfg = PersonalisationConfig(alpha=0, beta=0.5, gamma=1, T=2.0)
    per, _ = personalisation_loss(outs, y, cfg)
    expect = [0.5 * distill_loss(o, outs[-1], 2.0) + self_superv_loss(o, outs[-1]) for o in outs[:-1]]
    assert per == pytest.approx(expect)


def test_mutual_exclusion_and_missing_label():
    with pytest.raises(ConfigError):
        PersonalisationConfig(alpha=1, gamma=1)
    with pytest.raises(ConfigError):
        personalisation_loss(_exit_outputs(np.random.default_rng(0)), None, PersonalisationConfig())
    with pytest.raises(ConfigError):
        PersonalisationConfig(T=0)


def test_supervised_only_has_no_self_supervised_term():
    rng = np.random.default_rng(4)
    for _ in range(50):
        outs = _exit_outputs(rng)
        per, _ = personalisation_loss(outs, 1, PersonalisationConfig(alpha=2.0, beta=0.0))
        assert per == pytest.approx([2 * supervised_loss(o, 1) for o in outs[:-1]])
        per, _ = personalisation_loss(outs, None, PersonalisationConfig(alpha=0, gamma=0.7))
        assert per == pytest.approx([0.7 * self_superv_loss(o, outs[-1]) for o in outs[:-1]])


MODES = {
    "alpha": PersonalisationConfig(alpha=1.0, beta=0.0, gamma=0.0),
    "beta": PersonalisationConfig(alpha=0.0, beta=1.0, gamma=0.0, T=3.0),
    "gamma_beta": PersonalisationConfig(alpha=0.0, beta=0.5, gamma=1.0, T=2.0),
}


def hybrid_loss_gradcheck(seed, cfg):
    """Max relative error between analytic and finite-difference gradients of the
    summed hybrid loss wrt every early-exit parameter of a small float64 model."""
    rng = np.random.default_rng(seed)
    blocks, final = build_backbone((1, 8, 8), 3, widths=(3, 3, 4), pool_after=(2,), rng=rng)
    model = attach_exits(blocks, final, (1, 8, 8), 3, M=2, rng=rng).astype(np.float64)
    # zero biases put pre-activations exactly on the ReLU kink for all-zero patches
    for layer in model.iter_layers():
        if "bias" in layer.params:
            layer.params["bias"][...] = rng.uniform(0.05, 0.2, layer.params["bias"].shape)
    x = rng.random((3, 1, 8, 8))
    y = rng.integers(0, 3, 3)
    teacher = forward_all_exits(model, x)[-1]

    feats = {}
    h = x
    for b, block in enumerate(model.blocks):
        h, _ = forward_sequence(block, h, need_cache=False)
        feats[b] = h

    def total():
        return sum(float(exit_loss_batch(forward_sequence(ex.layers, feats[ex.block], False)[0],
                                         teacher, y, cfg)[0].sum()) for ex in model.exits)

    worst = 0.0
    for ex in model.exits:
        logits, caches = forward_sequence(ex.layers, feats[ex.block])
        _, g = exit_loss_batch(logits, teacher, y, cfg)
        _, grads = backward_sequence(ex.layers, g, caches, need_input_grad=False)
        for layer, lg in zip(ex.layers, grads):
            for name, p in layer.params.items():
                worst = max(worst, rel_error(lg[name], central_diff(total, p, step=1e-6)))
    return worst


@pytest.mark.parametrize("mode", sorted(MODES))
@pytest.mark.parametrize("seed", range(10))
def test_hybrid_loss_gradients(mode, seed):
    assert hybrid_loss_gradcheck(seed, MODES[mode]) < 1e-3


def _two_class_data(n=500, seed=0):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    x = rng.random((n, 1, 12, 12)) * 0.3
    # horizontal vs vertical stripes: separable after global pooling
    x[y == 0, 0, ::2, :] += 0.7
    x[y == 1, 0, :, ::2] += 0.7
    return Dataset(x.astype(np.float32), y, 2)


def _small_model(K=2, seed=0, M=2):
    rng = np.random.default_rng(seed)
    blocks, final = build_backbone((1, 12, 12), K, widths=(4, 4, 8, 8), pool_after=(2,), rng=rng)
    return attach_exits(blocks, final, (1, 12, 12), K, M=M, rng=rng)


def test_global_training_separable_data():
    data = _two_class_data()
    model, tlog = train_global(_small_model(), data, GlobalTrainConfig(epochs=50, lr=0.05, batch_size=32))
    final = [r for r in tlog.rows if r["exit_id"] == model.M + 1]
    assert len(final) == 50
    acc = np.mean(np.argmax(forward_all_exits(model, data.images)[-1], axis=1) == data.labels)
    assert acc >= 0.99


def test_final_only_weights_match_plain_backbone():
    data = _two_class_data(200)
    cfg = lambda M: GlobalTrainConfig(weights=[0.0] * M + [1.0], epochs=3, lr=0.05)
    a = _small_model(M=2)
    b = _small_model(M=1)  # same backbone draw order, different heads
    b_backbone = [t.copy() for t in b.backbone_tensors()]
    assert checksum(a.backbone_tensors()) == checksum(b_backbone)
    train_global(a, data, cfg(2))
    train_global(b, data, cfg(1))
    assert checksum(a.backbone_tensors()) == checksum(b.backbone_tensors())


def test_frozen_global_training_updates_heads_only():
    data = _two_class_data(100)
    model = _small_model()
    before = checksum(model.backbone_tensors())
    heads = checksum(model.exit_tensors(1))
    train_global(model, data, GlobalTrainConfig(epochs=2, freeze_backbone=True))
    assert checksum(model.backbone_tensors()) == before
    assert checksum(model.exit_tensors(1)) != heads


def test_global_training_deterministic():
    data = _two_class_data(100)
    a, _ = train_global(_small_model(), data, GlobalTrainConfig(epochs=2, seed=5))
    b, _ = train_global(_small_model(), data, GlobalTrainConfig(epochs=2, seed=5))
    assert checksum(a.all_tensors()) == checksum(b.all_tensors())


def test_default_weights_follow_flop_fraction():
    m = _small_model()
    w = default_exit_weights(m)
    assert w[-1] == 1.0 and all(0 < a < b < 1 for a, b in zip(w[:-2], w[1:-1]))


@pytest.mark.parametrize("cfg", list(MODES.values()), ids=sorted(MODES))
def test_personalisation_keeps_backbone_frozen(cfg):
    data = _two_class_data(96, seed=3)
    model = _small_model()
    probe = _two_class_data(100, seed=4).images
    before_final = forward_all_exits(model, probe)[-1]
    before = checksum(model.backbone_tensors())
    before_heads = [checksum(model.exit_tensors(i)) for i in (1, 2)]
    new, tlog = personalise_exits(model, data, data, PersonalisationConfig(**{**cfg.__dict__, "epochs": 2}))
    assert checksum(new.backbone_tensors()) == before
    assert checksum(model.backbone_tensors()) == before  # input model untouched
    assert np.array_equal(forward_all_exits(new, probe)[-1], before_final)
    assert all(checksum(new.exit_tensors(i)) != h for i, h in zip((1, 2), before_heads))
    assert [(r["epoch"], r["exit_id"]) for r in tlog.rows] == [(e, i) for e in range(2) for i in (1, 2)]
    assert all(r["accuracy"] is not None for r in tlog.rows)


def test_personalisation_subset_and_errors():
    data = _two_class_data(64)
    model = _small_model()
    new, _ = personalise_exits(model, data, None, PersonalisationConfig(epochs=1), exits=[1])
    assert checksum(new.exit_tensors(2)) == checksum(model.exit_tensors(2))
    with pytest.raises(ConfigError):
        personalise_exits(model, None, None, PersonalisationConfig())
    with pytest.raises(ConfigError):
        personalise_exits(model, data.unlabelled(), None, PersonalisationConfig.hard_labels())


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_personalisation_aborts_on_nonfinite():
    data = _two_class_data(32)
    model = _small_model()
    model.exits[0].layers[-1].params["weight"][:] = np.inf
    with pytest.raises(TrainingAborted):
        personalise_exits(model, data, None, PersonalisationConfig(epochs=1))


def test_personalisation_deterministic():
    data = _two_class_data(64)
    cfg = PersonalisationConfig.self_distillation(epochs=2, seed=3)
    a, _ = personalise_exits(_small_model(), data, None, cfg)
    b, _ = personalise_exits(_small_model(), data, None, cfg)
    assert checksum(a.all_tensors()) == checksum(b.all_tensors())


def test_training_flops(reference_model):
    m = reference_model
    for exits in ([1], [3], [1, 2, 3, 4, 5, 6]):
        assert training_flops(m, "exits_only", 10, exits) < training_flops(m, "full", 10)
    assert training_flops(m, "full", 1) / training_flops(m, "exits_only", 1, [1]) >= 2
    assert training_flops(m, "full", 1) / training_flops(m, "exits_only", 1, [1], needs_teacher=True) >= 2
    assert training_flops(m, "exits_only", 200, [2]) == 2 * training_flops(m, "exits_only", 100, [2])
    assert training_flops(m, "full", 200) == 2 * training_flops(m, "full", 100)


def test_training_log_csv(tmp_path):
    data = _two_class_data(32)
    _, tlog = personalise_exits(_small_model(), data, None, PersonalisationConfig(epochs=1))
    tlog.write_csv(tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "epoch,exit_id,mean_loss,accuracy" and len(lines) == 3
