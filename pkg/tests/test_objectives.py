import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mimscape import tensor as T
from mimscape.objectives import (EmaTeacher, MaskSpec, cross_entropy, cross_entropy_batch, ema_closed_form,
                                 ema_update, mae_loss, num_masked, rc_mae_loss, sample_mask, sample_mask_batch)
from mimscape.params import ParameterSet
from mimscape.tensor import ContractError, DimensionError, Tape


@pytest.mark.parametrize("n,ratio,m", [(16, 0.75, 12), (16, 0.0, 0), (16, 1.0, 16), (4, 0.5, 2), (10, 0.25, 3)])
def test_num_masked_examples(n, ratio, m):
    assert num_masked(n, ratio) == m


def test_sample_mask_is_a_partition(rng):
    for _ in range(50):
        mask = sample_mask(16, 0.75, rng)
        assert len(mask.masked) == 12
        assert sorted(mask.masked + mask.visible) == list(range(16))


def test_mask_spec_rejects_overlap():
    with pytest.raises(ContractError):
        MaskSpec(4, (0, 1), (1, 2, 3))


def test_mask_ratio_out_of_range():
    with pytest.raises(ContractError):
        num_masked(16, 1.5)


def test_mask_frequencies_are_uniform():
    # each patch is hidden with probability m/N; 1e5 draws put the std of the frequency near 1.4e-3
    masked, _ = sample_mask_batch(100_000, 16, 0.75, np.random.default_rng(0))
    freq = np.bincount(masked.ravel(), minlength=16) / 100_000
    assert np.abs(freq - 0.75).max() < 0.01


def test_sample_mask_batch_is_seeded():
    a = sample_mask_batch(8, 16, 0.75, np.random.default_rng(5))
    b = sample_mask_batch(8, 16, 0.75, np.random.default_rng(5))
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def _loop_mae(targets, preds, masked):
    total = 0.0
    for i in masked:
        total += sum((preds[i][d] - targets[i][d]) ** 2 for d in range(len(targets[i])))
    return total / len(masked)


def test_mae_loss_examples():
    targets = np.zeros((4, 2))
    preds = np.array([[9.0, 9.0], [1.0, 1.0], [0.0, 2.0], [7.0, 7.0]])
    mask = MaskSpec.from_masked(4, [1, 2])
    assert mae_loss(targets, preds, mask).item() == 3.0
    assert mae_loss(targets, targets, mask).item() == 0.0


def test_mae_loss_matches_loop_oracle(rng):
    targets, preds = rng.normal(size=(16, 5)), rng.normal(size=(16, 5))
    mask = sample_mask(16, 0.75, rng)
    assert abs(mae_loss(targets, preds, mask).item() - _loop_mae(targets, preds, mask.masked)) < 1e-12


def test_mae_loss_rejects_empty_mask_and_shape_mismatch(rng):
    with pytest.raises(ContractError):
        mae_loss(np.zeros((4, 2)), np.zeros((4, 2)), MaskSpec.from_masked(4, []))
    with pytest.raises(DimensionError):
        mae_loss(np.zeros((4, 2)), np.zeros((4, 3)), MaskSpec.from_masked(4, [0]))


def test_mae_loss_ignores_visible_rows(rng):
    targets, preds = rng.normal(size=(16, 4)), rng.normal(size=(16, 4))
    mask = sample_mask(16, 0.5, rng)
    base = mae_loss(targets, preds, mask).item()
    t2, p2 = targets.copy(), preds.copy()
    vis = list(mask.visible)
    t2[vis] = np.nan
    p2[vis] = 1e300
    assert mae_loss(t2, p2, mask).item() == base


def test_rc_mae_examples():
    targets = np.zeros((2, 1))
    student = np.array([[1.0], [5.0]])
    teacher = np.array([[3.0], [5.0]])
    mask = MaskSpec.from_masked(2, [0])
    assert rc_mae_loss(targets, student, teacher, mask).item() == 1.0 + 4.0
    assert rc_mae_loss(targets, student, teacher, mask, consistency_weight=0.5).item() == 1.0 + 2.0


def test_rc_mae_degenerates_to_mae(rng):
    targets, student = rng.normal(size=(16, 4)), rng.normal(size=(16, 4))
    mask = sample_mask(16, 0.75, rng)
    base = mae_loss(targets, student, mask).item()
    assert rc_mae_loss(targets, student, student, mask).item() == base
    assert rc_mae_loss(targets, student, rng.normal(size=(16, 4)), mask, 0.0).item() == base


def test_rc_mae_teacher_gets_no_gradient(rng):
    p = ParameterSet(s=rng.normal(size=(4, 3)), t=rng.normal(size=(4, 3)))
    targets = rng.normal(size=(4, 3))
    mask = MaskSpec.from_masked(4, [0, 2])
    with Tape() as tape:
        leaves = tape.watch(p)
        loss = rc_mae_loss(targets, leaves["s"], leaves["t"], mask)
    grads = tape.backward(loss)
    np.testing.assert_array_equal(grads["t"], np.zeros((4, 3)))
    expected = np.zeros((4, 3))
    for i in (0, 2):
        expected[i] = (2 * (p["s"][i] - targets[i]) + 2 * (p["s"][i] - p["t"][i])) / 2
    np.testing.assert_allclose(grads["s"], expected, atol=1e-12)


def test_cross_entropy_examples():
    assert abs(cross_entropy(np.zeros(8), 3).item() - np.log(8)) < 1e-15
    assert cross_entropy(np.array([0.0, 1000.0]), 1).item() < 1e-300
    np.testing.assert_allclose(cross_entropy_batch(np.zeros((2, 4)), np.array([0, 3])).data, [np.log(4)] * 2)
    with pytest.raises(ContractError):
        cross_entropy(np.zeros(3), 3)


def test_ema_single_step_example():
    teacher = EmaTeacher(ParameterSet(w=np.array([1.0, 0.0])), decay=0.5)
    new = ema_update(teacher, {"w": np.array([3.0, 2.0])})
    np.testing.assert_array_equal(new.params["w"], [2.0, 1.0])
    assert new.step == 1
    np.testing.assert_array_equal(teacher.params["w"], [1.0, 0.0])


def test_ema_edge_decays_are_exact(rng):
    t0, s = ParameterSet(w=rng.normal(size=5)), ParameterSet(w=rng.normal(size=5))
    assert ema_update(EmaTeacher(t0, 0.0), s).params.bitwise_equal(s)
    assert ema_update(EmaTeacher(t0, 1.0), s).params.bitwise_equal(t0)


def test_ema_rejects_incompatible_student():
    with pytest.raises(ContractError):
        ema_update(EmaTeacher(ParameterSet(w=np.zeros(2))), {"v": np.zeros(2)})


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 1.0), st.integers(0, 2**32 - 1))
def test_ema_contracts_toward_fixed_student(decay, seed):
    r = np.random.default_rng(seed)
    s, t = ParameterSet(w=r.normal(size=4)), EmaTeacher(ParameterSet(w=r.normal(size=4)), decay)
    new = ema_update(t, s)
    before = np.abs(t.params["w"] - s["w"])
    after = np.abs(new.params["w"] - s["w"])
    assert np.all(after <= decay * before + 1e-15)


def test_ema_closed_form_matches_recursion(rng):
    init = ParameterSet(w=rng.normal(size=(3, 2)))
    students = [ParameterSet(w=rng.normal(size=(3, 2))) for _ in range(40)]
    teacher = EmaTeacher(init, 0.9)
    for s in students:
        teacher = ema_update(teacher, s)
    closed = ema_closed_form(students, init, 0.9)
    assert np.abs(closed["w"] - teacher.params["w"]).max() < 1e-12


def test_tensor_item_requires_scalar():
    with pytest.raises(ContractError):
        T.Tensor(np.zeros(2)).item()


def test_cross_entropy_saturated_and_random_oracle(rng):
    assert cross_entropy(np.array([20.0] + [0.0] * 7), 0).item() < 1e-7  # log(1 + 7 e^-20)
    for _ in range(50):
        logits = rng.normal(scale=3.0, size=8)
        label = int(rng.integers(8))
        oracle = -np.log(np.exp(logits[label]) / np.exp(logits).sum())
        assert abs(cross_entropy(logits, label).item() - oracle) < 1e-10
