"""Unit behavior of the transfer loss terms, the optimizer, and schedules."""

import numpy as np
import pytest

from linflow.flow_core import FlowSchedule, euler_step
from linflow.grad_engine import DenseArray, Tape, as_dense, grad_check, sum_
from linflow.optim import Optimizer, ParamGroup, warmup_cosine_lr
from linflow.toy_model import ToyTransformer, spawn_student
from linflow.trajectory_store import collect, epoch_batches
from linflow.transfer_trainer import (TransferConfig, adm_loss, alpha_at,
                                      constraint_loss, mse_loss,
                                      regularization_loss)


def scores_from(values):
    return [DenseArray(np.float64(v), requires_grad=True) for v in values]


class TestAlphaSchedule:
    def test_endpoints_and_midpoint(self):
        assert alpha_at(0, 100) == 20.0
        assert alpha_at(100, 100) == 2.0
        assert alpha_at(50, 100) == 11.0

    def test_clamps_beyond_range(self):
        assert alpha_at(150, 100) == 2.0

    def test_bad_total_rejected(self):
        with pytest.raises(ValueError):
            alpha_at(0, 0)


class TestConstraintLoss:
    def test_all_quadratic_value(self):
        # every score rounds to 1 -> zero linear layers, squared gap 16
        scores = scores_from([1.0] * 8)
        assert constraint_loss(scores, 4).item() == pytest.approx(16.0)

    def test_partial_counts(self):
        scores = scores_from([0.2, 0.3, 0.1, 0.9, 1.0, 0.8])  # three round down
        assert constraint_loss(scores, 4).item() == pytest.approx(1.0)

    def test_tie_rounds_up(self):
        scores = scores_from([0.5, 0.5])
        # both round to 1 (quadratic): zero linear layers, target 1 -> gap 1
        assert constraint_loss(scores, 1).item() == pytest.approx(1.0)

    def test_straight_through_gradient_value(self):
        scores = scores_from([0.2, 0.3, 0.1, 0.9, 1.0, 0.8])
        with Tape() as tape:
            tape.backward(constraint_loss(scores, 4))
        # d/dr (count_linear - target)^2 = 2 (c - T) * (-1) = 2 for every layer
        for r in scores:
            assert float(r.grad) == pytest.approx(2.0)

    def test_gradient_matches_linearized_surrogate_fd(self):
        # the STE pretends round is the identity around the current point:
        # the tape gradient must equal finite differences of the surrogate
        # with round replaced by its linearization
        r0 = np.array([0.2, 0.7, 1.0, 0.4])
        target = 2
        rounded = np.floor(r0 + 0.5)

        scores = scores_from(r0)
        with Tape() as tape:
            tape.backward(constraint_loss(scores, target))
        tape_grad = np.array([float(r.grad) for r in scores])

        def surrogate(v):
            lin = rounded + (v - r0)  # round linearized at r0
            return float((np.sum(1.0 - lin) - target) ** 2)

        eps = 1e-6
        for i in range(len(r0)):
            vp, vm = r0.copy(), r0.copy()
            vp[i] += eps
            vm[i] -= eps
            fd = (surrogate(vp) - surrogate(vm)) / (2 * eps)
            assert tape_grad[i] == pytest.approx(fd, rel=1e-6, abs=1e-8)


class TestRegularizationLoss:
    def test_poles_are_zero(self):
        assert regularization_loss(scores_from([0.0, 1.0]), 5.0).item() == 0.0

    def test_midpoint_is_maximal(self):
        val = regularization_loss(scores_from([0.5]), 3.0).item()
        assert val == pytest.approx(1.0)

    def test_known_value(self):
        # 1 - |2*0.75 - 1|^2 = 1 - 0.25
        assert regularization_loss(scores_from([0.75]), 2.0).item() == pytest.approx(0.75)

    def test_gradient_direction_splits_at_half(self):
        above, below = scores_from([0.8, 0.3])
        with Tape() as tape:
            tape.backward(regularization_loss([above, below], 4.0))
        assert float(above.grad) < 0  # pushes upward, toward 1
        assert float(below.grad) > 0  # pushes downward, toward 0

    def test_gradient_matches_fd(self):
        for alpha in (2.0, 7.5, 20.0):
            err = grad_check(lambda v: regularization_loss([v], alpha),
                             DenseArray(np.float64(0.81)))
            assert err < 1e-4

    def test_hold_force_at_pole(self):
        # at r=1 the inward derivative is -2*alpha: the pole "holds" until
        # the constraint force exceeds it
        r = scores_from([1.0])[0]
        with Tape() as tape:
            tape.backward(regularization_loss([r], 12.0))
        assert float(r.grad) == pytest.approx(-24.0)


@pytest.fixture(scope="module")
def tiny_setup():
    teacher = ToyTransformer(n_layers=2, d_model=8, seq_len=5, d_state=2, seed=0)
    rng = np.random.default_rng(1)
    teacher.out_w.data = (rng.standard_normal(teacher.out_w.shape) * 0.4).astype(np.float32)
    tset = collect(teacher, FlowSchedule.uniform(4), n_trajectories=16, seed=2)
    batch = next(epoch_batches(tset, 8, np.random.default_rng(3), min_next_t=0.02))
    return teacher, tset, batch


class TestMseLoss:
    def test_offset_student_scores_c_squared_k(self, tiny_setup):
        teacher, _, batch = tiny_setup
        student = teacher.clone()
        c = 0.25
        student.out_b.data = student.out_b.data + np.float32(c)
        got = mse_loss(student, batch).item()
        assert got == pytest.approx(c * c * teacher.seq_len * teacher.d_state, rel=1e-4)

    def test_zero_at_fixed_point(self, tiny_setup):
        teacher, _, batch = tiny_setup
        assert mse_loss(teacher.clone(), batch).item() < 1e-10


class TestAdmLoss:
    def test_fixed_point_gradients_exactly_zero(self, tiny_setup):
        teacher, _, batch = tiny_setup
        student = spawn_student(teacher, seed=7)
        with Tape() as tape:
            loss = adm_loss(student, teacher, batch, 0.02)
            tape.backward(loss)
        assert loss.item() == 0.0
        for p in student.parameters():
            if p.grad is not None:
                assert np.abs(p.grad).max() == 0.0

    def test_gradient_equals_frozen_delta_objective(self, tiny_setup):
        from linflow.flow_core import score_difference

        teacher, _, batch = tiny_setup
        student = spawn_student(teacher, seed=8)
        student.set_r(0.5)  # move off the fixed point
        param = student.blocks[0].attn.hh_wq

        with Tape() as tape:
            tape.backward(adm_loss(student, teacher, batch, 0.02))
        tape_grad = param.grad.copy()

        # freeze the score difference at the evaluation point, then FD over
        # the surrogate <-delta, x_hat(theta)>
        x_hat0 = euler_step(student, as_dense(batch["x"]), batch["t"], batch["t_next"])
        delta0 = score_difference(teacher, student, x_hat0.data, batch["t_next"], 0.02)

        def frozen(v):
            old = student.blocks[0].attn.hh_wq
            student.blocks[0].attn.hh_wq = v
            try:
                x_hat = euler_step(student, as_dense(batch["x"]), batch["t"],
                                   batch["t_next"])
                return sum_(as_dense(-delta0) * x_hat) * (1.0 / batch["x"].shape[0])
            finally:
                student.blocks[0].attn.hh_wq = old

        err = grad_check(frozen, DenseArray(param.data.copy()))
        assert err < 1e-3
        assert np.abs(tape_grad).max() > 0


class TestOptimizer:
    def test_adam_first_step_magnitude(self):
        p = DenseArray(np.array([1.0]), requires_grad=True)
        p.grad = np.array([1.0])
        opt = Optimizer([ParamGroup([p])])
        opt.step(0.1)
        assert p.data[0] == pytest.approx(0.9, abs=1e-6)

    def test_decoupled_weight_decay_without_grad(self):
        p = DenseArray(np.array([2.0]), requires_grad=True)
        opt = Optimizer([ParamGroup([p], weight_decay=0.1)])
        opt.step(0.5)
        assert p.data[0] == pytest.approx(2.0 * (1 - 0.05))

    def test_sgd_group(self):
        p = DenseArray(np.array([1.0]), requires_grad=True)
        p.grad = np.array([2.0])
        opt = Optimizer([ParamGroup([p], kind="sgd", lr_const=0.25)])
        opt.step(123.0)  # scheduled rate ignored by lr_const
        assert p.data[0] == pytest.approx(0.5)

    def test_grad_norm_and_zero_grad(self):
        p = DenseArray(np.array([1.0, 1.0]), requires_grad=True)
        p.grad = np.array([3.0, 4.0])
        opt = Optimizer([ParamGroup([p])])
        assert opt.grad_norm() == pytest.approx(5.0)
        opt.zero_grad()
        assert p.grad is None and opt.grad_norm() == 0.0


class TestLrSchedule:
    def test_warmup_then_cosine(self):
        total, lr = 100, 1e-3
        assert warmup_cosine_lr(0, total, lr) == pytest.approx(lr / 10)
        assert warmup_cosine_lr(9, total, lr) == pytest.approx(lr)
        assert warmup_cosine_lr(10, total, lr) == pytest.approx(lr)
        mid = warmup_cosine_lr(55, total, lr)
        assert 0.4 * lr < mid < 0.6 * lr
        assert warmup_cosine_lr(99, total, lr) < 0.01 * lr

    def test_lr_min_floor(self):
        assert warmup_cosine_lr(999, 1000, 1.0, lr_min=0.1) >= 0.1


class TestConfigValidation:
    def test_target_out_of_range(self):
        with pytest.raises(ValueError, match="target"):
            TransferConfig(target_linear=9).validate(8)

    def test_bad_objective(self):
        with pytest.raises(ValueError, match="objective"):
            TransferConfig(objective="kl").validate(8)

    def test_bad_alpha_order(self):
        with pytest.raises(ValueError, match="alpha"):
            TransferConfig(alpha_start=2.0, alpha_end=5.0).validate(8)

    def test_nonpositive_rates(self):
        with pytest.raises(ValueError, match="positive"):
            TransferConfig(lr_start=0.0).validate(8)
