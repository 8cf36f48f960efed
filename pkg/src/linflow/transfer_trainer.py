"""Training loops: teacher pre-training and the quadratic-to-linear transfer.

The transfer never touches training data. It consumes stored teacher
trajectories and optimizes three terms:

* a distribution-matching objective ("adm"): for a stored state x at grid
  time t', take one differentiable Euler step with the student to x_hat at
  time t, and descend the surrogate mean <-(s_teacher - s_student), x_hat>
  whose gradient equals that of the KL between the two implied marginals at
  t (the score difference is evaluated with both models frozen). A pointwise
  alternative ("mse") regresses stored velocities directly.
* a budget constraint on how many layers round to the linear branch,
  differentiated through the rounding with a straight-through estimator.
* a polarization term sum_l (1 - |2 r_l - 1|^alpha) that pushes every
  selection score toward {0, 1}, with the sharpness exponent alpha annealed
  linearly over training.

Selection scores get their own flat-rate optimizer group (their useful
gradients only appear once the constraint force exceeds the polarization
hold, late in the anneal), as do the hedgehog feature maps (their branch is
inactive while r sits at 1, so the cosine tail would starve them). After
every update the raw scores are clamped back into [0, 1], making the poles
absorbing whenever the net force points outward.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import data as toy_data
from .flow_core import euler_step, fm_loss, score_difference
from .grad_engine import (DenseArray, Tape, as_dense, clip, frobenius_sq,
                          no_grad, abs_, power, ste_round, sum_)
from .optim import Optimizer, ParamGroup, warmup_cosine_lr
from .toy_model import ToyTransformer, pole_branches, spawn_student
from .trajectory_store import TrajectorySet, epoch_batches

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message: str, step: int, rows: list[dict]):
        super().__init__(message)
        self.step = step
        self.rows = rows


# ---------------------------------------------------------------------------
# loss terms
# ---------------------------------------------------------------------------


def alpha_at(step: int, total_steps: int, alpha_start: float = 20.0,
             alpha_end: float = 2.0) -> float:
    """Linear anneal of the polarization exponent over training."""
    if total_steps < 1:
        raise ValueError(f"alpha_at: total_steps must be >= 1, got {total_steps}")
    frac = min(max(step / total_steps, 0.0), 1.0)
    return alpha_start + (alpha_end - alpha_start) * frac


def constraint_loss(scores: list[DenseArray], target_linear: int) -> DenseArray:
    """(sum_l (1 - round(r_l)) - target)^2: squared gap between the number of
    layers currently rounding to the linear branch and the budget. Rounding
    passes gradients straight through."""
    count = as_dense(0.0)
    for r in scores:
        count = count + (1.0 - ste_round(clip(r, 0.0, 1.0)))
    gap = count - float(target_linear)
    return gap * gap


def regularization_loss(scores: list[DenseArray], alpha: float) -> DenseArray:
    """sum_l (1 - |2 r_l - 1|^alpha): zero at the poles, maximal at 1/2."""
    total = as_dense(0.0)
    for r in scores:
        total = total + (1.0 - power(abs_(2.0 * clip(r, 0.0, 1.0) - 1.0), alpha))
    return total


def mse_loss(student, batch: dict) -> DenseArray:
    """Mean per-sample squared Frobenius distance to the stored velocities."""
    u = student(as_dense(batch["x"]), batch["t"])
    diff = u - batch["u"]
    return frobenius_sq(diff) * (1.0 / batch["x"].shape[0])


def adm_loss(student, teacher, batch: dict, t_min_clamp: float) -> DenseArray:
    """Distribution-matching surrogate over one stored-state Euler step.

    Gradient equals mean_b d<-(s_T - s_S)(x_hat_b, t_b), x_hat_b>/d theta
    with the score difference held constant; its value has no meaning beyond
    its gradient (it hovers near zero as the models converge).
    """
    t_from, t_to = batch["t"], batch["t_next"]
    x_hat = euler_step(student, as_dense(batch["x"]), t_from, t_to)
    with no_grad():
        delta = score_difference(teacher, student, x_hat.data, t_to, t_min_clamp)
    return sum_(as_dense(-delta) * x_hat) * (1.0 / batch["x"].shape[0])


# ---------------------------------------------------------------------------
# transfer loop
# ---------------------------------------------------------------------------


@dataclass
class TransferConfig:
    target_linear: int = 4
    lam: float = 0.01                # weight on constraint + polarization
    alpha_start: float = 20.0
    alpha_end: float = 2.0
    total_steps: int = 3000
    batch_size: int = 64
    lr_start: float = 1e-4
    lr_min: float = 0.0
    warmup_frac: float = 0.1
    weight_decay: float = 1e-4
    r_lr: float = 0.02               # flat rate for the selection scores
    r_kind: str = "adam"
    hedgehog_lr: float = 1e-3        # flat rate for the feature maps
    t_min_clamp: float = 0.02
    objective: str = "adm"           # "adm" | "mse"
    reg_enabled: bool = True
    seed: int = 0

    def validate(self, n_layers: int) -> None:
        if not 0 <= self.target_linear <= n_layers:
            raise ValueError(f"target_linear must be within [0, {n_layers}], "
                             f"got {self.target_linear}")
        if self.objective not in ("adm", "mse"):
            raise ValueError(f"objective must be 'adm' or 'mse', got {self.objective!r}")
        if self.r_kind not in ("adam", "sgd"):
            raise ValueError(f"r_kind must be 'adam' or 'sgd', got {self.r_kind!r}")
        if self.alpha_end <= 0 or self.alpha_start < self.alpha_end:
            raise ValueError("alpha must anneal downward through positive values")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ValueError(f"warmup_frac must lie in [0, 1), got {self.warmup_frac}")
        if self.lam < 0:
            raise ValueError(f"lam must be non-negative, got {self.lam}")
        if self.total_steps < 0:
            raise ValueError(f"total_steps must be non-negative, got {self.total_steps}")
        for name in ("batch_size", "lr_start", "r_lr", "hedgehog_lr"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class TransferResult:
    student: ToyTransformer
    rows: list[dict] = field(default_factory=list)

    @property
    def r_history(self) -> np.ndarray:
        return np.array([[row[k] for k in row if k.startswith("r_")]
                         for row in self.rows])


def _transfer_groups(student: ToyTransformer, cfg: TransferConfig) -> list[ParamGroup]:
    hedgehog = set(map(id, student.hedgehog_weights()))
    main = [p for _, p in student.named_weights() if id(p) not in hedgehog]
    return [
        ParamGroup(main, weight_decay=cfg.weight_decay, name="main"),
        ParamGroup(student.hedgehog_weights(), weight_decay=cfg.weight_decay,
                   lr_const=cfg.hedgehog_lr, name="hedgehog"),
        ParamGroup(student.selection_scores(), lr_const=cfg.r_lr,
                   kind=cfg.r_kind, name="scores"),
    ]


def train_transfer(teacher: ToyTransformer, tset: TrajectorySet,
                   cfg: TransferConfig, on_step=None) -> TransferResult:
    """Run the data-free transfer against stored teacher trajectories."""
    cfg.validate(teacher.n_layers)
    student = spawn_student(teacher, cfg.seed)
    scores = student.selection_scores()
    optimizer = Optimizer(_transfer_groups(student, cfg))
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    min_next_t = cfg.t_min_clamp if cfg.objective == "adm" else None

    rows: list[dict] = []
    step = 0
    with pole_branches(teacher):  # frozen reference, r pinned at 1
        while step < cfg.total_steps:
            for batch in epoch_batches(tset, cfg.batch_size, shuffle_rng,
                                       min_next_t=min_next_t):
                if step >= cfg.total_steps:
                    break
                lr = warmup_cosine_lr(step, cfg.total_steps, cfg.lr_start,
                                      cfg.warmup_frac, cfg.lr_min)
                alpha = alpha_at(step, cfg.total_steps, cfg.alpha_start,
                                 cfg.alpha_end)
                with Tape() as tape:
                    if cfg.objective == "adm":
                        objective = adm_loss(student, teacher, batch,
                                             cfg.t_min_clamp)
                    else:
                        objective = mse_loss(student, batch)
                    l_con = constraint_loss(scores, cfg.target_linear)
                    l_reg = (regularization_loss(scores, alpha) if cfg.reg_enabled
                             else as_dense(0.0))
                    total = objective + cfg.lam * (l_con + l_reg)
                    tape.backward(total)
                row = {"step": step, "lr": lr, "alpha": alpha,
                       "loss_obj": objective.item(), "loss_con": l_con.item(),
                       "loss_reg": l_reg.item(), "loss_total": total.item()}
                for i, r in enumerate(scores):
                    row[f"r_{i}"] = r.item()
                rows.append(row)
                if not np.isfinite(row["loss_total"]):
                    raise DivergenceError(f"non-finite loss at step {step}",
                                          step, rows)
                optimizer.step(lr)
                if not np.isfinite(optimizer.grad_norm()):
                    raise DivergenceError(f"non-finite gradient at step {step}",
                                          step, rows)
                for r in scores:
                    r.data = np.clip(r.data, 0.0, 1.0)
                optimizer.zero_grad()
                step += 1
                if on_step is not None:
                    on_step(row)
    return TransferResult(student=student, rows=rows)


# ---------------------------------------------------------------------------
# teacher pre-training
# ---------------------------------------------------------------------------


def train_teacher(n_layers: int = 8, d_model: int = 32, seq_len: int = 16,
                  d_state: int = 2, steps: int = 2000, batch_size: int = 64,
                  lr_start: float = 3e-3, warmup_frac: float = 0.1,
                  weight_decay: float = 1e-4, seed: int = 0,
                  on_step=None) -> tuple[ToyTransformer, list[dict]]:
    """Flow-matching training of the quadratic-attention teacher on the toy
    data. Hedgehog matrices and selection scores stay frozen at their
    initialization: the teacher is a pure softmax-attention model (r = 1)."""
    model = ToyTransformer(n_layers, d_model, seq_len, d_state, seed=seed)
    hedgehog = set(map(id, model.hedgehog_weights()))
    weights = [p for _, p in model.named_weights() if id(p) not in hedgehog]
    optimizer = Optimizer([ParamGroup(weights, weight_decay=weight_decay)])
    ss = np.random.SeedSequence([seed, 2])
    data_rng, loss_rng = (np.random.default_rng(s) for s in ss.spawn(2))

    rows = []
    with pole_branches(model):  # r pinned at 1: skip the dead linear branch
        for step in range(steps):
            x0 = toy_data.sample_batch(data_rng, batch_size, seq_len)
            lr = warmup_cosine_lr(step, steps, lr_start, warmup_frac)
            with Tape() as tape:
                loss = fm_loss(model, x0, loss_rng)
                tape.backward(loss)
            row = {"step": step, "lr": lr, "loss": loss.item()}
            rows.append(row)
            if not np.isfinite(row["loss"]):
                raise DivergenceError(f"non-finite loss at step {step}", step, rows)
            optimizer.step(lr)
            optimizer.zero_grad()
            if on_step is not None:
                on_step(row)
    return model, rows
