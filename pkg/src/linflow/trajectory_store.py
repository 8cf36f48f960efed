"""Teacher trajectory collection and the LVTJ record file.

Collection integrates the teacher down its sampling grid and keeps, for
every trajectory and every grid node except the terminal one, the record
(t, x_t, u_t = teacher(x_t, t), trajectory_id, step_index). Terminal states
are kept in their own section: they carry no velocity and exist for
recurrence checking and evaluation. A grid of S steps therefore yields
exactly S records per trajectory.

File layout (little-endian): magic ``LVTJ``, u32 version, u32 record count,
u32 trajectory count, u32 seq_len, u32 d_state, u32 grid length, the grid as
float64, the terminal states as one float32 block, then the records as
packed structs (u32 trajectory_id, u32 step_index, f32 t, f32 x_t, f32 u_t).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .flow_core import FlowSchedule

TRAJECTORY_MAGIC = b"LVTJ"
TRAJECTORY_VERSION = 1

_COLLECT_CHUNK = 256  # internal forward batch; fixed so results depend only on the seed


class TrajectoryError(ValueError):
    """Raised for malformed or internally inconsistent trajectory files."""


def _record_dtype(seq_len: int, d_state: int) -> np.dtype:
    return np.dtype([("traj", "<u4"), ("step", "<u4"), ("t", "<f4"),
                     ("x", "<f4", (seq_len, d_state)),
                     ("u", "<f4", (seq_len, d_state))])


@dataclass
class TrajectorySet:
    """In-memory form of a trajectory file (struct-of-arrays)."""

    grid: np.ndarray          # (G,) float64, decreasing 1 -> 0
    traj_id: np.ndarray       # (N,) uint32
    step_index: np.ndarray    # (N,) uint32
    t: np.ndarray             # (N,) float32
    x: np.ndarray             # (N, seq, d) float32
    u: np.ndarray             # (N, seq, d) float32
    x0: np.ndarray            # (n_traj, seq, d) float32 terminal states

    @property
    def n_records(self) -> int:
        return len(self.t)

    @property
    def n_trajectories(self) -> int:
        return len(self.x0)

    @property
    def seq_len(self) -> int:
        return self.x.shape[1]

    @property
    def d_state(self) -> int:
        return self.x.shape[2]

    def next_t(self) -> np.ndarray:
        """Grid time each record steps toward (float64, exact grid values)."""
        return self.grid[self.step_index + 1]

    # -- persistence -------------------------------------------------------

    def save(self, path) -> None:
        header = struct.pack("<6I", TRAJECTORY_VERSION, self.n_records,
                             self.n_trajectories, self.seq_len, self.d_state,
                             len(self.grid))
        rec = np.empty(self.n_records, dtype=_record_dtype(self.seq_len, self.d_state))
        rec["traj"] = self.traj_id
        rec["step"] = self.step_index
        rec["t"] = self.t
        rec["x"] = self.x
        rec["u"] = self.u
        with open(path, "wb") as fh:
            fh.write(TRAJECTORY_MAGIC)
            fh.write(header)
            fh.write(self.grid.astype("<f8").tobytes())
            fh.write(self.x0.astype("<f4").tobytes())
            fh.write(rec.tobytes())

    @classmethod
    def load(cls, path) -> "TrajectorySet":
        with open(path, "rb") as fh:
            raw = fh.read()
        if raw[:4] != TRAJECTORY_MAGIC:
            raise TrajectoryError(f"{path}: bad magic {raw[:4]!r}, "
                                  f"expected {TRAJECTORY_MAGIC!r}")
        if len(raw) < 28:
            raise TrajectoryError(f"{path}: truncated header")
        version, n_rec, n_traj, seq_len, d_state, grid_len = struct.unpack_from(
            "<6I", raw, 4)
        if version != TRAJECTORY_VERSION:
            raise TrajectoryError(f"{path}: unknown version {version}")
        offset = 28
        rec_dt = _record_dtype(seq_len, d_state)
        expected = offset + grid_len * 8 + n_traj * seq_len * d_state * 4 \
            + n_rec * rec_dt.itemsize
        if len(raw) != expected:
            raise TrajectoryError(f"{path}: size {len(raw)} != expected {expected} "
                                  f"(truncated or trailing bytes)")
        grid = np.frombuffer(raw, dtype="<f8", count=grid_len, offset=offset
                             ).astype(np.float64)
        offset += grid_len * 8
        if grid[0] != 1.0 or grid[-1] != 0.0 or not (np.diff(grid) < 0).all():
            raise TrajectoryError(f"{path}: invalid time grid {grid}")
        x0 = np.frombuffer(raw, dtype="<f4", count=n_traj * seq_len * d_state,
                           offset=offset).reshape(n_traj, seq_len, d_state).copy()
        offset += x0.nbytes
        rec = np.frombuffer(raw, dtype=rec_dt, count=n_rec, offset=offset)
        if n_rec != n_traj * (grid_len - 1):
            raise TrajectoryError(f"{path}: {n_rec} records for {n_traj} trajectories "
                                  f"on a {grid_len - 1}-step grid")
        if (rec["step"] >= grid_len - 1).any() or (rec["traj"] >= n_traj).any():
            raise TrajectoryError(f"{path}: record indices out of range")
        if not np.array_equal(rec["t"], grid[rec["step"]].astype(np.float32)):
            raise TrajectoryError(f"{path}: record times disagree with the grid")
        return cls(grid=grid, traj_id=rec["traj"].copy(),
                   step_index=rec["step"].copy(), t=rec["t"].copy(),
                   x=rec["x"].copy(), u=rec["u"].copy(), x0=x0)

    # -- integrity ----------------------------------------------------------

    def check_euler_recurrence(self, atol: float = 1e-5) -> float:
        """Max deviation of x_{next} - (x + (t_next - t) u) over all records,
        using the stored terminal states for the last step. Raises if any
        deviation exceeds `atol`."""
        order = np.lexsort((self.step_index, self.traj_id))
        n_steps = len(self.grid) - 1
        x = self.x[order].reshape(self.n_trajectories, n_steps, self.seq_len, -1)
        u = self.u[order].reshape(self.n_trajectories, n_steps, self.seq_len, -1)
        dt = np.diff(self.grid).astype(np.float32)  # (n_steps,)
        pred = x + dt[None, :, None, None] * u
        succ = np.concatenate([x[:, 1:], self.x0[:, None]], axis=1)
        worst = float(np.abs(pred - succ).max())
        if worst > atol:
            raise TrajectoryError(f"Euler recurrence violated: max deviation "
                                  f"{worst:.3e} > {atol:.0e}")
        return worst

    def check_velocities(self, model, atol: float = 1e-5, sample: int = 512,
                         seed: int = 0) -> float:
        """Re-evaluate u = model(x, t) on a record subsample; raises past atol."""
        idx = np.arange(self.n_records)
        if self.n_records > sample:
            idx = np.random.default_rng(seed).choice(idx, size=sample, replace=False)
        out = model(self.x[idx], self.t[idx].astype(np.float64))
        out = getattr(out, "data", out)
        worst = float(np.abs(out - self.u[idx]).max())
        if worst > atol:
            raise TrajectoryError(f"stored velocities disagree with the model: "
                                  f"max deviation {worst:.3e} > {atol:.0e}")
        return worst

    def stats(self) -> dict:
        """Per-grid-node magnitudes plus global counts, for reporting."""
        per_node = []
        for s in range(len(self.grid) - 1):
            m = self.step_index == s
            per_node.append({
                "t": float(self.grid[s]),
                "records": int(m.sum()),
                "x_rms": float(np.sqrt((self.x[m] ** 2).mean())),
                "u_rms": float(np.sqrt((self.u[m] ** 2).mean())),
            })
        return {
            "n_records": self.n_records,
            "n_trajectories": self.n_trajectories,
            "seq_len": self.seq_len,
            "d_state": self.d_state,
            "grid": [float(g) for g in self.grid],
            "terminal_x0_rms": float(np.sqrt((self.x0 ** 2).mean())),
            "per_node": per_node,
        }


def collect(teacher, schedule: FlowSchedule, n_trajectories: int,
            seed: int) -> TrajectorySet:
    """Integrate `n_trajectories` teacher trajectories and record every
    non-terminal grid node. Deterministic in (teacher, schedule, seed)."""
    rng = np.random.default_rng(seed)
    seq_len, d_state = teacher.seq_len, teacher.d_state
    x1 = rng.standard_normal((n_trajectories, seq_len, d_state),
                             dtype=np.float32)
    n_steps = schedule.n_steps
    xs = np.empty((n_trajectories, n_steps, seq_len, d_state), dtype=np.float32)
    us = np.empty_like(xs)
    x0 = np.empty((n_trajectories, seq_len, d_state), dtype=np.float32)

    for start in range(0, n_trajectories, _COLLECT_CHUNK):
        stop = min(start + _COLLECT_CHUNK, n_trajectories)
        x = x1[start:stop]
        for s, (t_from, t_to) in enumerate(schedule.pairs()):
            u = teacher(x, t_from)
            u = getattr(u, "data", u)
            xs[start:stop, s] = x
            us[start:stop, s] = u
            x = x + np.float32(t_to - t_from) * u
        x0[start:stop] = x

    traj_id = np.repeat(np.arange(n_trajectories, dtype=np.uint32), n_steps)
    step_index = np.tile(np.arange(n_steps, dtype=np.uint32), n_trajectories)
    t = schedule.t_grid[:-1].astype(np.float32)[step_index]
    return TrajectorySet(grid=schedule.t_grid.copy(), traj_id=traj_id,
                         step_index=step_index, t=t,
                         x=xs.reshape(-1, seq_len, d_state),
                         u=us.reshape(-1, seq_len, d_state), x0=x0)


def epoch_batches(tset: TrajectorySet, batch_size: int,
                  rng: np.random.Generator, min_next_t: float | None = None):
    """One shuffled epoch over the eligible records.

    Yields dicts with keys x, t, u, t_next (t as float64). With
    `min_next_t`, records whose successor grid time falls below it are
    excluded (their step would target a time where scores are clamped).
    Every eligible record appears exactly once per epoch; the last batch may
    be short.
    """
    if batch_size < 1:
        raise ValueError(f"epoch_batches: batch_size must be positive, got {batch_size}")
    eligible = np.arange(tset.n_records)
    if min_next_t is not None:
        eligible = eligible[tset.next_t() >= min_next_t]
    if eligible.size == 0:
        raise TrajectoryError("epoch_batches: no eligible records")
    order = rng.permutation(eligible)
    next_t = tset.next_t()
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield {"x": tset.x[idx], "t": tset.t[idx].astype(np.float64),
               "u": tset.u[idx], "t_next": next_t[idx]}
