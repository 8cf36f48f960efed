"""Small pre-norm transformer used as the velocity model.

Each block is one token-mixing layer plus an MLP, both with RMS-style
pre-normalization and residual connections. Token mixing is, per layer,
either a convex mix of softmax and hedgehog-linear attention steered by a
learnable selection score r (fresh models), or a single hard-selected branch
(finalized models). Inputs embed tokens to the model width; a sinusoidal
embedding of the flow time is projected and added to every token; the output
head (zero-initialized) maps back to the state width, so a freshly built
model is exactly the zero velocity field.

Checkpoints are little-endian binary: magic ``LVLB``, a u32 version (1 for
mixed models, 2 for finalized ones), the architecture header, raw parameter
blobs in declaration order, then — version 1 only — the selection scores as
one trailing vector. Version 2 inserts one branch byte per layer after the
header and stores only the surviving branch's parameters.
"""

from __future__ import annotations

import contextlib
import math
import struct
from dataclasses import dataclass

import numpy as np

from .attention import (AttentionParams, hedgehog_feature_map, init_hedgehog,
                        linear_attention, mixed_attention, softmax_attention)
from .grad_engine import (DenseArray, ShapeError, as_dense, concat_last,
                          matmul, mean, power, sigmoid)

CHECKPOINT_MAGIC = b"LVLB"
VERSION_MIXED = 1
VERSION_FINAL = 2

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}

BRANCH_LINEAR = 0
BRANCH_SOFTMAX = 1

_RMS_EPS = 1e-6


class CheckpointError(ValueError):
    """Raised for unreadable, truncated, or mismatched checkpoint files."""


@dataclass
class Block:
    """One transformer block: token mixing + MLP, both pre-normalized."""

    attn_gain: DenseArray
    attn: AttentionParams
    mlp_gain: DenseArray
    mlp_w1: DenseArray
    mlp_b1: DenseArray
    mlp_w2: DenseArray
    mlp_b2: DenseArray
    r: DenseArray | None          # None once finalized
    branch: str = "mixed"         # "mixed" | "softmax" | "linear"


def _rms_normalize(x: DenseArray, gain: DenseArray) -> DenseArray:
    scale = power(mean(x * x, axis=-1, keepdims=True) + _RMS_EPS, -0.5)
    return x * scale * gain


def _silu(x: DenseArray) -> DenseArray:
    return x * sigmoid(x)


class ToyTransformer:
    """Velocity model u(x, t) over (batch, seq_len, d_state) states."""

    def __init__(self, n_layers: int = 8, d_model: int = 32, seq_len: int = 16,
                 d_state: int = 2, seed: int = 0, dtype=np.float32,
                 _skip_init: bool = False):
        if d_model % 2 != 0:
            raise ValueError(f"d_model must be even, got {d_model}")
        self.n_layers = n_layers
        self.d_model = d_model
        self.seq_len = seq_len
        self.d_state = d_state
        self.dtype = np.dtype(dtype)
        self.time_freqs = np.geomspace(1.0, 1000.0, d_model // 2)
        self.blocks: list[Block] = []
        if not _skip_init:
            self._init_params(np.random.default_rng(seed))

    # -- construction ---------------------------------------------------

    def _init_params(self, rng: np.random.Generator) -> None:
        d, dt = self.d_model, self.dtype

        def dense(shape, std):
            return DenseArray((rng.standard_normal(shape) * std).astype(dt),
                              requires_grad=True)

        def zeros(shape):
            return DenseArray(np.zeros(shape, dtype=dt), requires_grad=True)

        def ones(shape):
            return DenseArray(np.ones(shape, dtype=dt), requires_grad=True)

        self.embed_w = dense((self.d_state, d), 1.0 / math.sqrt(self.d_state))
        self.embed_b = zeros((d,))
        self.pos_emb = dense((self.seq_len, d), 1.0 / math.sqrt(d))
        self.time_w = dense((d, d), 1.0 / math.sqrt(d))
        self.time_b = zeros((d,))
        for _ in range(self.n_layers):
            hedgehog = init_hedgehog(rng, d, dtype=dt)
            self.blocks.append(Block(
                attn_gain=ones((d,)),
                attn=AttentionParams(
                    w_q=dense((d, d), 1.0 / math.sqrt(d)),
                    w_k=dense((d, d), 1.0 / math.sqrt(d)),
                    w_v=dense((d, d), 1.0 / math.sqrt(d)),
                    hh_wq=DenseArray(hedgehog.copy(), requires_grad=True),
                    hh_wk=DenseArray(hedgehog.copy(), requires_grad=True),
                ),
                mlp_gain=ones((d,)),
                mlp_w1=dense((d, 4 * d), 1.0 / math.sqrt(d)),
                mlp_b1=zeros((4 * d,)),
                mlp_w2=dense((4 * d, d), 1.0 / math.sqrt(4 * d)),
                mlp_b2=zeros((d,)),
                r=DenseArray(np.asarray(1.0, dtype=dt), requires_grad=True),
            ))
        self.final_gain = ones((d,))
        self.out_w = zeros((d, self.d_state))
        self.out_b = zeros((self.d_state,))

    def reinit_hedgehog(self, rng: np.random.Generator) -> None:
        """Fresh feature-map matrices (both projections per layer share one
        orthogonalized draw), leaving every other weight untouched."""
        for block in self.blocks:
            hedgehog = init_hedgehog(rng, self.d_model, dtype=self.dtype)
            block.attn.hh_wq = DenseArray(hedgehog.copy(), requires_grad=True)
            block.attn.hh_wk = DenseArray(hedgehog.copy(), requires_grad=True)

    # -- parameter access -------------------------------------------------

    def named_weights(self) -> list[tuple[str, DenseArray]]:
        """All trainable weights except the selection scores, in the fixed
        declaration order used by the checkpoint format."""
        out = [("embed.w", self.embed_w), ("embed.b", self.embed_b),
               ("pos_emb", self.pos_emb),
               ("time.w", self.time_w), ("time.b", self.time_b)]
        for i, blk in enumerate(self.blocks):
            pre = f"layers.{i}."
            out.append((pre + "attn_gain", blk.attn_gain))
            out.append((pre + "attn.w_q", blk.attn.w_q))
            out.append((pre + "attn.w_k", blk.attn.w_k))
            out.append((pre + "attn.w_v", blk.attn.w_v))
            if blk.attn.hh_wq is not None:
                out.append((pre + "attn.hh_wq", blk.attn.hh_wq))
                out.append((pre + "attn.hh_wk", blk.attn.hh_wk))
            out.append((pre + "mlp_gain", blk.mlp_gain))
            out.append((pre + "mlp.w1", blk.mlp_w1))
            out.append((pre + "mlp.b1", blk.mlp_b1))
            out.append((pre + "mlp.w2", blk.mlp_w2))
            out.append((pre + "mlp.b2", blk.mlp_b2))
        out.append(("final_gain", self.final_gain))
        out.append(("out.w", self.out_w))
        out.append(("out.b", self.out_b))
        return out

    def hedgehog_weights(self) -> list[DenseArray]:
        return [w for blk in self.blocks if blk.attn.hh_wq is not None
                for w in (blk.attn.hh_wq, blk.attn.hh_wk)]

    def selection_scores(self) -> list[DenseArray]:
        return [blk.r for blk in self.blocks if blk.r is not None]

    def parameters(self) -> list[DenseArray]:
        return [p for _, p in self.named_weights()] + self.selection_scores()

    @property
    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def r_vector(self) -> np.ndarray:
        return np.array([blk.r.item() for blk in self.blocks if blk.r is not None],
                        dtype=np.float64)

    def set_r(self, values) -> None:
        values = np.broadcast_to(np.asarray(values, dtype=self.dtype),
                                 (self.n_layers,))
        for blk, v in zip(self.blocks, values):
            if blk.r is None:
                raise ValueError("set_r: model is finalized; scores were dropped")
            blk.r.data = np.asarray(v, dtype=self.dtype)

    @property
    def is_finalized(self) -> bool:
        return any(blk.r is None for blk in self.blocks)

    # -- forward ----------------------------------------------------------

    def time_features(self, t) -> np.ndarray:
        """(B or 1, d_model) sinusoidal features of the flow time."""
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        angles = t[:, None] * self.time_freqs[None, :]
        return np.concatenate([np.sin(angles), np.cos(angles)],
                              axis=-1).astype(self.dtype)

    def __call__(self, x, t) -> DenseArray:
        x = as_dense(x)
        if x.shape[-2:] != (self.seq_len, self.d_state):
            raise ShapeError(f"model expects (..., {self.seq_len}, {self.d_state}) "
                             f"states, got {x.shape}")
        squeeze = x.ndim == 2
        if squeeze:
            x = x.reshape(1, self.seq_len, self.d_state)
        temb = matmul(as_dense(self.time_features(t)), self.time_w) + self.time_b
        h = (matmul(x, self.embed_w) + self.embed_b + self.pos_emb
             + temb.reshape(-1, 1, self.d_model))
        for blk in self.blocks:
            xn = _rms_normalize(h, blk.attn_gain)
            q = matmul(xn, blk.attn.w_q)
            k = matmul(xn, blk.attn.w_k)
            v = matmul(xn, blk.attn.w_v)
            if blk.branch == "mixed":
                mixed = mixed_attention(q, k, v, blk.attn.hh_wq, blk.attn.hh_wk, blk.r)
            elif blk.branch == "softmax":
                mixed = softmax_attention(q, k, v, scale="dim")
            else:
                mixed = linear_attention(hedgehog_feature_map(q, blk.attn.hh_wq),
                                         hedgehog_feature_map(k, blk.attn.hh_wk), v)
            h = h + mixed
            xn = _rms_normalize(h, blk.mlp_gain)
            h = h + matmul(_silu(matmul(xn, blk.mlp_w1) + blk.mlp_b1), blk.mlp_w2) + blk.mlp_b2
        out = matmul(_rms_normalize(h, self.final_gain), self.out_w) + self.out_b
        if squeeze:
            out = out.reshape(self.seq_len, self.d_state)
        return out

    # -- state management ---------------------------------------------------

    def snapshot(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_weights()}
        if not self.is_finalized:
            state["selection_scores"] = self.r_vector().astype(self.dtype)
        return state

    def restore(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.named_weights():
            src = state[name]
            if src.shape != p.data.shape:
                raise ValueError(f"restore: {name} has shape {src.shape}, "
                                 f"expected {p.data.shape}")
            p.data = src.astype(self.dtype, copy=True)
        if not self.is_finalized:
            self.set_r(state["selection_scores"])

    def clone(self) -> "ToyTransformer":
        other = ToyTransformer(self.n_layers, self.d_model, self.seq_len,
                               self.d_state, dtype=self.dtype)
        other.restore(self.snapshot())
        return other

    # -- finalization ---------------------------------------------------------

    def rounded_branches(self) -> list[int]:
        """round(r) per layer, half rounding up (0.5 keeps the softmax branch)."""
        return [int(math.floor(blk.r.item() + 0.5)) for blk in self.blocks
                if blk.r is not None]

    def finalize_layers(self) -> "ToyTransformer":
        """Hard-select each layer's branch by rounding its score; the losing
        branch's parameters (and the score itself) are dropped."""
        if self.is_finalized:
            raise ValueError("finalize_layers: model is already finalized")
        final = ToyTransformer(self.n_layers, self.d_model, self.seq_len,
                               self.d_state, dtype=self.dtype, _skip_init=True)
        src = self.snapshot()
        final.embed_w = DenseArray(src["embed.w"], requires_grad=True)
        final.embed_b = DenseArray(src["embed.b"], requires_grad=True)
        final.pos_emb = DenseArray(src["pos_emb"], requires_grad=True)
        final.time_w = DenseArray(src["time.w"], requires_grad=True)
        final.time_b = DenseArray(src["time.b"], requires_grad=True)
        for i, (blk, keep) in enumerate(zip(self.blocks, self.rounded_branches())):
            pre = f"layers.{i}."

            def arr(key):
                return DenseArray(src[pre + key], requires_grad=True)

            quad = keep == BRANCH_SOFTMAX
            final.blocks.append(Block(
                attn_gain=arr("attn_gain"),
                attn=AttentionParams(
                    w_q=arr("attn.w_q"), w_k=arr("attn.w_k"), w_v=arr("attn.w_v"),
                    hh_wq=None if quad else arr("attn.hh_wq"),
                    hh_wk=None if quad else arr("attn.hh_wk"),
                ),
                mlp_gain=arr("mlp_gain"),
                mlp_w1=arr("mlp.w1"), mlp_b1=arr("mlp.b1"),
                mlp_w2=arr("mlp.w2"), mlp_b2=arr("mlp.b2"),
                r=None,
                branch="softmax" if quad else "linear",
            ))
        final.final_gain = DenseArray(src["final_gain"], requires_grad=True)
        final.out_w = DenseArray(src["out.w"], requires_grad=True)
        final.out_b = DenseArray(src["out.b"], requires_grad=True)
        return final

    # -- checkpoint I/O ---------------------------------------------------------

    def save(self, path) -> None:
        version = VERSION_FINAL if self.is_finalized else VERSION_MIXED
        dtype_code = _DTYPE_CODES[self.dtype]
        chunks = [CHECKPOINT_MAGIC,
                  struct.pack("<5I", version, self.n_layers, self.d_model,
                              self.seq_len, self.d_state),
                  struct.pack("<I", dtype_code)]
        if version == VERSION_FINAL:
            codes = [BRANCH_SOFTMAX if blk.branch == "softmax" else BRANCH_LINEAR
                     for blk in self.blocks]
            chunks.append(struct.pack(f"<{self.n_layers}B", *codes))
        wire = _CODE_DTYPES[dtype_code]
        for _, p in self.named_weights():
            chunks.append(np.ascontiguousarray(p.data, dtype=wire).tobytes())
        if version == VERSION_MIXED:
            chunks.append(self.r_vector().astype(wire).tobytes())
        with open(path, "wb") as fh:
            fh.write(b"".join(chunks))

    @classmethod
    def load(cls, path) -> "ToyTransformer":
        with open(path, "rb") as fh:
            raw = fh.read()
        if raw[:4] != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic {raw[:4]!r}, "
                                  f"expected {CHECKPOINT_MAGIC!r}")
        if len(raw) < 28:
            raise CheckpointError(f"{path}: truncated header")
        version, n_layers, d_model, seq_len, d_state = struct.unpack_from("<5I", raw, 4)
        if version not in (VERSION_MIXED, VERSION_FINAL):
            raise CheckpointError(f"{path}: unknown checkpoint version {version}")
        (dtype_code,) = struct.unpack_from("<I", raw, 24)
        if dtype_code not in _CODE_DTYPES:
            raise CheckpointError(f"{path}: unknown dtype code {dtype_code}")
        wire = _CODE_DTYPES[dtype_code]
        offset = 28

        model = cls(n_layers, d_model, seq_len, d_state, dtype=wire.newbyteorder("="),
                    _skip_init=True)
        model._init_params(np.random.default_rng(0))
        if version == VERSION_FINAL:
            codes = struct.unpack_from(f"<{n_layers}B", raw, offset)
            offset += n_layers
            for blk, code in zip(model.blocks, codes):
                if code not in (BRANCH_LINEAR, BRANCH_SOFTMAX):
                    raise CheckpointError(f"{path}: unknown branch code {code}")
                blk.branch = "softmax" if code == BRANCH_SOFTMAX else "linear"
                blk.r = None
                if code == BRANCH_SOFTMAX:
                    blk.attn.hh_wq = None
                    blk.attn.hh_wk = None

        for name, p in model.named_weights():
            nbytes = p.size * wire.itemsize
            if offset + nbytes > len(raw):
                raise CheckpointError(f"{path}: truncated at parameter {name}")
            p.data = np.frombuffer(raw, dtype=wire, count=p.size,
                                   offset=offset).reshape(p.shape).astype(
                                       model.dtype, copy=True)
            offset += nbytes
        if version == VERSION_MIXED:
            nbytes = n_layers * wire.itemsize
            if offset + nbytes > len(raw):
                raise CheckpointError(f"{path}: truncated selection scores")
            scores = np.frombuffer(raw, dtype=wire, count=n_layers, offset=offset)
            model.set_r(scores)
            offset += nbytes
        if offset != len(raw):
            raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
        return model


def spawn_student(teacher: ToyTransformer, seed: int) -> ToyTransformer:
    """Training-ready copy of the teacher: identical weights, fresh hedgehog
    feature maps, and every selection score reset to 1 (fully quadratic)."""
    if teacher.is_finalized:
        raise ValueError("spawn_student: teacher must be a mixed-form model")
    student = teacher.clone()
    student.reinit_hedgehog(np.random.default_rng(seed))
    student.set_r(1.0)
    return student


@contextlib.contextmanager
def pole_branches(model: ToyTransformer):
    """Temporarily run mixed blocks whose score sits exactly at 0 or 1 on
    that single branch. The skipped branch is multiplied by an exact zero in
    the mixed form, so outputs are bit-identical — this is purely a speed
    lever for frozen reference models. Gradients stop reaching the dropped
    branch and the score, so never wrap a model whose scores are training.
    """
    switched = []
    try:
        for blk in model.blocks:
            if blk.branch != "mixed" or blk.r is None:
                continue
            value = float(blk.r.item())
            if value == 1.0:
                blk.branch = "softmax"
                switched.append(blk)
            elif value == 0.0:
                blk.branch = "linear"
                switched.append(blk)
        yield model
    finally:
        for blk in switched:
            blk.branch = "mixed"
