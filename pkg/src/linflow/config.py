"""Flat key=value run configuration.

One dataclass holds every knob the command-line tools accept; files override
defaults, flags override files. Unknown keys are rejected rather than
ignored so typos fail loudly, and the resolved configuration is
fingerprinted and written next to every run's outputs.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, fields


class ConfigError(ValueError):
    """Raised for unknown keys, bad values, or failed validation."""


@dataclass
class RunConfig:
    # model
    n_layers: int = 8
    d_model: int = 32
    seq_len: int = 16
    d_state: int = 2
    attention_scale: str = "dim"      # score divisor in the mixed path
    # sampling
    n_sample_steps: int = 8
    t_min_clamp: float = 0.02
    # teacher pre-training
    teacher_steps: int = 2000
    teacher_batch: int = 64
    teacher_lr: float = 3e-3
    teacher_warmup_frac: float = 0.05
    teacher_weight_decay: float = 1e-4
    # trajectory collection
    n_trajectories: int = 2048
    # transfer
    target_linear: int = 4
    lam: float = 0.01
    alpha_start: float = 20.0
    alpha_end: float = 2.0
    transfer_steps: int = 3000
    transfer_batch: int = 64
    lr_start: float = 1e-4
    lr_min: float = 0.0
    warmup_frac: float = 0.1
    weight_decay: float = 1e-4
    r_lr: float = 0.02
    r_kind: str = "adam"
    hedgehog_lr: float = 1e-3
    objective: str = "adm"            # "adm" | "mse"
    reg_enabled: bool = True
    # evaluation
    eval_samples: int = 2048
    eval_projections: int = 128
    eval_noise_seed: int = 9000
    eval_projection_seed: int = 9001
    # attention benchmark
    bench_sizes: tuple = (1024, 2048, 4096, 8192)
    bench_d: int = 64
    bench_repeats: int = 3
    # ablations
    ablate_targets: tuple = (2, 4, 6)
    ablate_lambdas: tuple = (0.1, 0.001)
    ablate_seeds: tuple = (0, 1, 2)
    # global
    seed: int = 0

    def validate(self) -> None:
        if self.n_layers < 1:
            raise ConfigError("n_layers must be >= 1")
        if self.d_model % 2 != 0 or self.d_model < 2:
            raise ConfigError("d_model must be a positive even number")
        if self.seq_len < 3 or self.d_state < 1:
            raise ConfigError("seq_len must be >= 3 and d_state >= 1")
        if self.attention_scale not in ("dim", "sqrt"):
            raise ConfigError("attention_scale must be 'dim' or 'sqrt'")
        if not 0 <= self.target_linear <= self.n_layers:
            raise ConfigError(f"target_linear must lie in [0, {self.n_layers}]")
        if self.objective not in ("adm", "mse"):
            raise ConfigError("objective must be 'adm' or 'mse'")
        if self.r_kind not in ("adam", "sgd"):
            raise ConfigError("r_kind must be 'adam' or 'sgd'")
        if self.alpha_start < self.alpha_end:
            raise ConfigError("alpha_start must be >= alpha_end")
        if not 0.0 < self.t_min_clamp < 1.0:
            raise ConfigError("t_min_clamp must lie in (0, 1)")
        for key in ("teacher_steps", "transfer_steps", "teacher_batch",
                    "transfer_batch", "n_trajectories", "n_sample_steps",
                    "eval_samples", "eval_projections", "bench_repeats"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1")
        for key in ("teacher_lr", "lr_start", "r_lr", "hedgehog_lr"):
            if getattr(self, key) <= 0:
                raise ConfigError(f"{key} must be positive")
        if self.lam < 0:
            raise ConfigError("lam must be non-negative")
        if any(t < 1 for t in self.ablate_targets) or \
           any(t > self.n_layers for t in self.ablate_targets):
            raise ConfigError("ablate_targets must lie in [1, n_layers]")
        if len(self.bench_sizes) < 2:
            raise ConfigError("bench_sizes needs at least two lengths")

    def as_dict(self) -> dict:
        return asdict(self)

    def fingerprint(self) -> str:
        """sha256 over the canonical key=value rendering."""
        return hashlib.sha256(render_config(self).encode()).hexdigest()


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    default = getattr(RunConfig(), key)
    if isinstance(default, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from None
    if isinstance(default, tuple):
        element = float if any(isinstance(v, float) for v in default) else int
        try:
            return tuple(element(part) for part in raw.split(",") if part.strip())
        except ValueError:
            raise ConfigError(f"{key}: expected a comma list, got {raw!r}") from None
    return raw


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    """Apply `key = value` lines (# comments, blank lines allowed) on top of
    `base` (or defaults). Unknown keys raise ConfigError."""
    cfg = RunConfig(**(base.as_dict() if base else {}))
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        setattr(cfg, key, _coerce(key, raw))
    return cfg


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    with open(path) as fh:
        return parse_config_text(fh.read(), base)


def render_config(cfg: RunConfig) -> str:
    """Canonical text form: sorted key = value lines; tuples as comma lists."""
    lines = []
    for key in sorted(_FIELD_TYPES):
        value = getattr(cfg, key)
        if isinstance(value, tuple):
            rendered = ",".join(format(v) for v in value)
        elif isinstance(value, bool):
            rendered = "true" if value else "false"
        elif isinstance(value, float):
            rendered = repr(value)
        else:
            rendered = str(value)
        lines.append(f"{key} = {rendered}")
    return "\n".join(lines) + "\n"


def write_resolved(cfg: RunConfig, path) -> str:
    """Persist the resolved config with its fingerprint; returns the digest."""
    digest = cfg.fingerprint()
    with open(path, "w") as fh:
        fh.write(f"# fingerprint {digest}\n")
        fh.write(render_config(cfg))
    return digest
