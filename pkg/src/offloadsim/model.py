"""GPT-style model geometry and the tensor sizes derived from it.

Every byte count used elsewhere in the package (parameters, gradients,
optimizer states, activation checkpoints) comes from here, so the traffic
formulas, the simulator and the planner agree on sizes by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

VALID_WIDTHS = (1, 2, 4, 8)

# 4h^2 for the attention projections plus 8h^2 for the FFN; biases and norms ignored.
PARAMS_PER_HIDDEN_SQ = 12


class ConfigError(ValueError):
    """Raised when a spec or config value is missing or out of range."""


@dataclass(frozen=True)
class ModelSpec:
    num_layers: int
    hidden_dim: int
    num_heads: int
    seq_len: int
    microbatch_size: int
    low_precision_bytes: int = 2
    full_precision_bytes: int = 4
    optimizer_states_per_element: int = 3
    data_parallel_degree: int = 1

    def __post_init__(self):
        for name in ("num_layers", "hidden_dim", "num_heads", "seq_len",
                     "microbatch_size", "optimizer_states_per_element",
                     "data_parallel_degree"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"{name} must be an integer >= 1, got {value!r}")
        for name in ("low_precision_bytes", "full_precision_bytes"):
            value = getattr(self, name)
            if value not in VALID_WIDTHS:
                raise ConfigError(f"{name} must be one of {VALID_WIDTHS}, got {value!r}")

    def with_(self, **changes) -> "ModelSpec":
        return type(self)(**{**self.__dict__, **changes})


@dataclass(frozen=True)
class LayerSizes:
    param_elements: int
    param_bytes_low: int
    grad_bytes_full: int
    opt_state_bytes: int
    ckpt_elements_per_mb: int
    ckpt_bytes_per_mb: int


def param_elements(hidden_dim: int) -> int:
    return PARAMS_PER_HIDDEN_SQ * hidden_dim * hidden_dim


def ckpt_elements(microbatch_size: int, seq_len: int, hidden_dim: int) -> int:
    return microbatch_size * seq_len * hidden_dim


def derive_layer_sizes(spec: ModelSpec) -> LayerSizes:
    """Per-layer sizes for one GPU's view of the model.

    Checkpoint sizes here are for a single micro-batch on a single GPU;
    ``model_totals`` applies the data-parallel scaling.
    """
    p = param_elements(spec.hidden_dim)
    c = ckpt_elements(spec.microbatch_size, spec.seq_len, spec.hidden_dim)
    return LayerSizes(
        param_elements=p,
        param_bytes_low=p * spec.low_precision_bytes,
        grad_bytes_full=p * spec.full_precision_bytes,
        opt_state_bytes=p * spec.optimizer_states_per_element * spec.full_precision_bytes,
        ckpt_elements_per_mb=c,
        ckpt_bytes_per_mb=c * spec.low_precision_bytes,
    )


@dataclass(frozen=True)
class ModelTotals:
    total_param_bytes_low: int       # ms
    total_ckpt_bytes_per_mb: int     # cs, aggregated over data-parallel replicas
    total_opt_state_bytes: int
    total_param_elements: int = field(default=0)


def model_totals(spec: ModelSpec) -> ModelTotals:
    sizes = derive_layer_sizes(spec)
    n = spec.num_layers
    return ModelTotals(
        total_param_bytes_low=n * sizes.param_bytes_low,
        total_ckpt_bytes_per_mb=n * sizes.ckpt_bytes_per_mb * spec.data_parallel_degree,
        total_opt_state_bytes=n * sizes.opt_state_bytes,
        total_param_elements=n * sizes.param_elements,
    )


# Geometries from the evaluation table; sequence length 2048 throughout.
PRESETS = {
    "gpt30b": dict(num_layers=48, num_heads=56, hidden_dim=7168),
    "gpt65b": dict(num_layers=80, num_heads=64, hidden_dim=8192),
    "gpt175b": dict(num_layers=96, num_heads=96, hidden_dim=12288),
}


def preset(name: str, microbatch_size: int = 1, seq_len: int = 2048, **overrides) -> ModelSpec:
    try:
        geometry = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}") from None
    return ModelSpec(seq_len=seq_len, microbatch_size=microbatch_size, **{**geometry, **overrides})
