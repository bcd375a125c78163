"""Multi-head additive attention over a feature map.

Every head scores each location with its own slice of one block-structured
MLP: ``W_M2_h . tanh(LN_h(W_M0_h f_j + W_M1_h h))``. The heads' context slices
come from channel groups of the raw map (``none``), of a separate projection
``W_f f`` (``untied``), or of the scoring projection ``W_M0 f`` itself (``tied``).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, ParameterSet, Tensor

PROJECTIONS = ("none", "untied", "tied")


class AttentionConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AttentionConfig:
    heads: int = 8
    mlp_size: int = 512
    projection: str = "tied"
    projected_size: int | None = None
    temperature: float = 1.0
    feature_channels: int = 832
    state_size: int = 512

    def __post_init__(self):
        if self.projection not in PROJECTIONS:
            raise AttentionConfigError(f"projection must be one of {PROJECTIONS}, got {self.projection!r}")
        for name in ("heads", "mlp_size", "feature_channels", "state_size"):
            if getattr(self, name) < 1:
                raise AttentionConfigError(f"{name} must be >= 1")
        if self.temperature <= 0:
            raise AttentionConfigError(f"temperature must be > 0, got {self.temperature}")
        g = self.heads
        if self.mlp_size % g:
            raise AttentionConfigError(f"heads={g} must divide mlp_size={self.mlp_size}")
        if self.projection == "untied":
            if not self.projected_size or self.projected_size < 1:
                raise AttentionConfigError("untied projection needs projected_size q >= 1")
            if self.projected_size % g:
                raise AttentionConfigError(f"heads={g} must divide projected_size={self.projected_size}")
        elif self.projection == "none" and self.feature_channels % g:
            raise AttentionConfigError(f"heads={g} must divide feature_channels={self.feature_channels}")

    @property
    def context_size(self) -> int:
        if self.projection == "none":
            return self.feature_channels
        if self.projection == "untied":
            return self.projected_size
        return self.mlp_size

    def to_dict(self) -> dict:
        return asdict(self)


def attention_param_shapes(cfg: AttentionConfig, prefix: str = "attention/") -> dict[str, tuple]:
    k, r, n = cfg.mlp_size, cfg.feature_channels, cfg.state_size
    shapes = {
        f"{prefix}W_M0": (k, r),
        f"{prefix}W_M1": (k, n),
        f"{prefix}W_M2": (1, k),
        f"{prefix}ln_gain": (k,),
        f"{prefix}ln_bias": (k,),
    }
    if cfg.projection == "untied":
        shapes[f"{prefix}W_f"] = (cfg.projected_size, r)
    return shapes


def init_attention_params(cfg: AttentionConfig, rng: np.random.Generator, prefix: str = "attention/") -> list[Parameter]:
    out = []
    for name, shape in attention_param_shapes(cfg, prefix).items():
        if name.endswith("ln_gain"):
            out.append(Parameter(name, np.ones(shape), decay=False))
        elif name.endswith("ln_bias"):
            out.append(Parameter(name, np.zeros(shape), decay=False))
        else:
            out.append(Parameter(name, ad.xavier_init(shape, rng)))
    return out


@dataclass
class ProjectedFeatures:
    """Per-image projections, computed once and reused at every decoding step."""

    scores: Tensor  # (B, |F|, k): W_M0 f_j
    values: Tensor  # (B, |F|, context_size)


@dataclass
class AttentionOutput:
    context: Tensor  # (B, context_size)
    weights: Tensor  # (B, g, |F|)


def precompute_projection(features, params: ParameterSet, cfg: AttentionConfig, prefix: str = "attention/") -> ProjectedFeatures:
    f = features if isinstance(features, Tensor) else Tensor(np.asarray(features, dtype=params[f"{prefix}W_M0"].data.dtype))
    if f.ndim == 2:
        f = f.reshape(1, *f.shape)
    if f.ndim != 3 or f.shape[-1] != cfg.feature_channels:
        raise ad.DimensionError(
            f"attention: features of shape {f.shape} do not have {cfg.feature_channels} channels"
        )
    scores = ad.matmul(f, ad.transpose(params[f"{prefix}W_M0"]))
    if cfg.projection == "none":
        values = f
    elif cfg.projection == "untied":
        values = ad.matmul(f, ad.transpose(params[f"{prefix}W_f"]))
    else:
        values = scores
    return ProjectedFeatures(scores, values)


def attend(
    projected: ProjectedFeatures,
    h_prev: Tensor,
    params: ParameterSet,
    cfg: AttentionConfig,
    prefix: str = "attention/",
    w_m1_t: Tensor | None = None,
) -> AttentionOutput:
    """One attention read. ``w_m1_t`` lets a caller pass a pre-transposed W_M1."""
    B, F, k = projected.scores.shape
    g = cfg.heads
    d = k // g
    if h_prev.shape != (B, cfg.state_size):
        raise ad.DimensionError(f"attention: h_prev shape {h_prev.shape} != {(B, cfg.state_size)}")
    if w_m1_t is None:
        w_m1_t = ad.transpose(params[f"{prefix}W_M1"])
    query = ad.matmul(h_prev, w_m1_t).reshape(B, 1, k)
    hidden = (projected.scores + query).reshape(B, F, g, d)
    hidden = ad.layer_norm(
        hidden,
        params[f"{prefix}ln_gain"].reshape(g, d),
        params[f"{prefix}ln_bias"].reshape(g, d),
    )
    energy = (ad.tanh(hidden) * params[f"{prefix}W_M2"].reshape(g, d)).sum(axis=-1)  # (B, F, g)
    if not np.all(np.isfinite(energy.data)):
        raise ad.NumericError("attention: non-finite scores")
    alpha = ad.softmax(energy, axis=1, temperature=cfg.temperature)

    c = projected.values.shape[-1]
    values = projected.values.reshape(B, F, g, c // g)
    context = (values * alpha.reshape(B, F, g, 1)).sum(axis=1).reshape(B, c)
    return AttentionOutput(context, ad.permute(alpha, (0, 2, 1)))
