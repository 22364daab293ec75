"""The four-stage model: match, detect occlusion, rectify by attention, refine.

One FlowModel owns every learnable module and exposes a flat parameter
dict keyed by module path for checkpointing. forward() runs the whole
pipeline on one frame pair and returns every intermediate the losses
and metrics need. The occlusion stage runs outside the gradient graph:
its scores enter as data (extended-feature input and masking), never as
a differentiated quantity.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

from . import tensor as tt
from .attention import AttentionHead, FeatureExtender, masked_flow, normal_grid, rectify
from .errors import ConfigError
from .matcher import Encoder, GlobalMatch, global_match
from .occdet import estimate_occlusion, non_occluded_mask
from .refiner import ContextNet, Refiner
from .tensor import Tensor


@dataclass
class ModelConfig:
    feat_channels: int = 48
    om_channels: int = 16
    attn_dim: int = 64
    hidden_channels: int = 64
    context_channels: int = 48
    motion_channels: int = 48
    premix_channels: int = 64
    head_channels: int = 48
    lookup_radius: int = 3
    iters: int = 6
    match_temperature: float = 1.0
    attn_temperature: float = 1.0
    use_ext_features: bool = True
    use_repulsion: bool = True
    use_attraction: bool = True
    use_gma_baseline: bool = False
    dtype: str = "float32"

    def validate(self) -> None:
        for name in ("feat_channels", "om_channels", "attn_dim", "hidden_channels",
                     "context_channels", "motion_channels", "premix_channels",
                     "head_channels", "iters"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.lookup_radius < 0:
            raise ConfigError(f"lookup_radius must be >= 0, got {self.lookup_radius}")
        if self.match_temperature <= 0 or self.attn_temperature <= 0:
            raise ConfigError("temperatures must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


@dataclass
class ForwardResult:
    """Everything one pipeline pass produces, at 1/8 resolution."""

    match: GlobalMatch
    om: Optional[np.ndarray]        # occlusion scores [h8,w8], None when no stage needs them
    om_n: Optional[np.ndarray]      # binary non-occluded mask
    m: Tensor                       # attention matrix [n,n]
    rect: Tensor                    # attention-propagated flow [2,h8,w8]
    flows: list[Tensor] = field(default_factory=list)  # refinement sequence, cell units
    grid: Optional[np.ndarray] = None

    @property
    def final_flow(self) -> Tensor:
        return self.flows[-1]


class FlowModel:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        dtype = cfg.np_dtype
        rng = np.random.default_rng(seed)
        # fixed construction order keeps init deterministic for a given seed
        self.encoder = Encoder(rng, cfg.feat_channels, dtype=dtype)
        self.extender = FeatureExtender(rng, cfg.om_channels, dtype=dtype) if cfg.use_ext_features else None
        attn_in = cfg.feat_channels + (cfg.om_channels if cfg.use_ext_features else 0)
        self.attention = AttentionHead(rng, attn_in, cfg.attn_dim, dtype=dtype)
        self.context = ContextNet(rng, cfg.feat_channels, cfg.hidden_channels, cfg.context_channels, dtype=dtype)
        self.refiner = Refiner(
            rng,
            context_channels=cfg.context_channels,
            hidden_channels=cfg.hidden_channels,
            motion_channels=cfg.motion_channels,
            premix_channels=cfg.premix_channels,
            head_channels=cfg.head_channels,
            lookup_radius=cfg.lookup_radius,
            dtype=dtype,
        )

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        groups = [("encoder", self.encoder), ("extender", self.extender),
                  ("attention", self.attention), ("context", self.context),
                  ("refiner", self.refiner)]
        for prefix, mod in groups:
            if mod is None:
                continue
            for k, v in mod.params().items():
                out[f"{prefix}.{k}"] = v
        return out

    def param_count(self) -> int:
        return sum(p.numel for p in self.params().values())

    def _needs_occlusion(self) -> bool:
        c = self.cfg
        return c.use_ext_features or c.use_repulsion or c.use_attraction

    def forward(
        self,
        frame0,
        frame1,
        om_override: Optional[np.ndarray] = None,
        detach_iterates: bool = True,
    ) -> ForwardResult:
        cfg = self.cfg
        f0 = self.encoder(frame0)
        f1 = self.encoder(frame1)
        match = global_match(f0, f1, temperature=cfg.match_temperature)
        h8, w8 = match.flow.shape[1:]

        om = om_override
        if om is None and self._needs_occlusion():
            # scores are data for the later stages, so the backward pass is
            # computed off-graph from the already-encoded features
            with tt.no_grad():
                bwd = global_match(Tensor(f1.data), Tensor(f0.data), temperature=cfg.match_temperature)
                om = estimate_occlusion(match.flow.data, bwd.flow.data)
        om_n = non_occluded_mask(om) if om is not None else None

        feats = self.extender(f0, om) if cfg.use_ext_features else f0
        m = self.attention(feats, temperature=cfg.attn_temperature)

        flow_src = masked_flow(match.flow, om_n) if cfg.use_repulsion else match.flow
        rect = rectify(m, flow_src)

        h0, ctx = self.context(f0)
        flows = self.refiner.run_refinement(
            rect, match.correlation, m, h0, ctx, iters=cfg.iters, detach_iterates=detach_iterates
        )
        grid = normal_grid(h8, w8, np.float64)
        return ForwardResult(match=match, om=om, om_n=om_n, m=m, rect=rect, flows=flows, grid=grid)


def model_config_from_dict(d: dict) -> ModelConfig:
    known = {f.name for f in fields(ModelConfig)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
    return ModelConfig(**d)
