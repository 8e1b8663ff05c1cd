"""JSON experiment configuration (schema version 1).

Unknown keys are rejected everywhere. Defaults follow common federated
settings: 10 clients, batch size 16, Dirichlet alpha 0.5, 100 calibration
steps with 20-step initial and later windows and threshold 1.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .data import PartitionSpec
from .federation import RoundConfig
from .gradip import VpConfig
from .scenarios import MASK_KINDS, Federation, blob_federation, quadratic_federation
from .zo import ZOConfig

__all__ = ["ExperimentConfig", "ConfigValidationError", "load_config", "build_federation"]

SCHEMA_VERSION = 1


class ConfigValidationError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class LogisticSection(_Strict):
    kind: Literal["logistic"]


class MLPSection(_Strict):
    kind: Literal["mlp"]
    hidden: List[int] = Field(default_factory=lambda: [16], min_length=1)


class QuadraticSection(_Strict):
    kind: Literal["pl-quadratic"]
    dim: int = Field(20, ge=1)
    mu: float = Field(0.5, gt=0)
    L: float = Field(2.0, gt=0)
    heterogeneity: float = Field(1.0, ge=0)
    curvature_spread: float = Field(0.0, ge=0, lt=1)
    w0_scale: float = Field(1.0, ge=0)

    @model_validator(mode="after")
    def _spectrum(self):
        if self.L < self.mu:
            raise ValueError("model.L must be >= model.mu")
        return self


class PartitionSection(_Strict):
    kind: Literal["iid", "dirichlet", "single-label", "mixed"] = "iid"
    alpha: float = Field(0.5, gt=0)
    n_single: int = Field(0, ge=0)
    single_fraction: float = Field(0.5, gt=0, le=1)


class DataSection(_Strict):
    classes: int = Field(10, ge=2)
    per_class: int = Field(60, ge=1)
    feature_dim: int = Field(50, ge=1)
    spread: float = Field(3.0, ge=0)
    separation: float = Field(25.0, ge=0)
    batch_size: int = Field(16, ge=1)
    calib_fraction: float = Field(0.1, gt=0, lt=1)
    partition: PartitionSection = Field(default_factory=PartitionSection)


class MaskSection(_Strict):
    kind: Literal["meerkat", "weight-magnitude", "random", "full"] = "meerkat"
    density: float = Field(1e-3, gt=0, le=1)


class RoundSection(_Strict):
    T: int = Field(10, ge=1)
    R: int = Field(100, ge=1)
    K: int = Field(10, ge=1)
    mode: Literal["multi-step", "high-frequency"] = "multi-step"
    epsilon: float = Field(1e-3, gt=0)
    eta: float = Field(2e-4, gt=0)
    aggregation: Literal["scalar", "params"] = "scalar"

    @model_validator(mode="after")
    def _frequency(self):
        if self.mode == "high-frequency" and self.T != 1:
            raise ValueError("round.T must be 1 in high-frequency mode")
        return self


class VpSection(_Strict):
    T_cali: int = Field(100, ge=1)
    T_init: int = Field(20, ge=1)
    T_later: int = Field(20, ge=1)
    sigma: float = Field(1.0, gt=0)
    rho_later: float = Field(2.0, gt=0)
    rho_quie: float = Field(0.5, gt=0)
    restrict_cosine: bool = False

    @model_validator(mode="after")
    def _windows(self):
        if self.T_init + self.T_later > self.T_cali:
            raise ValueError("vp.T_init + vp.T_later must not exceed vp.T_cali")
        return self


class CompareSection(_Strict):
    baselines: List[Literal["meerkat", "weight-magnitude", "random", "full"]] = Field(
        default_factory=lambda: list(MASK_KINDS), min_length=1
    )


class ExperimentConfig(_Strict):
    schema_version: Literal[1]
    master_seed: int = Field(0, ge=0, lt=2**64)
    output_dir: str = "runs"
    model: Union[LogisticSection, MLPSection, QuadraticSection] = Field(discriminator="kind")
    data: DataSection = Field(default_factory=DataSection)
    mask: MaskSection = Field(default_factory=MaskSection)
    round: RoundSection = Field(default_factory=RoundSection)
    vp: Optional[VpSection] = None
    compare: Optional[CompareSection] = None

    @model_validator(mode="after")
    def _consistency(self):
        p = self.data.partition
        if p.kind == "mixed" and p.n_single > self.round.K:
            raise ValueError("data.partition.n_single must not exceed round.K")
        return self

    def round_config(self) -> RoundConfig:
        r = self.round
        return RoundConfig(
            T=r.T, R=r.R, K=r.K, mode=r.mode,
            zo=ZOConfig(r.epsilon, r.eta), aggregation=r.aggregation,
        )

    def vp_config(self) -> Optional[VpConfig]:
        if self.vp is None:
            return None
        return VpConfig(**self.vp.model_dump())


def _describe(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        field = ".".join(str(x) for x in err["loc"]) or "<root>"
        parts.append(f"{field}: {err['msg']}")
    return "; ".join(parts)


def parse_config(payload) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(payload)
    except ValidationError as exc:
        raise ConfigValidationError(_describe(exc)) from None


def load_config(path) -> ExperimentConfig:
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigValidationError(f"cannot read config {path}: {exc}") from None
    return parse_config(payload)


def build_federation(cfg: ExperimentConfig, mask_kind=None) -> Federation:
    """Instantiate models, data, mask, clients and server from a config."""
    mask_kind = mask_kind or cfg.mask.kind
    m = cfg.model
    try:
        if m.kind == "pl-quadratic":
            return quadratic_federation(
                dim=m.dim, K=cfg.round.K, mu=m.mu, L=m.L,
                heterogeneity=m.heterogeneity, curvature_spread=m.curvature_spread,
                mask_kind=mask_kind, density=cfg.mask.density, w0_scale=m.w0_scale,
                master_seed=cfg.master_seed, restricted=False,
            )
        d, p = cfg.data, cfg.data.partition
        spec = PartitionSpec(
            kind=p.kind, K=cfg.round.K, alpha=p.alpha, seed=cfg.master_seed,
            n_single=p.n_single, single_fraction=p.single_fraction,
        )
        return blob_federation(
            model=m.kind, hidden=tuple(getattr(m, "hidden", (16,))),
            classes=d.classes, per_class=d.per_class, feature_dim=d.feature_dim,
            spread=d.spread, separation=d.separation, partition_spec=spec,
            batch_size=d.batch_size, calib_fraction=d.calib_fraction,
            mask_kind=mask_kind, density=cfg.mask.density, master_seed=cfg.master_seed,
        )
    except ValueError as exc:
        raise ConfigValidationError(str(exc)) from exc
