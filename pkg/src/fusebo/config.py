"""Run configuration: every tunable constant of the sampling loop in one place.

Constants are grouped by the pipeline stage they control and are addressable
through namespaced keys (``capacity.rho``, ``fusion.beta_max``, ...) so that a
flat ``key=value`` config file or CLI overrides can reach all of them.
Precedence is: built-in defaults < config file < explicit overrides.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence


class ConfigError(ValueError):
    """Raised on unknown keys, unparsable values, or inconsistent settings."""


@dataclass
class RunConfig:
    """Full parameterization of a run; serializing it pins the trajectory.

    Together with a deterministic oracle, a ``RunConfig`` determines every
    random draw, every fitted model, and therefore the entire run log.
    """

    seed: int = 0

    # capacity.*  (stage 0)
    capacity_rho: float = 4.0
    capacity_budget_min: int = 8
    capacity_budget_max: int = 256
    capacity_k_lo: int = 10
    capacity_k_hi: int = 20

    # ensemble.*  (stage 1)
    ensemble_b_boot: int = 16
    ensemble_kappa: float = 1.0
    ensemble_w_min: float = 0.02
    ensemble_softmax_temp: float = 1.0
    ensemble_sigma_floor_rel: float = 1e-6
    ensemble_min_families: int = 3
    ensemble_cv_folds: int = 3
    ensemble_retune_ratio: float = 1.5
    ensemble_families: str = (
        "linear-L2,linear-L1,linear-elastic,k-nearest-neighbors,"
        "random-forest,gradient-boosted-trees,feed-forward-net"
    )

    # candidates.*  (stage 2a)
    de_weight: float = 0.7
    de_crossover: float = 0.9
    de_generations: int = 100
    de_pop_cap: int = 60
    de_elite: int = 20
    de_member_subset: int = 4
    n_sobol: int = 128
    sobol_scramble: bool = True
    dedup_tol: float = 1e-9

    # structure.*  (stage 2b)
    embed_dim: int = 10
    kmeans_k_max: int = 8
    gmm_k_max: int = 6
    hdbscan_min_sizes: str = "5,15"
    graph_resolutions: str = "0.5,1.0"
    graph_knn: int = 15
    density_k: int = 10
    pi_min: float = 0.05
    pi_base: float = 0.7
    pi_boundary_gain: float = 0.3
    pi_core_gain: float = 0.2
    silhouette_cap: int = 2000
    proposer_fit_cap: int = 1500
    training_proposers: str = "kmeans"

    # fusion.*  (stage 3)
    snr_cap: float = 50.0
    beta_min: float = 0.5
    beta_max: float = 3.0
    gamma_trend_gain: float = 0.2
    kf_sigma_gain: float = 0.5
    alpha_gain: float = 2.0
    cov_shrinkage: float = 0.1
    n_mc: int = 256
    ref_margin: float = 0.1

    # controller.*
    novelty_window: int = 3
    novelty_k: int = 5
    init_mode: str = "low-quality"  # box init: low-quality | uniform
    init_probe: int = 1024
    stop_targets: Optional[str] = None  # "name=value,..." raw-unit thresholds

    def __post_init__(self) -> None:
        if self.capacity_budget_min > self.capacity_budget_max:
            raise ConfigError("capacity.budget_min exceeds capacity.budget_max")
        if self.init_mode not in ("low-quality", "uniform"):
            raise ConfigError(f"unknown init mode: {self.init_mode!r}")
        if not 0.0 <= self.cov_shrinkage <= 1.0:
            raise ConfigError("fusion.cov_shrinkage must lie in [0, 1]")

    # -- namespaced-key access ------------------------------------------------

    @staticmethod
    def _field_for_key(key: str) -> str:
        name = key.strip().replace(".", "_")
        # capacity.rho -> capacity_rho, de.weight -> de_weight, seed -> seed
        if name in _FIELD_NAMES:
            return name
        raise ConfigError(f"unknown config key: {key!r}")

    def with_overrides(self, items: dict[str, Any]) -> "RunConfig":
        """Return a copy with ``items`` (namespaced keys) applied on top."""
        values = dataclasses.asdict(self)
        for key, raw in items.items():
            name = self._field_for_key(key)
            values[name] = _coerce(raw, _FIELD_TYPES[name], key)
        return RunConfig(**values)

    @classmethod
    def from_file(cls, path: str | Path, overrides: Optional[dict[str, Any]] = None) -> "RunConfig":
        """Parse a ``key=value`` config file, then apply ``overrides`` on top."""
        items: dict[str, Any] = {}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {stripped!r}")
            key, _, value = stripped.partition("=")
            items[key.strip()] = value.strip()
        config = cls().with_overrides(items)
        if overrides:
            config = config.with_overrides(overrides)
        return config

    def as_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunConfig":
        unknown = set(data) - _FIELD_NAMES
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**data)

    # -- convenience parsers ---------------------------------------------------

    def family_ids(self) -> list[str]:
        return [item.strip() for item in self.ensemble_families.split(",") if item.strip()]

    def hdbscan_sizes(self) -> list[int]:
        return [int(v) for v in self.hdbscan_min_sizes.split(",") if v.strip()]

    def resolutions(self) -> list[float]:
        return [float(v) for v in self.graph_resolutions.split(",") if v.strip()]

    def parsed_stop_targets(self) -> Optional[dict[str, float]]:
        if not self.stop_targets:
            return None
        out: dict[str, float] = {}
        for chunk in self.stop_targets.split(","):
            name, _, value = chunk.partition("=")
            if not value:
                raise ConfigError(f"bad stop target {chunk!r}; expected name=value")
            out[name.strip()] = float(value)
        return out


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}
_FIELD_NAMES = set(_FIELD_TYPES)


def _coerce(raw: Any, annotation: Any, key: str) -> Any:
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    ann = str(annotation)
    try:
        if "bool" in ann:
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if "int" in ann:
            return int(text)
        if "float" in ann:
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from exc
    if "Optional" in ann and text.lower() in ("", "none"):
        return None
    return text
