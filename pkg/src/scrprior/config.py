"""Sectioned run configuration.

Grammar: ``[section]`` headers, ``key = value`` lines, ``#`` or ``;`` comments,
blank lines ignored. Tuples are comma-separated. Every key must exist in the
schema below; its default fixes the value type.
"""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path

from .diffusion import AugmentationConfig, DenoiserConfig
from .priors import LaplaceParams, PriorSchedule, RgbdParams
from .reloc import RansacConfig
from .scr import HeadConfig, MappingConfig
from .synthscene import DatasetConfig, SceneConfig


class ConfigError(ValueError):
    pass


_M, _H = MappingConfig(), HeadConfig()
_PS, _R = PriorSchedule(), RansacConfig()
_D, _A = DenoiserConfig(), AugmentationConfig()

SCHEMA: dict[str, dict[str, object]] = {
    "scene": {"seed": 0, **{k: getattr(SceneConfig(), k) for k in SceneConfig.__dataclass_fields__}},
    "dataset": {k: getattr(DatasetConfig(), k) for k in DatasetConfig.__dataclass_fields__},
    "mapping": {**{k: getattr(_M, k) for k in MappingConfig.__dataclass_fields__ if k != "head"},
                "hidden": _H.hidden, "residual_bound": _H.residual_bound},
    "prior": {"name": "none", "mu": LaplaceParams().mu, "b": LaplaceParams().b,
              "b_prime": RgbdParams().b_prime, "lambda_reg": -1.0, "params_file": "",
              "diffusion_model": ""},
    "schedule": {**{k: getattr(_PS, k) for k in PriorSchedule.__dataclass_fields__ if k != "tau_start"},
                 "tau_start": -1},
    "diffusion": {"T": 200, "beta_min": 1e-4, "beta_max": 0.02,
                  **{k: getattr(_D, k) for k in DenoiserConfig.__dataclass_fields__},
                  "iterations": 2000, "batch": 4, "lr": 2e-3, "n_rooms": 50, "room_points": 20000,
                  "seed": 0, "sample_points": _A.sample_points, "rotation_range": _A.rotation_range,
                  "translate": _A.translate, "scale_range": _A.scale_range, "scale_factor": _A.scale_factor},
    "ransac": {k: getattr(_R, k) for k in RansacConfig.__dataclass_fields__},
    "eval": {"rpe_delta": 1},
}


def _coerce(raw: str, default, where: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            v = float(raw)
            if math.isnan(v):
                raise ValueError("NaN is not allowed")
            return v
        if isinstance(default, tuple):
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            kind = type(default[0]) if default else float
            if len(default) and len(parts) != len(default) and not all(isinstance(x, int) for x in default):
                raise ValueError(f"expected {len(default)} comma-separated values")
            return tuple(kind(p) for p in parts)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


class RunConfig:
    """Validated config values, addressable as ``cfg['section']['key']``."""

    def __init__(self, values: dict[str, dict[str, object]]):
        self.values = values

    def __getitem__(self, section: str) -> dict[str, object]:
        return self.values[section]

    @classmethod
    def defaults(cls) -> RunConfig:
        return cls({s: dict(keys) for s, keys in SCHEMA.items()})

    @classmethod
    def load(cls, path=None, overrides=()) -> RunConfig:
        cfg = cls.defaults()
        if path is not None:
            path = Path(path)
            if not path.is_file():
                raise ConfigError(f"config file {path} not found")
            cfg._apply_text(path.read_text(), str(path))
        for ov in overrides:
            cfg.apply_override(ov)
        cfg.validate()
        return cfg

    def _set(self, section: str, key: str, raw: str, where: str):
        if section not in SCHEMA:
            raise ConfigError(f"{where}: unknown section [{section}]")
        if key not in SCHEMA[section]:
            raise ConfigError(f"{where}: unknown key '{key}' in [{section}]")
        self.values[section][key] = _coerce(raw, SCHEMA[section][key], where)

    def _apply_text(self, text: str, name: str):
        section = None
        for n, line in enumerate(text.splitlines(), 1):
            s = line.strip()
            where = f"{name}:{n}"
            if not s or s[0] in "#;":
                continue
            if s.startswith("[") and s.endswith("]"):
                section = s[1:-1].strip()
                if section not in SCHEMA:
                    raise ConfigError(f"{where}: unknown section [{section}]")
                continue
            if "=" not in s:
                raise ConfigError(f"{where}: expected 'key = value'")
            if section is None:
                raise ConfigError(f"{where}: key outside of any [section]")
            key, raw = s.split("=", 1)
            self._set(section, key.strip(), raw, where)

    def apply_override(self, text: str):
        """``section.key=value`` with or without leading dashes."""
        body = text.lstrip("-")
        if "=" not in body or "." not in body.split("=", 1)[0]:
            raise ConfigError(f"override {text!r}: expected --section.key=value")
        lhs, raw = body.split("=", 1)
        section, key = lhs.split(".", 1)
        self._set(section, key, raw, f"override {text!r}")

    def validate(self):
        try:
            self.mapping_config()
            self.prior_schedule()
            self.ransac_config()
            self.scene_config()
            self.dataset_config()
            self.denoiser_config()
            self.augmentation_config()
        except ConfigError:
            raise
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"invalid configuration: {exc}") from None
        if self["prior"]["name"] not in ("none", "laplace-nll", "laplace-wd", "rgbd-nll", "diffusion"):
            raise ConfigError(f"[prior] name: unknown prior {self['prior']['name']!r}")
        if self["mapping"]["iterations"] <= self["schedule"]["start_iter"] and self["prior"]["name"] == "diffusion":
            raise ConfigError("[mapping] iterations must exceed [schedule] start_iter for the diffusion prior")
        d = self["diffusion"]
        if not 0 < d["beta_min"] < d["beta_max"] < 1:
            raise ConfigError("[diffusion] need 0 < beta_min < beta_max < 1")
        if d["T"] < 2:
            raise ConfigError("[diffusion] T must be >= 2")

    # --- typed views ---------------------------------------------------------------

    def scene_config(self) -> SceneConfig:
        s = {k: v for k, v in self["scene"].items() if k != "seed"}
        return SceneConfig(**s)

    def dataset_config(self) -> DatasetConfig:
        return DatasetConfig(**self["dataset"])

    def mapping_config(self) -> MappingConfig:
        m = dict(self["mapping"])
        head = HeadConfig(feature_dim=self["dataset"]["feature_dim"], hidden=tuple(m.pop("hidden")),
                          residual_bound=m.pop("residual_bound"))
        return MappingConfig(**m, head=head)

    def prior_schedule(self) -> PriorSchedule:
        s = dict(self["schedule"])
        if s["tau_start"] < 0:
            s["tau_start"] = None
        return PriorSchedule(**s)

    def ransac_config(self) -> RansacConfig:
        return RansacConfig(**self["ransac"])

    def denoiser_config(self) -> DenoiserConfig:
        return DenoiserConfig(**{k: self["diffusion"][k] for k in DenoiserConfig.__dataclass_fields__})

    def augmentation_config(self) -> AugmentationConfig:
        d = self["diffusion"]
        return AugmentationConfig(sample_points=d["sample_points"], rotation_range=tuple(d["rotation_range"]),
                                  translate=d["translate"], scale_range=tuple(d["scale_range"]),
                                  scale_factor=d["scale_factor"])

    def to_text(self) -> str:
        out = []
        for section, keys in self.values.items():
            out.append(f"[{section}]")
            for k, v in keys.items():
                if isinstance(v, tuple):
                    v = ", ".join(repr(x) for x in v)
                elif isinstance(v, float):
                    v = repr(v)
                out.append(f"{k} = {v}")
            out.append("")
        return "\n".join(out)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.values, sort_keys=True, default=list).encode()).hexdigest()[:16]
