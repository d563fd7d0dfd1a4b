"""Flat ``key=value`` run configuration.

Every tunable of the pipeline has a dotted key here. Files may contain blank
lines and ``#`` comments; unknown keys are rejected.
"""
from __future__ import annotations

from pathlib import Path

from .denoiser import DenoiserConfig
from .disentangle import PROJECTOR_SEED, LossWeights
from .finetune import FinetuneConfig
from .removal import RemovalConfig
from .schedule import linear_schedule

DEFAULTS: dict[str, object] = {
    "seed": 0,
    "threads": 1,
    "schedule.T": 1000,
    "schedule.beta_start": 1e-4,
    "schedule.beta_end": 0.02,
    "denoiser.image_size": 32,
    "denoiser.base_width": 32,
    "denoiser.levels": 2,
    "denoiser.time_embed_dim": 64,
    "denoiser.seed": 0,
    "data.seed": 0,
    "data.n": 512,
    "data.styles_per_kind": 2,
    "pretrain.steps": 20000,
    "pretrain.lr": 2e-4,
    "pretrain.batch": 16,
    "pretrain.log_every": 500,
    "removal.preset": "artistic",
    "removal.T_remov": 601,
    "removal.S_for": 40,
    "removal.S_rev": 40,
    "removal.K_r": 5,
    "removal.skip_diffusion": False,
    "finetune.T_trans": 301,
    "finetune.S_for": 40,
    "finetune.S_rev": 6,
    "finetune.K": 5,
    "finetune.K_s": 50,
    "finetune.N": 16,
    "finetune.base_lr": 1e-4,
    "finetune.lr_growth": 0.2,
    "finetune.lambda_l1": 10.0,
    "finetune.lambda_dir": 1.0,
    "finetune.sr_enabled": True,
    "finetune.preset": "desk",
    "projector.seed": PROJECTOR_SEED,
}

REMOVAL_PRESETS = {"artistic": {"removal.T_remov": 601}, "photo": {"removal.T_remov": 401}}
FINETUNE_PRESETS = {"desk": {}, "paper": {"finetune.N": 50, "finetune.base_lr": 4e-6},
                    "photo": {"finetune.T_trans": 101}}


class ConfigError(ValueError):
    pass


def _coerce(key: str, text):
    default = DEFAULTS[key]
    if not isinstance(text, str):
        return type(default)(text) if not isinstance(default, bool) else bool(text)
    t = text.strip()
    try:
        if isinstance(default, bool):
            if t.lower() in ("1", "true", "yes", "on"):
                return True
            if t.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(t)
        if isinstance(default, int):
            return int(t, 0)
        if isinstance(default, float):
            return float(t)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r}") from exc
    return t


class RunConfig(dict):
    """Resolved configuration; a plain dict keyed by dotted names."""

    @classmethod
    def resolve(cls, path=None, overrides: dict | None = None) -> "RunConfig":
        cfg = cls(DEFAULTS)
        given = {}
        if path is not None:
            given.update(parse_file(path))
        given.update(overrides or {})
        for key, value in given.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            given[key] = _coerce(key, value)
        # presets fill in values not set explicitly
        for pkey, presets in (("removal.preset", REMOVAL_PRESETS), ("finetune.preset", FINETUNE_PRESETS)):
            name = given.get(pkey, DEFAULTS[pkey])
            if name not in presets:
                raise ConfigError(f"unknown {pkey} {name!r}; choose from {sorted(presets)}")
            for k, v in presets[name].items():
                cfg[k] = v
        cfg.update(given)
        return cfg

    def dump(self) -> str:
        return "".join(f"{k}={_fmt(v)}\n" for k, v in sorted(self.items()))

    def write(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        p = d / "resolved_config.txt"
        p.write_text(self.dump())
        return p

    def schedule(self):
        return linear_schedule(self["schedule.T"], self["schedule.beta_start"], self["schedule.beta_end"])

    def denoiser(self) -> DenoiserConfig:
        return DenoiserConfig(self["denoiser.image_size"], self["denoiser.base_width"],
                              self["denoiser.levels"], self["denoiser.time_embed_dim"],
                              self["denoiser.seed"])

    def removal(self) -> RemovalConfig:
        return RemovalConfig(self["removal.T_remov"], self["removal.S_for"], self["removal.S_rev"],
                             self["removal.K_r"], self["removal.skip_diffusion"])

    def finetune(self) -> FinetuneConfig:
        return FinetuneConfig(
            T_trans=self["finetune.T_trans"], S_for=self["finetune.S_for"], S_rev=self["finetune.S_rev"],
            K=self["finetune.K"], K_s=self["finetune.K_s"], N=self["finetune.N"],
            base_lr=self["finetune.base_lr"], lr_growth=self["finetune.lr_growth"],
            weights=LossWeights(self["finetune.lambda_l1"], self["finetune.lambda_dir"]),
            sr_enabled=self["finetune.sr_enabled"], seed=self["seed"])


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def parse_file(path) -> dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def parse_assignments(items) -> dict[str, str]:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"expected key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out
