"""Flat ``section.key=value`` experiment configuration.

Values are resolved in order: built-in default, config file, environment
variable ``DSBRIDGE_<SECTION>_<KEY>`` (upper case, dots replaced by
underscores), then explicit command-line overrides.
"""

from __future__ import annotations

import os
from pathlib import Path

ENV_PREFIX = "DSBRIDGE_"

# key -> (default, description)
DEFAULTS = {
    "data.source": ("blobs-a", "source dataset id"),
    "data.target": ("blobs-b", "target dataset id"),
    "data.n_train": ("2048", "training points per domain"),
    "data.n_test": ("1024", "held-out points per domain"),
    "sb.sqrt_tau": ("2.5", "square root of the bridge variance"),
    "sb.tau": ("", "bridge variance; overrides sb.sqrt_tau when set"),
    "sb.t0": ("0.2", "initial bridge time"),
    "sb.t_clamp": ("0.001", "margin keeping velocity times inside (0, 1)"),
    "bridge.method": ("lsb", "lsb, sdedit or dual-bridge"),
    "bridge.backend": ("learned", "lsb predictors: oracle, analytic or learned"),
    "bridge.nfe": ("8", "predictor evaluations per sample"),
    "bridge.omega": ("11.0", "guidance scale"),
    "bridge.final_denoise": ("true", "spend one evaluation on a final denoising step"),
    "bridge.ablate": ("", "comma-separated components to disable: snr,tdeps,cfg,denoise"),
    "bridge.save_trajectory": ("false", "write trajectory.csv on translate"),
    "baseline.alpha_bar_min": ("0.02", "dual-bridge inversion level"),
    "sinkhorn.tol": ("1e-9", "marginal L1 tolerance"),
    "sinkhorn.max_iter": ("10000", "Sinkhorn iteration cap"),
    "train.steps": ("5000", "Adam steps"),
    "train.batch_size": ("256", "minibatch size"),
    "train.lr": ("0.001", "Adam learning rate"),
    "train.cond_dropout": ("0.1", "probability of the null token during training"),
    "train.hidden": ("64,64", "hidden layer widths"),
    "train.checkpoint": ("", "checkpoint path; defaults to OUT/model.ckpt"),
    "eval.n_proj": ("128", "sliced Wasserstein projections"),
    "sweep.nfe": ("2,4,8,16,32", "budgets swept"),
    "sweep.methods": ("lsb,sdedit,dual-bridge", "methods swept"),
    "sweep.seeds": ("0", "seeds swept"),
    "sweep.omega": ("", "guidance scales swept; defaults to bridge.omega"),
    "sweep.ablations": ("none", "semicolon-separated ablation sets for lsb rows"),
    "check.fault": ("", "inject a fault into the check battery (sigma-mismatch)"),
    "run.seed": ("0", "root seed"),
    "run.out": ("out", "output directory"),
}

ABLATIONS = ("snr", "tdeps", "cfg", "denoise")
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off", ""}


class ConfigError(ValueError):
    pass


def env_name(key):
    return ENV_PREFIX + key.upper().replace(".", "_")


def parse_lines(text, source="<config>"):
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


class Config:
    """Resolved string values with typed accessors."""

    def __init__(self, values):
        self.values = dict(values)

    @classmethod
    def load(cls, path=None, environ=None, overrides=None):
        values = {k: v for k, (v, _) in DEFAULTS.items()}
        if path is not None:
            p = Path(path)
            values.update(parse_lines(p.read_text(), str(p)))
        environ = os.environ if environ is None else environ
        for key in DEFAULTS:
            if env_name(key) in environ:
                values[key] = environ[env_name(key)].strip()
        for key, value in (overrides or {}).items():
            if value is None:
                continue
            if key not in DEFAULTS:
                raise ConfigError(f"unknown key {key!r}")
            values[key] = str(value)
        return cls(values)

    def __getitem__(self, key):
        return self.values[key]

    def get_str(self, key):
        return self.values[key]

    def get_int(self, key):
        try:
            return int(self.values[key])
        except ValueError:
            raise ConfigError(f"{key} must be an integer, got {self.values[key]!r}") from None

    def get_float(self, key):
        try:
            return float(self.values[key])
        except ValueError:
            raise ConfigError(f"{key} must be a number, got {self.values[key]!r}") from None

    def get_bool(self, key):
        v = self.values[key].lower()
        if v in _TRUE:
            return True
        if v in _FALSE:
            return False
        raise ConfigError(f"{key} must be a boolean, got {self.values[key]!r}")

    def get_list(self, key, kind=str, sep=","):
        raw = self.values[key]
        try:
            return [kind(v.strip()) for v in raw.split(sep) if v.strip()]
        except ValueError:
            raise ConfigError(f"{key}: cannot parse {raw!r}") from None

    @property
    def tau(self):
        if self.values["sb.tau"]:
            return self.get_float("sb.tau")
        return self.get_float("sb.sqrt_tau") ** 2

    def dump(self):
        return "".join(f"{k}={self.values[k]}\n" for k in DEFAULTS)


def parse_ablation(spec):
    """Canonical sorted tuple of disabled components from ``"snr,cfg"`` style text."""
    spec = spec.strip()
    if spec in ("", "none", "full"):
        return ()
    flags = {f.strip() for f in spec.replace("+", ",").split(",") if f.strip()}
    unknown = flags - set(ABLATIONS)
    if unknown:
        raise ConfigError(f"unknown ablation flag(s) {sorted(unknown)}; expected {ABLATIONS}")
    return tuple(f for f in ABLATIONS if f in flags)


def ablation_label(flags):
    return "+".join(f"no-{f}" for f in flags) if flags else "full"
