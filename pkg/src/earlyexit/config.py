"""Experiment configuration: an INI file with one section per pipeline stage.

Every key has a documented default (see ``config --print-defaults``).  Values
are validated when the typed sub-configurations are built, so an invalid file
fails before any work starts.
"""
from __future__ import annotations

import configparser
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from .calibration import DEFAULT_GRID
from .orchestrator import OrchestratorConfig
from .tensor_core import ConfigError
from .training import GlobalTrainConfig, PersonalisationConfig

# section -> key -> (default, description)
DEFAULTS: Dict[str, Dict[str, Tuple[str, str]]] = {
    "run": {
        "seed": ("0", "master seed; every random stream is derived from it"),
        "out": ("out", "output directory"),
    },
    "data": {
        "source": ("blobs", "blobs (synthetic Gaussian-blob images) or idx"),
        "num_classes": ("10", "number of classes K"),
        "image_shape": ("1 28 28", "C H W of synthetic images"),
        "noise": ("0.6", "pixel noise std of synthetic images"),
        "blobs": ("3", "blobs per class prototype"),
        "shift": ("4", "max jitter in pixels"),
        "n_train": ("4000", "global training samples"),
        "n_test": ("1000", "global test samples"),
        "pool_size": ("20000", "samples from which user datasets are drawn"),
        "train_images": ("", "IDX images for source = idx"),
        "train_labels": ("", "IDX labels for source = idx"),
        "pool_images": ("", "IDX images users are drawn from (source = idx)"),
        "pool_labels": ("", "IDX labels users are drawn from (source = idx)"),
    },
    "users": {
        "n_users": ("3", "number of simulated users"),
        "samples_per_user": ("1700", "images per user, including held-out test images"),
        "test_per_user": ("200", "held-out test images per user"),
        "calib_fraction": ("0.2", "fraction of a user's remaining images kept for calibration"),
        "sigma": ("1.0", "spread of the Gaussian label popularity on the class ring"),
    },
    "model": {
        "widths": ("16 16 32 32 64 64 128 128", "output channels of each backbone block"),
        "pool_after": ("2 4 6", "1-based blocks followed by 2x2 max pooling"),
        "num_exits": ("6", "early exits M"),
    },
    "global_train": {
        "epochs": ("8", "epochs of joint multi-exit training"),
        "lr": ("0.02", "SGD learning rate"),
        "lr_step": ("6", "decay the rate every lr_step epochs (0 = constant)"),
        "lr_gamma": ("0.1", "decay factor"),
        "momentum": ("0.9", "SGD momentum"),
        "batch_size": ("32", "minibatch size"),
        "weights": ("", "per-exit loss weights 1..M+1 (empty = backbone FLOP fraction)"),
    },
    "personalisation": {
        "mode": ("hard_labels", "hard_labels, self_distillation, self_supervision or custom"),
        "alpha": ("1.0", "supervised weight (mode = custom)"),
        "beta": ("0.0", "distillation weight (mode = custom)"),
        "gamma": ("0.0", "self-supervised weight (mode = custom)"),
        "temperature": ("4.0", "distillation temperature T"),
        "epochs": ("10", "personalisation epochs"),
        "lr": ("0.01", "SGD learning rate"),
        "momentum": ("0.9", "SGD momentum"),
        "batch_size": ("32", "minibatch size"),
    },
    "calibration": {
        "thresholds": ("", "confidence grid (empty = 0.00, 0.05, ..., 1.00)"),
        "tolerance": ("1.0", "allowed accuracy drop in points"),
        "min_exit_rate": ("0.05", "prune exits capturing fewer samples than this"),
        "max_accuracy_gap": ("2.0", "prune exits this many points below the final exit"),
        "latency_mode": ("synthetic", "synthetic (FLOP-proportional) or wall"),
        "seconds_per_flop": ("1e-9", "synthetic latency scale"),
    },
    "orchestrator": {
        "p_expl": ("0.1", "exploration probability per sample"),
        "thr_conf_active": ("0.8", "initial active threshold before calibration"),
        "thr_conf_raised": ("0.95", "threshold installed when drift is detected"),
        "drift_factor": ("0.2", "relative EWMA loss increase counted as high"),
        "drift_window": ("20", "consecutive high evaluations that signal drift"),
        "min_new_samples": ("2048", "new samples that trigger personalisation"),
        "deviation_limit": ("0.1", "active/calibrated threshold gap that triggers personalisation"),
        "ewma_smoothing": ("0.1", "EWMA smoothing factor"),
        "loss_mode": ("self_supervision", "exploration loss: self_supervision, self_distillation, hard_labels"),
    },
    "simulate": {
        "events": ("4000", "samples in the simulated stream"),
        "shift_at": ("2000", "sample index at which the user distribution is re-centred (-1 = never)"),
        "plug_every": ("1000", "samples between device_plugged_in events"),
    },
    "experiment": {
        "sample_counts": ("128 512 2048", "personalisation set sizes for accuracy-vs-samples"),
        "modes": ("hard_labels self_distillation", "personalisation modes compared"),
        "users": ("1", "users evaluated per experiment"),
    },
}

PERSONALISATION_MODES = ("hard_labels", "self_distillation", "self_supervision", "custom")


def defaults_text() -> str:
    lines = []
    for section, keys in DEFAULTS.items():
        lines.append(f"[{section}]")
        for key, (value, doc) in keys.items():
            lines.append(f"# {doc}")
            lines.append(f"{key} = {value}".rstrip())
        lines.append("")
    return "\n".join(lines)


class ExperimentConfig:
    """Typed accessors over the merged (defaults + file + overrides) INI data."""

    def __init__(self, values: Optional[Dict[str, Dict[str, str]]] = None):
        self.values = {s: {k: v for k, (v, _) in keys.items()} for s, keys in DEFAULTS.items()}
        for section, keys in (values or {}).items():
            for key, value in keys.items():
                self.set(section, key, value)
        self.validate()

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        cp = configparser.ConfigParser()
        try:
            with open(path) as f:
                cp.read_file(f)
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except configparser.Error as exc:
            raise ConfigError(f"config file {path}: {exc}") from None
        return cls({s: dict(cp[s]) for s in cp.sections()})

    def set(self, section: str, key: str, value) -> None:
        if section not in DEFAULTS:
            raise ConfigError(f"unknown config section [{section}]")
        if key not in DEFAULTS[section]:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        self.values[section][key] = str(value)

    # typed getters -------------------------------------------------------------------
    def get(self, section, key) -> str:
        return self.values[section][key].strip()

    def _parse(self, section, key, kind):
        raw = self.get(section, key)
        try:
            return kind(raw)
        except ValueError:
            raise ConfigError(f"[{section}] {key} = {raw!r} is not a valid {kind.__name__}") from None

    def get_int(self, section, key) -> int:
        return self._parse(section, key, int)

    def get_float(self, section, key) -> float:
        return self._parse(section, key, float)

    def get_ints(self, section, key) -> List[int]:
        return [self._parse_item(section, key, v, int) for v in self.get(section, key).split()]

    def get_floats(self, section, key) -> List[float]:
        return [self._parse_item(section, key, v, float) for v in self.get(section, key).split()]

    def _parse_item(self, section, key, item, kind):
        try:
            return kind(item)
        except ValueError:
            raise ConfigError(f"[{section}] {key}: {item!r} is not a valid {kind.__name__}") from None

    # derived settings ------------------------------------------------------------------
    @property
    def seed(self) -> int:
        return self.get_int("run", "seed")

    @property
    def out(self) -> Path:
        return Path(self.get("run", "out"))

    @property
    def thresholds(self) -> Tuple[float, ...]:
        grid = self.get_floats("calibration", "thresholds")
        return tuple(grid) if grid else DEFAULT_GRID

    def image_shape(self) -> Tuple[int, int, int]:
        shape = self.get_ints("data", "image_shape")
        if len(shape) != 3 or min(shape) < 1:
            raise ConfigError("[data] image_shape needs three positive integers C H W")
        return tuple(shape)

    def global_train(self) -> GlobalTrainConfig:
        s = "global_train"
        weights = self.get_floats(s, "weights") or None
        return GlobalTrainConfig(weights=weights, epochs=self.get_int(s, "epochs"), lr=self.get_float(s, "lr"),
                                 lr_step=self.get_int(s, "lr_step"), lr_gamma=self.get_float(s, "lr_gamma"),
                                 momentum=self.get_float(s, "momentum"), batch_size=self.get_int(s, "batch_size"),
                                 seed=self.seed + 2)

    def personalisation(self, mode: Optional[str] = None) -> PersonalisationConfig:
        s = "personalisation"
        mode = mode or self.get(s, "mode")
        if mode not in PERSONALISATION_MODES:
            raise ConfigError(f"[{s}] mode must be one of {', '.join(PERSONALISATION_MODES)}")
        common = dict(T=self.get_float(s, "temperature"), epochs=self.get_int(s, "epochs"), lr=self.get_float(s, "lr"),
                      momentum=self.get_float(s, "momentum"), batch_size=self.get_int(s, "batch_size"),
                      seed=self.seed + 3)
        if mode == "custom":
            return PersonalisationConfig(alpha=self.get_float(s, "alpha"), beta=self.get_float(s, "beta"),
                                         gamma=self.get_float(s, "gamma"), **common)
        return getattr(PersonalisationConfig, mode)(**common)

    def orchestrator(self) -> OrchestratorConfig:
        s = "orchestrator"
        mode = self.get(s, "loss_mode")
        if mode not in ("self_supervision", "self_distillation", "hard_labels"):
            raise ConfigError(f"[{s}] unknown loss_mode {mode!r}")
        return OrchestratorConfig(
            p_expl=self.get_float(s, "p_expl"), thr_conf_active=self.get_float(s, "thr_conf_active"),
            thr_conf_raised=self.get_float(s, "thr_conf_raised"), drift_factor=self.get_float(s, "drift_factor"),
            drift_window=self.get_int(s, "drift_window"), min_new_samples=self.get_int(s, "min_new_samples"),
            deviation_limit=self.get_float(s, "deviation_limit"), ewma_smoothing=self.get_float(s, "ewma_smoothing"),
            loss_mode=mode, T=self.get_float("personalisation", "temperature"), seed=self.seed + 4,
        )

    def validate(self) -> None:
        """Build every sub-configuration once so errors surface before any work."""
        if self.get("data", "source") not in ("blobs", "idx"):
            raise ConfigError("[data] source must be blobs or idx")
        if self.get("data", "source") == "idx":
            for key in ("train_images", "train_labels", "pool_images", "pool_labels"):
                if not self.get("data", key):
                    raise ConfigError(f"[data] {key} is required when source = idx")
        if self.get_int("data", "num_classes") < 2:
            raise ConfigError("[data] num_classes must be at least 2")
        self.image_shape()
        for key in ("n_train", "n_test", "pool_size"):
            if self.get_int("data", key) < 1:
                raise ConfigError(f"[data] {key} must be positive")
        if self.get_float("data", "noise") < 0:
            raise ConfigError("[data] noise must be nonnegative")
        if self.get_int("users", "n_users") < 1 or self.get_float("users", "sigma") <= 0:
            raise ConfigError("[users] need n_users >= 1 and sigma > 0")
        if not 0 <= self.get_float("users", "calib_fraction") < 1:
            raise ConfigError("[users] calib_fraction must lie in [0, 1)")
        if not 0 <= self.get_int("users", "test_per_user") < self.get_int("users", "samples_per_user"):
            raise ConfigError("[users] test_per_user must be below samples_per_user")
        widths = self.get_ints("model", "widths")
        if not widths or min(widths) < 1:
            raise ConfigError("[model] widths must be positive integers")
        if any(not 1 <= b <= len(widths) for b in self.get_ints("model", "pool_after")):
            raise ConfigError("[model] pool_after entries must name existing blocks")
        if not 1 <= self.get_int("model", "num_exits") <= len(widths):
            raise ConfigError("[model] num_exits must lie in 1..number of blocks")
        self.global_train()
        self.personalisation()
        for mode in self.get("experiment", "modes").split():
            self.personalisation(mode)
        self.orchestrator()
        if any(not 0 <= t <= 1 for t in self.thresholds):
            raise ConfigError("[calibration] thresholds must lie in [0, 1]")
        if self.get_float("calibration", "tolerance") < 0:
            raise ConfigError("[calibration] tolerance must be nonnegative")
        if self.get("calibration", "latency_mode") not in ("synthetic", "wall"):
            raise ConfigError("[calibration] latency_mode must be synthetic or wall")
        if any(n < 1 for n in self.get_ints("experiment", "sample_counts")):
            raise ConfigError("[experiment] sample_counts must be positive")
        if self.get_int("experiment", "users") < 1:
            raise ConfigError("[experiment] users must be at least 1")
        if self.get_int("simulate", "events") < 1 or self.get_int("simulate", "plug_every") < 1:
            raise ConfigError("[simulate] events and plug_every must be positive")
