"""Plain-text run configuration: `key = value` lines under `[section]` headers.

Comments start with '#'; duplicate keys and unknown keys are rejected with
line numbers; every key has a default, so an empty file is a valid config.
Keys may be given without a section header when the name is unique across the
schema.  The raw text is kept for verbatim echo into run reports.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .network import (FUSION_HIDDEN, ConvSpec, GLOBAL_WIDTH, LOCAL_WIDTH,
                      PathwaySpec, PoolSpec, ReluSpec, TrainConfig)
from .synth import SceneSpec


class ConfigError(ValueError):
    """Malformed configuration file."""


DEFAULT_LOCAL_LAYERS = ("conv3x16, relu, conv3x16, relu, pool2, "
                        "conv3x32, relu, conv3x32, relu, pool2, "
                        "conv3x64, relu, pool2")
DEFAULT_GLOBAL_LAYERS = "conv7x16s2, relu, pool2, conv5x32, relu, pool2, conv3x32, relu, pool4"

_CONV_RE = re.compile(r"^conv(\d+)x(\d+)(?:s(\d+))?(?:p(\d+))?$")
_POOL_RE = re.compile(r"^pool(\d+)(?:s(\d+))?$")


def parse_layers(text: str) -> tuple:
    """Layer DSL -> specs: convKxN[sS][pP] (pad defaults to K//2), poolK[sS], relu."""
    layers = []
    for token in (t.strip().lower() for t in text.split(",")):
        if not token:
            continue
        if token == "relu":
            layers.append(ReluSpec())
            continue
        m = _CONV_RE.match(token)
        if m:
            k, n, s, p = m.groups()
            layers.append(ConvSpec(int(n), int(k), int(s) if s else 1,
                                   int(p) if p is not None else None))
            continue
        m = _POOL_RE.match(token)
        if m:
            k, s = m.groups()
            layers.append(PoolSpec(int(k), int(s) if s else None))
            continue
        raise ConfigError(f"unrecognised layer token '{token}'")
    if not layers:
        raise ConfigError("layer list is empty")
    return tuple(layers)


def _positive(v):
    if v <= 0:
        raise ValueError("must be positive")


def _nonneg(v):
    if v < 0:
        raise ValueError("must be nonnegative")


def _unit(v):
    if not (0.0 <= v <= 1.0):
        raise ValueError("must lie in [0, 1]")


def _choice(*options):
    def check(v):
        if v not in options:
            raise ValueError(f"must be one of {options}")
    return check


def _eps_range(v):
    if not (0.0 < v < 1e-3):
        raise ValueError("must lie in (0, 0.001)")


def _step_range(v):
    if not (0.0 < v <= 0.5):
        raise ValueError("must lie in (0, 0.5]")


# section -> key -> (type tag, default, validator or None)
_SCHEMA = {
    "model": {
        "variant": ("str", "dual", _choice("dual", "local", "global")),
        "local_layers": ("str", DEFAULT_LOCAL_LAYERS, None),
        "local_embed": ("int", 256, _positive),
        "global_layers": ("str", DEFAULT_GLOBAL_LAYERS, None),
        "global_embed": ("int", 256, _positive),
        "fusion_hidden": ("str", "512, 512", None),
        "init_seed": ("int", 0, None),
    },
    "train": {
        "batch_size": ("int", 10, _positive),
        "learning_rate": ("float", 1e-4, _nonneg),
        "momentum": ("float", 0.9, _unit),
        "weight_decay": ("float", 5e-4, _nonneg),
        "epochs": ("int", 30, _positive),
        "seed": ("int", 0, None),
        "clamp_eps": ("float", 1e-7, _eps_range),
        "reduction": ("str", "sum", _choice("sum", "mean")),
        "stop_loss": ("float", 0.0, _nonneg),  # 0 disables early stopping
        "samples_per_scene": ("int", 128, _positive),
        "positive_fraction": ("float", 0.5, _unit),
        "sampler": ("str", "random", _choice("random", "grid")),
    },
    "eval": {
        "rho": ("int", 3, _nonneg),
        "aggregate": ("str", "mean_f", _choice("mean_f", "pooled")),
        "threshold_step": ("float", 0.01, _step_range),
    },
    "tree": {
        "grid_step": ("float", 0.01, _positive),
        "tol": ("float", 1e-4, _positive),
        "max_cycles": ("int", 20, _positive),
        "min_houses": ("int", 15, _positive),
    },
    "count": {
        "threshold": ("float", 0.5, _unit),
        "erode_radius": ("int", 1, _nonneg),
        "erode_iterations": ("int", 1, _nonneg),
        "connectivity": ("int", 8, _choice(4, 8)),
        "iou_threshold": ("float", 0.5, _unit),
        "strict_iou": ("bool", True, None),
    },
    "scene": {
        "width": ("int", 512, None),
        "height": ("int", 512, None),
        "count": ("int", 1, _positive),
        "houses_min": ("int", 45, _nonneg),
        "houses_max": ("int", 75, _nonneg),
        "house_px_min": ("int", 8, _positive),
        "house_px_max": ("int", 16, _positive),
        "clusters": ("int", 2, _nonneg),
        "cluster_radius": ("float", 80.0, _positive),
        "texture": ("float", 0.5, _nonneg),
        "occluders": ("float", 0.15, _unit),
    },
}


def _convert(raw: str, kind: str):
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind == "bool":
        lowered = raw.lower()
        if lowered in ("true", "yes", "1", "on"):
            return True
        if lowered in ("false", "no", "0", "off"):
            return False
        raise ValueError("not a boolean")
    return raw


@dataclass
class RunConfig:
    """Typed view of a config file plus its verbatim text for provenance."""

    values: dict  # section -> key -> typed value
    raw_text: str
    origin: str = "<defaults>"

    def get(self, section: str, key: str):
        return self.values[section][key]

    # -- derived objects -----------------------------------------------------

    def model_specs(self):
        """(local PathwaySpec | None, global PathwaySpec | None, fusion widths)."""
        variant = self.get("model", "variant")
        local = None
        if variant in ("dual", "local"):
            local = PathwaySpec(parse_layers(self.get("model", "local_layers")),
                                embed_width=self.get("model", "local_embed"),
                                input_width=LOCAL_WIDTH)
        global_ = None
        if variant in ("dual", "global"):
            global_ = PathwaySpec(parse_layers(self.get("model", "global_layers")),
                                  embed_width=self.get("model", "global_embed"),
                                  input_width=GLOBAL_WIDTH)
        hidden_text = self.get("model", "fusion_hidden").strip()
        hidden = tuple(int(v) for v in hidden_text.split(",") if v.strip()) \
            if hidden_text else FUSION_HIDDEN
        if any(v <= 0 for v in hidden):
            raise ConfigError("fusion_hidden widths must be positive")
        return local, global_, hidden

    def train_config(self, epochs: int | None = None) -> TrainConfig:
        stop = self.get("train", "stop_loss")
        return TrainConfig(
            batch_size=self.get("train", "batch_size"),
            learning_rate=self.get("train", "learning_rate"),
            momentum=self.get("train", "momentum"),
            weight_decay=self.get("train", "weight_decay"),
            epochs=epochs if epochs is not None else self.get("train", "epochs"),
            seed=self.get("train", "seed"),
            clamp_eps=self.get("train", "clamp_eps"),
            reduction=self.get("train", "reduction"),
            stop_loss=stop if stop > 0 else None,
        )

    def scene_spec(self, seed: int) -> SceneSpec:
        return SceneSpec(
            width=self.get("scene", "width"),
            height=self.get("scene", "height"),
            house_count=(self.get("scene", "houses_min"), self.get("scene", "houses_max")),
            house_px=(self.get("scene", "house_px_min"), self.get("scene", "house_px_max")),
            clusters=self.get("scene", "clusters"),
            cluster_radius=self.get("scene", "cluster_radius"),
            texture=self.get("scene", "texture"),
            occluders=self.get("scene", "occluders"),
            seed=seed,
        )

    def eval_thresholds(self) -> tuple:
        step = self.get("eval", "threshold_step")
        n = int(round(1.0 / step)) - 1
        return tuple(round(i * step, 10) for i in range(1, n + 1))


def default_config() -> RunConfig:
    return parse_config_text("", origin="<defaults>")


def parse_config_text(text: str, origin: str = "<config>") -> RunConfig:
    values = {section: {key: spec[1] for key, spec in keys.items()}
              for section, keys in _SCHEMA.items()}
    seen: dict = {}
    section = None
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip().lower()
            if section not in _SCHEMA:
                raise ConfigError(f"{origin}:{lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value'")
        key, _, raw_value = line.partition("=")
        key = key.strip().lower()
        raw_value = raw_value.strip()
        if section is not None:
            if key not in _SCHEMA[section]:
                raise ConfigError(f"{origin}:{lineno}: unknown key '{key}' in [{section}]")
            target = section
        else:
            owners = [s for s, keys in _SCHEMA.items() if key in keys]
            if not owners:
                raise ConfigError(f"{origin}:{lineno}: unknown key '{key}'")
            if len(owners) > 1:
                raise ConfigError(f"{origin}:{lineno}: key '{key}' is ambiguous without "
                                  f"a section header (in {sorted(owners)})")
            target = owners[0]
        if (target, key) in seen:
            raise ConfigError(f"{origin}:{lineno}: duplicate key '{key}' "
                              f"(lines {seen[(target, key)]} and {lineno})")
        seen[(target, key)] = lineno
        kind, _, validator = _SCHEMA[target][key]
        try:
            value = _convert(raw_value, kind)
        except ValueError:
            raise ConfigError(f"{origin}:{lineno}: key '{key}' expects a {kind}, "
                              f"got '{raw_value}'") from None
        if validator is not None:
            try:
                validator(value)
            except ValueError as exc:
                raise ConfigError(f"{origin}:{lineno}: key '{key}': {exc}") from None
        values[target][key] = value

    # cross-key checks
    if values["scene"]["houses_max"] < values["scene"]["houses_min"]:
        raise ConfigError(f"{origin}: houses_max < houses_min")
    if values["scene"]["house_px_max"] < values["scene"]["house_px_min"]:
        raise ConfigError(f"{origin}: house_px_max < house_px_min")
    return RunConfig(values=values, raw_text=text, origin=origin)


def parse_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text, origin=str(path))
