"""
Run Configuration
=================
YAML run configuration for the CLI: loading, bundled presets, validation with
field/line diagnostics, and conversion into the library's config objects.

Sections: stft, algorithm, scenario, evaluate, attmap, io, seed / seeds.
"""

import json
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np
import yaml
from loguru import logger

import config
from extraction_engine import AlgoConfig, InitSpec
from extraction_errors import ConfigError
from stft_service import StftConfig

SECTIONS = {"stft", "algorithm", "scenario", "evaluate", "attmap", "io", "seed", "seeds"}
PILOT_KINDS = {"none", "oracle", "mpdr", "file"}


def _line_marks(text: str) -> Dict[str, int]:
    """Dotted key path -> 1-based source line, from the YAML node tree."""
    marks: Dict[str, int] = {}

    def walk(node, prefix: str):
        if isinstance(node, yaml.MappingNode):
            for key_node, value_node in node.value:
                path = f"{prefix}.{key_node.value}" if prefix else str(key_node.value)
                marks[path] = key_node.start_mark.line + 1
                walk(value_node, path)
        elif isinstance(node, yaml.SequenceNode):
            for i, item in enumerate(node.value):
                marks[f"{prefix}[{i}]"] = item.start_mark.line + 1
                walk(item, f"{prefix}[{i}]")

    root = yaml.compose(text, Loader=yaml.SafeLoader)
    if root is not None:
        walk(root, "")
    return marks


def preset_path(name: str) -> str:
    path = os.path.join(config.PRESETS_DIR, f"{name}.yaml")
    if not os.path.exists(path):
        available = sorted(f[:-5] for f in os.listdir(config.PRESETS_DIR) if f.endswith(".yaml"))
        raise ConfigError(f"unknown preset '{name}' (available: {', '.join(available)})", field="--preset")
    return path


@dataclass
class RunConfig:
    raw: Dict[str, Any]
    source: str = "<defaults>"
    marks: Dict[str, int] = field(default_factory=dict)

    # ----------------------------------------------------------------
    # Loading
    # ----------------------------------------------------------------
    @classmethod
    def load(cls, path: Optional[str] = None, preset: Optional[str] = None) -> "RunConfig":
        raw: Dict[str, Any] = {}
        marks: Dict[str, int] = {}
        source = "<defaults>"
        if preset:
            raw, marks = cls._read(preset_path(preset))
            source = f"preset:{preset}"
        if path:
            user, user_marks = cls._read(path)
            raw = _merge(raw, user)
            marks.update(user_marks)
            source = path
        cfg = cls(raw=raw, source=source, marks=marks)
        cfg.validate()
        logger.debug(f"[CLI] configuration loaded from {source}")
        return cfg

    @staticmethod
    def _read(path: str):
        try:
            with open(path, "r", encoding="utf-8") as f:
                text = f.read()
        except OSError as exc:
            raise ConfigError(f"cannot read configuration: {exc}", field=path) from exc
        try:
            data = yaml.safe_load(text) or {}
            marks = _line_marks(text)
        except yaml.YAMLError as exc:
            line = getattr(getattr(exc, "problem_mark", None), "line", None)
            raise ConfigError(f"invalid YAML: {exc}", field=path, line=None if line is None else line + 1) from exc
        if not isinstance(data, dict):
            raise ConfigError("top level must be a mapping", field=path)
        return data, marks

    def error(self, message: str, path: str) -> ConfigError:
        return ConfigError(message, field=path, line=self.marks.get(path))

    def section(self, name: str) -> Dict[str, Any]:
        value = self.raw.get(name) or {}
        if not isinstance(value, dict):
            raise self.error("must be a mapping", name)
        return value

    # ----------------------------------------------------------------
    # Validation
    # ----------------------------------------------------------------
    def validate(self) -> "RunConfig":
        for key in self.raw:
            if key not in SECTIONS:
                raise self.error(f"unknown section (expected one of {', '.join(sorted(SECTIONS))})", key)

        try:
            self.stft.validate()
        except ConfigError as exc:
            raise self.error(exc.reason, exc.field or "stft") from exc

        algo = self.section("algorithm")
        name = algo.get("name", "block_auxive")
        if name not in config.ALGORITHM_NAMES:
            raise self.error(f"unknown algorithm '{name}' (available: {', '.join(config.ALGORITHM_NAMES)})",
                             "algorithm.name")
        for key in ("n_blocks", "block_frames", "max_iter"):
            if key in algo and (not isinstance(algo[key], int) or algo[key] < 1):
                raise self.error("must be a positive integer", f"algorithm.{key}")
        for key in ("step_size", "tol", "early_stop_tol"):
            if key in algo and not (isinstance(algo[key], (int, float)) and algo[key] > 0):
                raise self.error("must be a positive number", f"algorithm.{key}")
        pilot = self.pilot
        if pilot["kind"] not in PILOT_KINDS:
            raise self.error(f"unknown pilot kind (expected one of {', '.join(sorted(PILOT_KINDS))})",
                             "algorithm.pilot.kind")
        if name.startswith("piloted") and pilot["kind"] == "none":
            raise self.error(f"'{name}' needs a pilot", "algorithm.pilot")

        seeds = self.raw.get("seeds")
        if seeds is not None and (not isinstance(seeds, list) or not all(isinstance(s, int) for s in seeds)):
            raise self.error("must be a list of integers", "seeds")
        return self

    # ----------------------------------------------------------------
    # Typed views
    # ----------------------------------------------------------------
    @property
    def stft(self) -> StftConfig:
        s = self.section("stft")
        return StftConfig(
            fft_len=int(s.get("fft_len", config.FFT_LEN)),
            hop=int(s.get("hop", config.HOP)),
            window_id=str(s.get("window", config.WINDOW)),
        )

    @property
    def algorithm_name(self) -> str:
        return self.section("algorithm").get("name", "block_auxive")

    @property
    def pilot(self) -> Dict[str, Any]:
        pilot = dict(self.section("algorithm").get("pilot") or {})
        pilot.setdefault("kind", "none")
        pilot.setdefault("delta", config.PILOT_DELTA)
        return pilot

    def algo_config(self, n_frames: int, mics: Optional[np.ndarray] = None) -> AlgoConfig:
        """AlgoConfig for a mixture of n_frames frames; block_frames is resolved into n_blocks here."""
        a = self.section("algorithm")
        if "n_blocks" in a:
            n_blocks = int(a["n_blocks"])
        else:
            n_blocks = max(n_frames // int(a.get("block_frames", config.BLOCK_FRAMES)), 1)
        init_cfg = dict(a.get("init") or {})
        init = InitSpec(
            kind=init_cfg.get("kind", "unit_vector"),
            channel=int(init_cfg.get("channel", 0)),
            azimuth_deg=float(init_cfg.get("azimuth_deg", 0.0)),
            elevation_deg=float(init_cfg.get("elevation_deg", 0.0)),
            point=init_cfg.get("point"),
            mics=mics,
            vectors=init_cfg.get("vectors"),
        )
        return AlgoConfig(
            n_blocks=n_blocks,
            max_iter=a.get("max_iter"),
            step_size=float(a.get("step_size", config.STEP_SIZE)),
            tol=float(a.get("tol", config.GRADIENT_TOL)),
            early_stop=bool(a.get("early_stop", False)),
            early_stop_tol=float(a.get("early_stop_tol", config.AUX_EARLY_STOP_TOL)),
            init=init,
            reference_channel=int(a.get("reference_channel", config.REFERENCE_CHANNEL)),
        )

    def seeds(self, override: Optional[int] = None) -> List[int]:
        if override is not None:
            return [override]
        if self.raw.get("seeds"):
            return list(self.raw["seeds"])
        return [int(self.raw.get("seed", 0))]

    def echo(self) -> Dict[str, Any]:
        """Configuration echoed into every output artifact."""
        return {"source": self.source, "config": self.raw}

    def echo_line(self) -> str:
        return "# config=" + json.dumps(self.echo(), default=str, separators=(",", ":"))


def _merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out
