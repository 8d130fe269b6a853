"""Run configuration: one ``key = value`` file with sections plus command-line overrides.

Example::

    [train]
    steps = 2000
    seed = 7

    [network]
    patch_size = 32, 32, 32

Keys may also be written fully qualified at the top of the file
(``train.seed = 7``). Unknown sections or keys are errors.
"""
from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import dataclass, field, fields

from odseg.data import AugmentConfig, PhantomSpec
from odseg.network import NetworkConfig
from odseg.postprocess import PostprocessConfig
from odseg.training import TrainSettings


class ConfigError(ValueError):
    pass


@dataclass
class DataSettings:
    num_cases: int = 32
    num_test: int = 8
    seed: int = 0


@dataclass
class MergeSettings:
    label: int = 2
    mode: str = "replace"


@dataclass
class Paths:
    data_dir: str = "data"
    manifest: str = ""  # default: <data_dir>/manifest.tsv
    run_dir: str = "run"
    checkpoint: str = ""  # default: <run_dir>/model.odsc
    resume: str = ""
    predictions_dir: str = "predictions"
    postprocess_dir: str = "postprocessed"
    merge_a: str = ""
    merge_b: str = ""
    merge_out: str = "merged"
    labels_dir: str = ""  # labels evaluated by `evaluate`; default: predictions_dir
    label_suffix: str = "_pred"
    report_dir: str = "report"
    overlay_dir: str = "overlay"
    case: str = ""  # overlay: case id; empty means every case

    def resolved_manifest(self):
        return self.manifest or f"{self.data_dir}/manifest.tsv"

    def resolved_checkpoint(self):
        return self.checkpoint or f"{self.run_dir}/model.odsc"


SECTIONS = {
    "network": NetworkConfig,
    "augment": AugmentConfig,
    "postprocess": PostprocessConfig,
    "phantom": PhantomSpec,
    "train": TrainSettings,
    "data": DataSettings,
    "merge": MergeSettings,
    "paths": Paths,
}
# settings not exposed through the file
_HIDDEN = {("phantom", "profile")}


@dataclass
class RunConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    postprocess: PostprocessConfig = field(default_factory=PostprocessConfig)
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    train: TrainSettings = field(default_factory=TrainSettings)
    data: DataSettings = field(default_factory=DataSettings)
    merge: MergeSettings = field(default_factory=MergeSettings)
    paths: Paths = field(default_factory=Paths)

    def as_flat(self):
        out = {}
        for section in SECTIONS:
            obj = getattr(self, section)
            for f in fields(obj):
                if (section, f.name) not in _HIDDEN:
                    out[f"{section}.{f.name}"] = getattr(obj, f.name)
        return out

    def dump(self) -> str:
        lines = []
        for section in SECTIONS:
            lines.append(f"[{section}]")
            obj = getattr(self, section)
            for f in fields(obj):
                if (section, f.name) not in _HIDDEN:
                    lines.append(f"{f.name} = {format_value(getattr(obj, f.name))}")
            lines.append("")
        return "\n".join(lines)


def format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(format_value(x) for x in v)
    if isinstance(v, dict):
        return ", ".join(f"{k}:{x}" for k, x in v.items())
    return str(v)


def _parse_scalar(text, kind):
    if kind is bool:
        low = text.lower()
        if low in ("true", "yes", "on", "1"):
            return True
        if low in ("false", "no", "off", "0"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    return kind(text)


def parse_value(text: str, default, annotation):
    text = text.strip()
    if text.lower() == "none" and (default is None or "None" in str(annotation)):
        return None
    if isinstance(default, bool):
        return _parse_scalar(text, bool)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, dict):
        out = {}
        for item in filter(None, (s.strip() for s in text.split(","))):
            k, _, v = item.partition(":")
            out[int(k)] = float(v)
        return out
    if isinstance(default, (tuple, list)) or "tuple" in str(annotation):
        parts = [p.strip() for p in text.split(",") if p.strip()]
        sample = default[0] if default else 0
        kind = float if isinstance(sample, float) else int
        vals = []
        for p in parts:
            try:
                vals.append(kind(p))
            except ValueError:
                vals.append(float(p))
        return tuple(vals)
    return text


def _field_map(cls):
    hints = typing.get_type_hints(cls)
    out = {}
    for f in fields(cls):
        if f.default is not dataclasses.MISSING:
            default = f.default
        else:
            default = f.default_factory()
        out[f.name] = (default, hints.get(f.name))
    return out


def _split_key(key):
    section, _, name = key.partition(".")
    if not name or section not in SECTIONS:
        raise ConfigError(f"unknown key {key!r}")
    return section, name


def load_config(path=None, overrides=None) -> RunConfig:
    """Read ``path`` (optional) then apply ``overrides`` (``{"train.seed": "9"}``)."""
    raw = {}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None, default_section="__top__",
                                           delimiters=("=",), comment_prefixes=("#", ";"))
        parser.optionxform = str
        try:
            with open(path) as fh:
                parser.read_string("[__top__]\n" + fh.read(), source=str(path))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
        for key, value in parser.defaults().items():
            raw[key] = value
        for section in parser.sections():
            if section not in SECTIONS:
                raise ConfigError(f"unknown section [{section}]")
            for key, value in parser.items(section, raw=True):
                if key in parser.defaults():
                    continue
                raw[f"{section}.{key}"] = value
    for key, value in (overrides or {}).items():
        raw[key] = str(value)

    per_section = {s: {} for s in SECTIONS}
    for key, value in raw.items():
        section, name = _split_key(key)
        fmap = _field_map(SECTIONS[section])
        if name not in fmap or (section, name) in _HIDDEN:
            raise ConfigError(f"unknown key {key!r}")
        default, annotation = fmap[name]
        try:
            per_section[section][name] = parse_value(value, default, annotation)
        except ValueError as exc:
            raise ConfigError(f"cannot parse {key} = {value!r}: {exc}") from None
    try:
        return RunConfig(**{s: SECTIONS[s](**kw) for s, kw in per_section.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
