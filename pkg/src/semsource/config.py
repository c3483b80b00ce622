"""JSON run configuration: parsing, validation with line diagnostics, hashing."""

from __future__ import annotations

import hashlib
import json
import re
from importlib import resources
from pathlib import Path

from .channel import DegreeDistribution, IrsaConstants, downlink_outage
from .experiment import AXES, SCHEMES, ExperimentConfig


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


REQUIRED = ("num_classes", "feature_dim", "target_gain", "num_devices", "p_pos",
            "query_dim", "slots")
_NUMERIC = {"num_classes": int, "feature_dim": int, "target_gain": float,
            "num_devices": int, "p_pos": float, "query_dim": int, "slots": int,
            "p_err_dl": float, "dl_rate": float, "dl_snr": float, "trials": int,
            "seed": int}
OPTIONAL = ("p_err_dl", "dl_rate", "dl_snr", "degrees", "irsa_constants", "tau",
            "trials", "seed", "fusion_weights", "metadata", "baselines", "sweep",
            "series", "name", "description")


def _line_of(text: str | None, key: str) -> str:
    if not text:
        return ""
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    if not m:
        return ""
    return f" (line {text.count(chr(10), 0, m.start()) + 1})"


def _num(data, key, kind, text):
    v = data[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"field '{key}' must be a number{_line_of(text, key)}")
    if kind is int:
        if float(v) != int(v):
            raise ConfigError(f"field '{key}' must be an integer{_line_of(text, key)}")
        return int(v)
    return float(v)


def parse_config(data: dict, text: str | None = None) -> ExperimentConfig:
    """Validate a configuration mapping and build the experiment config."""
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a JSON object")
    unknown = sorted(set(data) - set(REQUIRED) - set(OPTIONAL))
    if unknown:
        raise ConfigError(f"unknown field '{unknown[0]}'{_line_of(text, unknown[0])}")
    for key in REQUIRED:
        if key not in data:
            raise ConfigError(f"missing required field '{key}'")
    vals = {k: _num(data, k, kind, text) for k, kind in _NUMERIC.items() if k in data}

    has_p = "p_err_dl" in vals
    has_link = "dl_rate" in vals or "dl_snr" in vals
    if has_p == has_link:
        raise ConfigError("give either 'p_err_dl' or both 'dl_rate' and 'dl_snr'")
    if has_link:
        if "dl_rate" not in vals or "dl_snr" not in vals:
            raise ConfigError("'dl_rate' and 'dl_snr' must be given together")
        try:
            p_dl = downlink_outage(vals.pop("dl_rate"), vals.pop("dl_snr"))
        except ValueError as exc:
            raise ConfigError(f"field 'dl_rate'/'dl_snr': {exc}") from None
    else:
        p_dl = vals.pop("p_err_dl")

    kwargs = dict(vals, p_err_dl=p_dl)
    try:
        if "degrees" in data:
            deg = data["degrees"]
            if not isinstance(deg, dict):
                raise ConfigError("field 'degrees' must map replica counts to probabilities")
            kwargs["degrees"] = DegreeDistribution({int(k): v for k, v in deg.items()})
        if "irsa_constants" in data:
            kwargs["irsa_constants"] = IrsaConstants.from_dict(data["irsa_constants"])
    except ConfigError:
        raise
    except (ValueError, TypeError, KeyError) as exc:
        key = "degrees" if "irsa_constants" not in data else "irsa_constants"
        raise ConfigError(f"field '{key}': {exc}{_line_of(text, key)}") from None
    for key in ("tau", "fusion_weights", "metadata"):
        if key in data:
            kwargs[key] = data[key]
    try:
        cfg = ExperimentConfig(**kwargs)
    except (ValueError, TypeError) as exc:
        msg = str(exc)
        field = next((k for k in list(data) if re.match(re.escape(k) + r"\b", msg)), None)
        where = _line_of(text, field) if field else ""
        raise ConfigError(f"{msg}{where}") from None

    baselines = data.get("baselines", [])
    if not isinstance(baselines, list) or any(b not in SCHEMES[1:] for b in baselines):
        raise ConfigError(f"field 'baselines' must list schemes from {SCHEMES[1:]}"
                          f"{_line_of(text, 'baselines')}")
    sw = data.get("sweep")
    if sw is not None:
        if not isinstance(sw, dict) or sw.get("axis") not in AXES \
                or not isinstance(sw.get("values"), list) or not sw["values"]:
            raise ConfigError(f"field 'sweep' needs an 'axis' in {AXES} and nonempty "
                              f"'values'{_line_of(text, 'sweep')}")
    series = data.get("series")
    if series is not None:
        ok = isinstance(series, dict) and len(series) == 1
        if ok:
            (skey, svals), = series.items()
            ok = skey in ("target_gain", "p_pos", "query_dim", "tau") \
                and isinstance(svals, list) and len(svals) > 0
        if not ok:
            raise ConfigError("field 'series' must map one of target_gain, p_pos, "
                              f"query_dim, tau to a nonempty list{_line_of(text, 'series')}")
    return cfg


def load_config_text(text: str, source: str = "<config>") -> dict:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    parse_config(data, text)
    return data


def load_config(path) -> tuple[dict, ExperimentConfig]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    data = load_config_text(text, str(path))
    return data, parse_config(data, text)


def preset_names() -> list:
    files = resources.files("semsource") / "presets"
    return sorted(p.name[:-5] for p in files.iterdir() if p.name.endswith(".json"))


def load_preset(name: str) -> tuple[dict, ExperimentConfig]:
    f = resources.files("semsource") / "presets" / f"{name}.json"
    if not f.is_file():
        raise ConfigError(f"unknown preset '{name}'; available: {', '.join(preset_names())}")
    text = f.read_text()
    data = load_config_text(text, f"preset {name}")
    return data, parse_config(data, text)


def canonical_json(data) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def config_hash(data: dict) -> str:
    """sha256 of the canonical JSON; independent of key order in the file."""
    return hashlib.sha256(canonical_json(data).encode()).hexdigest()
