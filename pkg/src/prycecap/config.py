"""JSON instance configuration."""
from __future__ import annotations

import json
from dataclasses import fields
from pathlib import Path
from typing import Any, Mapping

from .instance import Firm, Grids, MarketInstance
from .probkit import Integrator, distribution_from_dict, value_model_from_dict, weight_from_dict


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending field path."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


def _section(doc: Mapping[str, Any], key: str, required: bool = False) -> Mapping[str, Any]:
    value = doc.get(key)
    if value is None:
        if required:
            raise ConfigError(key, "missing")
        return {}
    if not isinstance(value, Mapping):
        raise ConfigError(key, "must be an object")
    return value


def _number(value, path: str, minimum: float | None = None) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(path, f"must be a number, got {value!r}")
    if minimum is not None and not value >= minimum:
        raise ConfigError(path, f"must be >= {minimum:g}")
    return float(value)


def _parse_firm(spec, k: int) -> Firm:
    path = f"firms[{k}]"
    if not isinstance(spec, Mapping):
        raise ConfigError(path, "must be an object")
    if "dist" not in spec:
        raise ConfigError(f"{path}.dist", "missing")
    try:
        dist = distribution_from_dict(spec["dist"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}.dist", str(exc)) from None
    kappa = _number(spec.get("kappa", 0.0), f"{path}.kappa", 0.0)
    try:
        weight = weight_from_dict(spec.get("weight", {"type": "full"}), dist)
        weight.validate(dist)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}.weight", str(exc)) from None
    return Firm(dist, weight, kappa)


def _parse_int_fields(section: Mapping[str, Any], cls, name: str, floats=()) -> dict[str, Any]:
    known = {f.name for f in fields(cls)}
    out: dict[str, Any] = {}
    for key, value in section.items():
        path = f"{name}.{key}"
        if key not in known:
            raise ConfigError(path, "unknown field")
        if key in floats:
            out[key] = _number(value, path)
        elif key == "method":
            out[key] = value
        else:
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(path, f"must be an integer, got {value!r}")
            if key != "seed" and value < 1:
                raise ConfigError(path, "must be >= 1")
            if key == "seed" and value < 0:
                raise ConfigError(path, "must be >= 0")
            out[key] = value
    return out


def instance_from_dict(doc: Mapping[str, Any], seed: int | None = None) -> MarketInstance:
    """Build a market instance; ``seed`` overrides ``integration.seed``."""
    if not isinstance(doc, Mapping):
        raise ConfigError("<root>", "must be an object")
    firms_spec = doc.get("firms")
    if not isinstance(firms_spec, list) or not firms_spec:
        raise ConfigError("firms", "must be a nonempty list")
    firms = tuple(_parse_firm(f, k) for k, f in enumerate(firms_spec))
    try:
        values = value_model_from_dict(_section(doc, "values", required=True), len(firms))
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError("values", str(exc)) from None
    integ = _parse_int_fields(_section(doc, "integration"), Integrator, "integration",
                              floats=("tolerance",))
    if seed is not None:
        integ["seed"] = int(seed)
    try:
        integrator = Integrator(**integ)
    except ValueError as exc:
        raise ConfigError("integration", str(exc)) from None
    grids = Grids(**_parse_int_fields(_section(doc, "grids"), Grids, "grids"))
    try:
        return MarketInstance(firms, values, integrator, grids)
    except ValueError as exc:
        raise ConfigError("firms", str(exc)) from None


def load_instance(path: str | Path, seed: int | None = None) -> MarketInstance:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(str(path), f"cannot read ({exc.strerror})") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(str(path), f"invalid JSON ({exc.msg} at line {exc.lineno})") from None
    return instance_from_dict(doc, seed)


def instance_to_dict(inst: MarketInstance) -> dict[str, Any]:
    integ = inst.integrator
    return {
        "firms": [{"dist": f.dist.to_dict(), "weight": f.weight.to_dict(), "kappa": f.kappa}
                  for f in inst.firms],
        "values": inst.values.to_dict(),
        "integration": {"method": integ.method, "nodes": integ.nodes, "draws": integ.draws,
                        "seed": integ.seed, "order": integ.order},
        "grids": {f.name: getattr(inst.grids, f.name) for f in fields(Grids)},
    }
