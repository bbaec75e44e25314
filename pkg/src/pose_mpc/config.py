"""Run configuration: an INI file with one section per module.

Unknown sections or keys are rejected. The MPC physical parameters
(``tau``, ``horizon``, ``q_scale``, ``r_scale``, ``kappa``) have no defaults
and must be written out.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .harness import VARIANTS, ExperimentSpec
from .kinematics import ConfigurationError
from .trajectory import DRIFT_DIAG


class ConfigError(ConfigurationError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.field = path


def _float(v):
    return float(v)


def _int(v):
    return int(v)


def _bool(v):
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _floats(v):
    return tuple(float(x) for x in str(v).replace(",", " ").split())


def _ints(v):
    return tuple(int(x) for x in str(v).replace(",", " ").split())


def _words(v):
    return tuple(x.strip() for x in str(v).split(",") if x.strip())


_REQUIRED = object()

# section -> key -> (parser, default)
SCHEMA = {
    "kinematics": {
        "chain": (str, "reference"),
        "limits": (str, ""),
    },
    "trajectory": {
        "kind": (str, "curve-B"),
        "steps": (_int, 500),
        "file": (str, ""),
        "predictor": (str, "oracle-nominal"),
    },
    "disturbance": {
        "q": (_float, _REQUIRED),
        "sigma_base": (_floats, DRIFT_DIAG),
        "sigma_units": (str, "variance"),
    },
    "mpc": {
        "q_scale": (_float, _REQUIRED),
        "r_scale": (_float, _REQUIRED),
        "kappa": (_float, _REQUIRED),
        "horizon": (_int, _REQUIRED),
        "tau": (_float, _REQUIRED),
    },
    "planner": {
        "candidates": (_int, 12),
        "radius": (_float, 0.1),
        "include_base": (_bool, True),
        "period": (_int, 5),
        "e0_mode": (str, "recompute"),
        "tie_rule": (str, "prefer-current"),
    },
    "experiment": {
        "variants": (_words, ("PO-HU",)),
        "trials": (_int, 1),
        "seed": (_int, 0),
        "output": (str, "results"),
        "threads": (_int, 1),
        "diagnostics": (_bool, False),
    },
    "bench": {
        "candidates": (_ints, (1, 12)),
        "horizons": (_ints, (3, 5, 8)),
        "threads": (_ints, (1,)),
        "plans": (_int, 500),
    },
}


def _check(cond, path, message):
    if not cond:
        raise ConfigError(path, message)


@dataclass
class RunConfig:
    values: dict
    base_dir: Path = field(default_factory=Path.cwd)

    def get(self, section, key):
        return self.values[section][key]

    def resolve(self, raw: str) -> str | None:
        if not raw:
            return None
        p = Path(raw)
        return str(p if p.is_absolute() else self.base_dir / p)

    def experiment_spec(self, variant: str | None = None) -> ExperimentSpec:
        v = self.values
        chain = v["kinematics"]["chain"]
        return ExperimentSpec(
            trajectory=v["trajectory"]["kind"],
            predictor=v["trajectory"]["predictor"],
            q_scale=v["mpc"]["q_scale"],
            q=v["disturbance"]["q"],
            H=v["mpc"]["horizon"],
            tau=v["mpc"]["tau"],
            kappa=v["mpc"]["kappa"],
            r_scale=v["mpc"]["r_scale"],
            variant=variant or v["experiment"]["variants"][0],
            trials=v["experiment"]["trials"],
            base_seed=v["experiment"]["seed"],
            T=v["trajectory"]["steps"],
            candidates=v["planner"]["candidates"],
            radius=v["planner"]["radius"],
            include_base=v["planner"]["include_base"],
            period=v["planner"]["period"],
            e0_mode=v["planner"]["e0_mode"],
            threads=v["experiment"]["threads"],
            sigma_base=tuple(v["disturbance"]["sigma_base"]),
            sigma_units=v["disturbance"]["sigma_units"],
            trajectory_file=self.resolve(v["trajectory"]["file"]),
            chain_file=None if chain == "reference" else self.resolve(chain),
            limits_file=self.resolve(v["kinematics"]["limits"]),
        )

    def to_mapping(self) -> dict:
        """JSON-friendly echo that :func:`from_mapping` parses back to an equal config."""
        out = {}
        for section, keys in self.values.items():
            out[section] = {k: list(val) if isinstance(val, tuple) else val for k, val in keys.items()}
        return out

    def digest(self) -> str:
        blob = json.dumps(self.to_mapping(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _text(value) -> str:
    if isinstance(value, (list, tuple)):
        return ", ".join(str(v) for v in value)
    return str(value)


def from_mapping(mapping: dict, base_dir=None) -> RunConfig:
    """Validate a ``{section: {key: value}}`` mapping (values may be strings)."""
    values = {}
    for section in mapping:
        _check(section in SCHEMA, section, "unknown section")
    for section, keys in SCHEMA.items():
        given = mapping.get(section, {})
        for key in given:
            _check(key in keys, f"{section}.{key}", "unknown key")
        parsed = {}
        for key, (parse, default) in keys.items():
            path = f"{section}.{key}"
            if key in given:
                try:
                    parsed[key] = parse(_text(given[key]))
                except ValueError as exc:
                    raise ConfigError(path, str(exc)) from None
            else:
                _check(default is not _REQUIRED, path, "required value missing")
                parsed[key] = default
        values[section] = parsed
    cfg = RunConfig(values, Path(base_dir) if base_dir is not None else Path.cwd())
    _validate(cfg)
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(str(path), f"parse error: {exc}") from None
    mapping = {s: dict(parser.items(s)) for s in parser.sections()}
    return from_mapping(mapping, base_dir=path.parent)


def _validate(cfg: RunConfig):
    v = cfg.values
    m = v["mpc"]
    _check(m["q_scale"] >= 0, "mpc.q_scale", "must be >= 0")
    _check(m["r_scale"] > 0, "mpc.r_scale", "must be > 0")
    _check(m["kappa"] >= 0, "mpc.kappa", "must be >= 0")
    _check(1 <= m["horizon"] <= 200, "mpc.horizon", "must be in [1, 200]")
    _check(0 < m["tau"] <= 10, "mpc.tau", "must be in (0, 10]")
    d = v["disturbance"]
    _check(d["q"] >= 0, "disturbance.q", "must be >= 0")
    _check(len(d["sigma_base"]) == 3 and min(d["sigma_base"]) >= 0,
           "disturbance.sigma_base", "needs three non-negative numbers")
    _check(d["sigma_units"] in ("variance", "stddev"), "disturbance.sigma_units",
           "must be variance or stddev")
    t = v["trajectory"]
    _check(t["kind"] in ("curve-A", "curve-B", "file"), "trajectory.kind",
           "must be curve-A, curve-B or file")
    _check(t["steps"] >= 2, "trajectory.steps", "must be >= 2")
    _check(t["predictor"] in ("oracle-nominal", "constant-velocity"), "trajectory.predictor",
           "must be oracle-nominal or constant-velocity")
    if t["kind"] == "file":
        _check(bool(t["file"]), "trajectory.file", "required when kind = file")
    for section, key in (("trajectory", "file"), ("kinematics", "limits")):
        raw = v[section][key]
        if raw:
            _check(Path(cfg.resolve(raw)).is_file(), f"{section}.{key}", f"no such file {raw!r}")
    chain = v["kinematics"]["chain"]
    if chain != "reference":
        _check(Path(cfg.resolve(chain)).is_file(), "kinematics.chain", f"no such file {chain!r}")
    p = v["planner"]
    _check(p["candidates"] >= 1, "planner.candidates", "must be >= 1")
    _check(p["radius"] > 0, "planner.radius", "must be > 0")
    _check(p["period"] >= 1, "planner.period", "must be >= 1")
    _check(p["e0_mode"] in ("recompute", "fixed"), "planner.e0_mode", "must be recompute or fixed")
    _check(p["tie_rule"] == "prefer-current", "planner.tie_rule", "only prefer-current is supported")
    e = v["experiment"]
    _check(len(e["variants"]) >= 1, "experiment.variants", "at least one variant")
    for name in e["variants"]:
        _check(name in VARIANTS, "experiment.variants", f"unknown variant {name!r}")
    _check(e["trials"] >= 1, "experiment.trials", "must be >= 1")
    _check(e["seed"] >= 0, "experiment.seed", "must be >= 0")
    _check(e["threads"] >= 1, "experiment.threads", "must be >= 1")
    b = v["bench"]
    _check(len(b["candidates"]) >= 1 and min(b["candidates"]) >= 1, "bench.candidates", "positive counts")
    _check(len(b["horizons"]) >= 1 and min(b["horizons"]) >= 1, "bench.horizons", "positive horizons")
    _check(len(b["threads"]) >= 1 and min(b["threads"]) >= 1, "bench.threads", "positive widths")
    _check(b["plans"] >= 1, "bench.plans", "must be >= 1")
