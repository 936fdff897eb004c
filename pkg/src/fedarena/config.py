"""Typed INI configuration for experiment cells.

An experiment has around thirty knobs, so configs are flat key=value
sections rather than flag soup.  Parsing is schema-driven: every key has a
declared type and default, unknown sections or keys are hard errors with a
nearest-match suggestion and the offending line number, and the resolved
config serializes back to a canonical text whose reparse is identical
(the basis for manifest hashing).

Sections: [task] [model] [federation] [scenario] [attack.<name>]
[defense] [defense.<rule>] [run].  Parameter sections are sparse (only the
keys the user set), everything else resolves dense with defaults filled.
"""
from __future__ import annotations

import configparser
import difflib
import io
from dataclasses import dataclass

from .attacks import canonical_attack_name
from .defenses import canonical_defense_name
from .federation import RoundConfig
from .scenarios import ExperimentSpec, TaskSpec

OUTPUT_ENV_VAR = "FEDARENA_OUTPUT"


class ConfigError(ValueError):
    """Config text that cannot be resolved into an experiment."""


# (type, default); types: int, float, bool, str, str_list, int_list
SCHEMA = {
    "task": {
        "kind": ("str", "blobs"),
        "classes": ("int", 10),
        "dim": ("int", 12),
        "per_class": ("int", 120),
        "test_per_class": ("int", 30),
        "spread": ("float", 1.0),
        "path": ("str", ""),
        "images": ("str", ""),
        "labels": ("str", ""),
        "test_fraction": ("float", 0.2),
    },
    "model": {
        "kind": ("str", "softmax_regression"),
        "hidden_dim": ("int", 16),
    },
    "federation": {
        "clients": ("int", 30),
        "rounds": ("int", 30),
        "local_steps": ("int", 5),
        "batch_size": ("int", 32),
        "lr": ("float", 0.05),
        "global_lr": ("float", 1.0),
        "momentum_beta": ("float", 0.9),
        "alpha": ("float", 0.5),
        "ref_size": ("int", 100),
    },
    "scenario": {
        "kind": ("str", "single"),
        "ratio": ("float", 0.0),
        "attacks": ("str_list", ()),
        "psi_window": ("int", 10),
        "allow_attacker_majority": ("bool", False),
    },
    "defense": {
        "rule": ("str", "fedavg"),
    },
    "run": {
        "seeds": ("int_list", (0,)),
        "output": ("str", "results"),
    },
}

ATTACK_SCHEMA = {
    "ipm": {"epsilon": "float"},
    "min_max": {},
    "rop": {"lam": "float", "angle": "float"},
    "sf": {"scale": "float"},
    "neurotoxin": {"omega": "float", "pgd_steps": "int", "source": "int", "target": "int"},
    "trapsetter": {
        "zeta_lo": "float",
        "zeta_hi": "float",
        "radius_lo": "float",
        "radius_hi": "float",
        "radius_relative": "bool",
        "grid_step": "float",
        "noise_scale": "float",
    },
}

DEFENSE_SCHEMA = {
    "fedavg": {},
    "median": {},
    "trimmed_mean": {"attacker_count": "int"},
    "krum": {"attacker_count": "int"},
    "multi_krum": {"attacker_count": "int", "select_count": "int"},
    "centered_clipping": {"radius": "float"},
    "dnc": {"attacker_count": "int", "subsample_size": "int", "filter_factor": "float"},
    "signguard": {"norm_lo": "float", "norm_hi": "float", "coord_cap": "int"},
    "freqfed": {},
    "balance": {"phi": "float", "kappa": "float"},
    "hybrid_r": {"attacker_count": "int"},
    "hybrid_nr": {"attacker_count": "int"},
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _parse_value(kind: str, raw: str, path: str, line: int):
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if kind == "str":
            return raw
        if kind == "str_list":
            return tuple(p.strip() for p in raw.split(",") if p.strip())
        if kind == "int_list":
            return tuple(int(p) for p in raw.split(",") if p.strip())
    except ValueError as e:
        raise ConfigError(f"{path} (line {line}): expected {kind}: {e}") from None
    raise AssertionError(f"unhandled kind {kind}")


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_format_value(v) for v in value)
    return str(value)


def _suggest(key: str, options) -> str:
    close = difflib.get_close_matches(key, sorted(options), n=1)
    return f"; did you mean {close[0]!r}?" if close else ""


def _line_map(text: str):
    """(section, key) -> line number, and section -> line number."""
    keys, sections = {}, {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        if not stripped or stripped.startswith(("#", ";")):
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            current = stripped[1:-1].strip()
            sections.setdefault(current, lineno)
            continue
        for sep in ("=", ":"):
            if sep in stripped:
                key = stripped.split(sep, 1)[0].strip()
                keys.setdefault((current, key), lineno)
                break
    return keys, sections


@dataclass(frozen=True)
class Config:
    """A fully resolved experiment cell plus its run metadata."""

    spec: ExperimentSpec
    seeds: tuple = (0,)
    output: str = "results"

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("run.seeds must list at least one seed")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))


def _known_sections(cp) -> list:
    fixed = list(SCHEMA)
    return fixed + [f"attack.{a}" for a in ATTACK_SCHEMA] + [
        f"defense.{d}" for d in DEFENSE_SCHEMA
    ]


def _resolve_section(cp, section: str, lines) -> dict:
    """Dense values for a fixed-schema section, defaults filled."""
    schema = SCHEMA[section]
    out = {k: default for k, (_, default) in schema.items()}
    if not cp.has_section(section):
        return out
    for key, raw in cp.items(section):
        if key not in schema:
            line = lines[0].get((section, key), 0)
            raise ConfigError(
                f"unknown key {key!r} in [{section}] (line {line})" + _suggest(key, schema)
            )
        kind, _ = schema[key]
        out[key] = _parse_value(kind, raw, f"[{section}] {key}", lines[0].get((section, key), 0))
    return out


def _resolve_params(cp, section: str, schema: dict, lines) -> dict:
    """Sparse typed params for an attack./defense. section."""
    out = {}
    for key, raw in cp.items(section):
        if key not in schema:
            line = lines[0].get((section, key), 0)
            raise ConfigError(
                f"unknown key {key!r} in [{section}] (line {line})" + _suggest(key, schema)
            )
        out[key] = _parse_value(schema[key], raw, f"[{section}] {key}", lines[0].get((section, key), 0))
    return out


def _attack_names(attacks) -> list:
    """Canonical attack names mentioned anywhere in the expressions."""
    names = []
    for expr in attacks:
        for part in expr.replace("+", "/").split("/"):
            name = canonical_attack_name(part)
            if name not in names:
                names.append(name)
    return names


def parse_config(text: str, overrides=()) -> Config:
    """Resolve config text (plus `section.key=value` overrides) into a Config."""
    cp = configparser.ConfigParser(interpolation=None, strict=True)
    cp.optionxform = str  # keep key case
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(str(e)) from None

    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        path, value = item.split("=", 1)
        if "." not in path:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        section, key = path.rsplit(".", 1)
        if not cp.has_section(section):
            cp.add_section(section)
        cp.set(section, key, value)

    lines = _line_map(text)

    for section in cp.sections():
        if section in SCHEMA:
            continue
        kind, _, suffix = section.partition(".")
        line = lines[1].get(section, 0)
        if kind in ("attack", "defense") and suffix:
            try:
                canonical_attack_name(suffix) if kind == "attack" else canonical_defense_name(suffix)
            except ValueError as e:
                raise ConfigError(f"[{section}] (line {line}): {e}") from None
            continue
        raise ConfigError(
            f"unknown section [{section}] (line {line})" + _suggest(section, _known_sections(cp))
        )

    task = _resolve_section(cp, "task", lines)
    model = _resolve_section(cp, "model", lines)
    fede = _resolve_section(cp, "federation", lines)
    scen = _resolve_section(cp, "scenario", lines)
    defense = _resolve_section(cp, "defense", lines)
    runv = _resolve_section(cp, "run", lines)

    try:
        defense_rule = canonical_defense_name(defense["rule"])
    except ValueError as e:
        raise ConfigError(str(e)) from None

    attack_params = {}
    for section in cp.sections():
        kind, _, suffix = section.partition(".")
        if kind != "attack" or not suffix:
            continue
        name = canonical_attack_name(suffix)
        params = _resolve_params(cp, section, ATTACK_SCHEMA[name], lines)
        if params:
            attack_params[name] = params

    defense_params = {}
    for candidate in cp.sections():
        kind, _, suffix = candidate.partition(".")
        if kind == "defense" and suffix and canonical_defense_name(suffix) == defense_rule:
            defense_params = _resolve_params(cp, candidate, DEFENSE_SCHEMA[defense_rule], lines)
    if defense_rule in ("hybrid_r", "hybrid_nr") and "attacker_count" in defense_params:
        # the hybrids forward the declared count to their informed members
        defense_params = {"member_params": {"attacker_count": defense_params["attacker_count"]}}

    # only attacks that actually run keep their parameter sections
    try:
        active = _attack_names(scen["attacks"])
    except ValueError as e:
        raise ConfigError(str(e)) from None
    attack_params = {k: v for k, v in attack_params.items() if k in active}

    try:
        spec = ExperimentSpec(
            task=TaskSpec(**task),
            model_kind=model["kind"],
            hidden_dim=model["hidden_dim"],
            clients=fede["clients"],
            rounds=fede["rounds"],
            round_cfg=RoundConfig(
                local_steps=fede["local_steps"],
                batch_size=fede["batch_size"],
                lr=fede["lr"],
                global_lr=fede["global_lr"],
                momentum_beta=fede["momentum_beta"],
            ),
            alpha=fede["alpha"],
            ref_size=fede["ref_size"],
            ratio=scen["ratio"],
            scenario=scen["kind"],
            attacks=scen["attacks"],
            attack_params=attack_params,
            defense=defense_rule,
            defense_params=defense_params,
            seed=runv["seeds"][0] if runv["seeds"] else 0,
            psi_window=scen["psi_window"],
            allow_attacker_majority=scen["allow_attacker_majority"],
        )
    except ValueError as e:
        raise ConfigError(str(e)) from None
    return Config(spec=spec, seeds=runv["seeds"], output=runv["output"])


def serialize_config(cfg: Config) -> str:
    """Canonical text for a resolved config; reparsing it is an identity."""
    spec = cfg.spec
    task = spec.task
    rc = spec.round_cfg
    sections = [
        ("task", {k: getattr(task, k) for k in SCHEMA["task"]}),
        ("model", {"kind": spec.model_kind, "hidden_dim": spec.hidden_dim}),
        (
            "federation",
            {
                "clients": spec.clients,
                "rounds": spec.rounds,
                "local_steps": rc.local_steps,
                "batch_size": rc.batch_size,
                "lr": rc.lr,
                "global_lr": rc.global_lr,
                "momentum_beta": rc.momentum_beta,
                "alpha": spec.alpha,
                "ref_size": spec.ref_size,
            },
        ),
        (
            "scenario",
            {
                "kind": spec.scenario,
                "ratio": spec.ratio,
                "attacks": spec.attacks,
                "psi_window": spec.psi_window,
                "allow_attacker_majority": spec.allow_attacker_majority,
            },
        ),
    ]
    for name in sorted(spec.attack_params):
        sections.append((f"attack.{name}", dict(spec.attack_params[name])))
    sections.append(("defense", {"rule": spec.defense}))
    params = spec.defense_params
    if spec.defense in ("hybrid_r", "hybrid_nr") and "member_params" in params:
        params = dict(params["member_params"])
    if params:
        sections.append((f"defense.{spec.defense}", dict(params)))
    sections.append(("run", {"seeds": cfg.seeds, "output": cfg.output}))

    buf = io.StringIO()
    for name, values in sections:
        buf.write(f"[{name}]\n")
        for key, value in values.items():
            buf.write(f"{key} = {_format_value(value)}\n")
        buf.write("\n")
    return buf.getvalue()


def default_config_text() -> str:
    return serialize_config(parse_config(""))
