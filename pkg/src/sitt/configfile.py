"""Config-file parsing: `key = value` lines under [section] headers.

Grammar: blank lines and `#` comments are ignored; a line is either
`[section]` or `key = value`.  Sections are [task], [pretrain], [ttt]
and [eval]; unknown sections or keys are errors, as are missing required
keys.  Link families are declared per degree inside [task]:

    link_3 = constant 1.0
    link_4 = uniform -0.5 0.5
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ConfigError
from .evaluate import ExperimentConfig
from .taskgen import Constant, LinkSpec, Uniform
from .training import PipelineConfig, PretrainConfig, TttConfig

__all__ = ["RawConfig", "parse_config_text", "load_config", "build_experiment"]

_BOOL = {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}

# key -> (type tag, default); None default means required / optional.
_SCHEMA: dict[str, dict[str, tuple[str, object]]] = {
    "task": {
        "d": ("int", None),
        "r": ("int", None),
        "tau": ("float", 0.0),
        "coeff_bound": ("float", 25.0),
        # link_<degree> handled separately
    },
    "pretrain": {
        "m": ("int", 64),
        "rho": ("float", 4.0),
        "eta_pt": ("float", 1.0),
        "lambda_pt": ("float", 1e-4),
        "t_pt": ("int", 4096),
        "n_pt": ("int", 4096),
        "alpha_pt": ("float", 0.05),
    },
    "ttt": {
        "n1": ("int", 1024),
        "n2": ("int", 0),
        "n3": ("optint", None),
        "n4": ("int", 1024),
        "n_new": ("int", 1024),
        "eta1": ("optfloat", None),
        "eta2": ("optfloat", None),
        "lambda1": ("optfloat", None),
        "lambda2": ("float", 1e-3),
        "alpha1": ("optfloat", None),
        "alpha2": ("optfloat", None),
        "scaling_mode": ("str", "theorem-orders"),
        "c": ("float", 1.0),
        "epsilon": ("float", 0.05),
        "group2_role": ("str", "unused"),
        "kappa_scale": ("optfloat", None),
        "gamma_source": ("str", "oracle"),
        "init_alignment": ("optfloat", None),
        "pin_u": ("bool", False),
    },
    "eval": {
        "m_eval": ("int", 4096),
        "seeds": ("int", 10),
        "n_calib_tasks": ("int", 32),
        "q_calib": ("int", 64),
        "metric": ("str", "auto"),
    },
}

_REQUIRED = {("task", "d"), ("task", "r")}


@dataclass(frozen=True)
class RawConfig:
    """Parsed sections with defaults applied, plus the link family."""

    values: dict[str, dict[str, object]]
    link: LinkSpec
    source_text: str

    def get(self, section: str, key: str):
        return self.values[section][key]


def _parse_value(tag: str, raw: str, where: str):
    raw = raw.strip()
    try:
        if tag == "int":
            return int(raw)
        if tag == "optint":
            return None if raw.lower() == "none" else int(raw)
        if tag == "float":
            return float(raw)
        if tag == "optfloat":
            return None if raw.lower() == "none" else float(raw)
        if tag == "bool":
            if raw.lower() not in _BOOL:
                raise ValueError(raw)
            return _BOOL[raw.lower()]
        if tag == "str":
            return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {where}: {raw!r}") from exc
    raise ConfigError(f"internal: unknown schema tag {tag}")


def _parse_link_entry(raw: str, where: str):
    parts = raw.split()
    if parts and parts[0] == "constant" and len(parts) == 2:
        return Constant(_parse_value("float", parts[1], where))
    if parts and parts[0] == "uniform" and len(parts) == 3:
        return Uniform(
            _parse_value("float", parts[1], where), _parse_value("float", parts[2], where)
        )
    raise ConfigError(
        f"bad link distribution for {where}: {raw!r} "
        "(expected 'constant V' or 'uniform LO HI')"
    )


def parse_config_text(text: str) -> RawConfig:
    section = None
    seen: dict[str, dict[str, str]] = {name: {} for name in _SCHEMA}
    links_raw: dict[int, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            section = stripped[1:-1].strip()
            if section not in _SCHEMA:
                raise ConfigError(f"line {lineno}: unknown section [{section}]")
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {stripped!r}")
        if section is None:
            raise ConfigError(f"line {lineno}: key outside any [section]")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        raw = raw.strip()
        if section == "task" and key.startswith("link_"):
            try:
                degree = int(key[len("link_"):])
            except ValueError as exc:
                raise ConfigError(f"line {lineno}: bad link key {key!r}") from exc
            if degree in links_raw:
                raise ConfigError(f"line {lineno}: duplicate link degree {degree}")
            links_raw[degree] = raw
            continue
        if key not in _SCHEMA[section]:
            raise ConfigError(f"line {lineno}: unknown key {key!r} in [{section}]")
        if key in seen[section]:
            raise ConfigError(f"line {lineno}: duplicate key {key!r} in [{section}]")
        seen[section][key] = raw

    values: dict[str, dict[str, object]] = {}
    for name, schema in _SCHEMA.items():
        out: dict[str, object] = {}
        for key, (tag, default) in schema.items():
            if key in seen[name]:
                out[key] = _parse_value(tag, seen[name][key], f"[{name}] {key}")
            elif (name, key) in _REQUIRED:
                raise ConfigError(f"missing required key '{key}' in [{name}]")
            else:
                out[key] = default
        values[name] = out

    if not links_raw:
        raise ConfigError("missing required key 'link_<degree>' in [task]")
    dists = {
        deg: _parse_link_entry(raw, f"[task] link_{deg}") for deg, raw in links_raw.items()
    }
    link = LinkSpec(dists, coeff_bound=float(values["task"]["coeff_bound"]))
    return RawConfig(values=values, link=link, source_text=text)


def load_config(path: str) -> RawConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_config_text(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc


def build_experiment(raw: RawConfig, gamma_source: str | None = None) -> ExperimentConfig:
    """Assemble the experiment/pipeline configuration from parsed values."""
    t, p, s, e = raw.values["task"], raw.values["pretrain"], raw.values["ttt"], raw.values["eval"]
    d, r = int(t["d"]), int(t["r"])
    pretrain = PretrainConfig(
        d=d,
        m=int(p["m"]),
        rho=float(p["rho"]),
        eta_pt=float(p["eta_pt"]),
        lambda_pt=float(p["lambda_pt"]),
        t_pt=int(p["t_pt"]),
        n_pt=int(p["n_pt"]),
        alpha_pt=float(p["alpha_pt"]),
    )
    ttt = TttConfig(
        n1=int(s["n1"]),
        n2=int(s["n2"]),
        n3=s["n3"],
        n4=int(s["n4"]),
        n_new=int(s["n_new"]),
        eta1=s["eta1"],
        eta2=s["eta2"],
        lambda1=s["lambda1"],
        lambda2=float(s["lambda2"]),
        alpha1=s["alpha1"],
        alpha2=s["alpha2"],
        scaling_mode=str(s["scaling_mode"]),
        c=float(s["c"]),
        epsilon=float(s["epsilon"]),
        group2_role=str(s["group2_role"]),
    )
    pipeline = PipelineConfig(
        d=d,
        r=r,
        m=int(p["m"]),
        rho=float(p["rho"]),
        ttt=ttt,
        gamma_source=gamma_source if gamma_source is not None else str(s["gamma_source"]),
        kappa_scale=s["kappa_scale"],
        pretrain=pretrain,
        pin_u_to_beta=bool(s["pin_u"]),
        init_alignment=s["init_alignment"],
    )
    return ExperimentConfig(
        d=d,
        r=r,
        tau=float(t["tau"]),
        link_spec=raw.link,
        pipeline=pipeline,
        m_eval=int(e["m_eval"]),
        n_calib_tasks=int(e["n_calib_tasks"]),
        q_calib=int(e["q_calib"]),
    )
