"""Plain-text run configuration: INI sections with key = value pairs.

One schema table drives parsing, validation, defaults, and the generated
template, so the documentation cannot drift from the code.  Unknown sections
or keys are hard errors; silent typos in a config that steers multi-hour
runs are worse than a strict parser.
"""

import configparser
from collections import namedtuple

import numpy as np


class ConfigError(Exception):
    """Anything wrong with a run configuration (exit code 2 territory)."""


REQUIRED = object()

Field = namedtuple("Field", "type default doc")

_SCHEMA = {
    "simulation": {
        "n_steps": Field("int", REQUIRED, "integrator steps to run"),
        "kT": Field("float", 0.2, "thermostat temperature (epsilon)"),
        "dt": Field("float", 0.005, "time step (tau)"),
        "friction": Field("float", 1.0, "Langevin friction (1/tau)"),
        "save_stride": Field("int", 100, "steps between saved frames"),
        "seed": Field("int", 0, "noise stream seed"),
        "start": Field("str", "c0",
                       "starting isomer: c0, c1, c2, or c3"),
        "restraint_k": Field("float", 25.0,
                             "half-harmonic container spring constant"),
        "restraint_onset": Field("float", 2.5,
                                 "container onset radius (sigma)"),
    },
    "training": {
        "trajectory": Field("str", REQUIRED,
                            "trajectory file to train on"),
        "beta": Field("float", 0.01, "information bottleneck weight"),
        "lag": Field("int", 5, "prediction lag in saved frames"),
        "k_init": Field("int", 10, "initial number of trial states"),
        "refine_every": Field("int", 5,
                              "epochs between label refinements"),
        "max_epochs": Field("int", 200, "training epoch cap"),
        "batch_size": Field("int", 512, "minibatch size"),
        "learning_rate": Field("float", 1.0e-3, "Adam step size"),
        "label_change_tol": Field("float", 0.01,
                                  "label change fraction below which a "
                                  "refinement counts as quiet"),
        "seed": Field("int", 0, "init and shuffling seed"),
    },
    "metad": {
        "cv": Field("choice:moments|learned", "moments",
                    "collective variable pair to bias"),
        "model": Field("str", "",
                       "model file (required when cv = learned)"),
        "components": Field("ints", [0, 1],
                            "latent components (cv = learned)"),
        "orders": Field("ints", [2, 3],
                        "coordination moments (cv = moments)"),
        "w0": Field("float", 0.05, "initial hill height (epsilon)"),
        "pace": Field("int", 500, "steps between hill deposits"),
        "bias_factor": Field("float", 10.0,
                             "well-tempered gamma; inf = untempered"),
        "widths": Field("floats", [],
                        "explicit hill widths, one per CV component"),
        "widths_from": Field("str", "",
                             "trajectory whose CV std sets the widths"),
        "width_fraction": Field("float", 0.1,
                                "widths = fraction * CV std"),
        "bias_stride": Field("int", 1,
                             "steps between bias force refreshes"),
        "n_replicas": Field("int", 1, "independent replicas"),
    },
    "kinetics": {
        "cv": Field("choice:moments|learned", "moments",
                    "collective variable to bias"),
        "model": Field("str", "",
                       "model file (required when cv = learned)"),
        "components": Field("ints", [0],
                            "latent components (cv = learned)"),
        "orders": Field("ints", [2], "coordination moments (cv = moments)"),
        "w0": Field("float", 0.05, "hill height (epsilon)"),
        "pace": Field("int", 10_000, "steps between hill deposits"),
        "bias_factor": Field("float", float("inf"),
                             "well-tempered gamma; inf = untempered"),
        "widths": Field("floats", [], "explicit hill widths"),
        "widths_from": Field("str", "",
                             "trajectory whose CV std sets the widths"),
        "width_fraction": Field("float", 0.1,
                                "widths = fraction * CV std"),
        "n_runs": Field("int", 20, "ensemble size"),
        "start": Field("str", "c0", "starting isomer"),
        "stop": Field("str", "c3", "absorbing isomer"),
        "commit_frames": Field("int", 10,
                               "consecutive saved frames that commit"),
        "max_steps": Field("int", 1_000_000_000,
                           "wall cap per run; hitting it censors"),
        "bias_stride": Field("int", 1,
                             "steps between bias force refreshes"),
    },
    "analysis": {
        "kT": Field("float", 0.1, "temperature of the analyzed runs"),
        "unbiased": Field("str", "", "unbiased trajectory file"),
        "wtmetad": Field("strs", [],
                         "wtmetad output directories, comma separated"),
        "reference": Field("str", "c0", "dF reference state"),
        "bins": Field("int", 40, "FES bins per axis"),
        "classify_stride": Field("int", 1,
                                 "quench every n-th saved frame for dF"),
        "n_blocks": Field("int", 10, "block bootstrap blocks"),
        "n_boot": Field("int", 10_000, "bootstrap resamples"),
        "seed": Field("int", 0, "bootstrap seed"),
    },
    "sweep": {
        "lags": Field("ints", [2, 5, 10, 20],
                      "prediction lags, strictly ascending"),
    },
    "gradcheck": {
        "n_configs": Field("int", 100, "random configurations per check"),
        "seed": Field("int", 0, "configuration seed"),
        "tol_analytic": Field("float", 1.0e-7,
                              "rel. error bound, closed-form gradients"),
        "tol_network": Field("float", 1.0e-5,
                             "rel. error bound, network gradients"),
    },
}


def _parse_value(ftype, raw, where):
    raw = raw.strip()
    try:
        if ftype == "int":
            return int(raw)
        if ftype == "float":
            return float(raw)
        if ftype == "str":
            return raw
        if ftype == "bool":
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if ftype == "ints":
            return [int(tok) for tok in raw.split(",") if tok.strip()]
        if ftype == "floats":
            return [float(tok) for tok in raw.split(",") if tok.strip()]
        if ftype == "strs":
            return [tok.strip() for tok in raw.split(",") if tok.strip()]
        if ftype.startswith("choice:"):
            allowed = ftype.split(":", 1)[1].split("|")
            if raw not in allowed:
                raise ValueError(f"must be one of {', '.join(allowed)}")
            return raw
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {ftype} "
                          f"({exc})") from None
    raise AssertionError(f"unknown schema type {ftype}")


class RunConfig:
    """Validated sections; ``section(name)`` resolves defaults."""

    def __init__(self, sections, path="<memory>"):
        self.path = path
        self._sections = sections

    def has(self, name):
        return name in self._sections

    def section(self, name):
        if name not in _SCHEMA:
            raise AssertionError(f"no schema for section [{name}]")
        given = self._sections.get(name, {})
        out = {}
        for key, field in _SCHEMA[name].items():
            if key in given:
                out[key] = given[key]
            elif field.default is REQUIRED:
                raise ConfigError(
                    f"{self.path}: [{name}] needs '{key}' ({field.doc})")
            else:
                out[key] = field.default
        return out


def load_config(path):
    cp = configparser.ConfigParser(interpolation=None,
                                   inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from None
    sections = {}
    for name in cp.sections():
        if name not in _SCHEMA:
            raise ConfigError(f"{path}: unknown section [{name}] "
                              f"(known: {', '.join(sorted(_SCHEMA))})")
        out = {}
        for key, raw in cp.items(name):
            if key not in _SCHEMA[name]:
                raise ConfigError(
                    f"{path}: unknown key '{key}' in [{name}] "
                    f"(known: {', '.join(sorted(_SCHEMA[name]))})")
            out[key] = _parse_value(_SCHEMA[name][key].type, raw,
                                    f"{path}: [{name}] {key}")
        sections[name] = out
    return RunConfig(sections, path=str(path))


def _format_default(field):
    d = field.default
    if d is REQUIRED:
        return "(required)"
    if isinstance(d, list):
        return ", ".join(str(v) for v in d) if d else "(empty)"
    if isinstance(d, float) and np.isinf(d):
        return "inf"
    return str(d)


def write_template(path):
    """Emit a config with every key present, set to its default, documented."""
    lines = ["# gspib run configuration",
             "# Every key is optional unless marked (required); values shown",
             "# are the defaults.  Lists are comma separated.", ""]
    for name, fields in _SCHEMA.items():
        lines.append(f"[{name}]")
        for key, field in fields.items():
            lines.append(f"# {field.doc}")
            default = _format_default(field)
            if field.default is REQUIRED:
                lines.append(f"# {key} = {default}")
            elif isinstance(field.default, list) and not field.default:
                lines.append(f"# {key} =")
            else:
                lines.append(f"{key} = {default}")
        lines.append("")
    with open(path, "w") as fh:
        fh.write("\n".join(lines))
