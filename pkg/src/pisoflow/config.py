"""Plain-text case configuration: a sectioned key-value format.

The grammar is deliberately small and human-diffable::

    # comment to end of line
    [section]
    key = value          # values: scalars, words, or space-separated lists

Sections and their keys map one-to-one onto CaseConfig fields. Unknown
sections, unknown keys, duplicates, and malformed values are all hard
errors carrying the line and column, so misspellings never silently fall
back to defaults. ``format_config`` renders the canonical form; parsing
that form and formatting again reproduces it byte for byte.
"""

import inspect

import numpy as np

from .cases import MESH_BUILDERS, CaseConfig, OptimizeSpec, gauss_profile
from .piso import reichardt_init

__all__ = ["ConfigError", "parse_config", "parse_config_file",
           "format_config", "DEFAULT_TOL"]

# documented default pressure/momentum solve tolerance for parsed configs
DEFAULT_TOL = 1e-8


class ConfigError(ValueError):
    """Parse or validation failure anchored to a config location."""

    def __init__(self, message, line, col):
        super().__init__(f"line {line}, col {col}: {message}")
        self.line = line
        self.col = col


# value kinds understood by the typed sections
_CASE_KEYS = {"name": "str", "mesh": "str", "forcing": "str",
              "flow_axis": "int", "wall_axis": "int", "precision": "str",
              "seed": "int"}
_FLUID_KEYS = {"nu": "float", "source": "floats", "delta": "float"}
_TIME_KEYS = {"dt": "float", "cfl": "float", "dt_max": "float",
              "steps": "int", "horizon": "float", "steady_tol": "float"}
_SOLVER_KEYS = {"n_correctors": "int", "nonortho_correctors": "int",
                "tol": "float", "maxiter": "int"}
_STATS_KEYS = {"every": "int", "warmup": "int"}
_OPT_KEYS = {"target": "str", "lr": "float_or_pair", "iterations": "int",
             "init": "float_or_pair", "reference": "float_or_pair",
             "path": "str", "weight_decay": "float"}

_SECTIONS = ("case", "mesh", "fluid", "time", "solver", "initial", "stats",
             "optimization")


def _convert(raw, kind, line, col):
    toks = raw.split()
    if not toks:
        raise ConfigError("empty value", line, col)

    def one(want):
        if len(toks) != 1:
            raise ConfigError(f"expected a single {want}, got {raw!r}",
                              line, col)
        return toks[0]

    try:
        if kind == "str":
            return one("word")
        if kind == "int":
            return int(one("integer"))
        if kind == "float":
            return float(one("number"))
        if kind == "floats":
            return tuple(float(t) for t in toks)
        if kind == "float_or_pair":
            if len(toks) == 1:
                return float(toks[0])
            if len(toks) == 2:
                return (float(toks[0]), float(toks[1]))
            raise ConfigError(f"expected one or two numbers, got {raw!r}",
                              line, col)
        if kind == "auto":
            low = [t.lower() for t in toks]
            if all(t in ("true", "false") for t in low):
                flags = tuple(t == "true" for t in low)
                return flags[0] if len(flags) == 1 else flags
            try:
                vals = [int(t) for t in toks]
            except ValueError:
                try:
                    vals = [float(t) for t in toks]
                except ValueError:
                    return one("word")
            return vals[0] if len(vals) == 1 else tuple(vals)
    except ConfigError:
        raise
    except ValueError:
        raise ConfigError(f"bad {kind} value {raw!r}", line, col) from None
    raise AssertionError(kind)


def _tokenize(text):
    """text -> {section: {key: (raw_value, line, col)}} with locations."""
    sections = {}
    current = None
    for ln, full in enumerate(text.splitlines(), start=1):
        line = full.split("#", 1)[0].rstrip()
        if not line.strip():
            continue
        stripped = line.strip()
        col = full.index(stripped[0]) + 1
        if stripped.startswith("["):
            if not stripped.endswith("]"):
                raise ConfigError("unterminated section header", ln, col)
            name = stripped[1:-1].strip()
            if name not in _SECTIONS:
                raise ConfigError(f"unknown section [{name}]; choose from "
                                  + ", ".join(_SECTIONS), ln, col)
            if name in sections:
                raise ConfigError(f"duplicate section [{name}]", ln, col)
            sections[name] = {}
            current = name
            continue
        if current is None:
            raise ConfigError("key outside any [section]", ln, col)
        if "=" not in stripped:
            raise ConfigError("expected 'key = value'", ln, col)
        key, _, raw = stripped.partition("=")
        key = key.strip()
        raw = raw.strip()
        if not key:
            raise ConfigError("missing key before '='", ln, col)
        if key in sections[current]:
            raise ConfigError(f"duplicate key {key!r} in [{current}]", ln,
                              col)
        vcol = full.index("=") + 2 + (len(raw) and full[full.index("=") + 1:]
                                      .index(raw[0]))
        sections[current][key] = (raw, ln, vcol if raw else col)
    return sections


def _take(section, known, out):
    for key, (raw, ln, col) in section.items():
        if key not in known:
            raise ConfigError(
                f"unknown key {key!r}; known keys: "
                + ", ".join(sorted(known)), ln, col)
        out[key] = _convert(raw, known[key], ln, col)
    return out


def _signature_keys(fn, skip=("domain",)):
    params = inspect.signature(fn).parameters
    return {n for n in params if n not in skip}


def parse_config(text):
    """Parse config text into a validated CaseConfig."""
    sections = _tokenize(text)
    kw = {}

    case = _take(sections.get("case", {}), _CASE_KEYS, {})
    kw.update(case)
    _take(sections.get("fluid", {}), _FLUID_KEYS, kw)
    _take(sections.get("time", {}), _TIME_KEYS, kw)
    solver = _take(sections.get("solver", {}), _SOLVER_KEYS, {})
    kw.update(solver)
    stats = _take(sections.get("stats", {}), _STATS_KEYS, {})
    if "every" in stats:
        kw["stats_every"] = stats["every"]
    if "warmup" in stats:
        kw["stats_warmup"] = stats["warmup"]

    mesh_kind = kw.get("mesh", CaseConfig.mesh)
    if mesh_kind not in MESH_BUILDERS:
        _, ln, col = sections.get("case", {}).get("mesh", (None, 1, 1))
        raise ConfigError(f"unknown mesh kind {mesh_kind!r}; choose from "
                          + ", ".join(sorted(MESH_BUILDERS)), ln, col)
    if "mesh" in sections:
        allowed = _signature_keys(MESH_BUILDERS[mesh_kind], skip=())
        args = {}
        for key, (raw, ln, col) in sections["mesh"].items():
            if key not in allowed:
                raise ConfigError(
                    f"mesh {mesh_kind!r} takes no parameter {key!r}; "
                    "known: " + ", ".join(sorted(allowed)), ln, col)
            val = _convert(raw, "auto", ln, col)
            if key in ("shape", "lengths", "periodic", "center") \
                    and not isinstance(val, tuple):
                val = (val,)
            args[key] = val
        kw["mesh_args"] = args

    if "initial" in sections:
        init = dict(sections["initial"])
        if "kind" not in init:
            ln = min(v[1] for v in init.values()) if init else 1
            raise ConfigError("[initial] needs a 'kind' key", ln, 1)
        raw, ln, col = init.pop("kind")
        kind = _convert(raw, "str", ln, col)
        if kind not in ("zero", "gauss", "reichardt"):
            raise ConfigError(f"unknown initial kind {kind!r}", ln, col)
        kw["u0"] = kind
        allowed = set()
        if kind == "gauss":
            allowed = _signature_keys(gauss_profile)
        elif kind == "reichardt":
            allowed = _signature_keys(reichardt_init)
        args = {}
        for key, (raw, ln, col) in init.items():
            if key not in allowed:
                raise ConfigError(
                    f"initial kind {kind!r} takes no parameter {key!r}"
                    + ("; known: " + ", ".join(sorted(allowed))
                       if allowed else ""), ln, col)
            args[key] = _convert(raw, "auto", ln, col)
        kw["u0_args"] = args

    if "optimization" in sections:
        opt = _take(sections["optimization"], _OPT_KEYS, {})
        if "target" not in opt:
            any_loc = next(iter(sections["optimization"].values()),
                           (None, 1, 1))
            raise ConfigError("[optimization] needs a 'target' key",
                              any_loc[1], 1)
        if opt["target"] == "source":
            raw, ln, col = sections["optimization"]["target"]
            raise ConfigError("the per-cell source target needs a field "
                              "and is only reachable from the Python API",
                              ln, col)
        try:
            kw["optimization"] = OptimizeSpec(**opt)
        except (TypeError, ValueError) as exc:
            any_loc = next(iter(sections["optimization"].values()))
            raise ConfigError(str(exc), any_loc[1], 1) from None

    if kw.get("tol") is None:
        kw["tol"] = DEFAULT_TOL

    try:
        cfg = CaseConfig(**kw)
        cfg.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), 1, 1) from None
    return cfg


def parse_config_file(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def _fmt(val):
    if isinstance(val, bool):
        return "true" if val else "false"
    if isinstance(val, (tuple, list, np.ndarray)):
        return " ".join(_fmt(v) for v in val)
    if isinstance(val, float):
        return repr(val)
    return str(val)


def format_config(cfg):
    """Render a CaseConfig in canonical text form (a parse fixpoint)."""
    lines = ["[case]"]
    for key in ("name", "mesh", "forcing", "flow_axis", "wall_axis",
                "precision", "seed"):
        lines.append(f"{key} = {_fmt(getattr(cfg, key))}")
    if cfg.mesh_args:
        lines += ["", "[mesh]"]
        for key in sorted(cfg.mesh_args):
            lines.append(f"{key} = {_fmt(cfg.mesh_args[key])}")
    lines += ["", "[fluid]", f"nu = {_fmt(cfg.nu)}"]
    if cfg.source is not None:
        lines.append(f"source = {_fmt(cfg.source)}")
    lines.append(f"delta = {_fmt(cfg.delta)}")
    lines += ["", "[time]"]
    for key in ("dt", "cfl", "dt_max", "steps", "horizon", "steady_tol"):
        val = getattr(cfg, key)
        if val is not None:
            lines.append(f"{key} = {_fmt(val)}")
    lines += ["", "[solver]",
              f"n_correctors = {_fmt(cfg.n_correctors)}",
              f"nonortho_correctors = {_fmt(cfg.nonortho_correctors)}"]
    if cfg.tol is not None:
        lines.append(f"tol = {_fmt(cfg.tol)}")
    if cfg.maxiter is not None:
        lines.append(f"maxiter = {_fmt(cfg.maxiter)}")
    lines += ["", "[initial]", f"kind = {cfg.u0}"]
    for key in sorted(cfg.u0_args):
        lines.append(f"{key} = {_fmt(cfg.u0_args[key])}")
    if cfg.stats_every or cfg.stats_warmup:
        lines += ["", "[stats]", f"every = {cfg.stats_every}",
                  f"warmup = {cfg.stats_warmup}"]
    opt = cfg.optimization
    if opt is not None:
        lines += ["", "[optimization]", f"target = {opt.target}",
                  f"lr = {_fmt(opt.lr)}",
                  f"iterations = {opt.iterations}"]
        if opt.init is not None:
            lines.append(f"init = {_fmt(opt.init)}")
        if opt.reference is not None:
            lines.append(f"reference = {_fmt(opt.reference)}")
        lines.append(f"path = {opt.path.value}")
        lines.append(f"weight_decay = {_fmt(opt.weight_decay)}")
    return "\n".join(lines) + "\n"
