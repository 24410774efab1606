"""Command-line entry point: ``fragility {exp1,exp2,exp3,diag} --config run.json``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from . import __version__
from .diagnostics import RECORD_COLUMNS, DiagnosticsOptions, diagnostics_records, trace_diagnostics
from .driver import Exp3Config, SweepConfig, Trajectory, derive_seed, run_exp1, run_exp2, run_exp3, substream
from .earlywarning import SpikeConfig
from .errors import ConfigError, FragilityError
from .io import load_params, save_params, write_csv, write_json
from .mitigation import EpsBumpConfig
from .model import ModelConfig, forward_dual, init_params
from .precision import PrecisionSpec

__all__ = ["RunConfig", "validate_config", "load_config", "apply_overrides", "main"]

log = logging.getLogger("fragility")

EXPERIMENTS = ("exp1", "exp2", "exp3", "diag")
DEFAULT_PRECISION = {"exp1": None, "exp2": "fp16-native", "exp3": "bf16-native", "diag": "bf16-native"}

# section name -> (dataclass, fields whose default is None but whose type is int)
SECTIONS = {
    "model": (ModelConfig, {"ffn_hidden"}),
    "sweep": (SweepConfig, set()),
    "trajectory": (Trajectory, set()),
    "earlywarning": (SpikeConfig, {"K"}),
    "mitigation": (EpsBumpConfig, set()),
    "exp3": (Exp3Config, set()),
}
TOP_LEVEL = {"experiment", "root_seed", "output_dir", "precision", "state"}


@dataclass(frozen=True)
class RunConfig:
    experiment: str
    root_seed: int = 0
    output_dir: str | None = None
    precision: str | None = None
    state: str | None = None  # saved model parameters for diag
    model: ModelConfig = ModelConfig()
    sweep: SweepConfig = SweepConfig()
    trajectory: Trajectory = Trajectory()
    earlywarning: SpikeConfig = SpikeConfig()
    mitigation: EpsBumpConfig = EpsBumpConfig()
    exp3: Exp3Config = Exp3Config()

    @property
    def resolved_precision(self) -> str | None:
        return self.precision or DEFAULT_PRECISION[self.experiment]

    @property
    def out_path(self) -> Path:
        return Path(self.output_dir or Path("runs") / self.experiment)

    def to_dict(self) -> dict:
        def plain(v):
            if isinstance(v, tuple):
                return [plain(x) for x in v]
            if isinstance(v, dict):
                return {k: plain(x) for k, x in v.items()}
            return v

        return plain(asdict(self))


def _locate(text: str, path: list[str]) -> int | None:
    """1-based line of the last key of ``path``, found by walking the keys in order."""
    lines = text.splitlines()
    i = 0
    found = None
    for key in path:
        pat = re.compile(r'"%s"\s*:' % re.escape(key))
        for j in range(i, len(lines)):
            if pat.search(lines[j]):
                found, i = j + 1, j + 1
                break
        else:
            return found
    return found


class _Violations:
    def __init__(self, text: str):
        self.text = text
        self.items: list[str] = []

    def add(self, path: list[str], msg: str) -> None:
        line = _locate(self.text, path) if path else None
        where = f"line {line}: " if line else ""
        self.items.append(f"{where}{'.'.join(path) or '<config>'}: {msg}")


def _coerce(value, default, int_optional: bool):
    """Convert a JSON value to the type of ``default``; raise ValueError on mismatch."""
    if default is None:
        if value is None:
            return None
        if int_optional:
            if isinstance(value, bool) or not isinstance(value, int):
                raise ValueError(f"expected an integer or null, got {value!r}")
            return value
        if not isinstance(value, str):
            raise ValueError(f"expected a string or null, got {value!r}")
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ValueError(f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValueError(f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValueError(f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ValueError(f"expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ValueError(f"expected a list, got {value!r}")
        proto = default[0] if default else 0.0
        return tuple(_coerce(v, proto, False) for v in value)
    raise ValueError(f"unsupported value {value!r}")


def _field_of(msg: str, names) -> str | None:
    m = re.match(r"[A-Za-z_][A-Za-z0-9_]*", msg)
    return m.group(0) if m and m.group(0) in names else None


def _build_section(name: str, raw, bad: _Violations):
    cls, int_optional = SECTIONS[name]
    proto = cls()
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        bad.add([name], "must be an object")
        return proto
    names = [f.name for f in fields(cls)]
    kw = {}
    for key, value in raw.items():
        if key not in names:
            bad.add([name, key], f"unknown key (expected one of: {', '.join(names)})")
            continue
        try:
            kw[key] = _coerce(value, getattr(proto, key), key in int_optional)
        except ValueError as exc:
            bad.add([name, key], str(exc))
    if name == "model":
        try:
            return cls(**kw)
        except ValueError as exc:
            for msg in str(exc).split("; "):
                key = _field_of(msg, names)
                bad.add([name, key] if key else [name], msg)
            return proto
    obj = cls(**kw)
    return obj


def _section_problems(name: str, obj, problems, bad: _Violations) -> None:
    names = [f.name for f in fields(obj)]
    for msg in problems:
        key = _field_of(msg, names)
        bad.add([name, key] if key else [name], msg)


def validate_config(text: str, experiment: str | None = None) -> RunConfig:
    """Parse and validate JSON config text; every violation is reported at once.

    ``experiment`` (the subcommand) fills in or must match the config's own
    ``experiment`` key.  Run manifests are accepted: their ``config`` entry is
    validated instead.
    """
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"line {exc.lineno}: invalid JSON: {exc.msg}"]) from None
    if isinstance(data, dict) and "manifest_version" in data and "config" in data:
        data = data["config"]
    if not isinstance(data, dict):
        raise ConfigError(["<config>: top level must be a JSON object"])
    bad = _Violations(text)
    for key in data:
        if key not in TOP_LEVEL and key not in SECTIONS:
            bad.add([key], "unknown key")
    exp = data.get("experiment", experiment)
    if exp is None:
        bad.add([], "missing 'experiment'")
        exp = "diag"
    elif exp not in EXPERIMENTS:
        bad.add(["experiment"], f"must be one of {', '.join(EXPERIMENTS)}")
        exp = "diag"
    elif experiment is not None and exp != experiment:
        bad.add(["experiment"], f"config says {exp!r} but the subcommand is {experiment!r}")
    top = {}
    for key, proto in (("root_seed", 0), ("output_dir", None), ("precision", None), ("state", None)):
        if key in data:
            try:
                top[key] = _coerce(data[key], proto, False)
            except ValueError as exc:
                bad.add([key], str(exc))
    if top.get("precision") is not None:
        try:
            PrecisionSpec.parse(top["precision"])
        except ValueError as exc:
            bad.add(["precision"], str(exc))
    sec = {name: _build_section(name, data.get(name), bad) for name in SECTIONS}
    spike = sec["earlywarning"]
    min_steps = 2 * spike.max_lag + 20 if exp == "exp2" else 1
    _section_problems("sweep", sec["sweep"], sec["sweep"].problems(min_steps), bad)
    steps = sec["sweep"].steps if exp == "exp2" else None
    _section_problems("trajectory", sec["trajectory"], sec["trajectory"].problems(steps, spike.max_lag), bad)
    _section_problems("earlywarning", spike, spike.problems(), bad)
    _section_problems("mitigation", sec["mitigation"], sec["mitigation"].problems(), bad)
    _section_problems("exp3", sec["exp3"], sec["exp3"].problems(), bad)
    if bad.items:
        raise ConfigError(bad.items)
    return RunConfig(experiment=exp, **top, **sec)


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``KEY=VALUE`` assignments with dotted keys; values parse as JSON when possible."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError([f"--set {item}: expected KEY=VALUE"])
        key, _, text = item.partition("=")
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        parts = key.strip().split(".")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError([f"--set {item}: {p} is not a section"])
        node[parts[-1]] = value
    return data


def load_config(path, overrides=(), experiment: str | None = None, env=None) -> RunConfig:
    """Read, override and validate a config file (or a run manifest)."""
    env = os.environ if env is None else env
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise ConfigError([f"config file not found: {path}"]) from None
    except OSError as exc:
        raise ConfigError([f"cannot read config file {path}: {exc.strerror}"]) from None
    if overrides or "FRAGILITY_SEED" in env:
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError([f"line {exc.lineno}: invalid JSON: {exc.msg}"]) from None
        if isinstance(data, dict) and "manifest_version" in data:
            data = data.get("config", {})
        apply_overrides(data, list(overrides))
        if "FRAGILITY_SEED" in env:
            try:
                data["root_seed"] = int(env["FRAGILITY_SEED"])
            except ValueError:
                raise ConfigError([f"FRAGILITY_SEED must be an integer, got {env['FRAGILITY_SEED']!r}"]) from None
        text = json.dumps(data, indent=2)
    return validate_config(text, experiment)


def _manifest(cfg: RunConfig, overrides) -> dict:
    return {
        "manifest_version": 1,
        "toolkit_version": __version__,
        "experiment": cfg.experiment,
        "root_seed": cfg.root_seed,
        "overrides": list(overrides),
        "config": cfg.to_dict(),
    }


def _run_diag(cfg: RunConfig, out: Path) -> list[Path]:
    if cfg.state:
        params = load_params(cfg.state)
    else:
        params = init_params(replace(cfg.model, seed=derive_seed(cfg.root_seed, 0, 0)))
    mc = params.config
    X0 = substream(cfg.root_seed, 0, 1).standard_normal((mc.seq_len, mc.d_model))
    spec = PrecisionSpec.parse(cfg.resolved_precision)
    trace = forward_dual(params, X0, spec)
    diags, bound = trace_diagnostics(params, trace, DiagnosticsOptions())
    rows = [r.as_row() for r in diagnostics_records(0, trace, diags, bound)]
    return [
        write_csv(out / "diagnostics.csv", rows, RECORD_COLUMNS),
        save_params(out / "model_state.npz", params),
    ]


def run(cfg: RunConfig, jobs: int = 1) -> list[Path]:
    out = cfg.out_path
    out.mkdir(parents=True, exist_ok=True)
    if cfg.experiment == "exp1":
        sweep = cfg.sweep
        if cfg.precision:
            sweep = replace(sweep, precisions=(cfg.precision,))
        run_exp1(sweep, cfg.model, cfg.trajectory, cfg.root_seed, out, jobs)
        names = ["exp1_raw.csv", "exp1_configs.csv", "exp1_regression.csv"]
    elif cfg.experiment == "exp2":
        run_exp2(cfg.sweep.seeds, cfg.sweep.steps, cfg.trajectory, cfg.model, cfg.earlywarning,
                 cfg.resolved_precision, cfg.root_seed, out, jobs)
        names = ["leadlag.csv", "leadlag_loss.csv", "exp2_series.csv"]
    elif cfg.experiment == "exp3":
        run_exp3(cfg.sweep.seeds, cfg.exp3, cfg.mitigation, cfg.model, cfg.trajectory,
                 cfg.resolved_precision, cfg.root_seed, out, jobs)
        names = ["exp3_summary.csv", "exp3_seeds.csv", "exp3_events.csv"]
    else:
        return _run_diag(cfg, out)
    return [out / n for n in names]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fragility", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="experiment", required=True)
    for name, help_text in (
        ("exp1", "predictor vs mismatch sweep over widths, precisions and seeds"),
        ("exp2", "lead-lag early-warning study on scripted weight paths"),
        ("exp3", "control vs LayerNorm eps-bump intervention"),
        ("diag", "one-shot diagnostics of a fresh or saved model"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, metavar="PATH", help="JSON config or run manifest")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a field, e.g. earlywarning.z_threshold=2.0 (repeatable)")
        p.add_argument("--out", metavar="DIR", help="output directory (overrides output_dir)")
        p.add_argument("--jobs", type=int, default=1, metavar="N", help="parallel runs cap")
        p.add_argument("-q", "--quiet", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = list(args.overrides)
    if args.out:
        overrides.append(f"output_dir={json.dumps(args.out)}")
    try:
        cfg = load_config(args.config, overrides, args.experiment)
    except ConfigError as exc:
        print(f"config error in {args.config}:", file=sys.stderr)
        for v in exc.violations:
            print(f"  {v}", file=sys.stderr)
        return 2
    if args.jobs < 1:
        print("--jobs must be >= 1", file=sys.stderr)
        return 2
    try:
        paths = run(cfg, args.jobs)
        paths.append(write_json(cfg.out_path / "manifest.json", _manifest(cfg, overrides)))
    except (FragilityError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for p in paths:
        print(p)
    return 0


if __name__ == "__main__":
    sys.exit(main())
