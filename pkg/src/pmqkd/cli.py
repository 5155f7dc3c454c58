"""Command-line entry point: ``pmqkd {scan,simulate,estimate,verify-symmetry}``.

Settings come from (lowest to highest precedence) built-in defaults, a
``--preset``, an INI file given by ``--config`` with sections
[ChannelParams], [ProtocolParams], [SimConfig], and long flags named after
the INI keys. Outputs go to ``--output`` or to ``$PMQKD_OUTPUT_DIR``
(default: current directory) and are written atomically.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import logging
import math
import os
import sys
import tempfile
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .decoy import TallyTable, finite_size_estimate
from .errors import ConfigError, DegenerateDataError
from .fock import symmetry_report
from .model import ChannelParams, ProtocolParams
from .montecarlo import PhaseDrift, SimConfig, simulate_run
from .rates import PROTOCOLS, scan_distance, scan_to_csv

EXIT_CONFIG = 2
EXIT_DEGENERATE = 3

PRESETS = {
    "table1": {
        "ChannelParams": {"dark_count_rate": 1e-8, "detector_efficiency": 0.2},
        "ProtocolParams": {"ec_efficiency": 1.1, "phase_slices": 16, "epsilon": 1.7e-10, "rounds": 10**12},
    },
}

SIM_KEYS = {"seed": int, "drift": str, "drift_value": float, "batch_size": int, "engine": str, "j_delta": int}


def _parse_int(text) -> int:
    v = float(text)
    if not v.is_integer():
        raise ValueError(f"expected an integer, got {text!r}")
    return int(v)


def _parse_probs(text) -> tuple[float, ...]:
    if isinstance(text, (tuple, list)):
        return tuple(float(x) for x in text)
    return tuple(float(x) for x in str(text).split(","))


def _parse_optional_float(text):
    return None if text in (None, "", "none", "None") else float(text)


CHANNEL_KEYS = {f.name: float for f in fields(ChannelParams)}
PROTOCOL_KEYS = {
    "mu": float,
    "nu": float,
    "phase_slices": _parse_int,
    "ec_efficiency": float,
    "rounds": _parse_int,
    "epsilon": float,
    "intensity_probabilities": _parse_probs,
    "n_alpha": _parse_optional_float,
}
SECTIONS = {"ChannelParams": CHANNEL_KEYS, "ProtocolParams": PROTOCOL_KEYS, "SimConfig": SIM_KEYS}


@dataclass
class RunConfig:
    command: str
    channel: ChannelParams
    protocol: ProtocolParams
    sim: SimConfig
    output: Path | None
    values: dict = field(default_factory=dict)

    def echo(self) -> dict:
        return {"command": self.command, **self.values}


def _add_param_flags(p: argparse.ArgumentParser):
    for section, keys in SECTIONS.items():
        grp = p.add_argument_group(section)
        for key in keys:
            names = [f"--{key}"]
            if "_" in key:
                names.append(f"--{key.replace('_', '-')}")
            if key == "misalignment":
                names.append("--e0")
            grp.add_argument(*names, dest=f"{section}.{key}", default=None, metavar=key.upper())
    p.add_argument("--config", type=Path, help="INI file with [ChannelParams], [ProtocolParams], [SimConfig]")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--output", type=Path, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pmqkd", description="Phase-matching QKD rates, estimation and simulation")
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)

    scan = sub.add_parser("scan", help="key rate versus distance")
    _add_param_flags(scan)
    scan.add_argument("--protocols", default="pm-asym,plob", help=f"comma list from {','.join(PROTOCOLS)}")
    scan.add_argument("--distances", default="0:500:5", help="start:stop:step (inclusive) or comma list, km")
    scan.add_argument("--no-optimize", action="store_true", help="use the configured mu instead of optimizing")
    scan.add_argument("--workers", type=int, default=None)

    sim = sub.add_parser("simulate", help="Monte Carlo tallies with a JSON metadata sidecar")
    _add_param_flags(sim)

    est = sub.add_parser("estimate", help="finite-size decoy estimate from a tally CSV")
    _add_param_flags(est)
    est.add_argument("--tallies", type=Path, required=True)
    est.add_argument("--groups", default=None, help="comma list of kept phase groups (default: all)")

    ver = sub.add_parser("verify-symmetry", help="Fock-space checks as CSV")
    ver.add_argument("--k-max", type=int, default=12)
    ver.add_argument("--seed", type=int, default=0)
    ver.add_argument("--output", type=Path, default=None)
    return parser


def _raw_values(args, sidecar: dict | None = None) -> dict:
    values = {s: {} for s in SECTIONS}
    if sidecar:
        for s in ("ChannelParams", "ProtocolParams"):
            values[s].update(sidecar.get(s, {}))
    preset = getattr(args, "preset", None)
    if preset:
        for s, kv in PRESETS[preset].items():
            values[s].update(kv)
    if getattr(args, "config", None):
        cp = configparser.ConfigParser()
        try:
            with open(args.config) as fh:
                cp.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError("config", str(exc)) from exc
        for s in cp.sections():
            if s not in SECTIONS:
                raise ConfigError(s, "unknown config section")
            for k, v in cp.items(s):
                if k not in SECTIONS[s]:
                    raise ConfigError(f"{s}.{k}", "unknown key")
                values[s][k] = v
    for s, keys in SECTIONS.items():
        for k in keys:
            v = getattr(args, f"{s}.{k}", None)
            if v is not None:
                values[s][k] = v
    return values


def _typed(values: dict) -> dict:
    out = {}
    for s, kv in values.items():
        out[s] = {}
        for k, v in kv.items():
            try:
                out[s][k] = SECTIONS[s][k](v) if isinstance(v, str) else v
            except ValueError as exc:
                raise ConfigError(k, f"cannot parse {v!r}: {exc}") from exc
    if "intensity_probabilities" in out["ProtocolParams"]:
        out["ProtocolParams"]["intensity_probabilities"] = _parse_probs(out["ProtocolParams"]["intensity_probabilities"])
    return out


def build_config(args, sidecar: dict | None = None) -> RunConfig:
    values = _typed(_raw_values(args, sidecar))
    channel = ChannelParams(**values["ChannelParams"])
    protocol = ProtocolParams(**values["ProtocolParams"])
    sv = dict(values["SimConfig"])
    drift = PhaseDrift(sv.pop("drift", "none"), sv.pop("drift_value", 0.0))
    sim = SimConfig(channel, protocol, drift=drift, **sv)
    echo = {
        "ChannelParams": vars_of(channel),
        "ProtocolParams": vars_of(protocol),
        "SimConfig": {
            "seed": sim.seed,
            "drift": drift.kind,
            "drift_value": drift.value,
            "batch_size": sim.batch_size,
            "engine": sim.engine,
            "j_delta": sim.compensation,
        },
    }
    return RunConfig(args.command, channel, protocol, sim, args.output, echo)


def vars_of(obj) -> dict:
    return {f.name: getattr(obj, f.name) for f in fields(obj)}


def fmt(x) -> str:
    return "%.12g" % x


def rounded(obj):
    """Floats to 12 significant digits; non-finite floats become strings."""
    if isinstance(obj, dict):
        return {str(k): rounded(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [rounded(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return float(fmt(x)) if math.isfinite(x) else fmt(x)
    return obj


def output_path(given: Path | None, default_name: str) -> Path:
    if given is not None:
        return given
    return Path(os.environ.get("PMQKD_OUTPUT_DIR", ".")) / default_name


def atomic_write(path: Path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def sidecar_path(tally_path: Path) -> Path:
    return Path(tally_path).with_suffix(".json")


def _distances(text: str) -> list[float]:
    try:
        if ":" in text:
            start, stop, step = (float(x) for x in text.split(":"))
            if step <= 0:
                raise ValueError("step must be > 0")
            return list(np.round(np.arange(start, stop + step / 2, step), 9))
        return [float(x) for x in text.split(",")]
    except ValueError as exc:
        raise ConfigError("distances", str(exc)) from exc


def cmd_scan(args) -> int:
    cfg = build_config(args)
    protocols = [p.strip() for p in args.protocols.split(",") if p.strip()]
    result = scan_distance(
        cfg.channel, cfg.protocol, protocols, _distances(args.distances), optimize=not args.no_optimize, workers=args.workers
    )
    path = output_path(cfg.output, "scan.csv")
    atomic_write(path, scan_to_csv(result, cfg.channel))
    for proto, d in result.crossings.items():
        print(f"{proto}: PLOB crossing at {'none' if d is None else fmt(d) + ' km'}")
    print(f"wrote {path}")
    return 0


def cmd_simulate(args) -> int:
    cfg = build_config(args)
    run = simulate_run(cfg.sim)
    path = output_path(cfg.output, "tallies.csv")
    # config values stay at full precision so estimate can rebuild them exactly
    meta = {
        "seed": cfg.sim.seed,
        "engine": cfg.sim.engine,
        "config": cfg.echo(),
        "runtime_s": float(fmt(run.runtime_s)),
        "double_clicks": run.double_clicks,
    }
    atomic_write(path, run.tallies.to_csv())
    atomic_write(sidecar_path(path), json.dumps(meta, indent=2) + "\n")
    print(f"wrote {path}")
    return 0


def estimate_json(est) -> str:
    return json.dumps(rounded(est.to_dict()), indent=2, sort_keys=True)


def cmd_estimate(args) -> int:
    try:
        text = Path(args.tallies).read_text()
    except OSError as exc:
        raise ConfigError("tallies", str(exc)) from exc
    side = sidecar_path(args.tallies)
    sidecar = json.loads(side.read_text())["config"] if side.exists() else None
    cfg = build_config(args, sidecar)
    try:
        tallies = TallyTable.from_csv(text)
    except ValueError as exc:
        raise ConfigError("tallies", str(exc)) from exc
    groups = None if args.groups is None else [int(g) for g in args.groups.split(",")]
    est = finite_size_estimate(tallies, cfg.protocol, groups)
    out = estimate_json(est)
    if cfg.output is not None:
        atomic_write(cfg.output, out + "\n")
    print(out)
    return 0


def symmetry_csv(rows) -> str:
    buf = io.StringIO()
    cols = ["check", "mu", "D", "bound", "value", "residual", "passed"]
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([fmt(r[c]) if isinstance(r[c], float) else ("" if r[c] is None else r[c]) for c in cols])
    return buf.getvalue()


def cmd_verify(args) -> int:
    text = symmetry_csv(symmetry_report(k_max=args.k_max, seed=args.seed))
    if args.output is not None:
        atomic_write(args.output, text)
    sys.stdout.write(text)
    return 0


COMMANDS = {"scan": cmd_scan, "simulate": cmd_simulate, "estimate": cmd_estimate, "verify-symmetry": cmd_verify}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING))
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DegenerateDataError as exc:
        print(f"degenerate data: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE


def main(argv=None):
    sys.exit(run(argv))
