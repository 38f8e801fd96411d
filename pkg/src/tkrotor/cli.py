"""Command line front end.

Every subcommand reads one :class:`RunConfig` assembled from defaults, an
optional INI file (``--config``), and flag overrides, in that order, then
emits CSV/JSON files into ``--out-dir``.  Outputs are pure functions of the
configuration: floats are written in shortest round-trip form, so identical
configurations produce byte-identical files.

Exit codes: 0 success, 1 configuration problems, 2 numerical/resolution
problems, 3 invalid patch geometry, 4 physics signals (trivial phase,
truncation overflow).
"""

import argparse
import configparser
import csv
import dataclasses
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .angular import LatticeSpec, PulseVector
from .dynamics import Protocol, edge_state, evolve, protocol_preset, thermal_state
from .errors import (
    ConfigError,
    InvalidPatchError,
    NumericalError,
    PhysicsSignalError,
    UnderResolvedLoopError,
)
from .floquet import band_grid
from .topology import (
    PatchSpec,
    assign_dirac_strings,
    detect_nodes,
    nodal_line_map,
    patch_euler_report,
    zak_phase,
    zak_phases,
)

__all__ = ["RunConfig", "main"]

PRESETS = ("fig1_circle", "fig3_family", "ads", "free")

# Commands whose torus grids must resolve band features.
GRID_COMMANDS = ("topology", "zak", "euler")


@dataclass
class RunConfig:
    """Effective settings of one command invocation.

    The INI serialization groups the fields into sections ([run], [grid],
    [protocol], [evolve], [zak], [patch], [phase_diagram], [output]) and
    round-trips losslessly through :meth:`to_ini` / :meth:`from_ini`.
    """

    N: int = 3
    l_max: int = 201
    mode: str = "exact"
    multiplier: int = 1
    threads: int = 1
    n_k: int = 100
    n_alpha: int = 100
    preset: str = "ads"
    beta: float = None
    pulses: tuple = None
    theta: float = 0.17
    n_gamma: int = 40
    cycles: int = 1
    state: str = "thermal"
    gap: int = 3
    direction: str = "k"
    patch: tuple = None
    p1_min: float = 0.0
    p1_max: float = 8.0
    p4_min: float = 0.0
    p4_max: float = 8.0
    n_p1: int = 16
    n_p4: int = 16
    map_n_k: int = 64
    out_dir: str = "."

    _SECTIONS = {
        "run": ("N", "l_max", "mode", "multiplier", "threads"),
        "grid": ("n_k", "n_alpha"),
        "protocol": ("preset", "beta", "pulses", "theta", "n_gamma", "cycles"),
        "evolve": ("state", "gap"),
        "zak": ("direction",),
        "patch": ("patch",),
        "phase_diagram": ("p1_min", "p1_max", "p4_min", "p4_max",
                          "n_p1", "n_p4", "map_n_k"),
        "output": ("out_dir",),
    }

    def to_ini(self, path):
        cp = configparser.ConfigParser()
        for section, names in self._SECTIONS.items():
            items = {}
            for name in names:
                value = getattr(self, name)
                if value is None:
                    continue
                if isinstance(value, tuple):
                    value = ", ".join(repr(float(v)) for v in value)
                elif isinstance(value, float):
                    value = repr(value)
                else:
                    value = str(value)
                items[name] = value
            if items:
                cp[section] = items
        with open(path, "w", encoding="utf-8") as fh:
            cp.write(fh)

    @classmethod
    def from_ini(cls, path):
        cp = configparser.ConfigParser()
        read = cp.read(path)
        if not read:
            raise ConfigError(f"config file {path!r} not found or unreadable")
        cfg = cls()
        cfg.apply_ini(cp)
        return cfg

    def apply_ini(self, cp):
        """Overlay values from a parsed INI file onto this config."""
        known = {name.lower(): name for names in self._SECTIONS.values()
                 for name in names}
        for section in cp.sections():
            if section not in self._SECTIONS:
                raise ConfigError(f"unknown config section [{section}]")
            for key, raw in cp[section].items():
                name = known.get(key)
                if name is None or name not in self._SECTIONS[section]:
                    raise ConfigError(
                        f"unknown key {key!r} in config section [{section}]"
                    )
                try:
                    setattr(self, name, _parse_field(name, raw))
                except ValueError as exc:
                    raise ConfigError(
                        f"bad value for [{section}] {key}: {exc}"
                    ) from exc

    def validate(self, command):
        if self.mode not in ("exact", "asymptotic"):
            raise ConfigError(
                f"mode must be 'exact' or 'asymptotic', got {self.mode!r}"
            )
        if self.preset not in PRESETS:
            raise ConfigError(
                f"unknown protocol preset {self.preset!r}; choose from "
                + ", ".join(PRESETS)
            )
        if self.direction not in ("k", "alpha"):
            raise ConfigError(
                f"zak direction must be 'k' or 'alpha', got {self.direction!r}"
            )
        if self.state not in ("thermal", "edge"):
            raise ConfigError(
                f"evolve state must be 'thermal' or 'edge', got {self.state!r}"
            )
        if command in GRID_COMMANDS and min(self.n_k, self.n_alpha) < 8:
            raise ConfigError(
                f"[grid] n_k and n_alpha must be >= 8 for the {command} "
                f"command, got {self.n_k} x {self.n_alpha}"
            )
        if self.patch is not None and len(self.patch) != 5:
            raise ConfigError(
                "patch must have five entries: k_min, k_max, alpha_min, "
                "alpha_max, gap"
            )


_FLOAT_FIELDS = ("beta", "theta", "p1_min", "p1_max", "p4_min", "p4_max")
_INT_FIELDS = ("N", "l_max", "multiplier", "threads", "n_k", "n_alpha",
               "n_gamma", "cycles", "gap", "n_p1", "n_p4", "map_n_k")


def _parse_field(name, raw):
    if name in _INT_FIELDS:
        return int(raw)
    if name in _FLOAT_FIELDS:
        return float(raw)
    if name == "pulses":
        vals = tuple(float(x) for x in raw.split(","))
        if len(vals) != 4:
            raise ValueError(f"need 4 comma-separated strengths, got {len(vals)}")
        return vals
    if name == "patch":
        vals = [float(x) for x in raw.split(",")]
        if len(vals) != 5:
            raise ValueError(f"need 5 comma-separated entries, got {len(vals)}")
        return (*vals[:4], int(vals[4]))
    return raw


# ---------------------------------------------------------------------------
# Shared builders
# ---------------------------------------------------------------------------


def _protocol(cfg):
    if cfg.pulses is not None:
        pv = PulseVector(*cfg.pulses)

        def fn(alphas):
            return tuple(np.full_like(alphas, p) for p in pv.as_array())

        return Protocol("custom", fn, cfg.n_gamma, cfg.cycles)
    return protocol_preset(cfg.preset, beta=cfg.beta,
                           n_gamma=cfg.n_gamma, cycles=cfg.cycles)


def _grid(cfg):
    """Band grid of the configured loop, labels anchored at alpha ~ pi.

    Gap indices in reports and patch rectangles refer to this anchoring:
    band 1 is the lowest branch-window band at the first-k, alpha ~ pi
    grid point.
    """
    kwargs = dict(multiplier=cfg.multiplier)
    if cfg.pulses is not None:
        g = band_grid(cfg.N, cfg.n_k, cfg.n_alpha,
                      pulses=PulseVector(*cfg.pulses), **kwargs)
    elif cfg.preset in ("ads", "free"):
        g = band_grid(cfg.N, cfg.n_k, cfg.n_alpha,
                      pulses=protocol_preset(cfg.preset).pulses(0.0), **kwargs)
    else:
        g = band_grid(cfg.N, cfg.n_k, cfg.n_alpha, protocol=_protocol(cfg),
                      **kwargs)
    return g.rebase(0, cfg.n_alpha // 2 - 1)


def _out_dir(cfg):
    path = Path(cfg.out_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, ensure_ascii=False, indent=2)
        fh.write("\n")


def _write_zak_csv(path, phases, n_bands):
    """Zak-phase table; guard-rejected loops leave their cells empty."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["index"] + [f"phase_{b}" for b in range(1, n_bands + 1)])
        for idx, row in enumerate(phases):
            writer.writerow([str(idx)] + ["" if v is None else repr(float(v))
                                          for v in row])


def _loop_zak(grid, direction):
    """Per-loop Zak phases with None where the trust guard rejects."""
    n_k, n_alpha = grid.shape
    out = []
    indices = range(n_alpha) if direction == "k" else range(n_k)
    for idx in indices:
        row = []
        for band in range(grid.n_bands):
            frames = (grid.frames[:, idx, :, band] if direction == "k"
                      else grid.frames[idx, :, :, band])
            try:
                row.append(zak_phase(frames))
            except UnderResolvedLoopError:
                row.append(None)
        out.append(row)
    return out


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_bands(cfg):
    grid = _grid(cfg)
    path = _out_dir(cfg) / "bands.csv"
    grid.to_csv(path)
    print(f"wrote {path}")


def cmd_topology(cfg):
    grid = _grid(cfg)
    nodes = detect_nodes(grid)
    assignment = assign_dirac_strings(grid)
    out = _out_dir(cfg)
    _write_json(out / "nodes.json", [n.as_dict() for n in nodes])
    _write_json(out / "strings.json", [s.as_dict() for s in assignment.strings])
    for direction in ("k", "alpha"):
        _write_zak_csv(out / f"zak_{direction}.csv",
                       _loop_zak(grid, direction), grid.n_bands)
    print(f"nodes: {len(nodes)}  strings: {len(assignment.strings)}")
    if cfg.patch is not None:
        report = patch_euler_report(grid, PatchSpec(*cfg.patch))
        _write_json(out / "euler.json", report.as_dict())
        print(f"chi: {report.chi}")
    print(f"wrote {out / 'nodes.json'}")


def cmd_phase_diagram(cfg):
    p1 = np.linspace(cfg.p1_min, cfg.p1_max, cfg.n_p1)
    p4 = np.linspace(cfg.p4_min, cfg.p4_max, cfg.n_p4)
    chart = nodal_line_map(p1, p4, N=cfg.N, n_k=cfg.map_n_k,
                           multiplier=cfg.multiplier, threads=cfg.threads)
    path = _out_dir(cfg) / "phase_diagram.csv"
    chart.to_csv(path)
    print(f"line gaps: {chart.line_gaps()}")
    print(f"wrote {path}")


def cmd_evolve(cfg):
    spec = LatticeSpec(cfg.l_max, cfg.N)
    protocol = _protocol(cfg)
    if cfg.state == "thermal":
        state = thermal_state(cfg.theta, spec)
    else:
        state = edge_state(protocol.pulses(0.0), spec, cfg.gap,
                           mode=cfg.mode, multiplier=cfg.multiplier)
    trace = evolve(state, protocol, mode=cfg.mode, multiplier=cfg.multiplier)
    out = _out_dir(cfg)
    trace.to_csv(out / "trace.csv")
    trace.populations_to_csv(out / "populations.csv")
    print(f"final l2: {float(trace.l2_expectation[-1])!r}  "
          f"tail_exceeded: {str(trace.tail_exceeded).lower()}")
    print(f"wrote {out / 'trace.csv'}")


def cmd_zak(cfg):
    grid = _grid(cfg)
    phases = zak_phases(grid, cfg.direction)
    path = _out_dir(cfg) / "zak.csv"
    _write_zak_csv(path, phases.tolist(), grid.n_bands)
    print(f"wrote {path}")


def cmd_euler(cfg):
    if cfg.patch is None:
        raise ConfigError(
            "the euler command needs a patch: five comma-separated values "
            "k_min, k_max, alpha_min, alpha_max, gap"
        )
    grid = _grid(cfg)
    report = patch_euler_report(grid, PatchSpec(*cfg.patch))
    path = _out_dir(cfg) / "euler.json"
    _write_json(path, report.as_dict())
    print(f"chi: {report.chi}  chi_raw: {report.chi_raw!r}")
    print(f"wrote {path}")


COMMANDS = {
    "bands": cmd_bands,
    "topology": cmd_topology,
    "phase-diagram": cmd_phase_diagram,
    "evolve": cmd_evolve,
    "zak": cmd_zak,
    "euler": cmd_euler,
}


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    # usage mistakes are config errors (exit 1), not argparse's exit 2
    def error(self, message):
        raise ConfigError(message)


def _build_parser():
    # global flags live in a parent so they parse before or after the
    # subcommand; SUPPRESS keeps an absent post-command flag from wiping a
    # value parsed pre-command
    common = _Parser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS,
                        help="INI file with run settings")
    common.add_argument("--out-dir", dest="out_dir", default=argparse.SUPPRESS,
                        help="output directory")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                        help="worker cap for sweeps")
    common.add_argument("--mode", choices=("exact", "asymptotic"),
                        default=argparse.SUPPRESS,
                        help="kick matrix elements")
    common.add_argument("--free-phase-multiplier", dest="multiplier", type=int,
                        default=argparse.SUPPRESS,
                        help="integer multiplier of the free rotation phase")
    parser = _Parser(
        prog="tkrotor",
        description="Band topology and stroboscopic dynamics of the "
                    "triple-kicked quantum rotor at resonance.",
        parents=[common],
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text, *groups):
        p = sub.add_parser(name, help=help_text, parents=[common])
        if "grid" in groups:
            p.add_argument("--preset", help="protocol preset for the loop axis")
            p.add_argument("--beta", type=float, help="braiding-family scale")
            p.add_argument("--pulses", type=lambda s: _parse_field("pulses", s),
                           help="constant pulse point p1,p2,p3,p4")
            p.add_argument("--N", type=int, help="resonance order / band count")
            p.add_argument("--n-k", dest="n_k", type=int)
            p.add_argument("--n-alpha", dest="n_alpha", type=int)
        if "patch" in groups:
            p.add_argument("--patch", type=lambda s: _parse_field("patch", s),
                           help="k_min,k_max,alpha_min,alpha_max,gap")
        return p

    add("bands", "quasienergy bands on the (k, alpha) torus", "grid")
    add("topology", "nodes, strings, Zak phases, optional patch Euler class",
        "grid", "patch")

    pd = sub.add_parser("phase-diagram", help="nodal-line sweep over (P1, P4)",
                        parents=[common])
    pd.add_argument("--N", type=int)
    pd.add_argument("--n-p1", dest="n_p1", type=int)
    pd.add_argument("--n-p4", dest="n_p4", type=int)
    pd.add_argument("--p1-min", dest="p1_min", type=float)
    pd.add_argument("--p1-max", dest="p1_max", type=float)
    pd.add_argument("--p4-min", dest="p4_min", type=float)
    pd.add_argument("--p4-max", dest="p4_max", type=float)
    pd.add_argument("--map-n-k", dest="map_n_k", type=int)

    ev = sub.add_parser("evolve", help="drive a prepared state through a loop",
                        parents=[common])
    ev.add_argument("--preset")
    ev.add_argument("--beta", type=float)
    ev.add_argument("--pulses", type=lambda s: _parse_field("pulses", s))
    ev.add_argument("--N", type=int)
    ev.add_argument("--l-max", dest="l_max", type=int)
    ev.add_argument("--state", choices=("thermal", "edge"))
    ev.add_argument("--theta", type=float)
    ev.add_argument("--gap", type=int)
    ev.add_argument("--n-gamma", dest="n_gamma", type=int)
    ev.add_argument("--cycles", type=int)

    zk = add("zak", "Wilson-loop Zak phases of every line in one direction",
             "grid")
    zk.add_argument("--direction", choices=("k", "alpha"))

    add("euler", "patch Euler class of a gap's node pair", "grid", "patch")
    return parser


def _load_config(args):
    cfg = RunConfig()
    config_path = getattr(args, "config", None)
    if config_path:
        cp = configparser.ConfigParser()
        if not cp.read(config_path):
            raise ConfigError(f"config file {config_path!r} not found")
        cfg.apply_ini(cp)
    for field in dataclasses.fields(RunConfig):
        value = getattr(args, field.name, None)
        if value is not None:
            setattr(cfg, field.name, value)
    cfg.validate(args.command)
    return cfg


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _load_config(args)
        COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except InvalidPatchError as exc:
        print(f"invalid patch: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical error: {exc}\nretry on a finer grid "
              "(double n_k / n_alpha) or shift the grid offset",
              file=sys.stderr)
        return 2
    except PhysicsSignalError as exc:
        print(f"physics signal: {exc}", file=sys.stderr)
        return 4
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
