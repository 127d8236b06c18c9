"""Command line entry point, configuration parsing, and file formats.

Configuration files are plain ``key = value`` text with sections
``[shape]``, ``[step]``, ``[flow]`` and ``[output]``; parsing is strict
(unknown and duplicate keys are rejected with the offending line).  All
floating-point output is printed with 17 significant digits so repeated
identical runs produce bit-identical artifacts.

Exit codes: 0 success, 1 usage error, 2 numerical failure (diagnostics
are still written).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

__all__ = ["ConfigError", "parse_config", "main", "entrypoint", "TOOL_VERSION"]

TOOL_VERSION = "flatflow 0.1.0"


class ConfigError(ValueError):
    """Invalid configuration; names the offending key and line."""

    def __init__(self, message, key=None, line=None):
        self.key = key
        self.line = line
        prefix = ""
        if key is not None:
            prefix += f"key '{key}'"
        if line is not None:
            prefix += f" (line {line})"
        super().__init__(f"{prefix}: {message}" if prefix else message)


_SECTIONS = ("shape", "step", "flow", "output")

_SHAPE_KEYS = {
    "circle": {"R": float, "n": int},
    "ellipse": {"a": float, "b": float, "n": int},
    "perturbed_circle": {"R": float, "mode": int, "amplitude": float, "n": int},
    "sphere": {"R": float, "subdiv": int},
    "perturbed_sphere": {"R": float, "degree": int, "order": int,
                         "amplitude": float, "subdiv": int},
    "curve_file": {"path": str},
    "mesh_file": {"path": str},
}

_STEP_KEYS = {"h": float, "delta": float, "max_picard": int,
              "picard_tol": float, "fallback": str}
_FLOW_KEYS = {"n_steps": int, "t_final": float, "remesh": str,
              "quality_ratio": float, "min_angle_deg": float,
              "edge_ratio_cap": float}
_OUTPUT_KEYS = {"snapshot_every": int}


def _parse_sections(text):
    """Split config text into {section: {key: (raw, line)}} strictly."""
    sections = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].split(";", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip()
            if name not in _SECTIONS:
                raise ConfigError(f"unknown section [{name}]", line=lineno)
            if name in sections:
                raise ConfigError(f"duplicate section [{name}]", line=lineno)
            sections[name] = {}
            current = name
            continue
        if "=" not in line:
            raise ConfigError("expected 'key = value'", line=lineno)
        if current is None:
            raise ConfigError("key outside of any section", line=lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError("empty key", line=lineno)
        if key in sections[current]:
            first = sections[current][key][1]
            raise ConfigError(f"duplicate (first on line {first})",
                              key=key, line=lineno)
        sections[current][key] = (value, lineno)
    return sections


def _convert(key, raw, line, typ):
    try:
        if typ is int:
            val = int(raw)
        elif typ is float:
            val = float(raw)
        else:
            val = raw
    except ValueError:
        raise ConfigError(f"expected {typ.__name__}, got {raw!r}",
                          key=key, line=line) from None
    return val


def _take_section(sections, name, allowed):
    out = {}
    for key, (raw, line) in sections.get(name, {}).items():
        if key not in allowed:
            raise ConfigError(f"unknown key in [{name}]", key=key, line=line)
        out[key] = (_convert(key, raw, line, allowed[key]), line)
    return out


def parse_config(text: str):
    """Parse configuration text into a validated FlowConfig.

    Unknown keys, duplicate keys, type mismatches and constraint
    violations are rejected with the offending key and line.
    """
    from .flow_driver import FlowConfig
    from .mm_step import StepConfig

    sections = _parse_sections(text)

    shape_raw = sections.get("shape", {})
    if "kind" not in shape_raw:
        raise ConfigError("section [shape] needs a 'kind' entry")
    kind, kind_line = shape_raw["kind"]
    if kind not in _SHAPE_KEYS:
        raise ConfigError(f"unknown shape kind {kind!r}", key="kind",
                          line=kind_line)
    allowed = dict(_SHAPE_KEYS[kind], kind=str)
    shape = {k: v for k, (v, _) in _take_section(sections, "shape", allowed).items()}
    missing = set(_SHAPE_KEYS[kind]) - set(shape)
    if missing:
        raise ConfigError(f"shape {kind!r} missing key(s) {sorted(missing)}")

    step_vals = _take_section(sections, "step", _STEP_KEYS)
    if "h" not in step_vals:
        raise ConfigError("section [step] needs 'h'")
    h, h_line = step_vals["h"]
    if h <= 0:
        raise ConfigError("must be positive", key="h", line=h_line)
    delta = step_vals.get("delta", (None, None))
    if delta[0] is not None and delta[0] <= 0:
        raise ConfigError("must be positive", key="delta", line=delta[1])
    kwargs = {"h": h, "delta": delta[0]}
    for name in ("max_picard", "picard_tol", "fallback"):
        if name in step_vals:
            kwargs[name] = step_vals[name][0]
    try:
        step_cfg = StepConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    flow_vals = _take_section(sections, "flow", _FLOW_KEYS)
    out_vals = _take_section(sections, "output", _OUTPUT_KEYS)
    flow_kwargs = {name: val for name, (val, _) in flow_vals.items()}
    if "snapshot_every" in out_vals:
        flow_kwargs["snapshot_every"] = out_vals["snapshot_every"][0]
    try:
        return FlowConfig(shape=shape, step=step_cfg, **flow_kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def apply_overrides(text: str, overrides) -> str:
    """Apply repeatable ``section.key=value`` overrides to config text.

    Produces the same FlowConfig as editing the file: the key is
    replaced in place when present, appended to its section otherwise.
    """
    lines = text.splitlines()
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must be section.key=value, got {item!r}")
        target, value = (s.strip() for s in item.split("=", 1))
        section, key = (s.strip() for s in target.split(".", 1))
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section in override {item!r}")
        lines = _override_lines(lines, section, key, value)
    return "\n".join(lines) + "\n"


def _override_lines(lines, section, key, value):
    out = []
    in_section = False
    replaced = False
    section_end = None
    for idx, raw in enumerate(lines):
        stripped = raw.split("#", 1)[0].split(";", 1)[0].strip()
        if stripped.startswith("[") and stripped.endswith("]"):
            if in_section and not replaced:
                section_end = len(out)
            in_section = stripped[1:-1].strip() == section
        elif in_section and "=" in stripped and not replaced:
            if stripped.split("=", 1)[0].strip() == key:
                out.append(f"{key} = {value}")
                replaced = True
                continue
        out.append(raw)
    if not replaced:
        if section_end is not None:
            out.insert(section_end, f"{key} = {value}")
        elif any(s.strip() == f"[{section}]" for s in lines):
            out.append(f"{key} = {value}")
        else:
            out.extend([f"[{section}]", f"{key} = {value}"])
    return out


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def write_manifest(out_dir, config_text, cfg, exit_status, summary):
    """Write manifest.json: config echo, version, digests, status, metrics."""
    import dataclasses

    digests = {"config": _sha256(config_text.encode("utf-8"))}
    if cfg is not None and cfg.shape.get("kind") in ("curve_file", "mesh_file"):
        path = cfg.shape["path"]
        try:
            with open(path, "rb") as fh:
                digests[os.path.basename(path)] = _sha256(fh.read())
        except OSError:
            digests[os.path.basename(path)] = "unreadable"
    echo = None
    if cfg is not None:
        echo = dataclasses.asdict(cfg)
        echo["step"] = dataclasses.asdict(cfg.step)
    manifest = {
        "tool_version": TOOL_VERSION,
        "config": echo,
        "input_digests": digests,
        "exit_status": exit_status,
        "summary": summary,
    }
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _build_parser():
    parser = _Parser(prog="flatflow", description=__doc__)
    sub = parser.add_subparsers(dest="command")

    def common(p, out_required):
        p.add_argument("--config", required=True, help="configuration file")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--override", action="append", default=[],
                       metavar="SECTION.KEY=VALUE")
        p.add_argument("--quiet", action="store_true")

    common(sub.add_parser("run", help="run a flow"), out_required=True)
    common(sub.add_parser("step", help="run a single step and print it"),
           out_required=False)
    common(sub.add_parser("check", help="geometry health report"),
           out_required=False)

    spec = sub.add_parser("spectrum", help="linearized decay-rate table")
    spec.add_argument("--shape", choices=("circle", "sphere"), required=True)
    spec.add_argument("--R", type=float, default=1.0)
    spec.add_argument("--kmax", type=int, required=True)
    spec.add_argument("--out", help="optional directory for spectrum.json")
    spec.add_argument("--quiet", action="store_true")

    conv = sub.add_parser("converge", help="self-convergence table")
    common(conv, out_required=False)
    conv.add_argument("--h-list", required=True,
                      help="comma-separated time steps, e.g. 1e-4,5e-5,2.5e-5")
    conv.add_argument("--t-final", type=float, required=True)
    return parser


def _load_config(args):
    try:
        with open(args.config, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise _UsageError(f"cannot read config: {exc}")
    text = apply_overrides(text, args.override)
    return text, parse_config(text)


def _fmt(x):
    return f"{x:.17g}"


def _cmd_run(args):
    from .flow_driver import run

    text, cfg = _load_config(args)
    result = run(cfg, out_dir=args.out)
    exit_code = 0 if result.ok else 2
    write_manifest(args.out, text, cfg, exit_code, result.summary())
    if not args.quiet:
        s = result.summary()
        print(f"status: {s['status']}  steps: {s['steps_accepted']}  "
              f"perimeter: {_fmt(s['final_perimeter'])}")
        if result.halted_reason:
            print(f"halted: {result.halted_reason}")
    return exit_code


def _cmd_step(args):
    import numpy as np

    from . import laplace_beltrami as lb
    from .geometry import build_shape, compute_curvature, estimate_ubc_radius
    from .mm_step import step
    import dataclasses

    text, cfg = _load_config(args)
    surface = build_shape(cfg.shape)
    curvature = compute_curvature(surface)
    solver = lb.assemble(surface)
    step_cfg = cfg.step
    if step_cfg.delta is None:
        from .normal_graph import ubc_height_bound

        step_cfg = dataclasses.replace(step_cfg,
                                       delta=ubc_height_bound(curvature) / 8.0)
    result = step(surface, curvature, solver, step_cfg)
    report = {
        "converged": bool(result.converged),
        "picard_iters": result.picard_iters,
        "distance": result.distance,
        "el_residual": result.el_residual,
        "constraint_margin": result.constraint_margin,
        "multiplier_per_component": list(result.multiplier_per_component),
        "max_psi": float(np.abs(result.psi).max()),
        "ubc_estimate": estimate_ubc_radius(surface, curvature,
                                            proximity_cap=5.0 * step_cfg.delta),
    }
    if not args.quiet:
        for key in ("converged", "picard_iters"):
            print(f"{key}: {report[key]}")
        for key in ("distance", "el_residual", "constraint_margin", "max_psi",
                    "ubc_estimate"):
            print(f"{key}: {_fmt(report[key])}")
        print("multiplier_per_component: "
              + " ".join(_fmt(v) for v in report["multiplier_per_component"]))
    exit_code = 0 if result.converged else 2
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "step.json"), "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
        write_manifest(args.out, text, cfg, exit_code, report)
    return exit_code


def _cmd_check(args):
    import numpy as np

    from .geometry import build_shape, compute_curvature, estimate_ubc_radius, measure

    text, cfg = _load_config(args)
    surface = build_shape(cfg.shape)
    curvature = compute_curvature(surface)
    m = measure(surface)
    ubc = estimate_ubc_radius(surface, curvature)
    report = {
        "mode": surface.mode,
        "vertices": surface.n_vertices,
        "components": surface.n_components,
        "perimeter": m.perimeter,
        "volumes": list(m.volume_per_component),
        "H_min": float(curvature.H.min()),
        "H_max": float(curvature.H.max()),
        "ubc_estimate": ubc,
        "min_edge": float(surface.edge_lengths().min()),
    }
    if not args.quiet:
        for key, val in report.items():
            if isinstance(val, float):
                print(f"{key}: {_fmt(val)}")
            elif isinstance(val, list):
                print(f"{key}: " + " ".join(_fmt(v) for v in val))
            else:
                print(f"{key}: {val}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "check.json"), "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
        write_manifest(args.out, text, cfg, 0, report)
    return 0


def _cmd_spectrum(args):
    from .oracles import linear_rate

    rows = [(k, linear_rate(args.shape, args.R, k)) for k in range(args.kmax + 1)]
    if not args.quiet:
        print("mode,rate")
        for k, rate in rows:
            print(f"{k},{_fmt(rate)}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "spectrum.json"), "w",
                  encoding="utf-8") as fh:
            json.dump({"shape": args.shape, "R": args.R,
                       "rates": {str(k): r for k, r in rows}},
                      fh, indent=2, sort_keys=True)
            fh.write("\n")
    return 0


def _cmd_converge(args):
    from .flow_driver import self_convergence

    text, cfg = _load_config(args)
    h_list = [float(tok) for tok in args.h_list.split(",")]
    table = self_convergence(cfg, h_list, args.t_final)
    if not args.quiet:
        print("h_pairs_errors: "
              + " ".join(_fmt(e) for e in table["errors"]))
        if table["exact"]:
            print("order: exact")
        else:
            print(f"order: {_fmt(table['order'])}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "converge.json"), "w",
                  encoding="utf-8") as fh:
            json.dump(table, fh, indent=2, sort_keys=True)
            fh.write("\n")
        write_manifest(args.out, text, cfg, 0, table)
    return 0


_COMMANDS = {
    "run": _cmd_run,
    "step": _cmd_step,
    "check": _cmd_check,
    "spectrum": _cmd_spectrum,
    "converge": _cmd_converge,
}


def main(argv=None) -> int:
    """Entry point; returns the process exit code."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise _UsageError("a subcommand is required (run, step, check, "
                              "spectrum, converge)")
        return _COMMANDS[args.command](args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # numerical failure: diagnostics already flushed
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entrypoint():
    """Console-script shim; applies the thread cap before numpy loads."""
    threads = os.environ.get("FLATFLOW_THREADS")
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ.setdefault(var, threads)
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
