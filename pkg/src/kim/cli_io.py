"""
Command-line front end, state files and machine-readable reports.

State files ("KIM1") are plain text: a header of ``key value`` lines
followed by the node values of the potential, one per line, printed with 17
significant digits so binary64 values round-trip exactly.  Traces are written
as CSV (fixed column order) plus a JSON summary.  Every command prints a JSON
summary on stdout.

Exit codes: 0 success, 2 solver failure, 3 positivity violation, 4 bad input.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from kim import __version__
from kim.dynamics import (
    TRACE_COLUMNS,
    IterationConfig,
    IterationTrace,
    PathKind,
    Verdict,
    continuity_path_solve,
    density_defect,
    flow_run,
    inverse_ricci_orbit,
    mobius_orbit_distance,
    nadel_forward_run,
    ricci_iteration_run,
    twisted_iteration_run,
)
from kim.errors import BadInput, KimError
from kim.functionals import functional_report, improved_mto_audit, mto_audit
from kim.kahler_core import (
    MetricState,
    TwistedFieldSpec,
    base_metric,
    make_metric,
    ricci_forward,
    ricci_forward_rescaled,
    ricci_index,
    ricci_inverse_fano,
    ricci_inverse_general,
)
from kim.ma_solver import SolverConfig
from kim.spectral_grid import (
    DEFAULT_F0_MODES,
    BackgroundGeometry,
    Kind,
    Potential,
    Symmetry,
    build_background,
    dilation_pullback_potential,
    random_potential,
)

FORMAT_VERSION = "KIM1"
COMMANDS = (
    "iterate", "twisted-iterate", "flow", "ric", "ric-inv", "ric-inv-general",
    "index", "energy", "mto", "mto-improved", "path", "orbit",
)
# amplitudes cycled through by the MTO audits; the larger ones are not Kahler
MTO_AMPLITUDES = (0.05, 0.2, 0.5, 1.0, 2.0, 4.0)


# ---------------------------------------------------------------- numbers


def fmt(x: Any) -> str:
    """17 significant digits for floats, plain text for the rest."""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if x is None:
        return "nan"
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return f"{x:.16e}"


def dumps(obj: Any, indent: int = 0) -> str:
    """Deterministic JSON with floats at 17 significant digits and sorted keys."""
    pad, inner = "  " * indent, "  " * (indent + 1)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{inner}{json.dumps(str(k))}: {dumps(v, indent + 1)}" for k, v in sorted(obj.items())]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        return "[" + ", ".join(dumps(v, indent + 1) for v in obj) + "]"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return "null" if not math.isfinite(obj) else fmt(obj)
    return json.dumps(str(obj))


# ---------------------------------------------------------------- state files


def _f0_text(bg: BackgroundGeometry, modes) -> str:
    if bg.kind is not Kind.NEGATIVE:
        return "none"
    return ";".join(",".join(fmt(v) if isinstance(v, float) else str(v) for v in m) for m in modes)


def persist_state(phi: MetricState | Potential, path: str | Path, f0_modes=DEFAULT_F0_MODES) -> None:
    """Write a KIM1 state file.  Non-Kahler potentials may be written too."""
    pot = phi.potential if isinstance(phi, MetricState) else phi
    bg = pot.background
    lines = [
        FORMAT_VERSION,
        f"kind {bg.kind.value}",
        f"N {bg.resolution}",
        f"V {fmt(bg.volume)}",
        f"mu {fmt(bg.mu)}",
        f"symmetry {bg.symmetry.value}",
        f"f0 {_f0_text(bg, f0_modes)}",
        f"created-by kim {__version__}",
        f"values {pot.values.size}",
    ]
    lines += [fmt(v) for v in pot.values.ravel()]
    try:
        Path(path).write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise BadInput(f"cannot write state file {path}: {exc}") from None


def load_state(
    path: str | Path,
    bg: BackgroundGeometry,
    require_kahler: bool = True,
    renormalize: bool = False,
    f0_modes=DEFAULT_F0_MODES,
) -> MetricState | Potential:
    """
    Read a KIM1 file, checking its header against ``bg``.

    Raises BadInput on format or header mismatch and PositivityViolation if
    ``require_kahler`` and the density is not positive.  A potential with
    nonzero mean is rejected unless ``renormalize``.
    """
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise BadInput(f"cannot read state file {path}: {exc}") from None
    lines = text.splitlines()
    if not lines or lines[0].strip() != FORMAT_VERSION:
        raise BadInput(f"{path}: not a {FORMAT_VERSION} state file")
    header: dict[str, str] = {}
    i = 1
    while i < len(lines):
        key, _, value = lines[i].strip().partition(" ")
        header[key] = value.strip()
        i += 1
        if key == "values":
            break
    expected = {
        "kind": bg.kind.value,
        "N": str(bg.resolution),
        "V": fmt(bg.volume),
        "mu": fmt(bg.mu),
        "symmetry": bg.symmetry.value,
        "f0": _f0_text(bg, f0_modes),
    }
    for key, want in expected.items():
        got = header.get(key)
        if key in ("V", "mu") and got is not None:
            try:
                same = float(got) == float(want)
            except ValueError:
                same = False
        else:
            same = got == want
        if not same:
            raise BadInput(f"{path}: header field {key!r} is {got!r}, expected {want!r}")
    try:
        count = int(header["values"])
        vals = np.array([float(s) for s in lines[i:] if s.strip()])
    except (KeyError, ValueError) as exc:
        raise BadInput(f"{path}: malformed values section ({exc})") from None
    if count != np.prod(bg.shape) or vals.size != count:
        raise BadInput(f"{path}: expected {int(np.prod(bg.shape))} values, found {vals.size}")
    if not np.all(np.isfinite(vals)):
        raise BadInput(f"{path}: non-finite values")
    vals = vals.reshape(bg.shape)
    mean = bg.average(vals)
    if abs(mean) > 1e-12 * max(1.0, float(np.max(np.abs(vals)))):
        if not renormalize:
            raise BadInput(f"{path}: potential has mean {mean:.3e}; pass --renormalize to shift it")
        vals = vals - mean
    if bg.symmetry is Symmetry.EVEN and np.max(np.abs(vals - vals[::-1])) > 1e-12 * max(
        1.0, float(np.max(np.abs(vals)))
    ):
        raise BadInput(f"{path}: values are not even in s")
    pot = Potential(bg, vals)
    return make_metric(pot) if require_kahler else pot


# ---------------------------------------------------------------- traces


def trace_csv(trace: IterationTrace) -> str:
    cols = list(TRACE_COLUMNS) + (["E0_twisted"] if trace.twisted else [])
    out = [",".join(cols)]
    for r in trace.records:
        out.append(",".join(fmt(v) for v in r.row(trace.twisted)))
    return "\n".join(out) + "\n"


def trace_summary(trace: IterationTrace) -> dict:
    last = trace.records[-1] if trace.records else None
    final = {}
    if last is not None:
        final = {k: getattr(last, k) for k in ("E0", "E1", "F_mu", "I", "J")}
        if trace.twisted:
            final["E0_twisted"] = last.E0_twisted
    summary = {
        "verdict": trace.verdict.value,
        "converged": trace.converged,
        "steps": trace.steps,
        "final": final,
        "rate_estimate": trace.rate_estimate(),
        "branch_flags": trace.branch_flags,
        "density_defect": density_defect(trace.final_state),
    }
    if trace.message:
        summary["message"] = trace.message
    return summary


def emit_trace(trace: IterationTrace, csv_path: str | Path | None, json_path: str | Path | None) -> dict:
    summary = trace_summary(trace)
    try:
        if csv_path:
            Path(csv_path).write_text(trace_csv(trace))
        if json_path:
            Path(json_path).write_text(dumps(summary) + "\n")
    except OSError as exc:
        raise BadInput(f"cannot write trace: {exc}") from None
    return summary


# ---------------------------------------------------------------- config


@dataclass
class RunConfig:
    command: str = ""
    bg: str = "sphere"
    N: int = 64
    V: float = 2.0
    symmetry: str = "none"
    f0_modes: str | None = None
    tau: float = 1.0
    steps: int = 40
    h: float = 0.01
    T: float = 1.0
    lam: float | None = None
    beta: float = 0.0
    terms: int = 8
    cap: int = 50
    samples: int = 100
    length: int = 10
    direction: str = "inverse"
    path_kind: str = "ricci-backward"
    param: float = 1.0
    seed: int | None = None
    amplitude: float = 0.1
    band: int = 6
    input: str | None = None
    input2: str | None = None
    output: str | None = None
    out_csv: str | None = None
    out_json: str | None = None
    renormalize: bool = False
    nonstandard_branch: bool = False
    residual_tol: float = 1e-11
    max_newton: int = 50

    def validate(self) -> None:
        if self.command not in COMMANDS:
            raise BadInput(f"command: unknown command {self.command!r}")
        for key in ("tau", "h", "T"):
            v = getattr(self, key)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise BadInput(f"{key}: must be positive, got {v!r}")
        for key in ("steps", "terms", "cap", "samples", "length", "band", "N", "max_newton"):
            if int(getattr(self, key)) < 1:
                raise BadInput(f"{key}: must be >= 1")
        if self.lam is not None and not self.lam > 0:
            raise BadInput("lam: must be positive")
        if not math.isfinite(self.beta):
            raise BadInput("beta: must be finite")
        if self.direction not in ("inverse", "forward"):
            raise BadInput("direction: must be 'inverse' or 'forward'")
        try:
            PathKind(self.path_kind)
        except ValueError:
            raise BadInput(f"path_kind: unknown path {self.path_kind!r}") from None
        if self.command in ("ric", "ric-inv", "ric-inv-general", "index") and not self.input:
            raise BadInput(f"input: required by {self.command}")

    def solver(self) -> SolverConfig:
        return SolverConfig(residual_tol=self.residual_tol, max_newton=int(self.max_newton))


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # exit 4 instead of argparse's 2
        print(f"kim: {message}", file=sys.stderr)
        raise SystemExit(BadInput.exit_code)


def _build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="kim", description="Discrete Kahler-Ricci dynamics on model surfaces.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON file of option values; flags override it")
    p.add_argument("--print-config", action="store_true", help="print the resolved configuration and exit")
    g = p.add_argument_group("background")
    g.add_argument("--bg", choices=[k.value for k in Kind])
    g.add_argument("--N", type=int)
    g.add_argument("--V", type=float)
    g.add_argument("--symmetry", choices=[s.value for s in Symmetry])
    g.add_argument("--f0-modes", dest="f0_modes", help="k1,k2,acos,asin;... (negative background)")
    d = p.add_argument_group("dynamics")
    for name, typ in (
        ("tau", float), ("steps", int), ("h", float), ("T", float), ("lam", float),
        ("beta", float), ("terms", int), ("cap", int), ("samples", int), ("length", int),
        ("param", float), ("seed", int), ("amplitude", float), ("band", int),
    ):
        d.add_argument(f"--{name}", type=typ)
    d.add_argument("--direction", choices=("inverse", "forward"))
    d.add_argument("--path-kind", dest="path_kind", choices=[k.value for k in PathKind])
    d.add_argument("--nonstandard-branch", dest="nonstandard_branch", action="store_const", const=True)
    s = p.add_argument_group("solver")
    s.add_argument("--residual-tol", dest="residual_tol", type=float)
    s.add_argument("--max-newton", dest="max_newton", type=int)
    io = p.add_argument_group("files")
    io.add_argument("--input")
    io.add_argument("--input2")
    io.add_argument("--output")
    io.add_argument("--out-csv", dest="out_csv")
    io.add_argument("--out-json", dest="out_json")
    io.add_argument("--renormalize", action="store_const", const=True)
    return p


def parse_config(argv: Sequence[str]) -> tuple[RunConfig, bool]:
    """Resolve defaults < config file < flags.  Returns the config and the print flag."""
    ns = _build_parser().parse_args(list(argv))
    known = {f.name for f in fields(RunConfig)}
    values: dict[str, Any] = {}
    if ns.config:
        try:
            data = json.loads(Path(ns.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise BadInput(f"config: cannot read {ns.config}: {exc}") from None
        if not isinstance(data, dict):
            raise BadInput("config: top level must be an object")
        for key, value in data.items():
            key_norm = key.replace("-", "_")
            if key_norm not in known or key_norm == "command":
                raise BadInput(f"{key}: unknown configuration key")
            values[key_norm] = value
    for key in known:
        v = getattr(ns, key, None)
        if v is not None:
            values[key] = v
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg, bool(ns.print_config)


# ---------------------------------------------------------------- commands


def _parse_modes(text: str | None):
    if text is None:
        return DEFAULT_F0_MODES
    try:
        modes = []
        for part in text.split(";"):
            k1, k2, ac, as_ = part.split(",")
            modes.append((int(k1), int(k2), float(ac), float(as_)))
    except ValueError:
        raise BadInput(f"f0_modes: cannot parse {text!r}") from None
    return tuple(modes)


def _background(cfg: RunConfig) -> tuple[BackgroundGeometry, tuple]:
    modes = _parse_modes(cfg.f0_modes)
    spec = modes if cfg.bg == Kind.NEGATIVE.value else None
    if cfg.f0_modes is not None and spec is None:
        raise BadInput("f0_modes: only valid for the negative background")
    return build_background(cfg.bg, cfg.N, cfg.V, spec, cfg.symmetry), modes


def _start(cfg: RunConfig, bg: BackgroundGeometry, modes, require_kahler: bool = True):
    if cfg.input:
        return load_state(cfg.input, bg, require_kahler, bool(cfg.renormalize), modes)
    if cfg.lam is not None:
        pot = dilation_pullback_potential(bg, cfg.lam)
    elif cfg.seed is not None:
        pot = random_potential(bg, cfg.seed, cfg.band, cfg.amplitude)
    else:
        pot = bg.zero_potential()
    return make_metric(pot) if require_kahler else pot


def _threads() -> int:
    raw = os.environ.get("KIM_THREADS")
    hw = os.cpu_count() or 1
    if raw is None:
        return hw
    try:
        n = int(raw)
    except ValueError:
        raise BadInput(f"KIM_THREADS: not an integer: {raw!r}") from None
    if n < 1:
        raise BadInput("KIM_THREADS: must be >= 1")
    return n


def _sample_seeds(seed: int, n: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n)]


def _run_trace(cfg: RunConfig, trace: IterationTrace, out: dict) -> int:
    out.update(emit_trace(trace, cfg.out_csv, cfg.out_json))
    if cfg.output:
        persist_state(trace.final_state, cfg.output)
    if trace.verdict is Verdict.SOLVER_FAILURE:
        return 2
    if trace.verdict is Verdict.POSITIVITY_FAILURE:
        return 3
    return 0


def run(cfg: RunConfig, stdout=None) -> int:
    stdout = stdout or sys.stdout
    bg, modes = _background(cfg)
    out: dict[str, Any] = {"command": cfg.command, "background": bg.describe()}
    code = 0
    c = cfg.command
    if c in ("iterate", "twisted-iterate"):
        start = _start(cfg, bg, modes)
        icfg = IterationConfig(
            tau=cfg.tau, steps=cfg.steps, solver=cfg.solver(),
            twist=TwistedFieldSpec(cfg.beta) if c == "twisted-iterate" else None,
            nonstandard_branch=bool(cfg.nonstandard_branch),
        )
        trace = ricci_iteration_run(start, icfg) if c == "iterate" else twisted_iteration_run(start, icfg)
        if trace.converged and bg.is_sphere and bg.symmetry is Symmetry.NONE:
            dist, lam = mobius_orbit_distance(trace.final_state)
            out["mobius_orbit_distance"] = dist
            out["mobius_lambda"] = lam
        code = _run_trace(cfg, trace, out)
    elif c == "flow":
        trace = flow_run(_start(cfg, bg, modes), cfg.h, cfg.T, cfg.solver())
        code = _run_trace(cfg, trace, out)
    elif c == "ric":
        m = _start(cfg, bg, modes)
        if bg.is_sphere and bg.volume != 2.0 and cfg.renormalize:
            psi, kahler = ricci_forward_rescaled(m)
        else:
            psi, kahler = ricci_forward(m)
        out.update(kahler=kahler, min_ricci_ratio=m.ricci.min_ricci_ratio)
        if cfg.output and kahler:
            persist_state(psi, cfg.output, modes)
    elif c == "ric-inv":
        res = ricci_inverse_fano(_start(cfg, bg, modes, require_kahler=False))
        out.update(min_density=res.min_density, min_ricci_ratio=res.ricci.min_ricci_ratio)
        if cfg.output:
            persist_state(res, cfg.output, modes)
    elif c == "ric-inv-general":
        res = ricci_inverse_general(_start(cfg, bg, modes))
        out.update(min_density=res.min_density, sup_potential=float(np.max(np.abs(res.values))))
        if cfg.output:
            persist_state(res, cfg.output, modes)
    elif c == "index":
        idx = ricci_index(_start(cfg, bg, modes), cfg.cap)
        out["index"] = str(idx)
        print(str(idx), file=sys.stderr)
    elif c == "energy":
        alpha = load_state(cfg.input, bg, True, bool(cfg.renormalize), modes) if cfg.input else base_metric(bg)
        if cfg.input2:
            beta = load_state(cfg.input2, bg, True, bool(cfg.renormalize), modes)
        else:
            beta = make_metric(random_potential(bg, cfg.seed or 0, cfg.band, cfg.amplitude))
        X = TwistedFieldSpec(cfg.beta) if cfg.beta and bg.is_sphere else None
        out["functionals"] = asdict(functional_report(alpha, beta, X))
    elif c in ("mto", "mto-improved"):
        seeds = _sample_seeds(cfg.seed or 0, cfg.samples)

        def audit(i: int):
            pot = random_potential(bg, seeds[i], cfg.band, MTO_AMPLITUDES[i % len(MTO_AMPLITUDES)])
            if c == "mto":
                return mto_audit(bg, pot).margin
            r = improved_mto_audit(bg, pot, cfg.terms)
            return r.strengthened_margin, r.margin, min(r.j_terms)

        with ThreadPoolExecutor(max_workers=_threads()) as pool:
            results = list(pool.map(audit, range(cfg.samples)))
        if c == "mto":
            out["min_margin"] = float(min(results))
            out["mobius_margins"] = {
                fmt(lam): mto_audit(bg, dilation_pullback_potential(bg, lam)).margin
                for lam in (0.5, 1.0, 2.0)
            } if bg.symmetry is Symmetry.NONE else {}
        else:
            out["min_strengthened_margin"] = float(min(r[0] for r in results))
            out["max_strengthening_excess"] = float(max(r[0] - r[1] for r in results))
            out["min_j_term"] = float(min(r[2] for r in results))
        out["samples"] = cfg.samples
    elif c == "path":
        base = _start(cfg, bg, modes)
        X = TwistedFieldSpec(cfg.beta) if cfg.path_kind == PathKind.TIAN_ZHU.value else None
        res = continuity_path_solve(bg, cfg.path_kind, cfg.param, base, X, cfg.solver())
        out.update(min_density=res.min_density, sup_potential=float(np.max(np.abs(res.values))))
        if cfg.output:
            persist_state(res, cfg.output, modes)
    elif c == "orbit":
        if cfg.direction == "inverse":
            orbit = inverse_ricci_orbit(_start(cfg, bg, modes, require_kahler=False), cfg.length)
            out["density_defects"] = [density_defect(m) for m in orbit]
            out["min_ricci_ratios"] = [m.ricci.min_ricci_ratio for m in orbit]
            last = orbit[-1]
        else:
            fwd = nadel_forward_run(_start(cfg, bg, modes), cfg.cap)
            out.update(index=fwd.index_label, E0=fwd.E0, e0_increasing=fwd.e0_increasing)
            last = fwd.states[-1]
        if cfg.output:
            persist_state(last, cfg.output, modes)
    stdout.write(dumps(out) + "\n")
    return code


def main(argv: Sequence[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        cfg, show = parse_config(argv)
        if show:
            sys.stdout.write(dumps(asdict(cfg)) + "\n")
            return 0
        return run(cfg)
    except SystemExit as exc:
        return int(exc.code or 0)
    except KimError as exc:
        print(f"kim: {exc}", file=sys.stderr)
        return exc.exit_code
    except np.linalg.LinAlgError as exc:
        print(f"kim: linear algebra failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
