"""Command-line experiment runner.

Each invocation runs one scenario and writes plot-ready CSV files, each with
a ``#schema=<kind>.v1`` first line, plus a JSON sidecar holding everything
needed to reproduce them. Exit codes: 0 success, 2 verification failure,
1 error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import sys
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, from_dict, load_config

__all__ = ["ReproError", "main", "repro_check", "run", "run_config"]

EXIT_OK, EXIT_ERROR, EXIT_VERIFY_FAIL = 0, 1, 2


class ReproError(ValueError):
    """Sidecars that cannot be compared."""


# ---------------------------------------------------------------------------
# output helpers


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (tuple, list, np.ndarray)):
        return " ".join(_cell(c) for c in v)
    return str(v)


def _csv_text(kind: str, columns: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    buf.write(f"#schema={kind}.v1\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(v) for v in r])
    return buf.getvalue()


class _Outputs:
    def __init__(self, out_dir: Path, stem: str):
        self.dir = out_dir
        self.stem = stem
        self.files: dict[str, str] = {}

    def add(self, kind: str, columns, rows) -> Path:
        text = _csv_text(kind, columns, rows)
        name = f"{self.stem}.{kind}.csv"
        path = self.dir / name
        path.write_text(text)
        self.files[name] = hashlib.sha256(text.encode()).hexdigest()
        return path


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (np.floating, float)):
        f = float(v)
        return f if math.isfinite(f) else repr(f)
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


def _max_or_none(vals):
    vals = [float(v) for v in vals if v is not None and np.isfinite(v)]
    return max(vals) if vals else None


# ---------------------------------------------------------------------------
# scenarios


def _scenario_spectral(cfg: ExperimentConfig, kernel, law, out: _Outputs, meta: dict) -> int:
    from .spectral import DivergentIntegral, band_of, beta_c, classify, green_values, _points

    p = cfg.params
    d = kernel.d
    ys = _points(d, p["y"])
    rows, errs = [], []
    for lam in p["lambdas"]:
        for x in p["x"]:
            xs = _points(d, x)
            try:
                vals, err = green_values(kernel, lam, ys - xs)
            except DivergentIntegral:
                rows.append((lam, xs[0].tolist(), ys[0].tolist(), None, None, "divergent"))
                continue
            rows.append((lam, xs[0].tolist(), ys[0].tolist(), float(vals[0]), float(err[0]), "ok"))
            errs.append(float(err[0]))
    out.add("green", ["lambda", "x", "y", "value", "quad_error", "status"], rows)
    meta["quadrature_error"] = _max_or_none(errs)
    crow = [("ratio", kernel.ratio), ("band", band_of(kernel.ratio)), ("beta", law.beta),
            ("beta_c", beta_c(kernel))]
    if p["classify"]:
        rep = classify(kernel, law, box_radius=p["box_radius"])
        crow += [("classification", rep.classification), ("eigenvalue", rep.eigenvalue)]
        for k, v in sorted(rep.notes.items()):
            crow.append((k, v))
        meta["classification"] = rep.classification
    out.add("classify", ["key", "value"], crow)
    return EXIT_OK


def _scenario_moments(cfg: ExperimentConfig, kernel, law, out: _Outputs, meta: dict) -> int:
    from .moments import MomentSolver, TruncatedLattice

    p = cfg.params
    n_steps = int(round(p["t_max"] / p["step"]))
    if p["solver"] == "volterra":
        grid = np.arange(n_steps + 1) * p["step"]
        solver = MomentSolver(kernel, law, None, grid, "volterra")
    else:
        grid = np.linspace(0.0, p["t_max"], n_steps + 1)
        solver = MomentSolver(kernel, law, TruncatedLattice(kernel.d, p["box_radius"]), grid, p["solver"])
    rows, diffs, errs = [], [], []
    for n in range(1, p["n_max"] + 1):
        for q in p["quantities"]:
            s = solver.mn_total(p["x"], n) if q == "total" else solver.mn_local(p["x"], p["y"], n)
            err = s.error if s.error is not None else [None] * len(grid)
            leak = s.leak if s.leak is not None else [None] * len(grid)
            for t, v, e, lk in zip(s.grid, s.values, err, leak):
                rows.append((t, q, n, v, e, lk, s.trunc_diff))
            diffs.append(s.trunc_diff)
            if s.error is not None:
                errs.append(float(np.max(s.error)))
            meta.setdefault("provenance", s.provenance)
    out.add("moments", ["t", "quantity", "n", "value", "error", "leak", "trunc_diff"], rows)
    meta["truncation_diff"] = _max_or_none(diffs)
    meta["discretization_error"] = _max_or_none(errs)
    return EXIT_OK


def _scenario_simulate(cfg: ExperimentConfig, kernel, law, out: _Outputs, meta: dict) -> int:
    from .simulate import SimulationConfig, estimate

    p = cfg.params
    sc = SimulationConfig(kernel, law, p["times"], p["trials"], p["seed"], start=p["x"],
                          population_cap=p["population_cap"], jump_table_radius=p["jump_table_radius"],
                          y_points=p["y"], n_max=p["n_max"], capped_policy=p["capped_policy"],
                          workers=p["workers"])
    res = estimate(sc)
    rows = []
    for n in range(1, res.n_max + 1):
        for j, t in enumerate(res.times):
            rows.append((t, "total", n, "", res.total[n - 1, j], res.total_se[n - 1, j],
                         res.trials_used, res.capped_trials))
        for iy, y in enumerate(res.y_points):
            for j, t in enumerate(res.times):
                rows.append((t, "local", n, list(y), res.local[iy, n - 1, j], res.local_se[iy, n - 1, j],
                             res.trials_used, res.capped_trials))
    out.add("simulate", ["t", "quantity", "n", "y", "estimate", "stderr", "trials", "capped"], rows)
    meta.update(seeds=[p["seed"]], digest=res.digest(), trials_used=res.trials_used,
                capped_trials=res.capped_trials, discarded_mass=res.discarded_mass)
    return EXIT_OK


def _scenario_verify(cfg: ExperimentConfig, kernel, law, out: _Outputs, meta: dict) -> int:
    from .asymptotics import VerifyDescriptor, summary_line, verify

    p = cfg.params
    desc = VerifyDescriptor(
        quantities=tuple(p["quantities"]), n_range=tuple(p["n_range"]), t_max=p["t_max"], step=p["step"],
        window=tuple(p["window"]) if p["window"] else None, method=p["method"], x=p["x"], y=p["y"],
        box_radius=p["box_radius"], tolerances=p["tolerances"], check_constant=p["check_constant"],
        critical_tol=p["critical_tol"], trials=p["trials"], seed=p["seed"] or 0,
        snapshots=p["snapshots"], workers=p["workers"])
    reports = verify(kernel, law, desc)
    rows = [r.row() for r in reports]
    cols = list(rows[0].keys()) if rows else ["verdict"]
    out.add("verify", cols, [[r[c] for c in cols] for r in rows])
    line = summary_line(reports)
    meta.update(summary=line, truncation_diff=_max_or_none(r.truncation_diff for r in reports))
    if p["method"] == "monte-carlo":
        meta["seeds"] = [p["seed"]]
    print(line)
    return EXIT_VERIFY_FAIL if any(r.verdict == "fail" for r in reports) else EXIT_OK


_SCENARIOS = {
    "spectral": _scenario_spectral,
    "moments": _scenario_moments,
    "simulate": _scenario_simulate,
    "verify": _scenario_verify,
}


def run_config(cfg: ExperimentConfig, out_dir=None, stem: str | None = None) -> tuple[int, Path]:
    """Run one config; returns (exit code, sidecar path). Errors propagate."""
    out_dir = Path(out_dir or cfg.output or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = stem or (Path(cfg.source).stem if cfg.source and not cfg.source.startswith("<") else cfg.scenario)
    kernel = cfg.build_kernel()
    law = cfg.build_law(kernel)
    outputs = _Outputs(out_dir, stem)
    meta: dict[str, Any] = {"seeds": []}
    code = _SCENARIOS[cfg.scenario](cfg, kernel, law, outputs, meta)
    digest = hashlib.sha256("".join(outputs.files[k] for k in sorted(outputs.files)).encode()).hexdigest()
    sidecar = {
        "tool": "heavybrw",
        "version": __version__,
        "scenario": cfg.scenario,
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "kernel_fingerprint": kernel.fingerprint(),
        "law": law.spec(),
        "beta": law.beta,
        "outputs": outputs.files,
        "output_sha256": digest,
        "exit_code": code,
        **meta,
    }
    path = out_dir / f"{stem}.meta.json"
    path.write_text(json.dumps(_jsonable(sidecar), indent=2, sort_keys=True) + "\n")
    return code, path


def run(config_path, out_dir=None, overrides: Mapping[str, Any] | None = None) -> int:
    """Run a config file; returns the exit code and reports errors on stderr."""
    try:
        cfg = load_config(config_path)
        if overrides:
            cfg = cfg.with_overrides(overrides)
        code, _ = run_config(cfg, out_dir)
        return code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except Exception as exc:  # noqa: BLE001 surfaced with context
        print(f"error while running {config_path}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


# ---------------------------------------------------------------------------
# reproducibility


def _load_sidecar(s) -> dict:
    if isinstance(s, Mapping):
        return dict(s)
    return json.loads(Path(s).read_text())


def repro_check(a, b) -> bool:
    """True iff two runs of the same config produced bit-identical outputs."""
    ma, mb = _load_sidecar(a), _load_sidecar(b)
    if ma.get("config_hash") != mb.get("config_hash"):
        raise ReproError("sidecars describe different configs "
                         f"({ma.get('config_hash', '?')[:12]} vs {mb.get('config_hash', '?')[:12]})")
    return ma.get("outputs") == mb.get("outputs") and ma.get("output_sha256") == mb.get("output_sha256")


# ---------------------------------------------------------------------------
# kernel inspection


def inspect_kernel(kernel) -> dict:
    from .kernel import row_sum_residual, tail_slope
    from .spectral import band_of, beta_c

    info = {
        "d": kernel.d, "alpha": kernel.alpha, "ratio": kernel.ratio, "band": band_of(kernel.ratio),
        "table_radius": kernel.table_radius, "a0": kernel.a0, "tail_mass": kernel.tail_mass,
        "tail_sum_error": kernel.tail_sum_error, "row_sum_residual": row_sum_residual(kernel),
        "tail_slope": tail_slope(kernel), "h_constant": kernel.h_constant(),
        "symbol_constant": kernel.leading_symbol_constant([1.0] + [0.0] * (kernel.d - 1)),
        "beta_c": beta_c(kernel), "fingerprint": kernel.fingerprint(),
    }
    return info


# ---------------------------------------------------------------------------
# argument parsing


def _parse_point(text: str):
    parts = [int(c) for c in text.split(",") if c.strip()]
    return parts[0] if len(parts) == 1 else parts


def _parse_b(text: str) -> dict[int, float]:
    out = {}
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        k, _, v = part.partition(":")
        out[int(k)] = float(v)
    return out


_FLAG_FIELDS = {
    "d": "kernel.d", "alpha": "kernel.alpha", "R": "kernel.R",
    "beta": "law.beta", "beta_ratio": "law.beta_ratio",
    "t_max": "params.t_max", "step": "params.step", "solver": "params.solver",
    "trials": "params.trials", "seed": "params.seed", "workers": "params.workers",
    "box_radius": "params.box_radius", "method": "params.method",
}


def _add_common(p: argparse.ArgumentParser, config_required: bool = False) -> None:
    p.add_argument("--config", required=config_required, help="YAML experiment config")
    p.add_argument("--out", help="output directory (default: the config's output field or .)")
    p.add_argument("--d", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--R", type=int)
    p.add_argument("--b", type=_parse_b, help="branching rates, e.g. 0:1,2:1")
    p.add_argument("--beta", type=float, help="tune the law to this beta")
    p.add_argument("--beta-ratio", dest="beta_ratio", type=float, help="tune the law to ratio * beta_c")
    p.add_argument("--t-max", "--tmax", dest="t_max", type=float)
    p.add_argument("--step", type=float)
    p.add_argument("--solver", choices=["volterra", "eigen", "rk"])
    p.add_argument("--method", choices=["integral-recursion", "ODE", "monte-carlo"])
    p.add_argument("--trials", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--box-radius", "--box", dest="box_radius", type=int)
    p.add_argument("--x", type=_parse_point, help="start point, e.g. 1 or 1,0")
    p.add_argument("--y", type=_parse_point, help="observation point")
    p.add_argument("--n", type=int, help="highest moment order")
    p.add_argument("--quantity", choices=["local", "total"], action="append")


def _overrides(ns) -> dict:
    out = {}
    for flag, path in _FLAG_FIELDS.items():
        v = getattr(ns, flag, None)
        if v is not None:
            out[path] = v
    if getattr(ns, "b", None) is not None:
        out["law.b"] = ns.b
    return out


def _scenario_overrides(ns, scenario: str) -> dict:
    """Flags whose config field depends on the scenario."""
    out = {}
    x, y = getattr(ns, "x", None), getattr(ns, "y", None)
    if x is not None:
        out["params.x"] = [x] if scenario == "spectral" else x
    if y is not None:
        out["params.y"] = [y] if scenario == "simulate" else y
    n = getattr(ns, "n", None)
    if n is not None:
        out[{"moments": "params.n_max", "simulate": "params.n_max", "verify": "params.n_range"}[scenario]] = (
            [1, n] if scenario == "verify" else n)
    if getattr(ns, "quantity", None):
        out["params.quantities"] = ns.quantity
    return out


def _config_from_args(ns, scenario: str) -> ExperimentConfig:
    ov = _overrides(ns)
    ov.update(_scenario_overrides(ns, scenario))
    if ns.config:
        cfg = load_config(ns.config)
        if cfg.scenario != scenario:
            raise ConfigError("scenario", f"this subcommand runs '{scenario}', the config says '{cfg.scenario}'",
                              None, ns.config)
        return cfg.with_overrides(ov) if ov else cfg
    raw: dict = {"scenario": scenario, "kernel": {}, "law": {}, "params": {}}
    for path, v in ov.items():
        sec, key = path.split(".", 1)
        raw[sec][key] = v
    return from_dict(raw, "<flags>")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="heavybrw", description="Heavy-tailed branching random walk experiments")
    ap.add_argument("--version", action="version", version=f"heavybrw {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run any scenario config")
    p.add_argument("config")
    p.add_argument("--out")
    p.add_argument("--workers", type=int)
    p.add_argument("--seed", type=int)

    k = sub.add_parser("kernel", help="kernel tools").add_subparsers(dest="action", required=True)
    ki = k.add_parser("inspect", help="print kernel invariants")
    ki.add_argument("--config")
    ki.add_argument("--d", type=int)
    ki.add_argument("--alpha", type=float)
    ki.add_argument("--R", type=int)

    s = sub.add_parser("spectral", help="Green function and regime").add_subparsers(dest="action", required=True)
    sg = s.add_parser("green", help="Green function values")
    _add_common(sg)
    sg.add_argument("--lambda", "--lam", dest="lam", type=float, action="append",
                    help="spectral parameter (repeatable)")
    sc = s.add_parser("classify", help="regime classification")
    _add_common(sc)

    m = sub.add_parser("moments", help="moment series").add_subparsers(dest="action", required=True)
    _add_common(m.add_parser("solve", help="solve the moment equations"))

    si = sub.add_parser("simulate", help="Monte Carlo").add_subparsers(dest="action", required=True)
    _add_common(si.add_parser("run", help="run the simulator"))

    v = sub.add_parser("verify", help="asymptotic verification").add_subparsers(dest="action", required=True)
    _add_common(v.add_parser("regime", help="fit and compare against predictions"), config_required=False)

    r = sub.add_parser("repro", help="reproducibility").add_subparsers(dest="action", required=True)
    rc = r.add_parser("check", help="compare two sidecars")
    rc.add_argument("a")
    rc.add_argument("b")
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    ns = build_parser().parse_args(argv)
    try:
        if ns.command == "run":
            ov = {}
            if ns.workers is not None:
                ov["params.workers"] = ns.workers
            if ns.seed is not None:
                ov["params.seed"] = ns.seed
            return run(ns.config, ns.out, ov)
        if ns.command == "repro":
            ok = repro_check(ns.a, ns.b)
            print("identical" if ok else "different")
            return EXIT_OK if ok else EXIT_VERIFY_FAIL
        if ns.command == "kernel":
            from .kernel import build_kernel

            if ns.config:
                kernel = load_config(ns.config).build_kernel()
            else:
                if ns.d is None or ns.alpha is None:
                    raise ConfigError("kernel", "give --config or both --d and --alpha", None, "<flags>")
                from_dict({"scenario": "spectral", "kernel": {"d": ns.d, "alpha": ns.alpha}}, "<flags>")
                kernel = build_kernel(ns.d, ns.alpha, None, ns.R)
            print(json.dumps(_jsonable(inspect_kernel(kernel)), indent=2))
            return EXIT_OK
        scenario = {"spectral": "spectral", "moments": "moments", "simulate": "simulate",
                    "verify": "verify"}[ns.command]
        cfg = _config_from_args(ns, scenario)
        if ns.command == "spectral":
            extra = {"params.classify": ns.action == "classify"}
            if ns.action == "green" and ns.lam:
                extra["params.lambdas"] = ns.lam
            cfg = cfg.with_overrides(extra)
        code, path = run_config(cfg, ns.out)
        print(f"wrote {path}")
        return code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except Exception as exc:  # noqa: BLE001 surfaced with context
        print(f"error in '{ns.command}': {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
