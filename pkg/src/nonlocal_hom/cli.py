"""
Configuration-driven experiment runner.

A YAML file describes one experiment; ``nlhom <kind> config.yaml`` validates
it, runs its independent tasks (optionally on a process pool) and writes CSV
tables plus a ``manifest.json`` into the output directory.  Tasks rebuild
their kernel and density from the plain config, so nothing unpicklable
crosses process boundaries, and results are merged in task order.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .energy import DENSITY_CATALOG, density_from_config, eval_F, eval_local_limit
from .flow import FlowError, compare_flows, explicit_flow, mm_trajectory, reference_local_flow, stability_bound
from .grid import Domain, sample_function
from .homogenize import fhom_asymptotic, fhom_cell, fhom_closed_form, fhom_stochastic
from .kernel import KERNEL_CATALOG, from_config
from .minimize import MinimizeOptions, solve_dirichlet
from .pointcloud import cloud_convergence_run, default_eps_rule, truncated_affine, uniform

KINDS = ("energy", "minimize", "homogenize", "flow", "pointcloud", "sweep")
METHODS = ("closed_form", "cell", "asymptotic", "stochastic")
FIELDS = ("affine", "sine")
WORKERS_ENV = "NLHOM_WORKERS"

DEFAULTS = {
    "dim": 1,
    "kernel": {"name": "indicator_ball", "params": {}},
    "density": {"name": "plaplace", "params": {}},
    "grid": {"lengths": 1.0, "h": None, "boundary_mode": "truncated"},
    "eps": [0.1],
    "field": {"name": "affine", "M": None},
    "probes": None,
    "methods": ["closed_form", "cell"],
    "R_list": [4, 8, 16],
    "N": 16,
    "N0": 32,
    "T": None,
    "r": None,
    "tau": None,
    "t_end": 0.1,
    "flow": {"scheme": "explicit", "reference": "spectral_p2"},
    "pointcloud": {"density": "uniform", "n_list": [500, 1000, 2000], "scale": 0.3, "beta": 0.0},
    "sweep": None,
    "seeds": [0],
    "output": "out",
    "tolerances": {"grad_tol": None, "max_iters": 100000, "sufficient_decrease": 0.5},
}


class ConfigError(ValueError):
    """Raised with the full list of violations."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


@dataclass
class ExperimentConfig:
    experiment: str
    data: dict
    source: str = ""
    seeds: list = field(default_factory=list)

    def __getitem__(self, key):
        return self.data[key]


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _as_list(x):
    return list(x) if isinstance(x, (list, tuple)) else [x]


def _probe(M, dim, codim=1):
    A = np.atleast_2d(np.asarray(M, dtype=float))
    if A.shape != (codim, dim):
        raise ValueError(f"probe {M!r} must be {codim} x {dim}")
    return A


def _commensurate(a, h):
    q = a / h
    return abs(q - round(q)) <= 1e-9 * max(1.0, q) and round(q) >= 1


def validate(data: dict) -> list:
    """Every violation found in a merged config, each naming its field."""
    bad = []
    kind = data.get("experiment")
    if kind not in KINDS:
        bad.append(f"experiment: must be one of {list(KINDS)}, got {kind!r}")
    dim = data.get("dim")
    if dim not in (1, 2, 3):
        bad.append(f"dim: must be 1, 2 or 3, got {dim!r}")
        dim = None
    kname = (data.get("kernel") or {}).get("name")
    kernel = None
    if kname not in KERNEL_CATALOG:
        bad.append(f"kernel.name: unknown kernel {kname!r}; available: {sorted(KERNEL_CATALOG)}")
    elif dim is not None:
        try:
            kernel = from_config(kname, dim, **(data["kernel"].get("params") or {}))
        except (TypeError, ValueError) as exc:
            bad.append(f"kernel.params: {exc}")
    dname = (data.get("density") or {}).get("name")
    spec = None
    if dname not in DENSITY_CATALOG:
        bad.append(f"density.name: unknown density {dname!r}; available: {sorted(DENSITY_CATALOG)}")
    elif kernel is not None:
        try:
            spec = density_from_config(dname, kernel, **(data["density"].get("params") or {}))
        except (TypeError, ValueError) as exc:
            bad.append(f"density.params: {exc}")

    eps = _as_list(data.get("eps"))
    if not all(isinstance(e, (int, float)) and e > 0 for e in eps):
        bad.append(f"eps: must be positive numbers, got {data.get('eps')!r}")
        eps = []
    grid = data.get("grid") or {}
    h = grid.get("h")
    if kind in ("energy", "minimize", "flow"):
        if not isinstance(h, (int, float)) or h <= 0:
            bad.append(f"grid.h: must be a positive number, got {h!r}")
        else:
            for e in eps:
                if not _commensurate(e, h):
                    bad.append(f"grid.h: incommensurate grid: h={h!r} does not divide eps={e!r}")
            for L in _as_list(grid.get("lengths")):
                if not isinstance(L, (int, float)) or L <= 0:
                    bad.append(f"grid.lengths: must be positive, got {L!r}")
                elif not _commensurate(L, h):
                    bad.append(f"grid.lengths: incommensurate grid: h={h!r} does not divide length {L!r}")
        if grid.get("boundary_mode") not in ("truncated", "periodic"):
            bad.append(f"grid.boundary_mode: must be truncated or periodic, got {grid.get('boundary_mode')!r}")
        if kind == "minimize" and grid.get("boundary_mode") == "periodic":
            bad.append("grid.boundary_mode: Dirichlet problems need a truncated grid")

    fld = data.get("field") or {}
    if fld.get("name") not in FIELDS:
        bad.append(f"field.name: must be one of {list(FIELDS)}, got {fld.get('name')!r}")
    codim = spec.codim if spec is not None else 1
    if fld.get("M") is not None and dim is not None:
        try:
            _probe(fld["M"], dim, codim)
        except ValueError as exc:
            bad.append(f"field.M: {exc}")
    if data.get("probes") is not None and dim is not None:
        for M in _as_list(data["probes"]):
            try:
                _probe(M, dim, codim)
            except ValueError as exc:
                bad.append(f"probes: {exc}")

    for key in ("N", "N0"):
        v = data.get(key)
        if not isinstance(v, int) or v < 2:
            bad.append(f"{key}: must be an integer >= 2, got {v!r}")
    R = _as_list(data.get("R_list"))
    if not all(isinstance(x, int) and x > 0 for x in R) or any(b <= a for a, b in zip(R, R[1:])):
        bad.append(f"R_list: must be increasing positive integers, got {data.get('R_list')!r}")
    methods = _as_list(data.get("methods"))
    for m in methods:
        if m not in METHODS:
            bad.append(f"methods: unknown method {m!r}; available: {list(METHODS)}")
    if spec is not None and kind in ("homogenize", "sweep"):
        if "closed_form" in methods and not spec.x_independent:
            bad.append("methods: closed_form requires an x-independent density")
        if "stochastic" in methods and not spec.random:
            bad.append("methods: stochastic requires a random density")
        if "cell" in methods and not spec.periodic:
            bad.append("methods: cell requires a periodic density")

    seeds = _as_list(data.get("seeds"))
    if not seeds or not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in seeds):
        bad.append(f"seeds: must be nonnegative integers, got {data.get('seeds')!r}")

    if kind == "flow":
        tau, t_end = data.get("tau"), data.get("t_end")
        if not isinstance(t_end, (int, float)) or t_end <= 0:
            bad.append(f"t_end: must be positive, got {t_end!r}")
        if tau is not None:
            if not isinstance(tau, (int, float)) or tau <= 0:
                bad.append(f"tau: must be positive, got {tau!r}")
            elif isinstance(t_end, (int, float)) and not _commensurate(t_end, tau):
                bad.append(f"tau: t_end={t_end!r} is not a multiple of tau={tau!r}")
        fl = data.get("flow") or {}
        if fl.get("scheme") not in ("explicit", "mm"):
            bad.append(f"flow.scheme: must be explicit or mm, got {fl.get('scheme')!r}")
        if fl.get("reference") not in ("spectral_p2", "fd_plaplace", None):
            bad.append(f"flow.reference: unknown reference {fl.get('reference')!r}")
        if grid.get("boundary_mode") != "periodic":
            bad.append("grid.boundary_mode: flows compare against periodic references")

    if kind == "pointcloud":
        pc = data.get("pointcloud") or {}
        if pc.get("density") not in ("uniform", "truncated_affine"):
            bad.append(f"pointcloud.density: must be uniform or truncated_affine, got {pc.get('density')!r}")
        ns = _as_list(pc.get("n_list"))
        if not ns or not all(isinstance(n, int) and n > 1 for n in ns):
            bad.append(f"pointcloud.n_list: must be integers > 1, got {pc.get('n_list')!r}")
        if spec is not None and not spec.x_independent:
            bad.append("density: point clouds need an x-independent density")

    if kind == "sweep":
        sw = data.get("sweep") or {}
        if sw.get("kind") not in ("energy", "minimize", "homogenize", "flow", "pointcloud"):
            bad.append(f"sweep.kind: must name a non-sweep experiment, got {sw.get('kind')!r}")
        if not sw.get("parameter"):
            bad.append("sweep.parameter: missing")
        if not _as_list(sw.get("values")) or sw.get("values") is None:
            bad.append("sweep.values: missing")

    tol = data.get("tolerances") or {}
    gt = tol.get("grad_tol")
    if gt is not None and (not isinstance(gt, (int, float)) or gt <= 0):
        bad.append(f"tolerances.grad_tol: must be positive, got {gt!r}")
    mi = tol.get("max_iters")
    if not isinstance(mi, int) or mi < 1:
        bad.append(f"tolerances.max_iters: must be a positive integer, got {mi!r}")

    out = Path(str(data.get("output")))
    probe = out
    while not probe.exists() and probe != probe.parent:
        probe = probe.parent
    if probe.exists() and (not probe.is_dir() or not os.access(probe, os.W_OK)):
        bad.append(f"output: {str(out)!r} is not writable")
    return bad


def load_config(path, kind: str | None = None, seed: int | None = None) -> ExperimentConfig:
    """
    Read, default-fill and validate a YAML experiment file.

    Raises
    ------
    ConfigError
        With every violation; YAML syntax errors carry the line number.
    """
    text = Path(path).read_text()
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else "?"
        raise ConfigError([f"parse error at line {line}: {getattr(exc, 'problem', exc)}"]) from None
    if not isinstance(raw, dict):
        raise ConfigError(["config must be a mapping"])
    unknown = sorted(set(raw) - set(DEFAULTS) - {"experiment"})
    data = _merge(DEFAULTS, raw)
    if kind is not None:
        if raw.get("experiment") not in (None, kind):
            raise ConfigError([f"experiment: config declares {raw['experiment']!r} but {kind!r} was requested"])
        data["experiment"] = kind
    if seed is not None:
        data["seeds"] = [int(seed)]
    bad = [f"{k}: unknown field" for k in unknown] + validate(data)
    if bad:
        raise ConfigError(bad)
    return ExperimentConfig(data["experiment"], data, str(path), list(data["seeds"]))


# task builders; every task is (name, function, args) with plain-data args


def _kernel(data):
    return from_config(data["kernel"]["name"], data["dim"], **(data["kernel"].get("params") or {}))


def _spec(data, kernel=None):
    kernel = kernel or _kernel(data)
    return density_from_config(data["density"]["name"], kernel, **(data["density"].get("params") or {}))


def _opts(data):
    t = data["tolerances"]
    return MinimizeOptions(
        max_iters=int(t["max_iters"]),
        grad_tol=t.get("grad_tol"),
        sufficient_decrease=float(t.get("sufficient_decrease", 0.5)),
        record_history=False,
    )


def _domain(data, dim):
    g = data["grid"]
    return Domain(dim, g["lengths"], g["h"], g["boundary_mode"])


def _field_fn(data, spec):
    fld = data["field"]
    if fld["name"] == "affine":
        M = _probe(fld["M"] if fld["M"] is not None else np.eye(spec.codim, spec.dim), spec.dim, spec.codim)
        return (lambda x: x @ M.T), M
    return (lambda x: np.sin(2 * np.pi * x[:, :1]) * np.ones((1, spec.codim))), None


def _reference_value(spec, M, dom, data):
    """Local-limit energy of the configured field, or nan when no closed route applies."""
    if M is None:
        return math.nan
    if spec.x_independent:
        return fhom_closed_form(spec, M) * dom.volume
    if spec.periodic:
        return fhom_cell(spec, M, data["N0"], data["T"], _opts(data)).extrapolated * dom.volume
    return math.nan


def _gap(value, ref):
    if not math.isfinite(ref):
        return math.nan
    return abs(value - ref) / abs(ref) if ref != 0 else abs(value)


def task_energy(data, eps):
    spec = _spec(data)
    dom = _domain(data, spec.dim)
    fn, M = _field_fn(data, spec)
    u = sample_function(dom, fn, spec.codim)
    value = eval_F(spec, u, eps, data["T"]).total
    if M is None and spec.name == "plaplace":
        ref = eval_local_limit(spec.kernel, u, spec.p) / spec.p
    else:
        ref = _reference_value(spec, M, dom, data)
    return [{"eps": eps, "value": value, "local_limit": ref, "gap": _gap(value, ref)}]


def task_minimize(data, eps):
    spec = _spec(data)
    dom = _domain(data, spec.dim)
    fn, M = _field_fn(data, spec)
    r = data["r"] if data["r"] is not None else (spec.radius if math.isfinite(spec.radius) else 1.0)
    sol = solve_dirichlet(spec, eps, fn, r, dom, _opts(data), data["T"])
    ref = _reference_value(spec, M, dom, data)
    return [
        {
            "eps": eps,
            "value": sol.value,
            "reference": ref,
            "gap": _gap(sol.value, ref),
            "iterations": sol.iterations,
            "grad_norm": sol.final_grad_norm,
            "converged": sol.converged,
        }
    ]


def _probe_label(M):
    return json.dumps(np.asarray(M, dtype=float).tolist())


def task_homogenize(data, item):
    M, method = item
    spec = _spec(data)
    M = _probe(M, spec.dim, spec.codim)
    opts = _opts(data)
    label = _probe_label(M)
    if method == "closed_form":
        return [{"M": label, "method": method, "index": "", "value": fhom_closed_form(spec, M), "converged": True}]
    if method == "cell":
        rep = fhom_cell(spec, M, data["N0"], data["T"], opts)
    elif method == "asymptotic":
        rep = fhom_asymptotic(spec, M, data["R_list"], data["T"], data["N"], opts)
    else:
        rep = fhom_stochastic(spec, M, data["R_list"], data["seeds"], data["T"], data["N"], opts)
    rows = []
    for _, idx, v, _it, conv in rep.rows():
        rows.append({"M": label, "method": method, "index": json.dumps(idx) if isinstance(idx, tuple) else idx, "value": v, "converged": conv})
    for R in rep.means:
        rows.append({"M": label, "method": "stochastic_mean", "index": R, "value": rep.means[R], "converged": True})
        rows.append({"M": label, "method": "stochastic_variance", "index": R, "value": rep.variances[R], "converged": True})
    return rows


def task_flow(data, eps):
    spec = _spec(data)
    dom = _domain(data, spec.dim)
    fn, _ = _field_fn(data, spec)
    u0 = sample_function(dom, fn, spec.codim)
    t_end = float(data["t_end"])
    tau = data["tau"]
    if tau is None:
        bound = stability_bound(spec, eps, u0, kernel_support=data["T"])
        tau = t_end / math.ceil(t_end / (0.5 * bound))
    if data["flow"]["scheme"] == "explicit":
        traj = explicit_flow(spec, eps, u0, tau, t_end, kernel_support=data["T"])
    else:
        traj = mm_trajectory(spec, eps, u0, tau, t_end, _opts(data), kernel_support=data["T"])
        if traj.flagged:
            raise FlowError(f"minimizing-movement step {traj.flagged[0]} did not converge")
    monotone = bool(np.all(np.diff(traj.energies) <= 1e-12 * max(1.0, abs(traj.energies[0]))))
    err = math.nan
    ref_mode = data["flow"]["reference"]
    if ref_mode is not None and spec.name == "plaplace" and spec.codim == 1:
        ref = reference_local_flow(spec.kernel, spec.p, u0, t_end, ref_mode, times=[0.0, t_end])
        err = compare_flows(traj, ref, [t_end])[0][1] / u0.l2_norm()
    return [
        {
            "eps": eps,
            "tau": tau,
            "steps": len(traj.times) - 1,
            "energy_start": float(traj.energies[0]),
            "energy_end": float(traj.energies[-1]),
            "monotone": monotone,
            "rel_l2_error": err,
        }
    ]


def task_pointcloud(data, n):
    spec = _spec(data)
    pc = data["pointcloud"]
    lengths = data["grid"]["lengths"]
    if pc["density"] == "uniform":
        rho = uniform(spec.dim, lengths)
    else:
        rho = truncated_affine(spec.dim, 1.0, float(pc.get("beta", 0.0)), lengths)
    fn, M = _field_fn(data, spec)
    if M is None:
        raise ValueError("point-cloud runs use affine fields")
    f = lambda xi, z: spec.f(None, xi, z)
    res = cloud_convergence_run(
        f, rho, M, [n], default_eps_rule(spec.dim, float(pc["scale"])), data["seeds"], spec.radius, fhom_closed_form(spec, M)
    )
    return res["rows"]


TASKS = {
    "energy": task_energy,
    "minimize": task_minimize,
    "homogenize": task_homogenize,
    "flow": task_flow,
    "pointcloud": task_pointcloud,
}


def plan_tasks(data) -> list:
    """Ordered ``(kind, item)`` pairs for one non-sweep experiment."""
    kind = data["experiment"]
    if kind in ("energy", "minimize", "flow"):
        return [(kind, float(e)) for e in _as_list(data["eps"])]
    if kind == "homogenize":
        spec = _spec(data)
        probes = data["probes"] if data["probes"] is not None else [np.eye(spec.codim, spec.dim).tolist()]
        return [(kind, (M, m)) for M in _as_list(probes) for m in _as_list(data["methods"])]
    if kind == "pointcloud":
        return [(kind, int(n)) for n in data["pointcloud"]["n_list"]]
    raise ValueError(f"no tasks for {kind!r}")


def _run_one(payload):
    data, kind, item = payload
    try:
        return TASKS[kind](data, item), None
    except Exception as exc:  # recorded in the manifest
        return [], f"{type(exc).__name__}: {exc}"


def _expand(data):
    """Payloads and per-task labels, with sweep values substituted."""
    if data["experiment"] != "sweep":
        return [(data, k, it) for k, it in plan_tasks(data)], [None] * len(plan_tasks(data))
    sw = data["sweep"]
    payloads, labels = [], []
    for v in sw["values"]:
        sub = copy.deepcopy(data)
        sub["experiment"] = sw["kind"]
        node, keys = sub, sw["parameter"].split(".")
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = v
        bad = validate(sub)
        if bad:
            raise ConfigError([f"sweep value {v!r}: {b}" for b in bad])
        for k, it in plan_tasks(sub):
            payloads.append((sub, k, it))
            labels.append(v)
    return payloads, labels


def _workers():
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_csv(path, rows):
    cols = []
    for r in rows:
        for k in r:
            if k not in cols:
                cols.append(k)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([_fmt(r.get(c, "")) for c in cols])
    Path(path).write_text(buf.getvalue())
    return hashlib.sha256(buf.getvalue().encode()).hexdigest()


def _task_label(kind, item):
    if isinstance(item, tuple):
        return f"{kind}:{_probe_label(item[0])}:{item[1]}"
    return f"{kind}:{item}"


def run(cfg: ExperimentConfig, workers: int | None = None) -> int:
    """
    Execute every task of ``cfg`` and write artifacts.

    Returns
    -------
    int
        0 when all tasks succeed, 1 otherwise.
    """
    t0 = time.perf_counter()
    data = cfg.data
    payloads, labels = _expand(data)
    workers = _workers() if workers is None else max(1, int(workers))
    if workers > 1 and len(payloads) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one, payloads))
    else:
        results = [_run_one(p) for p in payloads]

    rows, failures = [], []
    sweep = data["sweep"]["parameter"] if data["experiment"] == "sweep" else None
    for (sub, kind, item), label, (out, err) in zip(payloads, labels, results):
        if err is not None:
            failures.append({"task": _task_label(kind, item), "sweep_value": label, "error": err})
            continue
        for r in out:
            rows.append({sweep: label, **r} if sweep else r)

    outdir = Path(data["output"])
    outdir.mkdir(parents=True, exist_ok=True)
    name = f"{cfg.experiment}.csv"
    digest = _write_csv(outdir / name, rows)
    manifest = {
        "version": __version__,
        "experiment": cfg.experiment,
        "config": data,
        "config_path": cfg.source,
        "seeds": list(data["seeds"]),
        "workers": workers,
        "tasks": len(payloads),
        "artifacts": [{"path": name, "rows": len(rows), "sha256": digest}],
        "failures": failures,
        "wall_time_s": time.perf_counter() - t0,
    }
    (outdir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return 1 if failures else 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nlhom", description="Nonlocal energies, homogenization and flows on grids.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for kind in KINDS + ("validate",):
        p = sub.add_parser(kind, help="check a config only" if kind == "validate" else f"run a {kind} experiment")
        p.add_argument("config", help="YAML experiment file")
        p.add_argument("--seed", type=int, default=None, help="replace the configured seed list")
        if kind != "validate":
            p.add_argument("--out", default=None, help="output directory (overrides the config)")
            p.add_argument("--workers", type=int, default=None, help=f"process count (default ${WORKERS_ENV} or 1)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    kind = None if args.command == "validate" else args.command
    try:
        cfg = load_config(args.config, kind, args.seed)
        if getattr(args, "out", None):
            cfg.data["output"] = args.out
    except ConfigError as exc:
        for v in exc.violations:
            print(f"error: {v}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.command == "validate":
        print(f"ok: {cfg.experiment} config {args.config}")
        return 0
    status = run(cfg, args.workers)
    out = Path(cfg.data["output"])
    print(f"{'ok' if status == 0 else 'failed'}: wrote {out / (cfg.experiment + '.csv')} and {out / 'manifest.json'}")
    return status


if __name__ == "__main__":
    raise SystemExit(main())
