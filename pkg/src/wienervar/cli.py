"""Batch experiment driver.

    wienervar run <config.yaml> [--threads N] [--seed S] [--out DIR]
    wienervar validate <config.yaml>
    wienervar list-functionals

Exit codes: 0 all checks passed, 1 a declared check failed, 2 configuration
error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import inspect
import io
import json
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import functionals as F
from . import models as M
from . import policies as P
from . import stopping as S
from .conditioning import Binning, Regression
from .entropy import relative_entropy
from .paths import RngStream, TimeGrid, sample_brownian, set_threads
from .pipeline import (ClipDrift, EnergyStop, MixConstant, Retard, TruncateLevel, reconstruct_inverse,
                       run_pipeline, shifted_observation)
from .prekopa import check_conclusion, check_hypothesis, quadratic_family
from .variational import OptConfig, duality_gap, optimize

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


TOP_KEYS = {"seed", "grid", "model", "experiments", "output"}
GRID_KEYS = {"n_steps", "n_paths"}
MODEL_KEYS = {
    "wiener": {"family", "dim"},
    "bridge": {"family", "a"},
    "loop": {"family", "dim", "atom"},
    "diffusion": {"family", "sigma_amp", "drift_amp", "c"},
    "particles": {"family", "sigma", "b", "c", "gamma", "z0"},
}
EXPERIMENT_KEYS = {
    "variational": {"type", "name", "objective", "tau", "policy", "optimizer", "n_paths", "scheme", "tolerances"},
    "entropy": {"type", "name", "policy", "tau", "mode", "n_paths", "scheme", "tolerances"},
    "pipeline": {"type", "name", "target", "stages", "p", "n_paths", "n_inverse", "tolerances"},
    "prekopa": {"type", "name", "q", "linear", "s", "tau", "m_b", "m_c", "n_triples", "n_paths", "scheme",
                "tolerances"},
    "conditions": {"type", "name", "u", "v", "tau", "n_paths", "tolerances"},
}
TOLERANCE_KEYS = {
    "variational": {"target", "rel_target", "rel_gap", "gap_se"},
    "entropy": {"gap_se"},
    "pipeline": {"triangle_se", "inverse"},
    "prekopa": {"slack_se", "margin"},
    "conditions": {"max_discrepancy"},
}
OPT_KEYS = {"lr", "iterations", "batch", "n_val", "val_every"}
POLICY_TEMPLATE_KEYS = {"degree", "time_knots", "clip"}
SCHEME_KEYS = {"kind", "n_bins", "degree", "ridge"}


def _reject_unknown(block, allowed, where):
    if not isinstance(block, dict):
        raise ConfigError(f"{where} must be a mapping")
    extra = set(block) - set(allowed)
    if extra:
        raise ConfigError(f"unknown keys in {where}: {sorted(extra)}")


def parse_tau(spec):
    if spec is None:
        return None
    if isinstance(spec, dict) and len(spec) == 1:
        (k, v), = spec.items()
        if k == "deterministic":
            return S.Deterministic(float(v))
        if k == "first_exit":
            return S.FirstExit(float(v))
        if k == "first_level_hit":
            return S.FirstLevelHit(float(v))
    raise ConfigError(f"cannot resolve stopping rule {spec!r}")


def parse_scheme(spec):
    if spec is None:
        return Binning()
    _reject_unknown(spec, SCHEME_KEYS, "scheme")
    kind = spec.get("kind", "binning")
    if kind == "binning":
        return Binning(int(spec.get("n_bins", 10)))
    if kind == "regression":
        return Regression(int(spec.get("degree", 3)), float(spec.get("ridge", 1e-8)), int(spec.get("n_bins", 10)))
    raise ConfigError(f"unknown scheme {kind!r}")


def parse_policy(spec, grid):
    """Drift policies by name: zero, deterministic, state_linear, delayed, clipped, vanish_before."""
    if not isinstance(spec, dict) or "kind" not in spec:
        raise ConfigError(f"policy needs a kind: {spec!r}")
    kind = spec["kind"]
    allowed = {
        "zero": {"kind"},
        "deterministic": {"kind", "value", "from"},
        "state_linear": {"kind", "coef", "offset"},
        "state_tanh": {"kind", "amp", "scale", "offset"},
        "delayed": {"kind", "lag", "inner"},
        "clipped": {"kind", "m", "inner"},
        "vanish_before": {"kind", "tau", "inner"},
    }
    if kind not in allowed:
        raise ConfigError(f"unknown policy kind {kind!r}")
    _reject_unknown(spec, allowed[kind], f"policy {kind}")
    if kind == "zero":
        return P.Zero()
    if kind == "deterministic":
        try:
            value = np.atleast_1d(np.asarray(spec.get("value", 0.0), dtype=float))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad deterministic value {spec.get('value')!r}") from exc
        if value.ndim != 1:
            raise ConfigError("deterministic value must be a scalar or a flat list")
        dot = np.tile(value, (grid.n_steps, 1))
        start = spec.get("from")
        if start is not None:
            dot[: grid.index_of(float(start))] = 0.0
        return P.Deterministic(dot)
    if kind == "state_linear":
        a, b = float(spec.get("coef", 1.0)), float(spec.get("offset", 0.0))
        return P.StateFeedback(_Linear(a, b))
    if kind == "state_tanh":
        return P.StateFeedback(_Tanh(float(spec.get("amp", 1.0)), float(spec.get("scale", 1.0)),
                                     float(spec.get("offset", 0.0))))
    if kind == "delayed":
        return P.Delayed(int(spec["lag"]), parse_policy(spec["inner"], grid))
    if kind == "clipped":
        return P.Clipped(float(spec["m"]), parse_policy(spec["inner"], grid))
    return P.VanishBefore(parse_tau(spec["tau"]), parse_policy(spec["inner"], grid))


class _Linear:
    def __init__(self, a, b):
        self.a, self.b = a, b

    def __call__(self, t, x):
        return self.a * x + self.b


class _Tanh:
    def __init__(self, amp, scale, offset):
        self.amp, self.scale, self.offset = amp, scale, offset

    def __call__(self, t, x):
        return self.amp * np.tanh(x / self.scale) + self.offset


def parse_model(spec):
    _reject_unknown(spec, {"family"} | set().union(*MODEL_KEYS.values()), "model")
    fam = spec.get("family")
    if fam not in MODEL_KEYS:
        raise ConfigError(f"unknown model family {fam!r}")
    _reject_unknown(spec, MODEL_KEYS[fam], f"model {fam}")
    try:
        if fam == "wiener":
            return M.Wiener(int(spec.get("dim", 1)))
        if fam == "bridge":
            return M.BrownianBridge(tuple(float(x) for x in np.atleast_1d(spec.get("a", 0.0))))
        if fam == "loop":
            dim = int(spec.get("dim", 1))
            atom = spec.get("atom")
            if atom is not None:
                return M.LoopMeasure(dim, nodes=np.atleast_2d(np.asarray(atom, dtype=float)), weights=np.ones(1))
            return M.LoopMeasure(dim)
        if fam == "diffusion":
            amp, damp = float(spec.get("sigma_amp", 0.1)), float(spec.get("drift_amp", 0.0))
            c = tuple(float(x) for x in np.atleast_1d(spec.get("c", 0.0)))
            return M.Diffusion(_SigmaTanh(amp), _DriftTanh(damp), c, len(c))
        return M.Particles(float(spec.get("sigma", 1.0)), float(spec.get("b", 0.0)), float(spec.get("c", 0.0)),
                           float(spec.get("gamma", 1.0)), tuple(float(x) for x in spec.get("z0", (-1.0, 1.0))))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


class _SigmaTanh:
    """Diagonal ``1 + amp tanh(x)``."""

    def __init__(self, amp):
        self.amp = amp

    def __call__(self, x):
        return np.einsum("ni,ij->nij", 1 + self.amp * np.tanh(x), np.eye(x.shape[1]))


class _DriftTanh:
    def __init__(self, amp):
        self.amp = amp

    def __call__(self, x):
        return -self.amp * np.tanh(x)


def parse_stages(specs, grid):
    out = []
    for st in specs:
        if not isinstance(st, dict) or len(st) != 1:
            raise ConfigError(f"stage must be a single-key mapping: {st!r}")
        (k, v), = st.items()
        if k == "truncate":
            out.append(TruncateLevel(float(v)))
        elif k == "mix":
            out.append(MixConstant(float(v)))
        elif k == "energy":
            out.append(EnergyStop(float(v)))
        elif k == "clip":
            out.append(ClipDrift(float(v)))
        elif k == "retard_steps":
            out.append(Retard(int(v) * grid.dt))
        else:
            raise ConfigError(f"unknown stage {k!r}")
    return out


def load_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    try:
        cfg = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}") from exc
    validate_config(cfg)
    return cfg


def validate_config(cfg):
    _reject_unknown(cfg, TOP_KEYS, "config")
    if "seed" not in cfg:
        raise ConfigError("seed is required")
    _reject_unknown(cfg.get("grid", {}), GRID_KEYS, "grid")
    grid = TimeGrid(int(cfg.get("grid", {}).get("n_steps", 256)))
    parse_model(cfg.get("model", {"family": "wiener"}))
    names = set()
    for i, ex in enumerate(cfg.get("experiments") or []):
        if not isinstance(ex, dict) or ex.get("type") not in EXPERIMENT_KEYS:
            raise ConfigError(f"experiment {i} has an unknown type")
        typ = ex["type"]
        _reject_unknown(ex, EXPERIMENT_KEYS[typ], f"experiment {i} ({typ})")
        _reject_unknown(ex.get("tolerances", {}), TOLERANCE_KEYS[typ], f"experiment {i} tolerances")
        name = ex.get("name", f"{typ}{i}")
        if name in names:
            raise ConfigError(f"duplicate experiment name {name!r}")
        names.add(name)
        parse_tau(ex.get("tau"))
        if typ in ("variational", "entropy", "prekopa"):
            parse_scheme(ex.get("scheme"))
        if typ == "variational":
            try:
                F.build(ex.get("objective", {"name": "constant"}))
            except (KeyError, TypeError) as exc:
                raise ConfigError(f"bad objective: {exc}") from exc
            _reject_unknown(ex.get("policy", {}), POLICY_TEMPLATE_KEYS, "variational policy")
            _reject_unknown(ex.get("optimizer", {}), OPT_KEYS, "optimizer")
        elif typ == "entropy":
            parse_policy(ex.get("policy", {"kind": "zero"}), grid)
        elif typ == "pipeline":
            parse_policy(ex.get("target", {"kind": "zero"}), grid)
            parse_stages(ex.get("stages", []), grid)
    return cfg


def config_hash(cfg) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, (list, tuple)):
        return " ".join(_fmt(v) for v in x)
    return str(x)


def write_csv(path: Path, header, rows, chash):
    buf = io.StringIO()
    buf.write(f"# config_hash={chash}\n")
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(header)
    for r in rows:
        wr.writerow([_fmt(v) for v in r])
    path.write_text(buf.getvalue())


SCHEMA = {
    "jtrace.csv": ["iter", "J", "se"],
    "validation.csv": ["iter", "J", "se"],
    "cells.csv": ["cell", "cell_lo", "cell_hi", "estimate", "se", "count", "valid"],
    "entropy_cells.csv": ["cell", "entropy", "half_energy", "gap", "se"],
    "stages.csv": ["stage", "lp_distance", "se", "drift_distance", "drift_se"],
    "slack.csv": ["cell", "cell_lo", "cell_hi", "slack", "se", "count", "valid"],
    "conditions.csv": ["check", "discrepancy"],
}


class Check:
    def __init__(self, name, value, bound, passed):
        self.name, self.value, self.bound, self.passed = name, float(value), bound, bool(passed)

    def as_dict(self):
        return dict(name=self.name, value=self.value, bound=self.bound, passed=self.passed)


def _exp_variational(ex, ctx):
    grid, model, rng = ctx["grid"], ctx["model"], ctx["rng"]
    f = F.build(ex.get("objective", {"name": "constant"}))
    tau = parse_tau(ex.get("tau"))
    scheme = parse_scheme(ex.get("scheme"))
    pol = ex.get("policy", {})
    basis = P.FeatureBasis(model.state_dim, int(pol.get("degree", 1)), int(pol.get("time_knots", 5)))
    template = P.MarkovFeedback.zeros(basis, model.noise_dim, pol.get("clip"))
    if tau is not None:
        template = P.VanishBefore(tau, template)
    oc = OptConfig(**{k: ex.get("optimizer", {})[k] for k in ex.get("optimizer", {})})
    res = optimize(model, f, template, tau, oc, rng.child(1), grid, scheme)
    n = int(ex.get("n_paths", ctx["n_paths"]))
    gap = duality_gap(model, f, res.policy, tau, rng.child(2), grid, n, scheme)
    tol = ex.get("tolerances", {})
    checks = [Check("weak_duality_min_z", gap.min_z, -float(tol.get("gap_se", 4.0)),
                    gap.min_z >= -float(tol.get("gap_se", 4.0)))]
    j = gap.objective.weighted()
    direct = gap.direct.weighted()
    if "rel_gap" in tol:
        rel = abs(j.value - direct.value) / max(abs(direct.value), 1e-12)
        checks.append(Check("relative_gap", rel, tol["rel_gap"], rel <= float(tol["rel_gap"])))
    if "target" in tol:
        rel = abs(j.value - float(tol["target"])) / max(abs(float(tol["target"])), 1e-12)
        checks.append(Check("relative_to_target", rel, tol.get("rel_target", 0.02),
                            rel <= float(tol.get("rel_target", 0.02))))
    out = ctx["dir"]
    write_csv(out / "jtrace.csv", SCHEMA["jtrace.csv"], res.trace, ctx["hash"])
    write_csv(out / "validation.csv", SCHEMA["validation.csv"], res.val_trace, ctx["hash"])
    write_csv(out / "cells.csv", SCHEMA["cells.csv"], gap.objective.rows(), ctx["hash"])
    summary = dict(direct_value=direct.value, direct_se=direct.se, J_opt=j.value, J_se=j.se,
                   gap=j.value - direct.value, iterations=len(res.trace), lr=res.lr_used)
    return summary, checks


def _exp_entropy(ex, ctx):
    grid, model, rng = ctx["grid"], ctx["model"], ctx["rng"]
    pol = parse_policy(ex.get("policy", {"kind": "zero"}), grid)
    tau = parse_tau(ex.get("tau"))
    n = int(ex.get("n_paths", ctx["n_paths"]))
    rep = relative_entropy(model, pol, tau, rng, grid, n, parse_scheme(ex.get("scheme")), ex.get("mode", "feedback"))
    bound = float(ex.get("tolerances", {}).get("gap_se", 4.0))
    checks = [Check("entropy_gap_min_z", rep.worst_gap_z, -bound, rep.worst_gap_z >= -bound)]
    if not rep.cells and rep.se["gap"] > 0:
        z = rep.gap / rep.se["gap"]
        checks.append(Check("entropy_gap_abs_z", abs(z), bound, abs(z) <= bound))
    rows = [(c["cell"], c["entropy"], c["half_energy"], c["gap"], c["se"]) for c in rep.cells] or \
        [(0, rep.entropy_est, rep.half_energy, rep.gap, rep.se["gap"])]
    write_csv(ctx["dir"] / "entropy_cells.csv", SCHEMA["entropy_cells.csv"], rows, ctx["hash"])
    (ctx["dir"] / "entropy.json").write_text(rep.to_json())
    return dict(entropy=rep.entropy_est, half_energy=rep.half_energy, gap=rep.gap, se=rep.se, label=rep.label), checks


def _exp_pipeline(ex, ctx):
    grid, rng = ctx["grid"], ctx["rng"]
    target = parse_policy(ex.get("target", {"kind": "zero"}), grid)
    stages = parse_stages(ex.get("stages", []), grid)
    n = int(ex.get("n_paths", ctx["n_paths"]))
    res = run_pipeline(target, stages, rng, grid, n, float(ex.get("p", 2.0)))
    tol = ex.get("tolerances", {})
    checks = [Check("triangle", res.total - res.stage_sum, float(tol.get("triangle_se", 3.0)) * res.total_se,
                    res.triangle_ok(float(tol.get("triangle_se", 3.0))))]
    if isinstance(res.policy, P.Delayed):
        beta = sample_brownian(rng.child(3), grid, 1, int(ex.get("n_inverse", 1000)))
        _, cert = reconstruct_inverse(res.policy, shifted_observation(res.policy, beta), beta)
        bound = float(tol.get("inverse", 1e-8))
        checks.append(Check("inverse_sup_error", cert.max_reconstruction_error, bound,
                            cert.max_reconstruction_error <= bound))
    rows = [(r.stage, r.lp_distance, r.se, r.drift_distance, r.drift_se) for r in res.rows]
    write_csv(ctx["dir"] / "stages.csv", SCHEMA["stages.csv"], rows, ctx["hash"])
    return dict(total=res.total, total_se=res.total_se, stage_sum=res.stage_sum), checks


def _exp_prekopa(ex, ctx):
    grid, rng = ctx["grid"], ctx["rng"]
    tau = parse_tau(ex.get("tau"))
    try:
        inst = quadratic_family(float(ex.get("q", 0.3)), float(ex.get("linear", 0.0)), float(ex.get("s", 0.5)), tau,
                                float(ex.get("m_b", 0.0)), float(ex.get("m_c", 0.0)))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    hyp = check_hypothesis(inst, int(ex.get("n_triples", 1000)), rng.child(1))
    n = int(ex.get("n_paths", ctx["n_paths"]))
    con = check_conclusion(inst, rng.child(2), grid, n, parse_scheme(ex.get("scheme")))
    tol = ex.get("tolerances", {})
    margin = float(tol.get("margin", 1e-12))
    slack_se = float(tol.get("slack_se", 4.0))
    checks = [Check("hypothesis_min_margin", hyp.min_margin, -margin, hyp.min_margin >= -margin),
              Check("slack_min_z", con.min_z(), -slack_se, con.passed(slack_se))]
    write_csv(ctx["dir"] / "slack.csv", SCHEMA["slack.csv"], con.rows(), ctx["hash"])
    return dict(min_margin=hyp.min_margin, violations=hyp.violations, certificate=inst.certificate), checks


def _exp_conditions(ex, ctx):
    grid, model, rng = ctx["grid"], ctx["model"], ctx["rng"]
    d = model.noise_dim
    u = P.Deterministic.constant(grid, float(ex.get("u", 0.3)), d)
    v = P.Deterministic.constant(grid, float(ex.get("v", -0.2)), d)
    tau = parse_tau(ex.get("tau", {"deterministic": 0.5}))
    n = int(ex.get("n_paths", min(ctx["n_paths"], 4096)))
    rep = M.verify_flow_conditions(model, u, v, tau, rng, grid, n)
    bound = float(ex.get("tolerances", {}).get("max_discrepancy", 1e-10))
    rows = [(k, val) for k, val in rep.as_dict().items() if k != "n_paths" and val is not None]
    checks = [Check(k, val, bound, val <= bound) for k, val in rows]
    write_csv(ctx["dir"] / "conditions.csv", SCHEMA["conditions.csv"], rows, ctx["hash"])
    return rep.as_dict(), checks


RUNNERS = dict(variational=_exp_variational, entropy=_exp_entropy, pipeline=_exp_pipeline,
               prekopa=_exp_prekopa, conditions=_exp_conditions)


def run(config_path, threads=None, seed=None, out=None, stream=None) -> int:
    try:
        cfg = load_config(config_path)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=stream)
        return EXIT_CONFIG
    cfg = copy.deepcopy(cfg)
    if seed is not None:
        cfg["seed"] = int(seed)
    if threads is not None:
        set_threads(threads)
    out_dir = Path(out or cfg.get("output") or "wienervar_out")
    out_dir.mkdir(parents=True, exist_ok=True)
    chash = config_hash(cfg)
    grid = TimeGrid(int(cfg.get("grid", {}).get("n_steps", 256)))
    n_paths = int(cfg.get("grid", {}).get("n_paths", 100_000))
    model = parse_model(cfg.get("model", {"family": "wiener"}))
    (out_dir / "schema.json").write_text(json.dumps(SCHEMA, indent=2, sort_keys=True))
    report = dict(config_hash=chash, seed=cfg["seed"], experiments=[])
    status = EXIT_OK
    t_all = time.perf_counter()
    for i, ex in enumerate(cfg.get("experiments") or []):
        name = ex.get("name", f"{ex['type']}{i}")
        ex_dir = out_dir / name
        ex_dir.mkdir(exist_ok=True)
        # disjoint stream ids per experiment
        ctx = dict(grid=grid, model=model, rng=RngStream(cfg["seed"], 1_000 * (i + 1)), n_paths=n_paths,
                   dir=ex_dir, hash=chash)
        t0 = time.perf_counter()
        entry = dict(name=name, type=ex["type"])
        try:
            summary, checks = RUNNERS[ex["type"]](ex, ctx)
        except ConfigError as exc:
            entry.update(error=f"config: {exc}")
            status = EXIT_CONFIG
        except (FloatingPointError, np.linalg.LinAlgError, M.CollisionError, OverflowError) as exc:
            entry.update(error=f"numerical: {exc}")
            status = max(status, EXIT_NUMERIC) if status != EXIT_CONFIG else status
        else:
            entry.update(summary=summary, checks=[c.as_dict() for c in checks])
            failed = [c.name for c in checks if not c.passed]
            entry["passed"] = not failed
            for c in checks:
                print(f"[{'PASS' if c.passed else 'FAIL'}] {name}.{c.name} = {c.value:.6g} (bound {c.bound})",
                      file=stream)
            if failed and status == EXIT_OK:
                status = EXIT_CHECK
        entry["runtime_s"] = round(time.perf_counter() - t0, 3)
        report["experiments"].append(entry)
        # flush after every experiment so partial results survive a failure
        (out_dir / "report.json").write_text(json.dumps(report, indent=2, default=_json_default))
        if "error" in entry:
            print(f"[ERROR] {name}: {entry['error']}", file=stream)
            break
    report["runtime_s"] = round(time.perf_counter() - t_all, 3)
    report["exit_code"] = status
    (out_dir / "report.json").write_text(json.dumps(report, indent=2, default=_json_default))
    return status


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="wienervar", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="cmd", required=True)
    r = sub.add_parser("run", help="run the experiments of a config file")
    r.add_argument("config")
    r.add_argument("--threads", type=int)
    r.add_argument("--seed", type=int)
    r.add_argument("--out")
    v = sub.add_parser("validate", help="check a config file without running it")
    v.add_argument("config")
    sub.add_parser("list-functionals", help="names accepted in objective blocks")
    args = ap.parse_args(argv)
    if args.cmd == "run":
        return run(args.config, args.threads, args.seed, args.out)
    if args.cmd == "validate":
        try:
            load_config(args.config)
        except (ConfigError, ValueError) as exc:
            print(f"config error: {exc}")
            return EXIT_CONFIG
        print("ok")
        return EXIT_OK
    for name, fn in sorted(F.REGISTRY.items()):
        params = ", ".join(str(p) for p in inspect.signature(fn).parameters.values())
        print(f"{name}({params})")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
