"""Command-line pipeline: train -> validate -> bounds -> tail -> simulate -> report."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import certify, sim
from .core import NoiseSpec
from .env import EnvModel, load_policy, make_env, policy_from_json
from .grid import build_grid, classify_grid
from .learn import K2_DEFAULTS, KINDS, RSM, URS, LRS, Certificate, TrainConfig, certify_loop, system_hash
from .verify import validate

log = logging.getLogger("rewardcert")

FILES = {"certificate": "certificate.json", "bounds": "bounds.csv", "tail": "tail.csv",
         "timing": "timing.json", "summary": "summary.txt", "simulation": "simulation.json"}


# ---------------------------------------------------------------- JSON with 17 significant digits

def dumps17(obj, indent=1, _level=0) -> str:
    """JSON text with every float written to 17 significant digits."""
    pad = "" if indent is None else "\n" + " " * (indent * (_level + 1))
    end = "" if indent is None else "\n" + " " * (indent * _level)
    if isinstance(obj, (bool, np.bool_)) or obj is None:
        return json.dumps(bool(obj) if obj is not None else None)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isnan(x):
            return "NaN"
        if math.isinf(x):
            return "Infinity" if x > 0 else "-Infinity"
        return format(x, ".17g")
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [json.dumps(str(k)) + ": " + dumps17(v, indent, _level + 1) for k, v in obj.items()]
        return "{" + pad + ("," + pad).join(items) + end + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        seq = list(obj)
        if not seq:
            return "[]"
        # short numeric rows stay on one line
        if all(isinstance(v, (int, float, np.integer, np.floating)) for v in seq):
            return "[" + ", ".join(dumps17(v, None) for v in seq) + "]"
        return "[" + pad + ("," + pad).join(dumps17(v, indent, _level + 1) for v in seq) + end + "]"
    if dataclasses.is_dataclass(obj):
        return dumps17(dataclasses.asdict(obj), indent, _level)
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def write_json(path, obj):
    Path(path).write_text(dumps17(obj) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- configuration

_TRAIN_FIELDS = {f.name for f in dataclasses.fields(TrainConfig)} - {"tau", "xi", "timeout_min"}


@dataclass
class RunConfig:
    env: object
    policy: object
    noise: dict
    kinds: list = field(default_factory=lambda: [URS, LRS])
    train: dict = field(default_factory=dict)
    kind_overrides: dict = field(default_factory=dict)
    tau: float = 0.02
    xi: float = 0.002
    timeout_min: float = 60.0
    seed: int = 0
    out: str = "out"
    initial_states: list | None = None
    initial_count: int = 20
    episodes: int = 200
    horizon: int | None = None
    tail_c: list | None = None
    tail_state: list | None = None
    tail_episodes: int = 40000
    n_star: int | None = None
    workers: int = 1
    base_dir: str = field(default=".", repr=False)

    def __post_init__(self):
        if not (self.tau > self.xi > 0):
            raise ValueError(f"need tau > xi > 0, got tau={self.tau}, xi={self.xi}")
        bad = [k for k in self.kinds if k not in KINDS]
        if bad or not self.kinds:
            raise ValueError(f"kinds must be a non-empty subset of {KINDS}, got {self.kinds}")
        unknown = set(self.train) - _TRAIN_FIELDS
        if unknown:
            raise ValueError(f"unknown train keys: {sorted(unknown)}")
        for kind, ov in self.kind_overrides.items():
            if kind not in KINDS:
                raise ValueError(f"unknown kind in kind_overrides: {kind}")
            if set(ov) - _TRAIN_FIELDS:
                raise ValueError(f"unknown train keys for {kind}: {sorted(set(ov) - _TRAIN_FIELDS)}")
        if self.episodes < 1 or self.initial_count < 1 or self.tail_episodes < 1:
            raise ValueError("episode and state counts must be positive")
        self.train_config(self.kinds[0])  # type-check the training section early

    def to_json(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "base_dir"}
        return d

    # --------------------------------------------------------- resolution

    def _resolve(self, name) -> Path:
        path = Path(name)
        return path if path.is_absolute() else Path(self.base_dir) / path

    def env_config(self):
        """The env entry itself, or the contents of the JSON file it names."""
        if isinstance(self.env, str) and self.env.endswith(".json"):
            path = self._resolve(self.env)
            if not path.exists():
                raise FileNotFoundError(f"env file not found: {path}")
            return json.loads(path.read_text(encoding="utf-8"))
        return self.env

    def make_env(self) -> EnvModel:
        return make_env(self.env_config())

    def make_policy(self, env):
        if isinstance(self.policy, dict):
            return policy_from_json(self.policy, env)
        path = self._resolve(self.policy)
        if not path.exists():
            raise FileNotFoundError(f"policy file not found: {path}")
        return load_policy(path, env)

    def make_noise(self, env) -> NoiseSpec:
        return NoiseSpec.from_json(self.noise, env.n)

    def train_config(self, kind) -> TrainConfig:
        env = self.env_config()
        name = env if isinstance(env, str) else env.get("builtin")
        d = {"k2": K2_DEFAULTS.get(name, 0.01)}
        d.update(self.train)
        d.update(self.kind_overrides.get(kind, {}))
        d.update(tau=self.tau, xi=self.xi, timeout_min=self.timeout_min)
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        try:
            return TrainConfig(**d)
        except TypeError as exc:
            raise ValueError(f"bad training configuration: {exc}") from exc

    def initial(self, env, rng) -> np.ndarray:
        if self.initial_states is not None:
            s = np.atleast_2d(np.asarray(self.initial_states, dtype=np.float64))
            if s.shape[1] != env.n:
                raise ValueError("initial state dimension mismatch")
            return s
        return env.initial_box.sample(rng, self.initial_count)


def parse_config(path, **overrides) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValueError(f"malformed config {path}: {exc}") from exc
    return config_from_dict(raw, base_dir=str(path.parent), **overrides)


def config_from_dict(raw: dict, base_dir=".", **overrides) -> RunConfig:
    if not isinstance(raw, dict):
        raise ValueError("config must be a JSON object")
    names = {f.name for f in dataclasses.fields(RunConfig)} - {"base_dir"}
    unknown = set(raw) - names
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    for key in ("env", "policy", "noise"):
        if key not in raw:
            raise ValueError(f"config is missing required key {key!r}")
    merged = dict(raw)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return RunConfig(**merged, base_dir=base_dir)
    except TypeError as exc:
        raise ValueError(f"bad config: {exc}") from exc


# ---------------------------------------------------------------- pipeline stages

@dataclass
class Context:
    rc: RunConfig
    env: EnvModel
    policy: object
    noise: NoiseSpec
    out: Path
    rng: np.random.Generator
    timing: dict = field(default_factory=lambda: {"train_s": 0.0, "validate_s": 0.0, "total_s": 0.0})
    emitted: list = field(default_factory=list)

    def emit(self, key, writer):
        path = self.out / FILES[key]
        writer(path)
        if str(path) not in self.emitted:
            self.emitted.append(str(path))
        print(path)
        return path


def build_context(rc: RunConfig) -> Context:
    env = rc.make_env()
    policy = rc.make_policy(env)
    noise = rc.make_noise(env)
    out = Path(rc.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    return Context(rc, env, policy, noise, out, np.random.default_rng(rc.seed))


def stage_train(ctx: Context) -> dict:
    certs = {}
    for i, kind in enumerate(ctx.rc.kinds):
        cfg = ctx.train_cfg = ctx.rc.train_config(kind)
        log.info("training %s certificate", kind)
        cert = certify_loop(ctx.env, ctx.policy, ctx.noise, kind, cfg, rng=ctx.rc.seed + i)
        ctx.timing["train_s"] += cert.train_s
        ctx.timing["validate_s"] += cert.validate_s
        certs[kind] = cert
    ctx.emit("certificate", lambda p: write_json(p, {k: c.to_json() for k, c in certs.items()}))
    return certs


def load_certificates(path) -> dict:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    return {k: Certificate.from_json(v) for k, v in raw.items()}


def stage_validate(ctx: Context, certs: dict) -> dict:
    """Re-run validation of stored certificates on a fresh grid at their final covering radius."""
    out = {}
    for kind, cert in certs.items():
        cfg = ctx.rc.train_config(kind)
        t0 = time.monotonic()
        if cert.system_hash != system_hash(ctx.env, ctx.policy, ctx.noise):
            raise ValueError(f"{kind} certificate was built for a different system")
        sets = classify_grid(build_grid(ctx.env.state_box, cert.tau, cfg.point_budget), ctx.env)
        res = validate(cert.net, kind, sets, ctx.env, ctx.policy, ctx.noise, tau=cert.tau, K=cert.K,
                       K_prime=cert.K_prime, epsilon=cert.epsilon, engine=cfg.engine, k=cfg.k_cells,
                       weighting=cfg.weighting)
        ctx.timing["validate_s"] += time.monotonic() - t0
        out[kind] = res
        log.info("%s revalidation: %s", kind, res.verdict)
    return out


def stage_bounds(ctx: Context, certs: dict, states) -> list:
    urs, lrs = certs.get(URS), certs.get(LRS)
    urs = urs if urs is not None and urs.validated else None
    lrs = lrs if lrs is not None and lrs.validated else None
    rows = [certify.reward_bounds(urs, lrs, s) for s in states]
    ctx.emit("bounds", lambda p: certify.write_bounds_csv(p, rows))
    return rows


def stage_simulate(ctx: Context, states, bounds=None):
    rc = ctx.rc
    stats = sim.estimate_stats(ctx.env, ctx.policy, ctx.noise, states, rc.episodes,
                               rc.horizon or sim.default_horizon(), seed=rc.seed + 101, workers=rc.workers)
    if bounds is not None:
        report = sim.enclosure_report(stats, [(b.lower if b.lower is not None else -math.inf,
                                               b.upper if b.upper is not None else math.inf) for b in bounds])
        rows = report["states"]
    else:
        report = None
        rows = [{"state": s.state, "mean": s.mean, "std": s.std, "lower": None, "upper": None, "pass": None}
                for s in stats.per_state]
    summary = [{k: r[k] for k in ("state", "mean", "std", "lower", "upper", "pass")} for r in rows]
    ctx.emit("simulation", lambda p: write_json(p, summary))
    return stats, report


def default_c_grid(threshold, direction, count=25):
    span = max(1.0, abs(threshold))
    steps = np.linspace(0.02, 1.5, count) * span
    return (threshold + steps) if direction == ">=" else (threshold - steps)


def stage_tail(ctx: Context, certs: dict, s0):
    """Tail bound curve and matching empirical frequencies from a single start state."""
    rows = []
    rsm = certs.get(RSM)
    cert = certs.get(URS) or certs.get(LRS)
    rc = ctx.rc
    notes = []
    if rsm is not None and rsm.validated and cert is not None and cert.validated:
        params = certify.tail_params(cert, rsm, s0, rc.n_star)
        cs = np.asarray(rc.tail_c if rc.tail_c is not None else default_c_grid(params.threshold, params.direction))
        rng = np.random.default_rng(rc.seed + 202)
        ret, _, trunc = sim.simulate_returns(ctx.env, ctx.policy, ctx.noise,
                                             np.repeat(np.atleast_2d(s0), rc.tail_episodes, axis=0),
                                             rc.horizon or sim.default_horizon(), rng)
        kept = ret[~trunc]
        for c in cs:
            if (params.direction == ">=" and c <= params.threshold) or (params.direction == "<=" and c >= params.threshold):
                continue
            bound, raw = certify.tail_value(params, float(c))
            freq = float((kept >= c).mean() if params.direction == ">=" else (kept <= c).mean())
            rows.append((float(c), bound, freq))
        notes = list(params.notes)
        ctx.tail_params = params
    else:
        notes = ["tail bounds need validated RSM and URS/LRS certificates"]
    ctx.emit("tail", lambda p: certify.write_tail_csv(p, rows))
    return rows, notes


def emit_report(ctx: Context, certs: dict, bounds, report, tail_rows, notes):
    status_ok = all(c.validated for c in certs.values())
    lines = [f"status: {'Validated' if status_ok else 'UNKNOWN'}",
             f"system: {ctx.env.name} hash {next(iter(certs.values())).system_hash if certs else ''}"]
    for kind, c in certs.items():
        lines.append(f"{kind}: {c.status} tau={c.tau:.6g} rounds={len(c.rounds)} L_h={c.L_h:.6g} "
                     f"m={c.m:.6g} mode={c.expectation_mode} lipschitz={c.lipschitz_regime}")
        if not c.validated and c.counterexamples:
            lines.append(f"  last counterexamples ({len(c.counterexamples)} shown in {FILES['certificate']}):")
            for cex in c.counterexamples[:10]:
                lines.append(f"    {cex['condition']} at {cex['point']} slack {cex['slack']:.6g}")
    if bounds:
        gaps = [b.gap for b in bounds if b.gap is not None]
        if gaps:
            lines.append(f"bounds: {len(bounds)} states, mean gap {np.mean(gaps):.6g}")
    if report is not None:
        lines.append(f"enclosure: {report['state_pass']}/{report['state_total']} states pass")
    if tail_rows:
        fails = sum(1 for c, b, f in tail_rows if f > b)
        lines.append(f"tail: {len(tail_rows)} thresholds, {fails} above bound")
    lines.extend(f"note: {n}" for n in notes)
    ctx.timing["total_s"] = time.monotonic() - ctx.start
    ctx.emit("timing", lambda p: write_json(p, ctx.timing))
    ctx.emit("summary", lambda p: p.write_text("\n".join(lines) + "\n", encoding="utf-8"))
    return status_ok


# ---------------------------------------------------------------- entry point

def _parser():
    ap = argparse.ArgumentParser(prog="rewardcert", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("train", "validate", "bounds", "tail", "simulate", "report", "run"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("--workers", type=int)
        p.add_argument("--timeout-min", type=float, dest="timeout_min")
        p.add_argument("--verbose", "-v", action="store_true")
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = parse_config(args.config, seed=args.seed, out=args.out, workers=args.workers,
                          timeout_min=args.timeout_min)
        ctx = build_context(rc)
        ctx.start = time.monotonic()
        return _dispatch(args.command, ctx)
    except (ValueError, FileNotFoundError, OSError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def _stored_certs(ctx):
    path = ctx.out / FILES["certificate"]
    if not path.exists():
        raise FileNotFoundError(f"no certificates at {path}; run 'train' first")
    return load_certificates(path)


def _dispatch(cmd, ctx: Context) -> int:
    rc = ctx.rc
    states = rc.initial(ctx.env, ctx.rng)
    if cmd == "train":
        certs = stage_train(ctx)
        ctx.timing["total_s"] = time.monotonic() - ctx.start
        ctx.emit("timing", lambda p: write_json(p, ctx.timing))
        return 0 if all(c.validated for c in certs.values()) else 1
    if cmd == "simulate":
        stage_simulate(ctx, states)
        return 0
    if cmd == "run":
        certs = stage_train(ctx)
        bounds = stage_bounds(ctx, certs, states)
        _, report = stage_simulate(ctx, states, bounds)
        rows, notes = stage_tail(ctx, certs, rc.tail_state or states[0])
        return 0 if emit_report(ctx, certs, bounds, report, rows, notes) else 1
    certs = _stored_certs(ctx)
    if cmd == "validate":
        results = stage_validate(ctx, certs)
        return 0 if all(r.valid for r in results.values()) else 1
    if cmd == "bounds":
        stage_bounds(ctx, certs, states)
        return 0 if all(c.validated for c in certs.values()) else 1
    if cmd == "tail":
        rows, _ = stage_tail(ctx, certs, rc.tail_state or states[0])
        return 0 if rows else 1
    if cmd == "report":
        bounds = stage_bounds(ctx, certs, states)
        _, report = stage_simulate(ctx, states, bounds)
        rows, notes = stage_tail(ctx, certs, rc.tail_state or states[0])
        return 0 if emit_report(ctx, certs, bounds, report, rows, notes) else 1
    raise ValueError(f"unknown command {cmd}")
