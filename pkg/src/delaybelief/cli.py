"""Batch front door: seeded pipelines from data collection to reports.

Every command reads a plain ``key = value`` config file (``--config``) and
overrides given on the command line (``--seeds``, ``--out``, ``--preset`` or
trailing ``key=value`` pairs; command-line values win). The fully resolved
configuration is echoed into ``manifest.txt`` next to every output.

Exit codes: 0 success, 1 usage or configuration error, 2 bound violation.
"""

from __future__ import annotations

import argparse
import ast
import csv
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .agent import (
    CURVE_COLUMNS, ActorPolicy, Agent, SACConfig, evaluate, normalized_return, random_returns,
    train_dfbt_sac, write_curve, write_manifest,
)
from .belief import (
    DFBT, TRAIN_PRESETS, BeliefCurve, DFBTBelief, DFBTConfig, Normalizer, OracleBelief,
    RecursiveBelief, RecursiveConfig, RecursiveModel, belief_error, full_windows,
    one_step_error, split_dataset, train_dfbt, train_recursive, write_belief_csv,
)
from .delay import DelaySpec
from .envs import (
    RandomPolicy, collect_dataset, make_env, msd_policy_mix, read_dataset, write_dataset,
)
from .numcore import RngStreams, load, save
from .theory import (
    BoundReport, BoundRow, BoundViolation, comparison_verdict, geometric_bound, preset_system,
    rollout_error_experiment, write_bound_csv,
)

log = logging.getLogger("delaybelief")

COMMANDS = ("collect", "train-belief", "eval-belief", "train-agent", "eval-agent", "theory",
            "report")
BELIEF_KINDS = ("dfbt", "recursive", "oracle")
AGENT_KINDS = BELIEF_KINDS + ("none", "random")
PREFIXES = ("env.", "sac.", "dfbt.", "train.", "recursive.")


class ConfigError(ValueError):
    """Invalid command line, config file or missing input."""


# ---------------------------------------------------------------------------
# configuration


def _ints(text: str) -> tuple[int, ...]:
    """``"0,1,2"``, an inclusive range ``"1-20"``, or a mix of both (nonnegative)."""
    out: list[int] = []
    for part in _words(text):
        lo, _, hi = part.partition("-")
        out.extend(range(int(lo), int(hi or lo) + 1))
    return tuple(out)


def _words(text: str) -> tuple[str, ...]:
    return tuple(w for w in str(text).replace(" ", "").split(",") if w)


def _literal(text: str):
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


@dataclass
class RunConfig:
    env_id: str = "pendulum"
    delay: str = "constant"
    delta_max: int = 8
    belief: tuple[str, ...] = ("dfbt",)
    preset: str = "desk"
    loss_kind: str = "mse"
    n_step: tuple[int, ...] = (8,)
    seeds: tuple[int, ...] = (0,)
    steps: int = 100_000
    epochs: int = -1                    # -1: take the preset's value
    n_transitions: int = 50_000
    mix: str = "random:1"
    controller: str = "agent"           # source of medium/expert behaviour: agent | lqr
    agent_checkpoint: str = ""
    medium_epsilon: float = 0.5         # uniform-action probability of the "medium" policy
    dataset: str = ""
    belief_dir: str = ""
    belief_seed: int = 0
    held_out: float = 0.1
    split_seed: int = 0
    max_windows: int = 0                # 0: every window
    system: str = "expansive"
    delta_list: tuple[int, ...] = tuple(range(1, 21))
    n_rollouts: int = 64
    bound_scale: float = 1.0
    runs: tuple[str, ...] = ()
    r_random: str = ""
    r_sac: str = ""
    out: str = "out"
    extra: dict = field(default_factory=dict)

    _PARSERS = {"belief": _words, "n_step": _ints, "seeds": _ints, "delta_list": _ints,
                "runs": _words}

    @classmethod
    def from_pairs(cls, pairs: dict[str, str]) -> "RunConfig":
        cfg = cls()
        known = {f.name: f for f in fields(cls) if f.name != "extra"}
        for key, raw in pairs.items():
            if key.startswith(PREFIXES):
                cfg.extra[key] = _literal(raw)
                continue
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            default = getattr(cls, key)
            parse = cls._PARSERS.get(key) or type(default)
            try:
                setattr(cfg, key, parse(raw))
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from None
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.preset not in ("desk", "paper"):
            raise ConfigError(f"preset must be desk or paper, got {self.preset!r}")
        if self.delay not in ("constant", "uniform"):
            raise ConfigError(f"delay must be constant or uniform, got {self.delay!r}")
        if self.delta_max < 1:
            raise ConfigError("delta_max must be >= 1")
        bad = [k for k in self.belief if k not in AGENT_KINDS]
        if bad:
            raise ConfigError(f"unknown belief kind(s) {bad}; choose from {AGENT_KINDS}")
        if any(n < 1 or n > self.delta_max for n in self.n_step):
            raise ConfigError(f"need 1 <= N <= delta_max={self.delta_max}, got {self.n_step}")
        if not self.seeds:
            raise ConfigError("seeds is empty")

    def sub(self, prefix: str) -> dict:
        return {k[len(prefix):]: v for k, v in self.extra.items() if k.startswith(prefix)}

    def env_params(self) -> dict:
        return self.sub("env.")

    def make_env(self):
        try:
            return make_env(self.env_id, **self.env_params())
        except TypeError as exc:
            raise ConfigError(f"bad env parameter: {exc}") from None

    def delay_spec(self) -> DelaySpec:
        return DelaySpec(self.delay, self.delta_max)

    def sac_config(self, n_step: int) -> SACConfig:
        over = self.sub("sac.")
        if "hidden" in over:
            over["hidden"] = tuple(over["hidden"])
        try:
            return SACConfig.preset(self.preset, **{**over, "n_step": n_step})
        except TypeError as exc:
            raise ConfigError(f"bad sac parameter: {exc}") from None

    def dfbt_config(self, state_dim: int, action_dim: int) -> DFBTConfig:
        try:
            return DFBTConfig.preset(self.preset, state_dim, action_dim, self.delta_max,
                                     **self.sub("dfbt."))
        except TypeError as exc:
            raise ConfigError(f"bad dfbt parameter: {exc}") from None

    def recursive_config(self, state_dim: int, action_dim: int) -> RecursiveConfig:
        over = self.sub("recursive.")
        if "hidden" in over:
            over["hidden"] = tuple(over["hidden"])
        try:
            return RecursiveConfig(state_dim, action_dim, **over)
        except TypeError as exc:
            raise ConfigError(f"bad recursive parameter: {exc}") from None

    def train_settings(self) -> dict:
        out = {**TRAIN_PRESETS[self.preset], **self.sub("train.")}
        unknown = set(out) - set(TRAIN_PRESETS["paper"])
        if unknown:
            raise ConfigError(f"unknown train parameter(s) {sorted(unknown)}")
        if self.epochs >= 0:
            out["epochs"] = self.epochs
        out["betas"] = tuple(out["betas"])
        return out

    def resolved(self) -> dict[str, str]:
        """Every effective setting, with presets expanded, as manifest strings."""
        out = {}
        for f in fields(self):
            if f.name == "extra":
                continue
            v = getattr(self, f.name)
            out[f.name] = ",".join(map(str, v)) if isinstance(v, tuple) else str(v)
        env = self.make_env()
        ds, da = env.spec.state_dim, env.spec.action_dim
        for k, v in env.spec.params.items():
            out[f"env.{k}"] = str(v)
        out["env.horizon"] = str(env.spec.horizon)
        for k, v in self.sac_config(self.n_step[0]).to_dict().items():
            if k != "n_step":
                out[f"sac.{k}"] = str(v)
        dcfg = self.dfbt_config(ds, da)
        for f in fields(dcfg):
            if f.name not in ("state_dim", "action_dim", "delta_max"):
                out[f"dfbt.{f.name}"] = str(getattr(dcfg, f.name))
        out["recursive.hidden"] = str(list(self.recursive_config(ds, da).hidden))
        for k, v in self.train_settings().items():
            out[f"train.{k}"] = str(v)
        return out


def parse_config_text(text: str, origin: str = "config") -> dict[str, str]:
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in pairs:
            raise ConfigError(f"{origin}:{lineno}: duplicate key {key!r}")
        pairs[key] = value
    return pairs


def read_manifest(path) -> dict[str, str]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.txt"
    if not path.exists():
        raise ConfigError(f"missing manifest {path}")
    return dict(line.split("=", 1) for line in path.read_text().splitlines() if "=" in line)


def _write_cmd_manifest(out: Path, command: str, cfg: RunConfig, **extra) -> None:
    write_manifest(out / "manifest.txt", {"command": command, **cfg.resolved(),
                                          **{k: str(v) for k, v in extra.items()}})


def _workers(n_jobs: int) -> int:
    try:
        cap = int(os.environ.get("DBLF_THREADS", "1"))
    except ValueError:
        raise ConfigError("DBLF_THREADS must be an integer") from None
    return max(1, min(cap, n_jobs))


def _map(fn, jobs: list) -> list:
    """Run jobs sequentially, or on ``DBLF_THREADS`` processes; results stay in job order."""
    n = _workers(len(jobs))
    if n == 1:
        return [fn(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, jobs))


# ---------------------------------------------------------------------------
# loading helpers


def load_agent(run_dir, spec) -> Agent:
    """Rebuild an agent from a training run's manifest and checkpoint."""
    run_dir = Path(run_dir)
    if run_dir.suffix == ".dblf":
        run_dir = run_dir.parent
    m = read_manifest(run_dir)
    ckpt = run_dir / "agent.dblf"
    if not ckpt.exists():
        raise ConfigError(f"missing agent checkpoint {ckpt}")
    hidden = tuple(_literal(m.get("sac.hidden", "[256, 256]")))
    twin = m.get("sac.twin", "True") == "True"
    agent = Agent.create(spec, SACConfig(hidden=hidden, twin=twin), 0)
    agent.load_arrays(load(ckpt))
    return agent


def _belief_path(belief_dir, kind: str, seed: int) -> Path:
    return Path(belief_dir) / f"{kind}_seed{seed}.dblf"


def load_belief(cfg: RunConfig, kind: str, seed: int, env):
    """A frozen belief of ``kind`` (trained ones come from ``belief_dir``)."""
    spec = env.spec
    if kind == "oracle":
        return OracleBelief(env)
    if not cfg.belief_dir:
        raise ConfigError(f"belief kind {kind!r} needs belief_dir")
    path = _belief_path(cfg.belief_dir, kind, seed)
    if not path.exists():
        raise ConfigError(f"missing belief checkpoint {path}")
    m = read_manifest(cfg.belief_dir)
    if m.get("env_id") != spec.env_id:
        raise ConfigError(f"belief was trained on {m.get('env_id')!r}, not {spec.env_id!r}")
    arrays = load(path)
    norm = Normalizer.from_arrays(arrays)
    if kind == "dfbt":
        dcfg = DFBTConfig(spec.state_dim, spec.action_dim, int(m["delta_max"]),
                          int(m["dfbt.n_layers"]), int(m["dfbt.hidden"]), int(m["dfbt.n_heads"]),
                          float(m["dfbt.attn_dropout"]), float(m["dfbt.resid_dropout"]),
                          float(m["dfbt.hidden_dropout"]), m["dfbt.gaussian_head"] == "True")
        model = DFBT(dcfg, norm, np.random.default_rng(0))
        model.load_arrays(arrays)
        return DFBTBelief(model)
    rcfg = RecursiveConfig(spec.state_dim, spec.action_dim,
                           tuple(_literal(m["recursive.hidden"])))
    model = RecursiveModel(rcfg, norm, np.random.default_rng(0))
    model.load_arrays(arrays)
    return RecursiveBelief(model, spec.state_dim, spec.action_dim)


def _read_dataset(cfg: RunConfig, env):
    if not cfg.dataset:
        raise ConfigError("dataset path is required")
    path = Path(cfg.dataset)
    if path.is_dir():
        path = path / "dataset.dbtj"
    if not path.exists():
        raise ConfigError(f"missing dataset {path}")
    ds = read_dataset(path)
    if ds.spec.env_id != env.spec.env_id:
        raise ConfigError(f"dataset holds {ds.spec.env_id!r} data, config names "
                          f"{env.spec.env_id!r}")
    return ds


# ---------------------------------------------------------------------------
# commands


def _parse_mix(text: str) -> list[tuple[str, float]]:
    out = []
    for part in _words(text):
        name, _, w = part.partition(":")
        if name not in ("random", "medium", "expert"):
            raise ConfigError(f"unknown mix component {name!r}")
        out.append((name, float(w or 1.0)))
    if not out:
        raise ConfigError("mix is empty")
    return out


def cmd_collect(cfg: RunConfig) -> Path:
    env = cfg.make_env()
    mix = _parse_mix(cfg.mix)
    seed = cfg.seeds[0]
    needs_controller = any(name != "random" for name, _ in mix)
    policies = {"random": RandomPolicy(env.spec, seed)}
    if needs_controller:
        if cfg.controller == "lqr":
            if env.spec.env_id != "mass_spring_damper":
                raise ConfigError("controller=lqr is only available for mass_spring_damper")
            policies.update({label: pol for label, _, pol in msd_policy_mix(env, seed=seed)})
        elif cfg.controller == "agent":
            if not cfg.agent_checkpoint:
                raise ConfigError("medium/expert data need agent_checkpoint")
            agent = load_agent(cfg.agent_checkpoint, env.spec)
            policies["medium"] = ActorPolicy(agent.actor, env.spec, epsilon=cfg.medium_epsilon,
                                             seed=seed)
            policies["expert"] = ActorPolicy(agent.actor, env.spec, seed=seed)
        else:
            raise ConfigError(f"controller must be agent or lqr, got {cfg.controller!r}")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = collect_dataset(env, [(name, w, policies[name]) for name, w in mix], cfg.n_transitions,
                         seed)
    write_dataset(out / "dataset.dbtj", ds)
    counts = ds.label_counts()
    _write_cmd_manifest(out, "collect", cfg, n_trajectories=len(ds.trajectories),
                        written_transitions=ds.n_transitions,
                        **{f"label.{k}": counts[k] for k in sorted(counts)})
    return out


def _train_belief_job(job) -> tuple[str, int, float]:
    cfg, kind, seed = job
    env = cfg.make_env()
    ds = _read_dataset(cfg, env)
    train, _ = split_dataset(ds, cfg.held_out, cfg.split_seed)
    spec = env.spec
    ts = cfg.train_settings()
    norm = Normalizer.fit(train)
    init = RngStreams(seed).stream(f"init/{kind}")
    if kind == "dfbt":
        model = DFBT(cfg.dfbt_config(spec.state_dim, spec.action_dim), norm, init)
        model, curve = train_dfbt(model, train, cfg.delay_spec(), seed=seed,
                                  loss_kind=cfg.loss_kind, **ts)
    else:
        model = RecursiveModel(cfg.recursive_config(spec.state_dim, spec.action_dim), norm, init)
        model, curve = train_recursive(model, train, seed=seed, loss_kind=cfg.loss_kind, **ts)
    out = Path(cfg.out)
    save(_belief_path(out, kind, seed), model.to_arrays())
    with open(out / f"loss_{kind}_seed{seed}.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss"])
        w.writerows([[i + 1, f"{v:.12g}"] for i, v in enumerate(curve)])
    return kind, seed, curve[-1] if curve else float("nan")


def cmd_train_belief(cfg: RunConfig) -> Path:
    env = cfg.make_env()
    _read_dataset(cfg, env)
    kinds = [k for k in cfg.belief if k in ("dfbt", "recursive")]
    if not kinds:
        raise ConfigError("train-belief needs belief kind dfbt and/or recursive")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_cmd_manifest(out, "train-belief", cfg)
    for kind, seed, loss in _map(_train_belief_job, [(cfg, k, s) for k in kinds
                                                      for s in cfg.seeds]):
        log.info("trained %s seed %d: final loss %.6g", kind, seed, loss)
    return out


def _eval_windows(cfg: RunConfig, held):
    tokens, targets = full_windows(held, cfg.delta_max)
    if cfg.max_windows and len(tokens) > cfg.max_windows:
        pick = np.sort(RngStreams(cfg.split_seed).stream("eval/windows")
                       .choice(len(tokens), cfg.max_windows, replace=False))
        tokens, targets = tokens[pick], targets[pick]
    return tokens, targets


def _predict(belief, tokens, batch: int = 1024) -> np.ndarray:
    return np.concatenate([belief.predict_tokens(tokens[i:i + batch])
                           for i in range(0, len(tokens), batch)])


def pool_curves(curves: list[BeliefCurve]) -> BeliefCurve:
    """Statistics of the union of several per-seed evaluation samples."""
    n = np.sum([c.n for c in curves], axis=0)
    mean = np.sum([c.mean * c.n for c in curves], axis=0) / n
    second = np.sum([(c.std ** 2 + c.mean ** 2) * c.n for c in curves], axis=0) / n
    return BeliefCurve(mean, np.sqrt(np.maximum(second - mean ** 2, 0.0)), n)


def cmd_eval_belief(cfg: RunConfig) -> Path:
    env = cfg.make_env()
    ds = _read_dataset(cfg, env)
    _, held = split_dataset(ds, cfg.held_out, cfg.split_seed)
    tokens, targets = _eval_windows(cfg, held)
    kinds = [k for k in cfg.belief if k in BELIEF_KINDS]
    if not kinds:
        raise ConfigError("eval-belief needs at least one of dfbt, recursive, oracle")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    per_seed: dict[str, list[BeliefCurve]] = {k: [] for k in kinds}
    euclid: dict[str, list[np.ndarray]] = {k: [] for k in kinds}
    eps_p: list[float] = []
    for seed in cfg.seeds:
        curves = {}
        for kind in kinds:
            belief = load_belief(cfg, kind, seed, env)
            preds = _predict(belief, tokens)
            curves[kind] = belief_error(preds, targets)
            per_seed[kind].append(curves[kind])
            euclid[kind].append(np.linalg.norm(preds - targets, axis=-1).mean(axis=0))
            if kind == "recursive":
                eps_p.append(one_step_error(belief.pmodel, held))
        write_belief_csv(out / f"belief_error_seed{seed}.csv", curves)
    write_belief_csv(out / "belief_error.csv", {k: pool_curves(v) for k, v in per_seed.items()})
    extra = {"eval_windows": len(tokens)}
    if "dfbt" in kinds and "recursive" in kinds and hasattr(env, "lipschitz"):
        report = comparison_report(env.lipschitz, float(np.mean(eps_p)),
                                   np.mean(euclid["recursive"], axis=0),
                                   np.mean(euclid["dfbt"], axis=0))
        write_bound_csv(out / "comparison.csv", report)
        extra["eps_P"] = f"{np.mean(eps_p):.12g}"
    _write_cmd_manifest(out, "eval-belief", cfg, **extra)
    return out


def comparison_report(L_P: float, eps_P: float, recursive_curve, direct_curve) -> BoundReport:
    """Direct-vs-recursive predicate per horizon ``h``.

    ``eps_direct`` at ``h`` is the worst direct error over horizons ``1..h``;
    ``measured_recursive`` is the recursive model's error at ``h``.
    """
    report = BoundReport(modes={"recursive", "direct_proxy"})
    running = np.maximum.accumulate(np.asarray(direct_curve, dtype=np.float64))
    for h in range(1, len(running) + 1):
        report.rows.append(BoundRow(h, L_P, eps_P, geometric_bound(L_P, eps_P, h),
                                    float(recursive_curve[h - 1]), float(running[h - 1])))
    comparison_verdict(report)
    return report


def _agent_job(job) -> dict:
    cfg, kind, n_step, seed, run_dir = job
    env = cfg.make_env()
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    sac = cfg.sac_config(n_step)
    eval_seeds = RngStreams(seed).stream("eval").integers(0, 2 ** 31, size=sac.eval_episodes)
    meta = {"command": "train-agent", **cfg.resolved(), "method": kind, "n_step": n_step,
            "seed": seed, "eval_seeds": ",".join(map(str, eval_seeds))}
    if kind == "random":
        returns, curve = random_returns(env, eval_seeds), []
    else:
        delay = None if kind == "none" else cfg.delay_spec()
        belief = None if kind == "none" else load_belief(cfg, kind, cfg.belief_seed, env)
        result = train_dfbt_sac(env, delay, belief, cfg.steps, seed, sac, eval_seeds=eval_seeds)
        curve = result.curve
        returns = evaluate(result.agent, env, delay, belief, eval_seeds)
        save(run_dir / "agent.dblf", result.agent.arrays())
    write_curve(run_dir / "curve.csv", curve)
    with open(run_dir / "returns.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["episode_seed", "return"])
        w.writerows([[int(s), f"{r:.12g}"] for s, r in zip(eval_seeds, returns)])
    write_manifest(run_dir / "manifest.txt", meta)
    return dict(method=kind, n_step=n_step, seed=seed, final_return=float(np.mean(returns)))


AGGREGATE_COLUMNS = ["method", "env_id", "delay", "delta_max", "n_step", "n_seeds",
                     "mean_return", "std_return"]


def cmd_train_agent(cfg: RunConfig) -> Path:
    if len(cfg.belief) != 1:
        raise ConfigError("train-agent takes exactly one belief kind")
    kind = cfg.belief[0]
    env = cfg.make_env()
    if kind in ("dfbt", "recursive"):
        load_belief(cfg, kind, cfg.belief_seed, env)  # fail early on a missing checkpoint
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    n_list = (1,) if kind == "random" else cfg.n_step
    jobs = [(cfg, kind, n, s, out / f"N{n}" / f"seed{s}") for n in n_list for s in cfg.seeds]
    results = _map(_agent_job, jobs)
    with open(out / "aggregate.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(AGGREGATE_COLUMNS)
        for n in n_list:
            r = np.array([x["final_return"] for x in results if x["n_step"] == n])
            w.writerow([kind, env.spec.env_id, cfg.delay, cfg.delta_max, n, len(r),
                        f"{r.mean():.12g}", f"{r.std():.12g}"])
    _write_cmd_manifest(out, "train-agent", cfg)
    return out


def _run_returns(run_root) -> list[dict]:
    """Per (N, seed) final returns stored under a train-agent output directory."""
    root = Path(run_root)
    files = sorted(root.glob("N*/seed*/returns.csv"),
                   key=lambda p: (int(p.parent.parent.name[1:]), int(p.parent.name[4:])))
    if not files:
        raise ConfigError(f"no returns.csv under {root}")
    rows = []
    for f in files:
        m = read_manifest(f.parent)
        with open(f) as fh:
            vals = [float(r["return"]) for r in csv.DictReader(fh)]
        rows.append(dict(method=m["method"], env_id=m["env_id"], n_step=int(m["n_step"]),
                         seed=int(m["seed"]), ret=float(np.mean(vals))))
    return rows


def _anchor(path: str, name: str, env_id: str) -> float:
    if not path:
        raise ConfigError(f"{name} anchor run directory is required")
    rows = _run_returns(path)
    if any(r["env_id"] != env_id for r in rows):
        raise ConfigError(f"{name} anchor comes from a different environment")
    return float(np.mean([r["ret"] for r in rows]))


NORMALIZED_COLUMNS = ["run", "method", "n_step", "n_seeds", "mean_normalized", "std_normalized",
                      "mean_return"]


def cmd_eval_agent(cfg: RunConfig) -> Path:
    if not cfg.runs:
        raise ConfigError("eval-agent needs runs=<train-agent dirs>")
    env_id = cfg.make_env().spec.env_id
    r_random = _anchor(cfg.r_random, "r_random", env_id)
    r_sac = _anchor(cfg.r_sac, "r_sac", env_id)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    table, per_seed = [], []
    for run in cfg.runs:
        rows = _run_returns(run)
        if any(r["env_id"] != env_id for r in rows):
            raise ConfigError(f"{run} was trained on a different environment")
        for n in sorted({r["n_step"] for r in rows}):
            sel = [r for r in rows if r["n_step"] == n]
            norm = np.array([float(normalized_return(r["ret"], r_sac, r_random)) for r in sel])
            raw = np.array([r["ret"] for r in sel])
            table.append([Path(run).name, sel[0]["method"], n, len(sel), f"{norm.mean():.12g}",
                          f"{norm.std():.12g}", f"{raw.mean():.12g}"])
            per_seed += [[Path(run).name, r["method"], n, r["seed"], f"{r['ret']:.12g}",
                          f"{v:.12g}"] for r, v in zip(sel, norm)]
    with open(out / "normalized.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(NORMALIZED_COLUMNS)
        w.writerows(table)
    with open(out / "normalized_seeds.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", "method", "n_step", "seed", "return", "normalized"])
        w.writerows(per_seed)
    _write_cmd_manifest(out, "eval-agent", cfg, R_random=f"{r_random:.12g}",
                        R_sac=f"{r_sac:.12g}")
    return out


def cmd_theory(cfg: RunConfig) -> Path:
    try:
        system = preset_system(cfg.system)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_cmd_manifest(out, "theory", cfg)
    report = rollout_error_experiment(system, cfg.delta_list, n_rollouts=cfg.n_rollouts,
                                      seed=cfg.seeds[0], bound_scale=cfg.bound_scale,
                                      strict=False)
    for r in report.rows:
        r.margin = r.geometric_bound - r.measured_recursive
    write_bound_csv(out / "bound.csv", report)
    if not report.ok:
        raise BoundViolation(report)
    return out


def _curve_dirs(paths) -> list[Path]:
    found: list[Path] = []
    for p in map(Path, paths):
        if (p / "curve.csv").exists():
            found.append(p)
        else:
            sub = sorted(c.parent for c in p.rglob("curve.csv"))
            if not sub:
                raise ConfigError(f"no curve.csv in {p}")
            found.extend(sub)
    return found


def cmd_report(cfg: RunConfig) -> Path:
    dirs = _curve_dirs(cfg.runs)
    if not dirs:
        raise ConfigError("report needs runs=<run dirs>")
    manifests = [read_manifest(d) for d in dirs]
    keys = set(manifests[0])
    for d, m in zip(dirs, manifests):
        if set(m) != keys:
            raise ConfigError(f"manifest schema mismatch in {d}")
    envs = sorted({m["env_id"] for m in manifests})
    if len(envs) > 1:
        raise ConfigError(f"refusing to merge runs from different environments: {envs}")
    curves = []
    for d in dirs:
        with open(d / "curve.csv") as fh:
            reader = csv.reader(fh)
            if next(reader) != CURVE_COLUMNS:
                raise ConfigError(f"unexpected curve columns in {d}")
            curves.append(np.array([[float(v) for v in row] for row in reader]).reshape(-1, 7))
    x = curves[0][:, 0]
    if any(c.shape != curves[0].shape or not np.array_equal(c[:, 0], x) for c in curves):
        raise ConfigError("runs were evaluated at different env steps")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "merged.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run"] + CURVE_COLUMNS)
        for d, c in zip(dirs, curves):
            for row in c:
                w.writerow([str(d)] + [f"{v:.12g}" for v in row])
    stack = np.stack(curves)
    for j, metric in enumerate(CURVE_COLUMNS[1:], start=1):
        vals = stack[:, :, j]
        mean = vals.mean(axis=0)
        sd = vals.std(axis=0)
        with open(out / f"plot_{metric}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "mean", "lo", "hi"])
            for xi, m, s in zip(x, mean, sd):
                w.writerow([int(xi), f"{m:.12g}", f"{m - s:.12g}", f"{m + s:.12g}"])
    _write_cmd_manifest(out, "report", cfg, n_runs=len(dirs))
    return out


HANDLERS = {"collect": cmd_collect, "train-belief": cmd_train_belief,
            "eval-belief": cmd_eval_belief, "train-agent": cmd_train_agent,
            "eval-agent": cmd_eval_agent, "theory": cmd_theory, "report": cmd_report}


# ---------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="delaybelief", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("overrides", nargs="*", metavar="key=value")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", "--seeds", dest="seeds", help="seed or comma list of seeds")
    p.add_argument("--out", help="output directory")
    p.add_argument("--preset", choices=("desk", "paper"))
    p.add_argument("--log-level", default="WARNING")
    return p


def config_from_args(args) -> RunConfig:
    pairs: dict[str, str] = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"missing config file {path}")
        pairs.update(parse_config_text(path.read_text(), str(path)))
    for item in args.overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        pairs[key.strip()] = value.strip()
    for key in ("seeds", "out", "preset"):
        if getattr(args, key) is not None:
            pairs[key] = getattr(args, key)
    return RunConfig.from_pairs(pairs)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_intermixed_args(argv)
        logging.basicConfig(level=args.log_level.upper(), stream=sys.stderr,
                            format="%(asctime)s %(message)s")
        cfg = config_from_args(args)
        HANDLERS[args.command](cfg)
    except BoundViolation as exc:
        print(f"bound violation: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
