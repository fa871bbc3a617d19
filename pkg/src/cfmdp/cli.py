"""Command-line front end: environment emission, path sampling, posterior
construction, pruning, solving, sweeps and rollouts.

All outputs are deterministic given the flags (CSV bytes included); the
manifest records input hashes and cache statistics so a sweep can be audited
and reproduced. ``CFMDP_THREADS`` caps worker parallelism; the current
implementation evaluates sweep cells sequentially, which respects any bound
and keeps outputs independent of scheduling.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass, field

from . import __version__
from .errors import CfmdpError, ValidationFailed
from .gumbel import (
    CfKernelEstimate,
    CfMdp,
    build_cf_mdp,
    build_posterior,
    load_posterior,
    nominal_cf_mdp,
    posterior_cache_key,
    save_posterior,
)
from .influence import MODE_STRICT, PrunedCfMdp, prune_cf_mdp, pruned_size_report
from .mdp import (
    Mdp,
    ObservedPath,
    mdp_from_json,
    mdp_hash,
    mdp_to_json,
    path_from_json,
    path_hash,
    path_to_json,
    sample_path,
    validate_mdp,
    validate_path,
)
from .solver import CfPolicy, check_sweep_monotonicity, policy_to_json, rollout, solve_km, sweep
from . import environments as envs

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3

POLICY_PRESETS = {
    "gridworld": ("gridworld", None),
    "epidemic": ("epidemic", None),
    "sepsis-catastrophic": ("sepsis", "catastrophic"),
    "sepsis-suboptimal": ("sepsis", "suboptimal"),
}


@dataclass
class ExperimentConfig:
    """Validated sweep configuration."""

    env: str | None
    preset: str | None
    mdp_file: str | None
    path_file: str | None
    horizon: int
    seed: int
    samples: int
    sampler: str
    k_values: list[int]
    m_values: list[int]
    mode: str
    out_dir: str

    def validate(self, T: int) -> None:
        if self.samples < 1:
            raise ValidationFailed("--samples must be >= 1")
        if not self.k_values or min(self.k_values) < 1 or max(self.k_values) > T + 1:
            raise ValidationFailed(f"k range must lie within [1, {T + 1}]")
        if not self.m_values or min(self.m_values) < 0 or max(self.m_values) > T:
            raise ValidationFailed(f"m range must lie within [0, {T}]")


@dataclass
class RunManifest:
    """Reproducibility record written next to sweep outputs."""

    tool_version: str
    created_unix: float
    config: dict
    input_hashes: dict
    outputs: dict = field(default_factory=dict)
    statistics: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "tool_version": self.tool_version,
            "created_unix": self.created_unix,
            "config": self.config,
            "input_hashes": self.input_hashes,
            "outputs": self.outputs,
            "statistics": self.statistics,
        }


def _write_text(path: str, text: str) -> str:
    with open(path, "w", newline="") as fh:
        fh.write(text)
    return hashlib.sha256(text.encode()).hexdigest()


def _emit(text: str, out: str | None) -> None:
    if out:
        _write_text(out, text)
    else:
        sys.stdout.write(text)


def _load_mdp(file: str) -> Mdp:
    with open(file) as fh:
        return mdp_from_json(json.load(fh))


def _load_path(file: str) -> ObservedPath:
    with open(file) as fh:
        return path_from_json(json.load(fh))


def _env_overrides(args) -> dict:
    over = {}
    if args.config:
        with open(args.config) as fh:
            loaded = json.load(fh)
        if not isinstance(loaded, dict):
            raise ValidationFailed("--config must contain a JSON object")
        over.update(loaded)
    for key in ("population", "initial_infected", "slip", "shaping_scale", "flux", "horizon"):
        val = getattr(args, key, None)
        if val is not None:
            over[key] = val
    if getattr(args, "danger", None) is not None:
        r, c = args.danger.split(",")
        over["danger"] = (int(r), int(c))
    return over


def _build_env(args) -> Mdp:
    over = _env_overrides(args)
    over.pop("horizon", None)  # horizon is a sampling parameter, not an MDP field
    try:
        return envs.build_environment(args.env, **over)
    except TypeError as exc:
        raise ValidationFailed(f"bad option for environment {args.env!r}: {exc}") from exc


def cmd_env(args) -> int:
    mdp = _build_env(args)
    report = validate_mdp(mdp)
    if not report.ok:
        raise ValidationFailed("; ".join(report.violations))
    _emit(json.dumps(mdp_to_json(mdp), sort_keys=True, indent=2) + "\n", args.out)
    return EXIT_OK


def _resolve_observation(args) -> tuple[Mdp, ObservedPath, int | None]:
    """(mdp, path, observation seed) from an env/preset pair or explicit files."""
    if args.mdp and args.path:
        mdp, path = _load_mdp(args.mdp), _load_path(args.path)
        report = validate_path(mdp, path)
        if not report.ok:
            raise ValidationFailed("; ".join(report.violations))
        return mdp, path, None
    if not args.env:
        raise ValidationFailed("provide either --env or both --mdp and --path")
    preset = getattr(args, "preset", None)
    mdp = _build_env(args)
    policy = envs.observed_policy(args.env, preset)
    horizon = args.horizon or envs.default_horizon(args.env)
    seed = args.seed if args.seed is not None else envs.default_observation_seed(args.env, preset)
    return mdp, sample_path(mdp, policy, horizon, seed), seed


def cmd_sample(args) -> int:
    env_name, preset = POLICY_PRESETS.get(args.policy, (None, None))
    if env_name is None:
        raise ValidationFailed(
            f"unknown policy preset {args.policy!r}; choose from {sorted(POLICY_PRESETS)}"
        )
    mdp = _load_mdp(args.mdp) if args.mdp else envs.build_environment(env_name)
    policy = envs.observed_policy(env_name, preset)
    horizon = args.horizon or envs.default_horizon(env_name)
    seed = args.seed if args.seed is not None else envs.default_observation_seed(env_name, preset)
    path = sample_path(mdp, policy, horizon, seed)
    _emit(json.dumps(path_to_json(path), sort_keys=True, indent=2) + "\n", args.out)
    return EXIT_OK


def cmd_cf_build(args) -> int:
    mdp, path = _load_mdp(args.mdp), _load_path(args.path)
    posterior = build_posterior(mdp, path, args.samples, args.sampler, args.seed or 0)
    save_posterior(posterior, args.out)
    key = posterior_cache_key(mdp, path, args.samples, args.sampler, args.seed or 0)
    sys.stdout.write(f"posterior written to {args.out} (key {key[:16]})\n")
    return EXIT_OK


def _pruned_to_json(pruned: PrunedCfMdp) -> dict:
    kernels = []
    for (s, t), acts in sorted(pruned.actions.items(), key=lambda kv: (kv[0][1], kv[0][0])):
        for a in acts:
            est = pruned.kernel(t, s, a)
            kernels.append({"t": t, "s": s, "a": a, "n": est.n,
                            "probs": {k: v for k, v in sorted(est.probs.items())}})
    return {
        "k": pruned.k,
        "mode": pruned.mode,
        "mdp_hash": mdp_hash(pruned.cf.mdp),
        "path": path_to_json(pruned.cf.path),
        "nodes_all_layers": pruned.nodes_all_layers,
        "layers": [sorted(layer) for layer in pruned.layers],
        "actions": [
            {"s": s, "t": t, "actions": list(acts)}
            for (s, t), acts in sorted(pruned.actions.items(), key=lambda kv: (kv[0][1], kv[0][0]))
        ],
        "kernels": kernels,
    }


def _pruned_from_json(obj: dict, mdp: Mdp) -> PrunedCfMdp:
    if obj["mdp_hash"] != mdp_hash(mdp):
        raise ValidationFailed("pruned artifact was built from a different MDP")
    path = path_from_json(obj["path"])
    cf = CfMdp(mdp, path, None)
    for entry in obj["kernels"]:
        est = CfKernelEstimate(entry["t"], entry["s"], entry["a"],
                               {k: float(v) for k, v in entry["probs"].items()}, int(entry["n"]))
        cf._cache[(est.t, est.s, est.a)] = est
    return PrunedCfMdp(
        cf=cf,
        k=int(obj["k"]),
        mode=str(obj["mode"]),
        layers=tuple(frozenset(layer) for layer in obj["layers"]),
        actions={(e["s"], int(e["t"])): tuple(e["actions"]) for e in obj["actions"]},
        nodes_all_layers=int(obj["nodes_all_layers"]),
    )


def _posterior_cf(args, mdp: Mdp, path: ObservedPath) -> CfMdp:
    if args.posterior:
        posterior = load_posterior(args.posterior)
        if posterior.source_mdp_hash != mdp_hash(mdp):
            raise ValidationFailed("posterior artifact was built from a different MDP")
        if posterior.path.steps != path.steps:
            raise ValidationFailed("posterior artifact was built from a different path")
        return build_cf_mdp(posterior, mdp, path)
    if args.nominal:
        return nominal_cf_mdp(mdp, path)
    posterior = build_posterior(mdp, path, args.samples, args.sampler, args.seed or 0)
    return build_cf_mdp(posterior, mdp, path)


def cmd_prune(args) -> int:
    mdp, path = _load_mdp(args.mdp), _load_path(args.path)
    cf = _posterior_cf(args, mdp, path)
    pruned = prune_cf_mdp(cf, mdp, path, args.k, mode=args.mode)
    _emit(json.dumps(_pruned_to_json(pruned), sort_keys=True, indent=2) + "\n", args.out)
    report = pruned_size_report(pruned)
    sys.stderr.write(
        f"k={report.k} nodes_all_layers={report.nodes_all_layers} "
        f"nodes_reachable={report.nodes_reachable} distinct_states={report.distinct_states}\n"
    )
    return EXIT_OK


def cmd_solve(args) -> int:
    mdp = _load_mdp(args.mdp)
    with open(args.pruned) as fh:
        pruned = _pruned_from_json(json.load(fh), mdp)
    policy = solve_km(pruned, pruned.cf.path, args.m)
    meta = {"samples": args.samples, "seed": args.seed, "mdp_hash": mdp_hash(mdp)}
    _emit(json.dumps(policy_to_json(policy, meta), sort_keys=True, indent=2) + "\n", args.out)
    sys.stderr.write(f"V(s0) = {policy.v_s0!r}\n")
    return EXIT_OK


def _policy_from_json(obj: dict, pruned: PrunedCfMdp) -> CfPolicy:
    path = pruned.cf.path
    return CfPolicy(
        k=int(obj["k"]), m=int(obj["m"]), mode=str(obj["mode"]),
        initial_state=pruned.initial_state,
        observed_actions=tuple(path.action(t) for t in range(path.T)),
        action_table={(e["s"], int(e["t"]), int(e["j"])): e["a"] for e in obj["actions"]},
        value_table=[], v_s0=float(obj["v_s0"]),
    )


def cmd_rollout(args) -> int:
    mdp = _load_mdp(args.mdp)
    with open(args.pruned) as fh:
        pruned = _pruned_from_json(json.load(fh), mdp)
    with open(args.policy) as fh:
        policy = _policy_from_json(json.load(fh), pruned)
    features = envs.environment_features(args.env) if args.env else {}
    if args.feature not in features:
        raise ValidationFailed(
            f"unknown feature {args.feature!r}; available: {sorted(features)} (set --env)"
        )
    summary = rollout(pruned, policy, args.n, features[args.feature], args.seed or 0)
    lines = ["t,mean,std"]
    for t, mean, std in zip(summary.times, summary.means, summary.stds):
        lines.append(f"{int(t)},{float(mean)!r},{float(std)!r}")
    _emit("\n".join(lines) + "\n", args.out)
    return EXIT_OK


def cmd_sweep(args) -> int:
    mdp, path, obs_seed = _resolve_observation(args)
    T = path.T
    posterior_seed = args.seed if args.seed is not None else 0
    cfg = ExperimentConfig(
        env=args.env, preset=getattr(args, "preset", None),
        mdp_file=args.mdp, path_file=args.path,
        horizon=T, seed=posterior_seed,
        samples=args.samples, sampler=args.sampler,
        k_values=list(range(args.k_min, (args.k_max or T + 1) + 1)),
        m_values=list(range(args.m_min, (args.m_max or T) + 1)),
        mode=args.mode, out_dir=args.out,
    )
    cfg.validate(T)
    os.makedirs(args.out, exist_ok=True)

    posterior = build_posterior(mdp, path, cfg.samples, cfg.sampler, posterior_seed)
    cf = build_cf_mdp(posterior, mdp, path)
    result = sweep(cf, path, cfg.k_values, cfg.m_values, mode=cfg.mode)

    violations = check_sweep_monotonicity(result)
    if violations:
        raise CfmdpError("sweep failed monotonicity post-check: " + "; ".join(violations))

    sweep_lines = ["k,m,V_s0"] + [f"{k},{m},{v!r}" for k, m, v in result.rows]
    size_lines = ["k,nodes_all_layers,nodes_reachable,distinct_states"] + [
        f"{r.k},{r.nodes_all_layers},{r.nodes_reachable},{r.distinct_states}"
        for r in result.sizes
    ]
    sweep_csv = os.path.join(args.out, "sweep.csv")
    sizes_csv = os.path.join(args.out, "sizes.csv")
    hashes = {
        "sweep.csv": _write_text(sweep_csv, "\n".join(sweep_lines) + "\n"),
        "sizes.csv": _write_text(sizes_csv, "\n".join(size_lines) + "\n"),
    }

    manifest = RunManifest(
        tool_version=__version__,
        created_unix=time.time(),
        config={
            "env": cfg.env, "preset": cfg.preset, "mdp_file": cfg.mdp_file,
            "path_file": cfg.path_file, "horizon": cfg.horizon,
            "observation_seed": obs_seed, "posterior_seed": posterior_seed,
            "samples": cfg.samples, "sampler": cfg.sampler,
            "k_values": cfg.k_values, "m_values": cfg.m_values, "mode": cfg.mode,
            "threads": os.environ.get("CFMDP_THREADS", "1"),
        },
        input_hashes={"mdp": mdp_hash(mdp), "path": path_hash(path),
                      "posterior_key": posterior_cache_key(mdp, path, cfg.samples,
                                                           cfg.sampler, posterior_seed)},
        outputs=hashes,
        statistics={"posterior_builds": 1, "cf_rows_built": result.cf_rows_built},
    )
    with open(os.path.join(args.out, "manifest.json"), "w") as fh:
        json.dump(manifest.to_json(), fh, sort_keys=True, indent=2)
    sys.stderr.write(f"wrote {sweep_csv}, {sizes_csv} and manifest.json\n")
    return EXIT_OK


def _add_env_flags(p: argparse.ArgumentParser, with_preset: bool = False) -> None:
    p.add_argument("--config", help="JSON file with environment config overrides")
    p.add_argument("--population", type=int)
    p.add_argument("--initial-infected", dest="initial_infected", type=int)
    p.add_argument("--slip", type=float)
    p.add_argument("--shaping-scale", dest="shaping_scale", type=float)
    p.add_argument("--danger", help="gridworld danger cell as ROW,COL")
    p.add_argument("--flux", type=float)
    if with_preset:
        p.add_argument("--preset", choices=["catastrophic", "suboptimal"])


def _add_shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--samples", type=int, default=1000, help="posterior sample count N")
    p.add_argument("--sampler", choices=["topdown", "rejection"], default="topdown")
    p.add_argument("--horizon", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cfmdp",
        description="Influence-constrained counterfactual policies for finite-horizon MDPs",
    )
    parser.add_argument("--version", action="version", version=f"cfmdp {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("env", help="emit a built-in environment as MDP JSON")
    p.add_argument("env", choices=list(envs.ENVIRONMENTS))
    _add_env_flags(p)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_env)

    p = sub.add_parser("sample", help="sample an observed path under a policy preset")
    p.add_argument("--mdp", help="MDP JSON file (defaults to the preset's environment)")
    p.add_argument("--policy", required=True, choices=sorted(POLICY_PRESETS))
    _add_shared(p)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("cf-build", help="build and store a Gumbel posterior artifact")
    p.add_argument("--mdp", required=True)
    p.add_argument("--path", required=True)
    _add_shared(p)
    p.add_argument("--out", required=True, help="output .npz file")
    p.set_defaults(fn=cmd_cf_build)

    p = sub.add_parser("prune", help="prune the counterfactual MDP at a given k")
    p.add_argument("--mdp", required=True)
    p.add_argument("--path", required=True)
    p.add_argument("--posterior", help=".npz artifact from cf-build")
    p.add_argument("--nominal", action="store_true",
                   help="use exact nominal rows instead of a posterior")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--mode", choices=["strict", "pooled"], default=MODE_STRICT)
    _add_shared(p)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_prune)

    p = sub.add_parser("solve", help="solve a pruned artifact for an m budget")
    p.add_argument("--mdp", required=True)
    p.add_argument("--pruned", required=True)
    p.add_argument("--m", type=int, required=True)
    _add_shared(p)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_solve)

    p = sub.add_parser("sweep", help="full (k, m) sweep with size reports and manifest")
    p.add_argument("--env", choices=list(envs.ENVIRONMENTS))
    p.add_argument("--mdp")
    p.add_argument("--path")
    _add_env_flags(p, with_preset=True)
    _add_shared(p)
    p.add_argument("--k-min", type=int, default=1)
    p.add_argument("--k-max", type=int, default=None)
    p.add_argument("--m-min", type=int, default=1)
    p.add_argument("--m-max", type=int, default=None)
    p.add_argument("--mode", choices=["strict", "pooled"], default=MODE_STRICT)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("rollout", help="roll out a solved policy on a pruned artifact")
    p.add_argument("--mdp", required=True)
    p.add_argument("--pruned", required=True)
    p.add_argument("--policy", required=True)
    p.add_argument("--env", choices=list(envs.ENVIRONMENTS),
                   help="environment providing the feature extractor")
    p.add_argument("--feature", required=True)
    p.add_argument("-n", type=int, default=1000)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_rollout)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ValidationFailed as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_VALIDATION
    except CfmdpError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
