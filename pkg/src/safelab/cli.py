"""Command-line experiment harness.

Subcommands mirror the pipeline stages: ``gen-data``, ``pretrain``,
``vpa``, ``finetune``, ``eval``, ``plot``, and ``oracle``. Every stage
reads one config file, runs each configured seed (optionally in parallel
worker processes), writes its artifacts under the output directory, and
records a manifest before and after.

Exit codes: 0 ok, 2 config error, 3 missing upstream artifact,
4 numerical divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import (
    ConfigError,
    ExperimentConfig,
    config_hash,
    make_env,
    parse_config,
    serialize_config,
)
from .envs import GridCircleWorld, RandomPolicy, GridRingPolicy, CircleTrackPolicy
from .lagrange import LagrangeController, make_controller
from .manifest import finalize_manifest, load_manifest, write_manifest
from .nets import DivergenceError, critic_values, load_checkpoint, save_checkpoint
from .offline import CpqResult, generate_dataset, load_dataset, pretrain, save_dataset
from .online import evaluate_policy, finetune_loop, METRICS_COLUMNS
from .oracle import constrained_optimum, policy_eval_exact, save_tabular
from .svgplot import cost_vs_max_reward_svg, learning_curves_svg
from .vpa import (
    alignment_report,
    alignment_reports_to_csv,
    render_alignment_table,
    vpa_run,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_DIVERGED = 4

CKPT_NAMES = ("policy", "q", "qc", "q_target", "qc_target")


class MissingArtifactError(FileNotFoundError):
    """An upstream stage artifact is absent."""


# ---------------------------------------------------------------------------
# path layout and helpers
# ---------------------------------------------------------------------------


def _seed_dir(out: Path, seed: int) -> Path:
    return out / f"seed{seed}"


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(f"{what} missing: {path}")
    return path


def _behavior_mix(cfg: ExperimentConfig, env):
    w = cfg.dataset.scripted_weight
    if isinstance(env, GridCircleWorld):
        scripted = GridRingPolicy(env, noise=cfg.dataset.scripted_noise)
    else:
        scripted = CircleTrackPolicy(env, noise=cfg.dataset.scripted_noise)
    mix = []
    if w > 0:
        mix.append((scripted, w))
    if w < 1:
        mix.append((RandomPolicy(env.spec.action_space), 1.0 - w))
    return mix


def _save_bundle(directory: Path, bundle: CpqResult) -> dict:
    directory.mkdir(parents=True, exist_ok=True)
    artifacts = {}
    for name in CKPT_NAMES:
        path = directory / f"{name}.ckpt"
        save_checkpoint(path, getattr(bundle, name))
        artifacts[name] = path
    return artifacts


def _load_bundle(directory: Path, what: str) -> CpqResult:
    nets = {}
    for name in CKPT_NAMES:
        path = _require(directory / f"{name}.ckpt", f"{what} checkpoint {name}")
        nets[name], _ = load_checkpoint(path)
    return CpqResult(**nets)


def _make_controller(cfg: ExperimentConfig) -> LagrangeController:
    kind = cfg.online.controller
    c = cfg.controller
    if kind == "dual":
        return make_controller("dual", alpha=c.alpha)
    if kind == "pid":
        return make_controller("pid", kp=c.kp, ki=c.ki, kd=c.kd)
    return make_controller(
        "apid",
        kp=c.kp,
        ki=c.ki,
        kd=c.kd,
        adapt_kp=c.adapt_kp,
        adapt_ki=c.adapt_ki,
        adapt_kd=c.adapt_kd,
        window_size=c.window_size,
    )


def _run_seeds(worker, cfg_text: str, seeds, out: Path, workers: int) -> dict:
    artifacts = {}
    if workers > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(seeds))) as pool:
            results = list(pool.map(worker, [(cfg_text, s, str(out)) for s in seeds]))
    else:
        results = [worker((cfg_text, s, str(out))) for s in seeds]
    for seed, result in zip(seeds, results):
        for name, path in result.items():
            artifacts[f"seed{seed}/{name}"] = path
    return artifacts


def _stage(out: Path, name: str, cfg: ExperimentConfig, seeds, resume: bool, run):
    """Shared stage skeleton: manifest open, per-seed work, manifest close."""
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved.cfg").write_text(serialize_config(cfg), encoding="utf-8")
    manifest_path = out / "manifests" / f"{name}.json"
    if resume and manifest_path.exists():
        previous = load_manifest(manifest_path)
        if previous.status == "completed" and all(
            Path(p).exists() for p in previous.artifacts.values()
        ):
            print(f"[{name}] resume: already completed, skipping")
            return EXIT_OK
    manifest = write_manifest(manifest_path, name, config_hash(cfg), seeds)
    artifacts = run()
    finalize_manifest(manifest_path, manifest, artifacts)
    print(f"[{name}] wrote {len(artifacts)} artifacts under {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# stage workers (module level so process pools can pickle them)
# ---------------------------------------------------------------------------


def _gen_data_worker(args) -> dict:
    cfg_text, seed, out = args
    cfg = parse_config(cfg_text)
    env = make_env(cfg.env)
    dataset = generate_dataset(env, _behavior_mix(cfg, env), cfg.dataset.size, seed)
    path = _seed_dir(Path(out), seed) / "dataset.jsonl"
    path.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(dataset, path)
    return {"dataset": path}


def _pretrain_worker(args) -> dict:
    cfg_text, seed, out = args
    cfg = parse_config(cfg_text)
    env = make_env(cfg.env)
    sdir = _seed_dir(Path(out), seed)
    dataset = load_dataset(_require(sdir / "dataset.jsonl", "dataset"))
    result = pretrain(dataset, env.spec, cfg.cpq, seed)
    return _save_bundle(sdir / "cpq", result)


def _vpa_worker(args) -> dict:
    cfg_text, seed, out = args
    cfg = parse_config(cfg_text)
    env = make_env(cfg.env)
    sdir = _seed_dir(Path(out), seed)
    dataset = load_dataset(_require(sdir / "dataset.jsonl", "dataset"))
    bundle = _load_bundle(sdir / "cpq", "pretrain")
    vcfg = cfg.vpa.resolve(env.spec)
    vpa_run(
        dataset, bundle.policy, bundle.q, bundle.qc, bundle.q_target, bundle.qc_target,
        vcfg, env.spec.action_space, seed,
    )
    return _save_bundle(sdir / "vpa", bundle)


def _finetune_worker(args) -> dict:
    cfg_text, seed, out = args
    cfg = parse_config(cfg_text)
    env = make_env(cfg.env)
    sdir = _seed_dir(Path(out), seed)
    ocfg = cfg.online.resolve(env.spec)
    init = None
    if ocfg.init_mode == "warm_start":
        init = _load_bundle(sdir / cfg.run.warm_start_from, cfg.run.warm_start_from)
    controller = _make_controller(cfg)
    fdir = sdir / "finetune"
    fdir.mkdir(parents=True, exist_ok=True)
    metrics_path = fdir / "metrics.csv"
    result = finetune_loop(
        env, init, controller, ocfg, seed,
        metrics_path=metrics_path,
        checkpoint_dir=str(fdir) if ocfg.checkpoint_every > 0 else None,
    )
    artifacts = _save_bundle(fdir, result)
    artifacts["metrics"] = metrics_path
    return artifacts


def _eval_worker(args) -> dict:
    cfg_text, seed, out = args
    cfg = parse_config(cfg_text)
    env = make_env(cfg.env)
    sdir = _seed_dir(Path(out), seed)
    edir = sdir / "eval"
    edir.mkdir(parents=True, exist_ok=True)
    dataset = load_dataset(_require(sdir / "dataset.jsonl", "dataset"))
    before = _load_bundle(sdir / "cpq", "pretrain")
    after = _load_bundle(sdir / "vpa", "vpa")
    artifacts = {}

    reports = {}
    label = env.spec.name
    reports[label] = {}
    for mode in cfg.eval.modes:
        reports[label][mode] = alignment_report(
            after.policy, env, (before.q, before.qc), (after.q, after.qc),
            mode, cfg.eval.probe_count, seed, dataset, cfg.eval.rollouts,
        )
    csv_path = edir / "alignment.csv"
    alignment_reports_to_csv(reports, csv_path)
    txt_path = edir / "alignment.txt"
    txt_path.write_text(render_alignment_table(reports) + "\n", encoding="utf-8")
    artifacts["alignment_csv"] = csv_path
    artifacts["alignment_txt"] = txt_path

    # per-episode deterministic evaluation of the aligned policy
    rows = ["episode,return,cost"]
    returns = []
    costs = []
    for ep in range(cfg.online.eval_episodes):
        ret, cost = evaluate_policy(after.policy, env, 1, seed=seed * 7919 + ep)
        returns.append(ret)
        costs.append(cost)
        rows.append(f"{ep},{ret!r},{cost!r}")
    rows.append(f"mean,{float(np.mean(returns))!r},{float(np.mean(costs))!r}")
    eval_path = edir / "policy_eval.csv"
    eval_path.write_text("\n".join(rows) + "\n", encoding="utf-8")
    artifacts["policy_eval"] = eval_path

    if isinstance(env, GridCircleWorld):
        artifacts["value_mae"] = _grid_value_mae(env, dataset, before, after, edir)
    return artifacts


def _grid_value_mae(env: GridCircleWorld, dataset, before: CpqResult, after: CpqResult,
                    edir: Path) -> Path:
    """Exact-oracle MAE of critic predictions over the dataset pairs."""
    cmdp = env.to_tabular()
    eye = np.eye(env.n * env.n)
    policy_matrix = after.policy.probs(eye)
    exact = {
        "reward": policy_eval_exact(cmdp, policy_matrix, "reward").q,
        "cost": policy_eval_exact(cmdp, policy_matrix, "cost").q,
    }
    cells = dataset.s.argmax(axis=1)
    acts = dataset.a.astype(np.intp)
    space = env.spec.action_space
    lines = ["stage,channel,mae"]
    for stage, bundle in (("before_vpa", before), ("after_vpa", after)):
        for channel, net in (("reward", bundle.q), ("cost", bundle.qc)):
            preds = critic_values(net, dataset.s, dataset.a, space)
            mae = float(np.abs(preds - exact[channel][cells, acts]).mean())
            lines.append(f"{stage},{channel},{mae!r}")
    path = edir / "value_mae.csv"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# subcommand entry points
# ---------------------------------------------------------------------------


def cmd_gen_data(cfg, cfg_text, out, seeds, resume):
    return _stage(out, "gen-data", cfg, seeds, resume,
                  lambda: _run_seeds(_gen_data_worker, cfg_text, seeds, out, cfg.run.workers))


def cmd_pretrain(cfg, cfg_text, out, seeds, resume):
    return _stage(out, "pretrain", cfg, seeds, resume,
                  lambda: _run_seeds(_pretrain_worker, cfg_text, seeds, out, cfg.run.workers))


def cmd_vpa(cfg, cfg_text, out, seeds, resume):
    return _stage(out, "vpa", cfg, seeds, resume,
                  lambda: _run_seeds(_vpa_worker, cfg_text, seeds, out, cfg.run.workers))


def cmd_finetune(cfg, cfg_text, out, seeds, resume):
    return _stage(out, "finetune", cfg, seeds, resume,
                  lambda: _run_seeds(_finetune_worker, cfg_text, seeds, out, cfg.run.workers))


def cmd_eval(cfg, cfg_text, out, seeds, resume):
    return _stage(out, "eval", cfg, seeds, resume,
                  lambda: _run_seeds(_eval_worker, cfg_text, seeds, out, cfg.run.workers))


def read_metrics_csv(path) -> list:
    text = Path(path).read_text(encoding="utf-8").strip().split("\n")
    header = text[0].split(",")
    if header != METRICS_COLUMNS:
        raise ConfigError(f"{path}: unexpected metrics schema {header}")
    rows = []
    for line in text[1:]:
        vals = line.split(",")
        row = {k: (int(v) if k == "step" else float(v)) for k, v in zip(header, vals)}
        rows.append(row)
    return rows


def cmd_plot(cfg, metrics_files, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    per_seed = [read_metrics_csv(p) for p in metrics_files]
    env = make_env(cfg.env)
    curves = out / "learning_curves.svg"
    tradeoff = out / "cost_vs_max_reward.svg"
    learning_curves_svg(per_seed, env.spec.cost_threshold, curves)
    cost_vs_max_reward_svg(per_seed, tradeoff)
    print(f"[plot] wrote {curves} and {tradeoff}")
    return EXIT_OK


def cmd_oracle(cfg, out: Path):
    env = make_env(cfg.env)
    if not isinstance(env, GridCircleWorld):
        raise ConfigError("oracle dump requires the tabular grid environment")
    out.mkdir(parents=True, exist_ok=True)
    cmdp = env.to_tabular()
    save_tabular(cmdp, out / "tabular.json")
    sol = constrained_optimum(cmdp)
    payload = {
        "lambda_star": sol.lambda_star,
        "reward_value": sol.reward_value,
        "cost_value": sol.cost_value,
        "weights": sol.weights,
        "policies": [p.tolist() for p in sol.policies],
        "component_values": [list(v) for v in sol.component_values],
    }
    with open(out / "constrained_optimum.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
    print(f"[oracle] lambda*={sol.lambda_star:.6g} R*={sol.reward_value:.6g} "
          f"C*={sol.cost_value:.6g} -> {out}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="safelab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("gen-data", "pretrain", "vpa", "finetune", "eval", "oracle"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, default=None, help="override the seed list")
        p.add_argument("--out", default=None, help="override run.out_dir")
        p.add_argument("--resume", action="store_true")
    p = sub.add_parser("plot")
    p.add_argument("metrics", nargs="+", help="metrics CSV files (one per seed)")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    args = parser.parse_args(argv)

    try:
        cfg_text = Path(args.config).read_text(encoding="utf-8")
        cfg = parse_config(cfg_text)
        # re-serialize so workers parse the fully resolved form
        cfg_text = serialize_config(cfg)
        out = Path(args.out) if args.out else Path(cfg.run.out_dir)
        if args.command == "plot":
            return cmd_plot(cfg, args.metrics, out / "plots")
        if args.command == "oracle":
            return cmd_oracle(cfg, out / "oracle")
        seeds = [args.seed] if args.seed is not None else list(cfg.run.seeds)
        handler = {
            "gen-data": cmd_gen_data,
            "pretrain": cmd_pretrain,
            "vpa": cmd_vpa,
            "finetune": cmd_finetune,
            "eval": cmd_eval,
        }[args.command]
        return handler(cfg, cfg_text, out, seeds, args.resume)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except DivergenceError as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
