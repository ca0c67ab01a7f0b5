"""Command-line orchestrator: dataset generation, staged training,
planning, and the evaluation battery, all driven by one YAML config.

Every subcommand resolves the config, writes it (plus input checksums)
under ``runs/<config-hash>/`` and is deterministic given its inputs, so
re-running a command overwrites artifacts with identical bytes. Exit
codes: 1 = invalid config/arguments, 2 = missing prerequisite artifact.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import evalsuite as ev
from . import training as tr
from . import worldmodel as wm
from .checkpoint import (checkpoint_checksum, checkpoint_exists,
                         load_checkpoint, save_checkpoint)
from .config import ConfigError, load_config, save_config
from .encoder import DecoderParams, encode, make_encoder
from .envs import Goal, load_episode, make_env, save_episode
from .planner import PlanConfig, control_loop

STAGES = ("localizer", "predictor", "lrm", "dense", "decoder")


def _fail(code, message):
    print(f"error: {message}", file=sys.stderr)
    raise SystemExit(code)


def _resolve(args):
    try:
        rc = load_config(args.config) if args.config else _default_config()
        if getattr(args, "env", None):
            rc.env = args.env
        if getattr(args, "seed", None) is not None:
            rc.training.seed = args.seed
            rc.planner.seed = args.seed
            rc.eval.seed = args.seed
        if getattr(args, "out", None):
            rc.out_root = args.out
        rc.validate()
    except (ConfigError, OSError) as e:
        _fail(1, str(e))
    run_dir = rc.run_dir()
    for sub in ("config", "checkpoints", "reports", "frames"):
        (run_dir / sub).mkdir(parents=True, exist_ok=True)
    save_config(rc, run_dir / "config" / "config.yaml")
    return rc, run_dir


def _default_config():
    from .config import RunConfig
    return RunConfig()


def _encoder(rc):
    return make_encoder(seed=rc.encoder_seed, image_hw=64, patch=8,
                        dim=rc.arch.dim, heads=rc.arch.heads)


def _data_dir(rc, run_dir):
    return run_dir / "data" / rc.env


def _records(rc, run_dir):
    data_dir = _data_dir(rc, run_dir)
    manifest = data_dir / "dataset.json"
    if not manifest.exists():
        _fail(2, f"no dataset for env '{rc.env}' under {data_dir}; run gen-data first")
    meta = json.loads(manifest.read_text())
    return [load_episode(data_dir / f"episode_{i:04d}") for i in range(meta["episodes"])]


def _windows(rc, run_dir):
    records = _records(rc, run_dir)
    return tr.build_windows(records, _encoder(rc), history=rc.arch.history,
                            heldout_frac=rc.training.heldout_frac)


# -- checkpoints ----------------------------------------------------------


def _world_ckpt_dir(run_dir):
    return run_dir / "checkpoints" / "world"


def _load_world(rc, run_dir, needed_stages=()):
    ckpt = _world_ckpt_dir(run_dir)
    params = wm.init_world_model(rc.model_config(), rc.model_seed)
    done = []
    if checkpoint_exists(ckpt):
        arrays, meta = load_checkpoint(ckpt)
        wm.load_group(params.named(), arrays)
        done = list(meta.get("stages", []))
    for stage in needed_stages:
        if stage not in done:
            _fail(2, f"stage '{stage}' has not been trained yet (found: {done or 'none'})")
    return params, done


def _save_world(rc, run_dir, params, done):
    meta = {
        "stages": sorted(done, key=tr.STAGE_ORDER.index),
        "config_hash": rc.run_hash(),
        "encoder_checksum": _encoder(rc).checksum(),
    }
    save_checkpoint(_world_ckpt_dir(run_dir), {k: v.data for k, v in params.named().items()}, meta)


def _load_dense(rc, run_dir):
    ckpt = run_dir / "checkpoints" / "dense"
    if not checkpoint_exists(ckpt):
        _fail(2, "dense baseline checkpoint missing; run train --stage dense")
    dense = wm.init_dense_model(rc.model_config(), rc.model_seed + 1)
    arrays, _ = load_checkpoint(ckpt)
    wm.load_group(dense.named(), arrays)
    return dense


def _load_decoder(run_dir):
    ckpt = run_dir / "checkpoints" / "decoder"
    if not checkpoint_exists(ckpt):
        _fail(2, "decoder checkpoint missing; run train --stage decoder")
    arrays, meta = load_checkpoint(ckpt)
    return DecoderParams(w=arrays["w"], b=arrays["b"], patch=meta["patch"],
                         image_hw=meta["image_hw"], frozen=True)


def _model_for(rc, run_dir, variant):
    if variant == "dense":
        return (None, "dense", _load_dense(rc, run_dir))
    needed = tr.STAGE_ORDER if variant == "full" else ("localizer", "predictor")
    params, _ = _load_world(rc, run_dir, needed_stages=needed)
    return (params, variant, None)


# -- subcommands ----------------------------------------------------------


def cmd_gen_data(args):
    rc, run_dir = _resolve(args)
    data_dir = _data_dir(rc, run_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    tr.collect_dataset(rc.env, rc.training.episodes, rc.training.steps,
                       rc.training.data_seed, out_dir=data_dir)
    meta = {"env": rc.env, "episodes": rc.training.episodes,
            "steps": rc.training.steps, "seed": rc.training.data_seed}
    (data_dir / "dataset.json").write_text(json.dumps(meta, sort_keys=True, indent=1))
    print(f"wrote {rc.training.episodes} episodes to {data_dir}")


def _reset_from_stage(rc, params, stage):
    """Re-initialize the groups of `stage` and every later stage so
    retraining a stage is idempotent rather than cumulative."""
    fresh = wm.init_world_model(rc.model_config(), rc.model_seed)
    groups = {
        "localizer": lambda p: {**p.fusion_group(), **p.localizer_group()},
        "predictor": lambda p: p.predictor_group(),
        "lrm": lambda p: p.lrm_group(),
    }
    for later in tr.STAGE_ORDER[tr.STAGE_ORDER.index(stage):]:
        wm.load_group(groups[later](params),
                      {k: v.data for k, v in groups[later](fresh).items()})


def _train_config(rc, stage):
    return tr.TrainConfig(stage=stage, epochs=rc.training.epochs,
                          batch_size=rc.training.batch, lr=rc.training.lr,
                          weight_decay=rc.training.weight_decay, seed=rc.training.seed)


def cmd_train(args):
    rc, run_dir = _resolve(args)
    stages = list(tr.STAGE_ORDER) + ["dense", "decoder"] if args.stage == "all" else [args.stage]
    log = []
    windows = None
    for stage in stages:
        if stage == "decoder":
            records = _records(rc, run_dir)
            dec, mae = tr.train_decoder(records, _encoder(rc), log=log)
            save_checkpoint(run_dir / "checkpoints" / "decoder",
                            {"w": dec.w, "b": dec.b},
                            {"patch": dec.patch, "image_hw": dec.image_hw,
                             "train_mae": mae, "config_hash": rc.run_hash()})
            continue
        if windows is None:
            windows = _windows(rc, run_dir)
        if stage == "dense":
            dense = wm.init_dense_model(rc.model_config(), rc.model_seed + 1)
            tr.train_dense_baseline(windows, dense, _train_config(rc, "dense"), log=log)
            save_checkpoint(run_dir / "checkpoints" / "dense",
                            {k: v.data for k, v in dense.named().items()},
                            {"config_hash": rc.run_hash()})
            continue
        needed = tr.STAGE_ORDER[: tr.STAGE_ORDER.index(stage)]
        params, done = _load_world(rc, run_dir, needed_stages=needed)
        _reset_from_stage(rc, params, stage)
        done = set(done) & set(needed)
        fn = {"localizer": tr.train_localizer, "predictor": tr.train_predictor,
              "lrm": tr.train_lrm}[stage]
        if stage == "localizer":
            fn(windows, params, _train_config(rc, stage), log=log)
        else:
            fn(windows, params, _train_config(rc, stage), done_stages=done, log=log)
        _save_world(rc, run_dir, params, done | {stage})
    if log:
        tr.write_training_log(log, run_dir / "reports" / f"train_{args.stage}.csv")
    print(f"trained stages: {', '.join(stages)}")


def _closed_loop(rc, run_dir, variant, mask_mode, episodes, save_frames=False):
    model = _model_for(rc, run_dir, variant)
    enc = _encoder(rc)
    env = make_env(rc.env)
    plan_cfg = rc.plan_config(mask_mode=mask_mode)
    results = []
    for ep in range(episodes):
        episode_seed = rc.planner.seed + 1000 + ep
        state = env.reset(episode_seed)
        goal = env.sample_goal(state, np.random.default_rng(episode_seed))
        cfg = PlanConfig(**{**plan_cfg.__dict__,
                            "seed": plan_cfg.seed + ep * rc.planner.max_steps})
        res = control_loop(env, goal, enc, model, cfg,
                           max_steps=rc.planner.max_steps, seed=episode_seed)
        results.append(res)
        if save_frames:
            save_episode(res.record, run_dir / "frames" / f"{variant}_{mask_mode}_ep{ep:03d}")
    return results


def cmd_plan(args):
    rc, run_dir = _resolve(args)
    results = _closed_loop(rc, run_dir, args.variant, rc.planner.mask_mode,
                           episodes=1, save_frames=True)
    res = results[0]
    with open(run_dir / "reports" / "plan_trace.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "iteration", "elite_mean_cost"])
        for step_i, trace in enumerate(res.plan_traces):
            for it, cost in enumerate(trace):
                writer.writerow([step_i, it, f"{cost:.8e}"])
    print(f"planned episode: success={res.success} steps={res.steps}")


def cmd_eval_openloop(args):
    rc, run_dir = _resolve(args)
    variants = args.variant or ["full"]
    windows = _windows(rc, run_dir)
    decoder = _load_decoder(run_dir)
    dec_checksum = checkpoint_checksum({"w": decoder.w, "b": decoder.b})
    rows = []
    for variant in variants:
        model = "oracle" if variant == "oracle" else _model_for(rc, run_dir, variant)
        err = ev.pixel_error(windows, model, decoder, steps=rc.eval.rollout_steps,
                             threshold=rc.eval.pixel_threshold,
                             episodes=rc.eval.episodes, seed=rc.eval.seed)
        rows.append({"env": rc.env, "variant": variant, "steps": rc.eval.rollout_steps,
                     "pixel_error": f"{err:.4f}", "decoder_checksum": dec_checksum})
        print(f"{rc.env} {variant}: mean pixel error {err:.2f}")
    with open(run_dir / "reports" / "openloop.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def cmd_eval_closedloop(args):
    rc, run_dir = _resolve(args)
    variant = (args.variant or ["full"])[0]
    mask_mode = args.mask_mode or rc.planner.mask_mode
    results = _closed_loop(rc, run_dir, variant, mask_mode,
                           episodes=rc.eval.closed_loop_episodes)
    successes = [r.success for r in results]
    report = {
        "env": rc.env, "variant": variant, "mask_mode": mask_mode,
        "episodes": len(results),
        "success_rate": float(np.mean(successes)),
        "mean_steps": float(np.mean([r.steps for r in results])),
        "successes": [bool(s) for s in successes],
    }
    path = run_dir / "reports" / f"closedloop_{variant}_{mask_mode}.json"
    path.write_text(json.dumps(report, sort_keys=True, indent=1))
    print(f"{rc.env} {variant}/{mask_mode}: success {report['success_rate']:.2f} "
          f"over {report['episodes']} episodes")


def cmd_bench(args):
    rc, run_dir = _resolve(args)
    cfg = rc.model_config()
    report = {"flops": {}, "throughput": {}}
    for variant in wm.VARIANTS:
        report["flops"][variant] = dataclasses.asdict(
            ev.flops_count(cfg, variant, k_batch=cfg.k_min))
    report["flops_ratio_dense_over_full"] = (
        report["flops"]["dense"]["total"] / report["flops"]["full"]["total"])
    params = wm.init_world_model(cfg, rc.model_seed)
    dense = wm.init_dense_model(cfg, rc.model_seed + 1)
    for variant in wm.VARIANTS:
        model = (None, "dense", dense) if variant == "dense" else (params, variant, None)
        report["throughput"][variant] = ev.throughput_bench(
            model, cfg.dim, cfg.n_tokens, batch=rc.eval.bench_batch,
            repetitions=rc.eval.bench_reps, seed=rc.eval.seed)
    report["throughput_ratio_full_over_dense"] = (
        report["throughput"]["full"]["steps_per_second"]
        / report["throughput"]["dense"]["steps_per_second"])
    (run_dir / "reports" / "bench.json").write_text(
        json.dumps(report, sort_keys=True, indent=1))
    print(f"flops ratio dense/full: {report['flops_ratio_dense_over_full']:.2f}x; "
          f"throughput ratio full/dense: {report['throughput_ratio_full_over_dense']:.2f}x")


def cmd_landscape(args):
    rc, run_dir = _resolve(args)
    variants = args.variant or ["full", "naive_sparse"]
    windows = _windows(rc, run_dir)
    models = {v: _model_for(rc, run_dir, v) for v in variants}
    h = windows.history
    rng = np.random.default_rng(rc.eval.seed)
    pool = windows.heldout_idx if len(windows.heldout_idx) else np.arange(windows.n_windows)
    picks = rng.choice(pool, size=rc.eval.scan_pairs, replace=len(pool) < rc.eval.scan_pairs)
    axes = np.eye(2)
    rows = []
    for cfg_i, widx in enumerate(picks):
        hist, z_t, _, _, _ = windows.batch(np.array([widx]))
        z_goal = windows.latents[windows.frame_idx[widx, h]]
        base = rng.uniform(-0.5, 0.5, size=(rc.planner.horizon, 2))
        mask = np.ones(z_t.shape[1], dtype=np.uint8)
        for variant in variants:
            scan = ev.landscape_scan(models[variant], z_t[0], hist[0], base, axes,
                                     rc.eval.scan_range, rc.eval.scan_grid,
                                     mask, z_goal, seed=rc.eval.seed)
            rows.append({"config": cfg_i, "variant": variant,
                         "roughness": f"{scan.roughness:.8e}"})
            np.savetxt(run_dir / "reports" / f"landscape_{cfg_i:02d}_{variant}.txt",
                       scan.costs)
    with open(run_dir / "reports" / "landscape.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["config", "variant", "roughness"])
        writer.writeheader()
        writer.writerows(rows)
    print(f"scanned {len(picks)} configurations x {len(variants)} variants")


def cmd_pca(args):
    rc, run_dir = _resolve(args)
    windows = _windows(rc, run_dir)
    report = {}
    gt = ev.pca_background_updates(windows, mode="ground_truth",
                                   max_samples=rc.eval.pca_max_samples, seed=rc.eval.seed)
    report["ground_truth"] = {"rank90": gt.rank90, "rank99": gt.rank99,
                              "curve": gt.cumulative.tolist()}
    if checkpoint_exists(_world_ckpt_dir(run_dir)):
        params, done = _load_world(rc, run_dir)
        if set(tr.STAGE_ORDER) <= set(done):
            lrm = ev.pca_background_updates(windows, mode="lrm", params=params,
                                            max_samples=rc.eval.pca_max_samples,
                                            seed=rc.eval.seed)
            report["lrm"] = {"rank90": lrm.rank90, "rank99": lrm.rank99,
                             "curve": lrm.cumulative.tolist()}
    (run_dir / "reports" / "pca.json").write_text(json.dumps(report, sort_keys=True, indent=1))
    print(f"ground-truth background updates: rank90={report['ground_truth']['rank90']}")


def build_parser():
    parser = argparse.ArgumentParser(prog="sparsewm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML run config path")
        p.add_argument("--env", choices=("pointmaze", "wall", "pushbox"))
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int, default=1,
                       help="worker cap (this build is single-threaded)")
        p.add_argument("--out", help="override output root directory")
        return p

    common(sub.add_parser("gen-data")).set_defaults(fn=cmd_gen_data)
    p = common(sub.add_parser("train"))
    p.add_argument("--stage", default="all", choices=STAGES + ("all",))
    p.set_defaults(fn=cmd_train)
    p = common(sub.add_parser("plan"))
    p.add_argument("--variant", default="full", choices=wm.VARIANTS)
    p.set_defaults(fn=cmd_plan)
    for name, fn in (("eval-openloop", cmd_eval_openloop),
                     ("eval-closedloop", cmd_eval_closedloop),
                     ("landscape", cmd_landscape)):
        p = common(sub.add_parser(name))
        p.add_argument("--variant", action="append",
                       choices=wm.VARIANTS + ("oracle",))
        if name == "eval-closedloop":
            p.add_argument("--mask-mode", choices=("sparse", "dense"))
        p.set_defaults(fn=fn)
    common(sub.add_parser("bench")).set_defaults(fn=cmd_bench)
    common(sub.add_parser("pca")).set_defaults(fn=cmd_pca)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.fn(args)
    except (ValueError, RuntimeError) as e:
        _fail(1, str(e))
    return 0


if __name__ == "__main__":
    sys.exit(main())
