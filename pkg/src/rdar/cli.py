"""Command-line entry point.

Subcommands: gen (export scenario files), train, eval (one selector/k cell),
sweep (selectors x k table), viz (per-step relevance SVGs), policy-probe
(inspect the frozen driver on one scene). Every run writes a manifest with
the config hash, a content version of the installed package, and the seed,
so outputs are traceable to exact inputs.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .config import ConfigError, RunConfig, config_from_dict, config_hash
from .scenarios import (TEMPLATES, ConfigurationError, canonical_dumps,
                        generate, initial_scene, scenario_from_json,
                        scenario_to_json)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad flags; the contract wants usage + exit 1
    def error(self, message):
        raise _UsageError(f"{message}\n{self.format_usage()}")


def content_version() -> str:
    """Hash of the installed package sources, so manifests pin the code."""
    root = Path(__file__).parent
    h = hashlib.sha256()
    for p in sorted(root.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:12]


def _write_manifest(out: Path, cfg: RunConfig, command: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config_hash": config_hash(cfg),
        "content_version": content_version(),
        "seed": cfg.seed,
        "package_version": __version__,
    }
    (out / "manifest.json").write_text(canonical_dumps(manifest) + "\n")


def _load_config(args) -> RunConfig:
    data = {}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {args.config}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}")
    cfg = config_from_dict(data)
    # flag and environment overrides, most specific last
    updates = {}
    for name in ("seed", "workers", "selector", "template", "count"):
        v = getattr(args, name, None)
        if v is not None:
            updates[name] = v
    if "workers" not in updates and "workers" not in data:
        updates["workers"] = max(1, os.cpu_count() or 1)
    if getattr(args, "k", None) is not None:
        updates["k"] = math.inf if args.k == "inf" else int(args.k)
    if getattr(args, "out", None) is not None:
        updates["out"] = args.out
    if "RDAR_OUT" in os.environ:
        updates["out"] = os.environ["RDAR_OUT"]
    if getattr(args, "checkpoint", None) is not None:
        updates["checkpoint"] = args.checkpoint
    cfg = replace(cfg, **updates)
    if getattr(args, "arch", None) is not None:
        cfg = replace(cfg, trainer=replace(cfg.trainer, architecture=args.arch))
    # the global seed drives every stage
    return replace(cfg, trainer=replace(cfg.trainer, seed=cfg.seed))


def _corpus(cfg: RunConfig):
    from .evaluation import held_out_corpus
    templates = (cfg.template,) if cfg.template else TEMPLATES
    return held_out_corpus(cfg.per_template, templates, cfg.horizon)


def _load_params(cfg: RunConfig):
    from .model import load_checkpoint
    if not cfg.checkpoint:
        raise ConfigError("a checkpoint path is required for this selector")
    path = Path(cfg.checkpoint)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _cmd_gen(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    _write_manifest(out, cfg, "gen")
    templates = (cfg.template,) if cfg.template else TEMPLATES
    from .rng import rng_for
    entries = []
    for template in templates:
        tdir = out / "scenarios" / template
        tdir.mkdir(parents=True, exist_ok=True)
        for i in range(cfg.count):
            seed = cfg.seed + i
            n_agents = cfg.n_agents or int(
                rng_for("gen-agents", template, seed).integers(6, 15))
            spec = generate(seed, template, n_agents, cfg.horizon)
            path = tdir / f"{seed:08d}.json"
            path.write_text(canonical_dumps(scenario_to_json(spec)) + "\n")
            entries.append({"seed": seed, "template": template,
                            "n_agents": n_agents,
                            "file": str(path.relative_to(out))})
    (out / "corpus_manifest.json").write_text(canonical_dumps(entries) + "\n")
    print(f"wrote {len(entries)} scenario files under {out / 'scenarios'}")
    return 0


def _cmd_train(cfg: RunConfig) -> int:
    from .trainer import train
    out = Path(cfg.out)
    _write_manifest(out, cfg, "train")
    result = train(cfg.trainer, out)
    print(f"trained {result.updates} updates; final checkpoint "
          f"{result.checkpoint_paths[-1]}")
    return 0


def _cmd_eval(cfg: RunConfig) -> int:
    from .evaluation import metrics_to_csv, metrics_to_json_obj, run_closed_loop
    out = Path(cfg.out)
    _write_manifest(out, cfg, "eval")
    params = _load_params(cfg) if cfg.selector == "rdar" else None
    k = math.inf if cfg.selector == "none" else cfg.k
    report = run_closed_loop(cfg.selector, k, _corpus(cfg), params,
                             selector_seed=cfg.seed, workers=cfg.workers)
    (out / "metrics.csv").write_text(metrics_to_csv([report]))
    (out / "metrics.json").write_text(
        canonical_dumps(metrics_to_json_obj([report])) + "\n")
    print(metrics_to_csv([report]), end="")
    return 0


def _cmd_sweep(cfg: RunConfig) -> int:
    from .evaluation import k_sweep, metrics_to_csv, metrics_to_json_obj
    out = Path(cfg.out)
    _write_manifest(out, cfg, "sweep")
    params = _load_params(cfg) if "rdar" in cfg.selectors else None
    reports = k_sweep(list(cfg.selectors), list(cfg.k_values), _corpus(cfg),
                      params, selector_seed=cfg.seed, workers=cfg.workers)
    (out / "sweep.csv").write_text(metrics_to_csv(reports))
    (out / "sweep.json").write_text(
        canonical_dumps(metrics_to_json_obj(reports)) + "\n")
    print(metrics_to_csv(reports), end="")
    return 0


def _cmd_viz(cfg: RunConfig, scenario_file: str | None) -> int:
    from .evaluation import render_relevance_svg
    from .model import forward
    from .scene import to_ego_frame
    from .driving import act as driving_act
    from .scene import mask_agents
    from .selection import greedy_topk
    from .simulator import step

    out = Path(cfg.out)
    _write_manifest(out, cfg, "viz")
    params = _load_params(cfg)
    if scenario_file:
        spec = scenario_from_json(json.loads(Path(scenario_file).read_text()))
    else:
        template = cfg.template or TEMPLATES[0]
        spec = generate(cfg.seed, template, cfg.n_agents or 8, cfg.horizon)
    k = int(cfg.k) if cfg.k != math.inf else 8
    svg_dir = out / "frames"
    svg_dir.mkdir(parents=True, exist_ok=True)
    scene = initial_scene(spec)
    frame = 0
    while True:
        feats = to_ego_frame(scene)
        scores, _, _ = forward(params, feats)
        k_t = min(k, int(feats.exists_mask.sum()))
        (svg_dir / f"step_{frame:03d}.svg").write_text(
            render_relevance_svg(scene, scores, k_t))
        sample = greedy_topk(scores, k_t)
        outcome = step(scene, driving_act(mask_agents(feats, sample),
                                          spec.route.target_speed), spec)
        scene = outcome.next_scene
        frame += 1
        if outcome.done:
            break
    print(f"wrote {frame} SVG frames under {svg_dir}")
    return 0


def _cmd_policy_probe(cfg: RunConfig, step_index: int) -> int:
    from .driving import find_conflicts, policy_distribution, utilities
    from .scene import to_ego_frame
    from .scenarios import agents_at
    from .simulator import ACCEL_BINS
    import dataclasses

    template = cfg.template or TEMPLATES[0]
    spec = generate(cfg.seed, template, cfg.n_agents or 8, cfg.horizon)
    if not 0 <= step_index < spec.horizon:
        raise ConfigError(f"step must lie in [0, {spec.horizon})")
    scene = initial_scene(spec)
    from .simulator import step as sim_step
    from .driving import act as driving_act
    for _ in range(step_index):
        feats = to_ego_frame(scene)
        outcome = sim_step(scene, driving_act(feats, spec.route.target_speed), spec)
        if outcome.done:
            break
        scene = outcome.next_scene
    feats = to_ego_frame(scene)
    probe = {
        "template": template,
        "seed": cfg.seed,
        "step": scene.time_index,
        "ego": {"speed": feats.ego[0], "next_stop_line": feats.ego[1],
                "next_red_light": feats.ego[2], "lateral": feats.ego[3],
                "heading_error": feats.ego[4]},
        "conflicts": [{"slot": s, "imminence": i}
                      for s, i in find_conflicts(feats)],
        "bins": list(ACCEL_BINS),
        "utilities": list(utilities(feats, spec.route.target_speed)),
        "probs": list(policy_distribution(feats, spec.route.target_speed).probs),
    }
    print(canonical_dumps(probe))
    return 0


def _build_parser() -> _Parser:
    p = _Parser(prog="rdar", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=str, default=None)
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", type=str, default=None)
        sp.add_argument("--workers", type=int, default=None)

    sp = sub.add_parser("gen", help="write scenario JSON files")
    common(sp)
    sp.add_argument("--template", choices=TEMPLATES, default=None)
    sp.add_argument("--count", type=int, default=None)
    sp.add_argument("--n-agents", dest="n_agents", type=int, default=None)

    sp = sub.add_parser("train", help="train the relevance model")
    common(sp)
    sp.add_argument("--arch", choices=("agent_features", "agent_encoder",
                                       "full_scene"), default=None)

    sp = sub.add_parser("eval", help="evaluate one selector/k cell")
    common(sp)
    sp.add_argument("--selector", type=str, default=None)
    sp.add_argument("--k", type=str, default=None)
    sp.add_argument("--checkpoint", type=str, default=None)
    sp.add_argument("--template", choices=TEMPLATES, default=None)

    sp = sub.add_parser("sweep", help="selectors x k metric table")
    common(sp)
    sp.add_argument("--checkpoint", type=str, default=None)
    sp.add_argument("--template", choices=TEMPLATES, default=None)

    sp = sub.add_parser("viz", help="per-step relevance SVGs for one scenario")
    common(sp)
    sp.add_argument("--checkpoint", type=str, default=None)
    sp.add_argument("--template", choices=TEMPLATES, default=None)
    sp.add_argument("--scenario-file", type=str, default=None)
    sp.add_argument("--k", type=str, default=None)
    sp.add_argument("--n-agents", dest="n_agents", type=int, default=None)

    sp = sub.add_parser("policy-probe", help="inspect the frozen driver")
    common(sp)
    sp.add_argument("--template", choices=TEMPLATES, default=None)
    sp.add_argument("--step", type=int, default=0)
    sp.add_argument("--n-agents", dest="n_agents", type=int, default=None)
    return p


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _load_config(args)
        if getattr(args, "n_agents", None) is not None:
            cfg = replace(cfg, n_agents=args.n_agents)
        if args.command == "gen":
            return _cmd_gen(cfg)
        if args.command == "train":
            return _cmd_train(cfg)
        if args.command == "eval":
            return _cmd_eval(cfg)
        if args.command == "sweep":
            return _cmd_sweep(cfg)
        if args.command == "viz":
            return _cmd_viz(cfg, args.scenario_file)
        if args.command == "policy-probe":
            return _cmd_policy_probe(cfg, args.step)
        raise _UsageError(f"unknown command {args.command!r}")
    except _UsageError as e:
        print(str(e), file=sys.stderr)
        return 1
    except (ConfigError, ConfigurationError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:  # argparse --version/--help paths
        code = e.code if isinstance(e.code, int) else 0
        return 0 if code == 0 else 1
    except Exception as e:  # noqa: BLE001 - the boundary reports, not hides
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
