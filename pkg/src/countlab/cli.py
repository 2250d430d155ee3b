"""Command line entry point: gen, train, eval, patch, scope, experiment, analyze.

Configs are YAML files; command line flags override file values. Every run
directory gets a ``run.json`` with (tool version, config hash, seed).
Exit codes: 0 success, 2 config error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch
import yaml

from . import __version__
from .activations import InterventionSpec, capture, run_patched, write_patch_runs
from .analysis import collect_embeddings, cross_type_cosine, monotypic_samples, pca_project
from .countscope import ProbeConfig, decode, write_heatmap_csv
from .dataset import (
    ConfigError,
    TextTaskConfig,
    VisualConfig,
    derive_seed,
    generate_text,
    generate_visual,
    read_jsonl,
    write_jsonl,
)
from .experiments import REGISTRY, ExperimentConfig, run_all, run_experiment
from .metrics import MetricReport, ci_score, kl_divergence, write_metric_csv
from .model import InputError, ModelConfig, NumericError, load_checkpoint
from .training import (
    EvalConfig,
    TaskFamily,
    TrainConfig,
    TrainingDiverged,
    default_text_curriculum,
    default_visual_curriculum,
    evaluate_behavioral,
    quick_eval_config,
    train,
)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
OUT_ENV = "COUNTLAB_OUT"
CHANCE_FLAG = 0.5

log = logging.getLogger("countlab")


# -- config plumbing -------------------------------------------------------------------


def load_yaml(path) -> dict:
    """Parse a YAML mapping; syntax errors become ConfigError with the line number."""
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except FileNotFoundError:
        raise ConfigError(f"{path}: no such config file") from None
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        where = f"line {mark.line + 1}, column {mark.column + 1}" if mark else "unknown position"
        raise ConfigError(f"{path}: parse error at {where}: {exc.problem or exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: parse error: {exc}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def build(cls, data: dict | None, where: str):
    """Dataclass from a mapping, rejecting unknown keys."""
    data = dict(data or {})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}; allowed: {sorted(names)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def out_root() -> Path:
    return Path(os.environ.get(OUT_ENV, "runs"))


def resolve_out(args, default_name: str) -> Path:
    out = Path(args.out) if getattr(args, "out", None) else out_root() / default_name
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_run_info(out: Path, command: str, cfg: dict, seed: int, **extra) -> None:
    info = {
        "tool_version": __version__,
        "command": command,
        "config_hash": config_hash(cfg),
        "seed": seed,
        "config": cfg,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
        **extra,
    }
    with open(out / "run.json", "w") as fh:
        json.dump(info, fh, indent=1, sort_keys=True, default=str)


def _curriculum(spec) -> list:
    if spec in (None, "text"):
        return default_text_curriculum()
    if spec == "visual":
        return default_visual_curriculum()
    if spec == "text+visual":
        return default_text_curriculum() + default_visual_curriculum()
    if isinstance(spec, list):
        return [build(TaskFamily, f, "train.curriculum entry") for f in spec]
    raise ConfigError(f"curriculum must be 'text', 'visual', 'text+visual' or a list, got {spec!r}")


def train_configs(data: dict, steps: int | None = None, seed: int | None = None):
    unknown = sorted(set(data) - {"seed", "model", "train", "eval"})
    if unknown:
        raise ConfigError(f"unknown top-level keys {unknown}")
    seed = data.get("seed", 0) if seed is None else seed
    tdata = dict(data.get("train") or {})
    curriculum = _curriculum(tdata.pop("curriculum", None))
    if steps is not None:
        tdata["steps"] = steps
    tcfg = build(TrainConfig, {**tdata, "seed": seed}, "train")
    tcfg.curriculum = curriculum
    mcfg = build(ModelConfig, {**(data.get("model") or {}), "seed": seed}, "model")
    if any(f.modality == "visual" for f in curriculum) and mcfg.vision is None:
        raise ConfigError("a visual curriculum needs model.vision")
    tcfg.validate()
    return tcfg, mcfg, dict(data.get("eval") or {})


# -- commands --------------------------------------------------------------------------


def cmd_gen(args) -> int:
    data = load_yaml(args.config) if args.config else {}
    allowed = {"modality", "categories", "orders", "questions", "separator_conditions", "counts",
               "samples_per_cell", "grid_size", "seed", "item_types"}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"dataset config: unknown keys {unknown}; allowed: {sorted(allowed)}")
    seed = args.seed if args.seed is not None else data.get("seed", 0)
    modality = data.get("modality", "text")
    counts = data.get("counts", list(range(1, 10)))
    per_cell = int(data.get("samples_per_cell", 10))
    out = resolve_out(args, "gen")
    files = []
    for cat in data.get("categories", ["monotypic"]):
        for order in data.get("orders", ["question-last"]):
            for q in data.get("questions", ["general"]):
                for sep in data.get("separator_conditions", ["normal"]) if modality == "text" else ["normal"]:
                    for n in counts:
                        samples = []
                        for i in range(per_cell):
                            s_seed = derive_seed("gen", seed, modality, cat, order, q, sep, n, i)
                            if modality == "visual":
                                vc = VisualConfig(n, cat, data.get("grid_size", 6), order, q, s_seed)
                                vc.validate()
                                samples.append(generate_visual(vc))
                            else:
                                tc = TextTaskConfig(n, cat, order, q, sep, s_seed, data.get("item_types"))
                                samples.append(generate_text(tc))
                        name = f"{modality}_{cat}_{order}_{q}" + (f"_{sep}" if modality == "text" else "") + f"_count{n}.jsonl"
                        write_jsonl(samples, out / name)
                        files.append(name)
    write_run_info(out, "gen", data, seed, files=files)
    print(f"wrote {len(files)} files to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    data = load_yaml(args.config) if args.config else {}
    tcfg, mcfg, ecfg = train_configs(data, args.steps, args.seed)
    out = resolve_out(args, "train")
    write_run_info(out, "train", {"model": mcfg.to_dict(), "train": dataclasses.asdict(tcfg)}, tcfg.seed)
    eval_cfg = quick_eval_config(tcfg)
    if ecfg:
        eval_cfg = build(EvalConfig, {"families": eval_cfg.families, **ecfg}, "eval")

    def progress(step, value):
        if step % 100 == 0:
            log.info("step %d loss %.4f", step, value)

    try:
        _, report = train(tcfg, mcfg, out, eval_config=eval_cfg, progress=progress)
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}; last good checkpoint: {exc.last_checkpoint}", file=sys.stderr)
        return EXIT_NUMERIC
    summary = {"checkpoint": report.checkpoint_path, "steps": report.steps, "wall_seconds": report.wall_seconds,
               "threads": torch.get_num_threads()}
    if report.accuracy is not None:
        summary["accuracy"] = report.accuracy.overall()
    with open(out / "train_report.json", "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
    if report.accuracy is not None:
        report.accuracy.to_csv(out / "accuracy.csv")
        print(f"checkpoint {report.checkpoint_path}; accuracy {report.accuracy.overall():.3f}; "
              f"{report.wall_seconds:.0f}s")
    return EXIT_OK


def _checkpoint(args, default_sub="train") -> str:
    path = args.checkpoint or str(out_root() / default_sub / "model.ckpt")
    if not Path(path).exists():
        raise ConfigError(f"checkpoint {path} not found")
    return path


def cmd_eval(args) -> int:
    path = _checkpoint(args)
    model, header = load_checkpoint(path)
    data = load_yaml(args.config) if args.config else {}
    train_cfg = (header.get("extra") or {}).get("train")
    if "families" in data:
        fams = [build(TaskFamily, f, "eval.families entry") for f in data.pop("families")]
    elif train_cfg:
        fams = [TaskFamily(**{**f, "counts": tuple(f["counts"])}) for f in train_cfg["curriculum"]]
    else:
        fams = default_text_curriculum()
    if model.cfg.vision is None:
        fams = [f for f in fams if f.modality == "text"]
    if args.seed is not None:
        data["seed"] = args.seed
    ecfg = build(EvalConfig, {"families": fams, **data}, "eval")
    table = evaluate_behavioral(model, ecfg)
    out = resolve_out(args, "eval")
    table.to_csv(out / "accuracy.csv")
    overall = table.overall()
    pivots = {k: table.pivot(k) for k in ("modality", "category", "order", "question", "count")}
    result = {"checkpoint": path, "overall": overall, "pivots": {k: {str(a): b for a, b in v.items()} for k, v in pivots.items()}}
    flag = overall < CHANCE_FLAG
    if flag:
        result["flag"] = f"accuracy {overall:.3f} is near chance; checkpoint looks untrained"
    with open(out / "accuracy.json", "w") as fh:
        json.dump(result, fh, indent=1, sort_keys=True)
    write_run_info(out, "eval", {"checkpoint": path, **{k: v for k, v in data.items()}}, ecfg.seed)
    print(f"overall accuracy {overall:.3f}" + (" [FLAG: near chance]" if flag else ""))
    for key in ("category", "order", "question"):
        print(f"  {key}: " + ", ".join(f"{a}={b:.3f}" for a, b in pivots[key].items()))
    return EXIT_OK


def _one_sample(path, index: int):
    samples = read_jsonl(path)
    if not 0 <= index < len(samples):
        raise ConfigError(f"{path} has {len(samples)} samples; index {index} out of range")
    return samples[index]


def cmd_patch(args) -> int:
    model, _ = load_checkpoint(_checkpoint(args))
    spec_data = load_yaml(args.spec) if args.spec else {}
    if args.mode:
        spec_data["mode"] = args.mode
    r_tilde = spec_data.pop("r_tilde", None)
    target = _one_sample(args.target, args.index)
    source = _one_sample(args.source, args.index) if args.source else None
    if "layers" not in spec_data or spec_data["layers"] == "all":
        spec_data["layers"] = list(range(model.n_layers))
    if "position_map" not in spec_data:
        raise ConfigError("patch spec needs a position_map")
    source_cache = capture(model, source) if source is not None else None
    try:
        spec = InterventionSpec.from_json(spec_data, source=source_cache if spec_data["mode"] == "interchange" else None)
    except KeyError as exc:
        raise ConfigError(f"patch spec missing {exc}") from None
    if r_tilde is None:
        r_tilde = source.ground_truth if source is not None else target.ground_truth
    run = run_patched(model, target, spec, source, source_cache, r_tilde=r_tilde)
    out = resolve_out(args, "patch")
    write_patch_runs([run], out / "patch_runs.jsonl", mode="w")
    p = {
        "p_tilde_star": run.prob("patched", r_tilde),
        "p_tilde_prime": run.prob("baseline", r_tilde),
        "p_rp_prime": run.prob("baseline", run.r_prime),
        "p_rp_star": run.prob("patched", run.r_prime),
    }
    reports = [
        MetricReport("ci", ci_score(**p), **p, sample_id=run.target_id),
        MetricReport("kl", kl_divergence(run.baseline, run.patched), sample_id=run.target_id),
    ]
    write_metric_csv(reports, out / "metrics.csv")
    write_run_info(out, "patch", spec.to_json(), target.seed)
    print(f"CI {reports[0].value:.4f}  KL {reports[1].value:.4g}  patched argmax {run.digits('patched').argmax}")
    return EXIT_OK


def cmd_scope(args) -> int:
    model, _ = load_checkpoint(_checkpoint(args))
    samples = read_jsonl(args.source)
    probe = ProbeConfig(n_placeholders=args.placeholders, order=args.probe_order,
                        layer_cutoff=args.layer_cutoff, modality="visual" if samples[0].modality == "visual" else "text")
    out = resolve_out(args, "scope")
    results = []
    for i, s in enumerate(samples if args.index is None else [samples[args.index]]):
        cache = capture(model, s)
        if args.item is not None:
            if not 1 <= args.item <= len(s.list_positions):
                raise ConfigError(f"sample has {len(s.list_positions)} list items; --item {args.item} out of range")
            pos = s.list_positions[args.item - 1]
        else:
            pos = args.position
        dec = decode(model, cache, pos, probe)
        results.append(dec.to_json())
    with open(out / "decodings.jsonl", "w") as fh:
        for r in results:
            fh.write(json.dumps(r) + "\n")
    write_run_info(out, "scope", {"source": args.source, "probe": dataclasses.asdict(probe)}, 0)
    print(json.dumps(results[0] if len(results) == 1 else results))
    return EXIT_OK


def experiment_config(args) -> tuple[ExperimentConfig, dict]:
    data = load_yaml(args.config) if args.config else {}
    overrides = data.pop("overrides", {}) or {}
    base = dict(data)
    for flag, key in (("checkpoint", "checkpoint"), ("visual_checkpoint", "visual_checkpoint"),
                      ("seed", "seed"), ("n_samples", "n_samples")):
        v = getattr(args, flag, None)
        if v is not None:
            base[key] = v
    if args.k is not None:
        base["k"] = tuple(args.k)
    base.setdefault("checkpoint", str(out_root() / "train" / "model.ckpt"))
    base["name"] = args.name if args.name != "all" else next(iter(REGISTRY))
    cfg = build(ExperimentConfig, base, "experiment config")
    cfg.validate()
    for name, o in overrides.items():
        if name not in REGISTRY:
            raise ConfigError(f"overrides: unknown experiment {name!r}; registered: {', '.join(REGISTRY)}")
        build(ExperimentConfig, {**base, **o, "name": name}, f"overrides.{name}").validate()
    return cfg, overrides


def cmd_experiment(args) -> int:
    if args.action == "list":
        for name in REGISTRY:
            print(name)
        return EXIT_OK
    if args.name is None:
        raise ConfigError("experiment run needs a name (or 'all')")
    if args.name != "all" and args.name not in REGISTRY:
        print(f"unknown experiment {args.name!r}; registered: {', '.join(REGISTRY)}", file=sys.stderr)
        return EXIT_CONFIG
    cfg, overrides = experiment_config(args)
    out = resolve_out(args, "experiments")
    if args.name == "all":
        manifest = run_all(cfg, out, overrides=overrides)
        for e in manifest["experiments"]:
            print(e.get("summary") or f"{e['name']}: FAILED {e.get('error')}")
        print(f"manifest: {out / 'manifest.json'}")
        return EXIT_OK if all(e["status"] == "ok" for e in manifest["experiments"]) else EXIT_NUMERIC
    cfg = dataclasses.replace(cfg, name=args.name, **overrides.get(args.name, {}))
    report = run_experiment(cfg, out / args.name)
    print(report.summary())
    return EXIT_OK


def cmd_analyze(args) -> int:
    model, _ = load_checkpoint(_checkpoint(args))
    samples = monotypic_samples(args.order, 9, seed=args.seed or 0)
    caches = [capture(model, s) for s in samples]
    layers = range(model.n_layers) if args.layer is None else [args.layer - 1]
    out = resolve_out(args, "analyze")
    for layer in layers:
        emb = collect_embeddings(model, samples, layer, caches=caches)
        pca = pca_project(emb, 2, seed=args.seed or 0)
        with open(out / f"pca_layer{layer + 1}.csv", "w") as fh:
            fh.write("item_type,list_position,pc1,pc2\n")
            for lab, (x, y) in zip(emb.labels, pca.coords):
                fh.write(f"{lab['item_type']},{lab['list_position']},{x!r},{y!r}\n")
        cos = cross_type_cosine(emb)
        write_heatmap_csv(out / f"cosine_layer{layer + 1}.csv", cos, range(1, 10), range(1, 10))
        print(f"layer {layer + 1}: explained variance {np.round(pca.explained_variance_ratio, 3).tolist()}, "
              f"mean diagonal cosine {np.mean(np.diag(cos)):.3f}")
    write_run_info(out, "analyze", {"order": args.order, "layer": args.layer}, args.seed or 0)
    return EXIT_OK


# -- parser ------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="countlab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--workers", type=int, default=None, help="bound on intra-op threads")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True, checkpoint=False):
        if config:
            sp.add_argument("--config", help="YAML config file")
        sp.add_argument("--out", help=f"output directory (default: ${OUT_ENV}/<command>)")
        sp.add_argument("--seed", type=int, default=None)
        if checkpoint:
            sp.add_argument("--checkpoint", help=f"checkpoint path (default: ${OUT_ENV}/train/model.ckpt)")

    sp = sub.add_parser("gen", help="write dataset manifests (JSON Lines per cell and count)")
    common(sp)
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("train", help="train a model from a YAML config")
    common(sp)
    sp.add_argument("--steps", type=int, default=None)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="behavioral accuracy tables")
    common(sp, checkpoint=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("patch", help="apply one intervention spec to a target sample")
    common(sp, config=False, checkpoint=True)
    sp.add_argument("--target", required=True, help="JSON Lines sample file")
    sp.add_argument("--source", help="JSON Lines sample file for interchange")
    sp.add_argument("--index", type=int, default=0, help="sample index within the files")
    sp.add_argument("--spec", help="YAML/JSON intervention spec")
    sp.add_argument("--mode", choices=("zero", "mean", "interchange", "add_vector"))
    sp.set_defaults(func=cmd_patch)

    sp = sub.add_parser("scope", help="CountScope decode of one activation")
    common(sp, config=False, checkpoint=True)
    sp.add_argument("--source", required=True, help="JSON Lines sample file")
    sp.add_argument("--position", type=int, default=None, help="token position to decode")
    sp.add_argument("--item", type=int, default=None, help="1-based list item to decode instead of --position")
    sp.add_argument("--index", type=int, default=None, help="only this sample of the file")
    sp.add_argument("--placeholders", type=int, default=1)
    sp.add_argument("--probe-order", default="question-first", choices=("question-first", "question-last"))
    sp.add_argument("--layer-cutoff", type=int, default=None)
    sp.set_defaults(func=cmd_scope)

    sp = sub.add_parser("experiment", help="run registered experiments")
    sp.add_argument("action", choices=("run", "list"))
    sp.add_argument("name", nargs="?", help="experiment name or 'all'")
    common(sp, checkpoint=True)
    sp.add_argument("--visual-checkpoint", default=None)
    sp.add_argument("--k", type=int, nargs="+", default=None)
    sp.add_argument("--n-samples", type=int, default=None)
    sp.set_defaults(func=cmd_experiment)

    sp = sub.add_parser("analyze", help="PCA and cross-type cosine of item embeddings")
    common(sp, config=False, checkpoint=True)
    sp.add_argument("--layer", type=int, default=None, help="1-based layer (default: all)")
    sp.add_argument("--order", default="question-first", choices=("question-first", "question-last"))
    sp.set_defaults(func=cmd_analyze)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.workers:
        torch.set_num_threads(args.workers)
    if args.command == "scope" and args.position is None and args.item is None:
        parser.error("scope needs --position or --item")
    try:
        return args.func(args)
    except (ConfigError, InputError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
