"""Config-driven experiment runners over trained checkpoints.

Each runner builds samples, applies interventions or CountScope decodes,
logs one raw record per measurement and aggregates records per cell.
Reports are written as JSON (aggregates + metadata), CSV matrices, raw
JSON Lines and optional SVG heatmaps.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import os
import random
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .activations import (
    InterventionSpec,
    all_layers,
    capture,
    capture_patched,
    compute_mean_store,
    run_patched,
)
from .analysis import collect_embeddings, cross_type_cosine, pca_project
from .countscope import ProbeConfig, decode, decode_grid, column_max_normalize, write_heatmap_csv
from .dataset import (
    CATEGORIES,
    ORDERS,
    SEPARATOR_CONDITIONS,
    ConfigError,
    CountingSample,
    TextTaskConfig,
    VisualConfig,
    derive_seed,
    generate_grouped,
    generate_text,
    generate_visual,
)
from .metrics import aggregate, ci_score, probability_drop, try_aggregate
from .model import CountingTransformer, load_checkpoint
from .training import (
    HOLDOUT_TYPES,
    EvalConfig,
    TaskFamily,
    evaluate_behavioral,
    predict_digits,
)
from .vocab import FRUITS

log = logging.getLogger(__name__)

PATCH_TYPES = ("both", "separators", "elements")


# -- expected answers ----------------------------------------------------------


def continued_counting_expected(n_source: int, n_target: int, k: int) -> int:
    """Answer if counting resumes from the source count: N_s + N_t - k."""
    return n_source + n_target - k


def max_latent_expected(n_source: int, n_target: int, k: int) -> int:
    """Answer if the output tracks the largest latent count in context."""
    return max(n_source, n_target - k)


def expected_table(fn: Callable[[int, int, int], int], k: int, counts=range(2, 10)) -> np.ndarray:
    """Rows N_source, columns N_target."""
    return np.array([[fn(s, t, k) for t in counts] for s in counts], dtype=int)


def type_specific_expectations(groups: list[tuple[str, int]], group_index: int) -> dict:
    """Counts expected at the last item of ``groups[group_index]``.

    Gen: all items so far. Sp-A: items of that type so far. Sp-L: the current
    contiguous run of that type. Sp is the type count (equal to Sp-A).
    """
    upto = groups[: group_index + 1]
    kind, run = groups[group_index]
    gen = sum(n for _, n in upto)
    sp_all = sum(n for t, n in upto if t == kind)
    return {"Gen": gen, "Sp": sp_all, "Sp-A": sp_all, "Sp-L": run}


def top_third_window(n_layers: int) -> tuple[int, ...]:
    """0-based indices of the upper third of layers (at least one layer)."""
    width = max(1, math.ceil(n_layers / 3))
    return tuple(range(n_layers - width, n_layers))


# -- config / report -------------------------------------------------------------


@dataclass
class ExperimentConfig:
    name: str
    checkpoint: str | None = None
    visual_checkpoint: str | None = None
    counts: tuple[int, ...] = tuple(range(1, 10))
    pair_counts: tuple[int, ...] = tuple(range(2, 10))  # N_source and N_target range
    categories: tuple[str, ...] = ("monotypic", "polytypic-unique")
    orders: tuple[str, ...] = ("question-first", "question-last")
    k: tuple[int, ...] = (1, 2, 3)
    shifts: tuple[int, ...] = (1, 2, 3, 4)
    patch_types: tuple[str, ...] = PATCH_TYPES
    layer_window: tuple[int, int] | None = None  # 1-based inclusive; None = top third
    regime: str | None = None  # None = the experiment's own default
    family: str | None = None
    n_samples: int = 2
    n_configs: int = 12  # grouped/interrupted configurations for type_specific
    gaps: tuple[int, ...] = (1, 2, 3, 4)
    grid_sizes: tuple[int, ...] = (3, 6, 10)
    visual_grid: int = 6
    probe_order: str = "question-first"
    transfer_types: tuple[str, ...] = HOLDOUT_TYPES
    include_equal_pairs: bool = False
    accuracy_threshold: float = 0.5
    svg: bool = False
    seed: int = 0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                setattr(self, f.name, tuple(v))

    def validate(self) -> None:
        if self.name not in REGISTRY:
            raise ConfigError(f"unknown experiment {self.name!r}; registered: {', '.join(REGISTRY)}")
        for n in self.counts + self.pair_counts:
            if not 1 <= n <= 9:
                raise ConfigError(f"counts must lie in 1..9, got {n}")
        for c in self.categories:
            if c not in CATEGORIES:
                raise ConfigError(f"unknown category {c!r}")
        for o in self.orders + (self.probe_order,):
            if o not in ORDERS:
                raise ConfigError(f"unknown order {o!r}")
        for p in self.patch_types:
            if p not in PATCH_TYPES:
                raise ConfigError(f"unknown patch type {p!r}")
        if any(k < 0 for k in self.k) or any(s < 0 for s in self.shifts):
            raise ConfigError("k and shifts must be non-negative")
        if self.regime not in (None, "online", "offline"):
            raise ConfigError(f"unknown regime {self.regime!r}")
        if self.n_samples < 1:
            raise ConfigError("n_samples must be positive")
        if self.layer_window is not None:
            lo, hi = self.layer_window
            if not 1 <= lo <= hi:
                raise ConfigError("layer_window must be 1-based (lo, hi) with lo <= hi")

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        """Digest of the settings that determine results (paths excluded)."""
        d = self.to_json()
        d.pop("checkpoint")
        d.pop("visual_checkpoint")
        d.pop("svg")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def window(self, n_layers: int) -> tuple[int, ...]:
        if self.layer_window is None:
            return top_third_window(n_layers)
        lo, hi = self.layer_window
        if hi > n_layers:
            raise ConfigError(f"layer_window ends at {hi} but the model has {n_layers} layers")
        return tuple(range(lo - 1, hi))


@dataclass
class Table:
    matrix: np.ndarray
    row_labels: list
    col_labels: list
    normalization: str = "none"

    def to_json(self) -> dict:
        return {
            "matrix": [[None if not np.isfinite(v) else float(v) for v in row] for row in np.asarray(self.matrix, float)],
            "rows": [str(r) for r in self.row_labels],
            "cols": [str(c) for c in self.col_labels],
            "normalization": self.normalization,
        }


@dataclass
class ExperimentReport:
    name: str
    schema: str
    config: dict
    records: list[dict] = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)  # cell -> metric -> Aggregate dict (or None)
    tables: dict = field(default_factory=dict)
    reference: dict = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    stats: dict = field(default_factory=dict)  # derived scalars/sequences outside the record cells

    def record(self, cell: str, metric: str, value, **extra) -> dict:
        if value is not None:
            value = float(value)
        r = {"cell": cell, "metric": metric, "value": value, **extra}
        self.records.append(r)
        return r

    def finalize(self) -> "ExperimentReport":
        self.aggregates = recompute_aggregates(self.records)
        return self

    def cell(self, cell: str, metric: str):
        return self.aggregates.get(cell, {}).get(metric)

    def cell_mean(self, cell: str, metric: str) -> float:
        a = self.cell(cell, metric)
        return float("nan") if a is None else a["mean"]

    def aggregate_json(self) -> dict:
        """The deterministic part of a report: everything except timestamps and paths."""
        return {
            "name": self.name,
            "schema": self.schema,
            "config_hash": self.metadata.get("config_hash"),
            "seed": self.metadata.get("seed"),
            "aggregates": self.aggregates,
            "stats": self.stats,
            "tables": {k: t.to_json() for k, t in self.tables.items()},
            "flags": self.flags,
        }

    def summary(self) -> str:
        head = self.metadata.get("headline")
        if head:
            cell, metric = head
            a = self.cell(cell, metric)
            if a is not None:
                return f"{self.name}: {cell} {metric} = {a['mean']:.3f} ± {a['sd']:.3f} (n={a['n']})"
        return f"{self.name}: {len(self.records)} records, {len(self.aggregates)} cells"

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "records.jsonl", "w") as fh:
            for r in self.records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")
        table_files = {}
        for key, t in self.tables.items():
            path = out / f"{key}.csv"
            write_heatmap_csv(path, t.matrix, t.row_labels, t.col_labels, t.normalization)
            table_files[key] = path.name
            if self.config.get("svg"):
                _write_svg(out / f"{key}.svg", t, f"{self.name}: {key}")
        with open(out / "aggregates.json", "w") as fh:
            json.dump(self.aggregate_json(), fh, indent=1, sort_keys=True)
        doc = {
            "name": self.name,
            "schema": self.schema,
            "metadata": self.metadata,
            "config": self.config,
            "aggregates": self.aggregates,
            "stats": self.stats,
            "reference": self.reference,
            "flags": self.flags,
            "tables": table_files,
            "records": "records.jsonl",
        }
        with open(out / "report.json", "w") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True)
        return out / "report.json"


def recompute_aggregates(records: list[dict]) -> dict:
    grouped: dict = {}
    for r in records:
        grouped.setdefault(r["cell"], {}).setdefault(r["metric"], []).append(r["value"])
    out: dict = {}
    for cell in sorted(grouped):
        out[cell] = {}
        for metric in sorted(grouped[cell]):
            vals = grouped[cell][metric]
            agg = try_aggregate(vals)
            out[cell][metric] = agg.as_dict() if agg else {"mean": None, "sd": None, "n": 0, "excluded": len(vals)}
    return out


def audit(report: ExperimentReport, tol: float = 1e-12) -> list[str]:
    """Cells whose stored aggregate does not recompute from the raw records."""
    fresh = recompute_aggregates(report.records)
    bad = []
    for cell in set(fresh) | set(report.aggregates):
        for metric in set(fresh.get(cell, {})) | set(report.aggregates.get(cell, {})):
            a = fresh.get(cell, {}).get(metric)
            b = report.aggregates.get(cell, {}).get(metric)
            if a is None or b is None or a["n"] != b["n"]:
                bad.append(f"{cell}/{metric}")
            elif a["mean"] is not None and (abs(a["mean"] - b["mean"]) > tol or abs(a["sd"] - b["sd"]) > tol):
                bad.append(f"{cell}/{metric}")
    return sorted(bad)


def _write_svg(path: Path, table: Table, title: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "countlab"
    m = np.asarray(table.matrix, dtype=float)
    fig, ax = plt.subplots(figsize=(0.5 * m.shape[1] + 2, 0.4 * m.shape[0] + 1.5))
    im = ax.imshow(m, aspect="auto", cmap="viridis")
    ax.set_xticks(range(m.shape[1]), [str(c) for c in table.col_labels])
    ax.set_yticks(range(m.shape[0]), [str(r) for r in table.row_labels])
    ax.set_title(title, fontsize=9)
    fig.colorbar(im, ax=ax)
    fig.savefig(path, format="svg", metadata={"Date": None}, bbox_inches="tight")
    plt.close(fig)


# -- shared helpers ----------------------------------------------------------------


_MODELS: dict = {}


def load_model(path) -> tuple[CountingTransformer, str]:
    """Cached checkpoint load; returns (model, checkpoint id = content digest prefix)."""
    path = str(path)
    stamp = os.stat(path).st_mtime_ns
    hit = _MODELS.get(path)
    if hit is None or hit[0] != stamp:
        model, _ = load_checkpoint(path)
        model.eval()
        with open(path, "rb") as fh:
            digest = hashlib.sha256(fh.read()).hexdigest()[:16]
        hit = (stamp, model, digest)
        _MODELS[path] = hit
    return hit[1], hit[2]


def _text(count, category="monotypic", order="question-last", seed=0, item_types=None, question="general"):
    return generate_text(TextTaskConfig(count, category, order, question, "normal", seed, item_types))


def _visual(count, category="monotypic", grid=6, order="question-last", seed=0):
    return generate_visual(VisualConfig(count, category, grid, order, "general", seed))


def _models(cfg: ExperimentConfig, report: ExperimentReport, need_text=True, want_visual=True) -> list:
    """[(modality, model)] for the checkpoints configured; flags what is skipped."""
    out = []
    if cfg.checkpoint:
        m, cid = load_model(cfg.checkpoint)
        report.metadata.setdefault("checkpoints", {})["text"] = {"path": str(cfg.checkpoint), "id": cid}
        out.append(("text", m))
    elif need_text:
        raise ConfigError(f"experiment {cfg.name} needs a text checkpoint")
    if want_visual:
        if cfg.visual_checkpoint:
            m, cid = load_model(cfg.visual_checkpoint)
            report.metadata.setdefault("checkpoints", {})["visual"] = {"path": str(cfg.visual_checkpoint), "id": cid}
            out.append(("visual", m))
        else:
            report.flags.append("no visual checkpoint configured; visual cells skipped")
    for modality, m in out:
        _accuracy_check(cfg, report, modality, m)
    return out


def _accuracy_check(cfg: ExperimentConfig, report: ExperimentReport, modality: str, model) -> None:
    samples = []
    for n in range(1, 10):
        for order in ORDERS:
            seed = derive_seed("accuracy-check", cfg.seed, modality, n, order)
            samples.append(_visual(n, "monotypic", cfg.visual_grid, order, seed) if modality == "visual"
                           else _text(n, "monotypic", order, seed))
    preds = predict_digits(model, samples)
    acc = float(np.mean([p == s.ground_truth for p, s in zip(preds, samples)]))
    report.stats[f"accuracy_check/{modality}"] = acc
    if acc < cfg.accuracy_threshold:
        report.flags.append(
            f"{modality} checkpoint looks untrained: accuracy {acc:.2f} below threshold {cfg.accuracy_threshold:.2f}"
        )


def _ci_record(report, cell, run, r_tilde, **extra):
    """CI of a PatchRun; undefined (None) when r_tilde has no digit token."""
    p = {
        "p_tilde_star": run.prob("patched", r_tilde),
        "p_tilde_prime": run.prob("baseline", r_tilde),
        "p_rp_prime": run.prob("baseline", run.r_prime),
        "p_rp_star": run.prob("patched", run.r_prime),
    }
    if not 1 <= r_tilde <= 9:
        return report.record(cell, "ci", None, r_tilde=r_tilde, r_prime=run.r_prime,
                             note="expected answer has no digit token", **p, **extra)
    return report.record(cell, "ci", ci_score(**p), r_tilde=r_tilde, r_prime=run.r_prime, **p, **extra)


def _probe(cfg: ExperimentConfig, modality="text", **kw) -> ProbeConfig:
    return ProbeConfig(order=cfg.probe_order, modality=modality, **kw)


def _pool(exclude=()) -> tuple[str, ...]:
    return tuple(t for t in FRUITS if t not in exclude)


def _question_positions(sample: CountingSample) -> list[int]:
    """Question span without the readout position."""
    qs, qe = sample.question_span
    return [p for p in range(qs, qe) if p != sample.answer_position]


def _context_positions(sample: CountingSample) -> list[int]:
    cs, ce = sample.context_span
    return [p for p in range(cs, ce) if p != sample.answer_position]


# -- localization ----------------------------------------------------------------


def exp_zero_locate(cfg: ExperimentConfig) -> ExperimentReport:
    report = _new_report(cfg, "zero_patch_context_vs_question_drop")
    regime = cfg.regime or "offline"
    family = cfg.family or "resid_pre"
    for modality, model in _models(cfg, report):
        layers = all_layers(model)
        for n in cfg.counts:
            for i in range(cfg.n_samples):
                cat = cfg.categories[i % len(cfg.categories)]
                seed = derive_seed("zero_locate", cfg.seed, modality, n, i)
                s = (_visual(n, cat, cfg.visual_grid, "question-last", seed) if modality == "visual"
                     else _text(n, cat, "question-last", seed))
                cache = capture(model, s)
                for span, positions in (("context", _context_positions(s)), ("question", _question_positions(s))):
                    spec = InterventionSpec("zero", family, layers, [(p, p) for p in positions], regime=regime)
                    run = run_patched(model, s, spec, target_cache=cache)
                    before, after = run.prob("baseline", n), run.prob("patched", n)
                    report.record(f"{modality}/{span}/count={n}", "drop", probability_drop(before, after),
                                  before=before, after=after, category=cat, seed=seed, n_patched=len(positions))
                    report.record(f"{modality}/{span}", "drop", probability_drop(before, after), count=n, seed=seed)
    report.finalize()
    for modality in _modalities(report):
        report.tables[f"drop_{modality}"] = Table(
            np.array([[report.cell_mean(f"{modality}/{sp}/count={n}", "drop") for sp in ("context", "question")]
                      for n in cfg.counts]),
            list(cfg.counts), ["context", "question"])
    report.reference = {
        "text/context": "0.65 ± 0.31", "text/question": "0.03 ± 0.02",
        "visual/context": "0.73 ± 0.02", "visual/question": "0.05 ± 0.03",
    }
    report.metadata["headline"] = ("text/context", "drop")
    return report


def _modalities(report: ExperimentReport) -> list[str]:
    return [m for m in ("text", "visual") if m in report.metadata.get("checkpoints", {})]


def exp_interchange_locate(cfg: ExperimentConfig) -> ExperimentReport:
    report = _new_report(cfg, "interchange_context_vs_question_ci")
    regime = cfg.regime or "offline"
    family = cfg.family or "resid_pre"
    for modality, model in _models(cfg, report):
        layers = all_layers(model)
        for ns in cfg.pair_counts:
            for nt in cfg.pair_counts:
                if ns == nt and not cfg.include_equal_pairs:
                    continue
                for i in range(cfg.n_samples):
                    cat = cfg.categories[i % len(cfg.categories)]
                    seed = derive_seed("interchange_locate", cfg.seed, modality, ns, nt, i)
                    if modality == "visual":
                        src = _visual(ns, cat, cfg.visual_grid, "question-last", seed)
                        tgt = _visual(nt, cat, cfg.visual_grid, "question-last", seed + 1)
                    else:
                        src = _text(ns, cat, "question-last", seed)
                        tgt = _text(nt, cat, "question-last", seed + 1)
                    src_cache, tgt_cache = capture(model, src), capture(model, tgt)
                    cs, ct = _context_positions(src), _context_positions(tgt)
                    m = min(len(cs), len(ct))
                    maps = {
                        # text contexts differ in length: align their ends
                        "context": list(zip(cs[len(cs) - m:], ct[len(ct) - m:])),
                        "question": list(zip(_question_positions(src), _question_positions(tgt))),
                    }
                    for span, pmap in maps.items():
                        spec = InterventionSpec("interchange", family, layers, pmap, src_cache, regime)
                        run = run_patched(model, tgt, spec, src, src_cache, tgt_cache, r_tilde=ns)
                        extra = {"n_source": ns, "n_target": nt, "seed": seed, "category": cat}
                        if ns == nt:
                            extra["flag"] = "equal counts: CI is 0 by construction"
                        _ci_record(report, f"{modality}/{span}", run, ns, **extra)
    report.finalize()
    for modality in _modalities(report):
        report.tables[f"ci_{modality}"] = Table(
            np.array([[report.cell_mean(f"{modality}/{sp}", "ci") for sp in ("context", "question")]]),
            [modality], ["context", "question"])
    if cfg.include_equal_pairs:
        report.flags.append("equal-count pairs included; their CI is 0 by construction")
    report.reference = {
        "text/context": "0.61 ± 0.02", "text/question": "0.02 ± 0.01",
        "visual/context": "0.57 ± 0.12", "visual/question": "0.03 ± 0.04",
    }
    report.metadata["headline"] = ("text/context", "ci")
    return report


def exp_item_locate(cfg: ExperimentConfig) -> ExperimentReport:
    report = _new_report(cfg, "per_item_zero_drop_and_fg_bg_countscope")
    regime = cfg.regime or "offline"
    family = cfg.family or "resid_pre"
    for modality, model in _models(cfg, report):
        if modality == "text":
            layers = all_layers(model)
            for n in cfg.counts:
                for i in range(cfg.n_samples):
                    cat = cfg.categories[i % len(cfg.categories)]
                    seed = derive_seed("item_locate", cfg.seed, n, i)
                    s = _text(n, cat, "question-last", seed)
                    cache = capture(model, s)
                    for j, pos in enumerate(s.list_positions, start=1):
                        spec = InterventionSpec("zero", family, layers, [(pos, pos)], regime=regime)
                        run = run_patched(model, s, spec, target_cache=cache)
                        d = probability_drop(run.prob("baseline", n), run.prob("patched", n))
                        report.record(f"text/count={n}/item={j}", "drop", d, seed=seed, category=cat)
                        if j == n:
                            report.record("text/final_item", "drop", d, count=n, seed=seed)
                        else:
                            report.record("text/non_final_item", "drop", d, count=n, seed=seed)
        else:
            probe = _probe(cfg, "visual")
            for g in cfg.grid_sizes:
                for n in cfg.counts:
                    if n > g * g:
                        continue
                    for i in range(cfg.n_samples):
                        cat = cfg.categories[i % len(cfg.categories)]
                        seed = derive_seed("item_locate/visual", cfg.seed, g, n, i)
                        scene = _visual(n, cat, g, cfg.probe_order, seed)
                        means = decode_grid(model, scene, probe).means()
                        for part in ("foreground", "background"):
                            report.record(f"visual/G={g}/{part}", "p_ground_truth", means[part],
                                          count=n, seed=seed, category=cat)
    report.finalize()
    if "text" in _modalities(report):
        mat = np.full((len(cfg.counts), 9), np.nan)
        for r, n in enumerate(cfg.counts):
            for j in range(1, n + 1):
                mat[r, j - 1] = report.cell_mean(f"text/count={n}/item={j}", "drop")
        report.tables["item_drop_text"] = Table(mat, list(cfg.counts), list(range(1, 10)))
    if "visual" in _modalities(report):
        report.tables["fg_bg_visual"] = Table(
            np.array([[report.cell_mean(f"visual/G={g}/{part}", "p_ground_truth") for g in cfg.grid_sizes]
                      for part in ("foreground", "background")]),
            ["FG", "BG"], [f"{g}x{g}" for g in cfg.grid_sizes])
    report.reference = {
        "text/final_item": "0.95 ± 0.04",
        "visual FG (3x3, 6x6, 10x10)": "0.48, 0.46, 0.42",
        "visual BG (3x3, 6x6, 10x10)": "0.44, 0.58, 0.61",
    }
    report.metadata["headline"] = ("text/final_item", "drop")
    return report


# -- latent counters ------------------------------------------------------------------


def exp_per_item_latent(cfg: ExperimentConfig) -> ExperimentReport:
    report = _new_report(cfg, "per_item_latent_count_heatmaps")
    for modality, model in _models(cfg, report):
        probe = _probe(cfg, modality)
        variants = ("monotypic", "polytypic-unique") if modality == "text" else ("visual",)
        for variant in variants:
            for i in range(cfg.n_samples):
                seed = derive_seed("per_item_latent", cfg.seed, variant, i)
                if modality == "visual":
                    s = _visual(9, "monotypic", cfg.visual_grid, cfg.probe_order, seed)
                else:
                    s = _text(9, variant, cfg.probe_order, seed)
                cache = capture(model, s)
                sites = [("item", j, pos) for j, pos in enumerate(s.list_positions, start=1)]
                # separator after item j is labeled j + 1 (the position it precedes)
                sites += [("separator", s.separator_index(p) + 1, p) for p in s.separator_positions]
                for role, label, pos in sites:
                    dec = decode(model, cache, pos, probe)
                    cell = f"{variant}/{role}/{label}"
                    for d in range(1, 10):
                        report.record(cell, f"p{d}", dec.renormalized[d - 1], seed=seed)
                    report.record(cell, "argmax_correct", float(dec.argmax == label), seed=seed, argmax=dec.argmax)
                    report.record(f"{variant}/{role}", "diagonal", dec.renormalized[label - 1], position=label, seed=seed)
                    if role == "item" and label <= 5:
                        report.record(f"{variant}/item/positions_1_5", "argmax_correct", float(dec.argmax == label),
                                      position=label, seed=seed)
        if modality == "text":
            # the probe order that does not match the source, as a diagnostic
            other = "question-last" if cfg.probe_order == "question-first" else "question-first"
            mismatch = ProbeConfig(order=other)
            for i in range(cfg.n_samples):
                seed = derive_seed("per_item_latent", cfg.seed, "monotypic", i)
                s = _text(9, "monotypic", cfg.probe_order, seed)
                cache = capture(model, s)
                for j, pos in enumerate(s.list_positions, start=1):
                    dec = decode(model, cache, pos, mismatch)
                    for d in range(1, 10):
                        report.record(f"probe_mismatch/item/{j}", f"p{d}", dec.renormalized[d - 1], seed=seed)
    report.finalize()
    for variant, rows in (("monotypic", "item"), ("polytypic-unique", "item"), ("visual", "item"),
                          ("monotypic", "separator"), ("polytypic-unique", "separator"), ("probe_mismatch", "item")):
        labels = range(1, 10) if rows == "item" else range(2, 10)
        if f"{variant}/{rows}/{labels[0]}" not in report.aggregates:
            continue
        mat = np.array([[report.cell_mean(f"{variant}/{rows}/{j}", f"p{d}") for d in range(1, 10)] for j in labels])
        key = f"heatmap_{variant}" if rows == "item" else f"heatmap_{variant}_separators"
        report.tables[key] = Table(mat, list(labels), list(range(1, 10)), "renormalized over digits")
    report.reference = {"note": "item i decodes to count i at early positions; separators carry the next position"}
    report.metadata["headline"] = ("monotypic/item/positions_1_5", "argmax_correct")
    return report


def _tail_map(src: CountingSample, tgt: CountingSample, k: int, patch_type: str, tail_to_head: bool) -> list:
    """Map the final k source items (and the k-1 separators between them) onto the target.

    ``tail_to_head`` places them on the first k target items, otherwise on the final k.
    """
    ns, nt = len(src.list_positions), len(tgt.list_positions)
    s_items = list(range(ns - k, ns))
    t_items = list(range(k)) if tail_to_head else list(range(nt - k, nt))
    pairs = []
    if patch_type in ("both", "elements"):
        pairs += [(src.list_positions[a], tgt.list_positions[b]) for a, b in zip(s_items, t_items)]
    if patch_type in ("both", "separators"):
        s_sep = {src.separator_index(p): p for p in src.separator_positions}
        t_sep = {tgt.separator_index(p): p for p in tgt.separator_positions}
        # separator after the a-th item (1-based) for every item but the last of the block
        for a, b in zip(s_items[:-1], t_items[:-1]):
            if a + 1 in s_sep and b + 1 in t_sep:
                pairs.append((s_sep[a + 1], t_sep[b + 1]))
    return pairs


def _pair_experiment(cfg: ExperimentConfig, name: str, schema: str, expected: Callable, tail_to_head: bool):
    report = _new_report(cfg, schema)
    ((_, model),) = _models(cfg, report, want_visual=False)
    family = cfg.family or "resid_post"
    regime = cfg.regime or "online"
    layers = all_layers(model)
    probe = _probe(cfg)
    counts = list(cfg.pair_counts)
    for k in cfg.k:
        report.tables[f"expected_k{k}"] = Table(expected_table(expected, k, counts), counts, counts)
        for order in cfg.orders:
            for ns in counts:
                for nt in counts:
                    if k > min(ns, nt) or k == 0:
                        continue
                    r_tilde = expected(ns, nt, k)
                    for i in range(cfg.n_samples):
                        seed = derive_seed(name, cfg.seed, order, ns, nt, i)
                        kind = random.Random(seed).choice(FRUITS)
                        src = _text(ns, "monotypic", order, seed, (kind,))
                        tgt = _text(nt, "monotypic", order, seed + 1, (kind,))
                        src_cache, tgt_cache = capture(model, src), capture(model, tgt)
                        for ptype in cfg.patch_types:
                            pmap = _tail_map(src, tgt, k, ptype, tail_to_head)
                            if not pmap:
                                continue
                            spec = InterventionSpec("interchange", family, layers, pmap, src_cache, regime)
                            run = run_patched(model, tgt, spec, src, src_cache, tgt_cache, r_tilde=r_tilde)
                            extra = {"n_source": ns, "n_target": nt, "k": k, "seed": seed, "item": kind}
                            base = f"k={k}/{order}/{ptype}"
                            _ci_record(report, base, run, r_tilde, **extra)
                            _ci_record(report, f"{base}/{ns},{nt}", run, r_tilde, **extra)
                            if not tail_to_head:
                                side = "source<target" if ns < nt else "source>target" if ns > nt else "source=target"
                                _ci_record(report, f"{base}/{side}", run, r_tilde, **extra)
                            if (tail_to_head and ptype == "both" and order == cfg.probe_order and nt > k
                                    and regime == "online"):
                                # does the (k+1)-th target item now carry N_s + 1?
                                patched_cache = capture_patched(model, tgt, spec)
                                dec = decode(model, patched_cache, tgt.list_positions[k], probe)
                                want = ns + 1
                                report.record(f"k={k}/next_item", "p_source_plus_one",
                                              dec.digits.prob(want) if want <= 9 else None, **extra)
    report.finalize()
    for k in cfg.k:
        for order in cfg.orders:
            for ptype in cfg.patch_types:
                mat = np.array([[_mean_or_nan(report, f"k={k}/{order}/{ptype}/{s},{t}", "ci") for t in counts]
                                for s in counts])
                report.tables[f"ci_k{k}_{order}_{ptype}"] = Table(mat, counts, counts)
    first = cfg.k[0] if cfg.k else 1
    report.metadata["headline"] = (f"k={first}/{cfg.orders[0]}/{cfg.patch_types[0]}", "ci")
    return report


def _mean_or_nan(report, cell, metric):
    a = report.cell(cell, metric)
    return float("nan") if a is None or a["mean"] is None else a["mean"]


def exp_continued_counting(cfg: ExperimentConfig) -> ExperimentReport:
    report = _pair_experiment(cfg, "continued_counting", "continued_counting_ci_and_expected_tables",
                              continued_counting_expected, tail_to_head=True)
    report.reference = {"text question-first CI (k=1, 2, 3)": "0.23, 0.9, 0.71"}
    report.flags.append("expected answers above 9 have no digit token; those CI entries are undefined and excluded")
    return report


def exp_max_latent(cfg: ExperimentConfig) -> ExperimentReport:
    report = _pair_experiment(cfg, "max_latent", "max_latent_count_ci_and_expected_tables",
                              max_latent_expected, tail_to_head=False)
    report.reference = {"note": "largest latent count in context predicts the output for both orderings of N_s, N_t"}
    return report


def exp_type_specific(cfg: ExperimentConfig) -> ExperimentReport:
    report = _new_report(cfg, "type_specific_counter_bars")
    ((_, model),) = _models(cfg, report, want_visual=False)
    probe = _probe(cfg)

    def measure(groups, cell_prefix, seed, metrics):
        s = generate_grouped(groups, cfg.probe_order, seed=seed)
        cache = capture(model, s)
        ends = np.cumsum([n for _, n in groups])
        for g, end in enumerate(ends):
            exp = type_specific_expectations(groups, g)
            dec = decode(model, cache, s.list_positions[end - 1], probe)
            tag = f"{cell_prefix}/group={g + 1}" if cell_prefix == "grouped" else cell_prefix
            if cell_prefix != "grouped" and g != len(groups) - 1:
                continue
            for m in metrics:
                report.record(f"{tag}/{m}", "p", dec.digits.prob(exp[m]), expected=exp[m],
                              groups=[list(x) for x in groups], seed=seed)
                report.record(f"{cell_prefix}/{m}", "p", dec.digits.prob(exp[m]), expected=exp[m], seed=seed)

    for c in range(cfg.n_configs):
        seed = derive_seed("type_specific/grouped", cfg.seed, c)
        rng = random.Random(seed)
        n_groups = rng.choice((2, 3))
        while True:
            sizes = [rng.randint(1, 4) for _ in range(n_groups)]
            if sum(sizes) <= 9:
                break
        kinds = rng.sample(FRUITS, n_groups)
        measure(list(zip(kinds, sizes)), "grouped", seed, ("Gen", "Sp"))
    for gap in cfg.gaps:
        for c in range(cfg.n_configs):
            seed = derive_seed("type_specific/interrupted", cfg.seed, gap, c)
            rng = random.Random(seed)
            while True:
                a, b = rng.randint(1, 4), rng.randint(1, 4)
                if a + gap + b <= 9:
                    break
            x, y = rng.sample(FRUITS, 2)
            measure([(x, a), (y, gap), (x, b)], f"interrupted/gap={gap}", seed, ("Gen", "Sp-A", "Sp-L"))
    report.finalize()
    labels = [f"gap={g}" for g in cfg.gaps]
    report.tables["interrupted"] = Table(
        np.array([[_mean_or_nan(report, f"interrupted/{lab}/{m}", "p") for m in ("Gen", "Sp-A", "Sp-L")]
                  for lab in labels]), labels, ["Gen", "Sp-A", "Sp-L"], "renormalized over digits")
    report.tables["grouped"] = Table(
        np.array([[_mean_or_nan(report, f"grouped/{m}", "p") for m in ("Gen", "Sp")]]), ["grouped"], ["Gen", "Sp"],
        "renormalized over digits")
    report.reference = {"note": "type counts dominate the total; after an interruption the counter restarts (Sp-L over Sp-A)"}
    report.metadata["headline"] = ("grouped/Sp", "p")
    return report


def exp_layerwise(cfg: ExperimentConfig) -> ExperimentReport:
    report = _new_report(cfg, "layerwise_cutoff_heatmap")
    ((_, model),) = _models(cfg, report, want_visual=False)
    n_layers = model.n_layers
    samples = []
    for i in range(cfg.n_samples):
        seed = derive_seed("layerwise", cfg.seed, i)
        s = _text(9, "monotypic", cfg.probe_order, seed)
        samples.append((seed, s, capture(model, s)))
    saturated = True
    for seed, s, cache in samples:
        for n, pos in enumerate(s.list_positions, start=1):
            for cut in range(1, n_layers + 1):
                dec = decode(model, cache, pos, _probe(cfg, layer_cutoff=cut))
                if n == 9:
                    for d in range(1, 10):
                        report.record(f"final_item/L={cut}", f"p{d}", dec.renormalized[d - 1], seed=seed)
                report.record(f"position={n}/L={cut}", "argmax", dec.argmax, seed=seed)
                for d in range(1, 10):
                    report.record(f"position={n}/L={cut}", f"p{d}", dec.renormalized[d - 1], seed=seed)
                if cut == n_layers and n == 9:
                    full = decode(model, cache, pos, _probe(cfg))
                    saturated &= bool(np.array_equal(full.raw, dec.raw))
    report.finalize()
    mat = np.array([[report.cell_mean(f"final_item/L={c}", f"p{d}") for d in range(1, 10)]
                    for c in range(1, n_layers + 1)])
    report.tables["cutoff_raw"] = Table(mat, list(range(1, n_layers + 1)), list(range(1, 10)), "renormalized over digits")
    report.tables["cutoff_colmax"] = Table(column_max_normalize(mat), list(range(1, n_layers + 1)), list(range(1, 10)),
                                           "column max")
    min_layer = []
    for n in range(1, 10):
        hit = None
        for c in range(1, n_layers + 1):
            p = [report.cell_mean(f"position={n}/L={c}", f"p{d}") for d in range(1, 10)]
            if int(np.argmax(p)) + 1 == n:
                hit = c
                break
        min_layer.append(hit)
    found = [m for m in min_layer if m is not None]
    report.stats.update({
        "saturation_exact": saturated,
        "min_layer": min_layer,
        "min_layer_monotone": all(a <= b for a, b in zip(found, found[1:])),
    })
    if not saturated:
        report.flags.append("cutoff L_max decode differs from the all-layer decode")
    report.reference = {"note": "larger counts need deeper cutoffs to become decodable"}
    report.metadata["headline"] = (f"final_item/L={n_layers}", "p9")
    return report


def exp_linear_additivity(cfg: ExperimentConfig) -> ExperimentReport:
    report = _new_report(cfg, "linear_additivity_ci")
    ((_, model),) = _models(cfg, report, want_visual=False)
    family = cfg.family or "resid_post"
    window = cfg.window(model.n_layers)
    report.stats["layer_window"] = [l + 1 for l in window]
    order = cfg.probe_order
    train_types = _pool(cfg.transfer_types)
    mean_samples = []
    for n in range(1, 10):
        for t in train_types:
            mean_samples.append(_text(n, "monotypic", order, derive_seed("additivity/means", cfg.seed, n, t), (t,)))
    store = compute_mean_store(model, mean_samples, (family,), ("item",), required_items=range(1, 10))

    def vectors(n, k):
        return {l: store.lookup(family, l, ("item", n + k)) - store.lookup(family, l, ("item", n)) for l in window}

    for variant, pool in (("in_domain", train_types), ("transfer", tuple(cfg.transfer_types))):
        for k in cfg.shifts:
            for n in cfg.counts:
                if n + k > 9:
                    continue
                for i in range(cfg.n_samples):
                    seed = derive_seed("additivity", cfg.seed, variant, k, n, i)
                    kind = random.Random(seed).choice(pool)
                    tgt = _text(n, "monotypic", order, seed, (kind,))
                    pos = tgt.list_positions[-1]
                    spec = InterventionSpec("add_vector", family, window, [(pos, pos)], vectors(n, k), "online")
                    run = run_patched(model, tgt, spec, r_tilde=n + k)
                    extra = {"n": n, "k": k, "item": kind, "seed": seed}
                    _ci_record(report, f"{variant}/K={k}", run, n + k, **extra)
                    report.record(f"{variant}/K={k}", "accuracy", float(run.digits("patched").argmax == n + k), **extra)
    report.finalize()
    rows = ["in_domain", "transfer"]
    report.tables["ci_by_shift"] = Table(
        np.array([[_mean_or_nan(report, f"{r}/K={k}", "ci") for k in cfg.shifts] for r in rows]), rows,
        [f"K={k}" for k in cfg.shifts])
    report.reference = {"text CI (K=1..4)": "0.69, 0.66, 0.85, 0.60", "transfer": "0.56, 0.64, 0.81, 0.87"}
    report.metadata["headline"] = (f"in_domain/K={cfg.shifts[0]}", "ci")
    return report


def exp_separator_shortcut(cfg: ExperimentConfig) -> ExperimentReport:
    report = _new_report(cfg, "separator_patch_drop")
    ((_, model),) = _models(cfg, report, want_visual=False)
    family = cfg.family or "resid_post"
    layers = all_layers(model)
    cats = {"monotypic": "mono", "polytypic-unique": "poly"}
    order = cfg.orders[0]
    for n in cfg.counts:
        for cat, short in cats.items():
            if n < 3:
                # one separator (or none): patching it with itself is a no-op
                report.record(f"{short}/count={n}", "drop", None, note="fewer than two separators")
                continue
            for i in range(cfg.n_samples):
                seed = derive_seed("separator_shortcut", cfg.seed, cat, n, i)
                s = _text(n, cat, order, seed)
                cache = capture(model, s)
                first = s.separator_positions[0]
                pmap = [(first, p) for p in s.separator_positions]
                spec = InterventionSpec("interchange", family, layers, pmap, cache, cfg.regime or "online")
                run = run_patched(model, s, spec, target_cache=cache)
                d = probability_drop(run.prob("baseline", n), run.prob("patched", n))
                report.record(f"{short}/count={n}", "drop", d, seed=seed)
                report.record(short, "drop", d, count=n, seed=seed)
    report.finalize()
    counts = [n for n in cfg.counts if n >= 3]
    report.tables["drop"] = Table(
        np.array([[report.cell_mean(f"{c}/count={n}", "drop") for c in ("mono", "poly")] for n in counts]),
        counts, ["mono", "poly"])
    report.reference = {
        "mono": "0.75 ± 0.39", "poly": "0.97 ± 0.05",
        "mono per count 3..9": "0.26 0.54 0.83 1.00 1.00 0.97 1.00",
        "poly per count 3..9": "0.52 0.53 0.88 1 1 1 1",
    }
    report.metadata["headline"] = ("mono", "drop")
    return report


# -- behavior and representations ------------------------------------------------------


def exp_behavioral(cfg: ExperimentConfig) -> ExperimentReport:
    report = _new_report(cfg, "behavioral_accuracy_tables")
    for modality, model in _models(cfg, report):
        if modality == "text":
            fams = [TaskFamily("text", c, o, q) for c in CATEGORIES for o in ORDERS for q in ("general", "specific")]
            fams += [TaskFamily("text", c, o, "general", s) for c in ("monotypic", "polytypic-unique")
                     for o in ORDERS for s in SEPARATOR_CONDITIONS if s != "normal"]
        else:
            fams = [TaskFamily("visual", c, o, "general", grid_size=g) for c in ("monotypic", "polytypic-unique")
                    for o in ORDERS for g in cfg.grid_sizes]
        table = evaluate_behavioral(model, EvalConfig(fams, cfg.counts, cfg.n_samples, seed=derive_seed("behavioral", cfg.seed)))
        for r in table.rows:
            cell = "/".join(str(r[k]) for k in ("modality", "category", "order", "question", "separator_condition"))
            if modality == "visual":
                cell += f"/G={r['grid_size']}"
            for j in range(r["n"]):
                report.record(cell, "accuracy", float(j < r["correct"]), count=r["count"])
            for j in range(r["n"]):
                report.record(f"{modality}/count={r['count']}", "accuracy", float(j < r["correct"]))
    report.finalize()
    for modality in _modalities(report):
        cells = sorted(c for c in report.aggregates if c.startswith(modality + "/") and "count=" not in c)
        report.tables[f"accuracy_{modality}"] = Table(
            np.array([[report.cell_mean(c, "accuracy")] for c in cells]), cells, ["accuracy"])
    report.metadata["headline"] = ("text/count=9", "accuracy")
    return report


def exp_representational(cfg: ExperimentConfig) -> ExperimentReport:
    report = _new_report(cfg, "embedding_pca_and_cross_type_cosine")
    ((_, model),) = _models(cfg, report, want_visual=False)
    samples = [_text(9, "monotypic", cfg.probe_order, derive_seed("representational", cfg.seed, t), (t,)) for t in FRUITS]
    caches = [capture(model, s) for s in samples]
    for layer in range(model.n_layers):
        for role in ("item", "separator"):
            emb = collect_embeddings(model, samples, layer, role, caches=caches)
            # separators are labeled by the position they precede
            positions = range(1, 10) if role == "item" else range(2, 10)
            cos = cross_type_cosine(emb, positions)
            diag = float(np.mean(np.diag(cos)))
            off = float((cos.sum() - np.trace(cos)) / (cos.size - len(cos)))
            report.record(f"{role}/layer={layer + 1}", "cosine_diag_minus_off", diag - off)
            if role == "item":
                pca = pca_project(emb, 2, seed=cfg.seed)
                for lab, (x, y) in zip(emb.labels, pca.coords):
                    report.record(f"item/layer={layer + 1}/pc", "pc1", x, **lab)
                    report.record(f"item/layer={layer + 1}/pc", "pc2", y, **lab)
                    report.record(f"item/layer={layer + 1}/position={lab['list_position']}", "pc1", x)
                report.stats[f"explained_variance/layer={layer + 1}"] = pca.explained_variance_ratio.tolist()
                if layer == model.n_layers - 1 or layer == model.n_layers // 2:
                    report.tables[f"cosine_item_layer{layer + 1}"] = Table(cos, list(positions), list(positions))
    report.finalize()
    n = model.n_layers
    report.tables["cosine_structure_by_layer"] = Table(
        np.array([[report.cell_mean(f"{r}/layer={l}", "cosine_diag_minus_off") for r in ("item", "separator")]
                  for l in range(1, n + 1)]), list(range(1, n + 1)), ["item", "separator"])
    report.tables["pc1_by_position"] = Table(
        np.array([[report.cell_mean(f"item/layer={l}/position={p}", "pc1") for p in range(1, 10)]
                  for l in range(1, n + 1)]), list(range(1, n + 1)), list(range(1, 10)))
    report.reference = {"note": "same-position items of different types align; PCA orders items by position"}
    report.metadata["headline"] = (f"item/layer={n}", "cosine_diag_minus_off")
    return report


# -- registry / suite -----------------------------------------------------------------------


REGISTRY: dict[str, Callable[[ExperimentConfig], ExperimentReport]] = {
    "zero_locate": exp_zero_locate,
    "interchange_locate": exp_interchange_locate,
    "item_locate": exp_item_locate,
    "per_item_latent": exp_per_item_latent,
    "continued_counting": exp_continued_counting,
    "type_specific": exp_type_specific,
    "max_latent": exp_max_latent,
    "layerwise": exp_layerwise,
    "linear_additivity": exp_linear_additivity,
    "separator_shortcut": exp_separator_shortcut,
    "behavioral": exp_behavioral,
    "representational": exp_representational,
}

# every analysis the suite must cover -> experiments producing it
COVERAGE: dict[str, tuple[str, ...]] = {
    "representational geometry (PCA, cross-type cosine)": ("representational",),
    "CountScope per-item decoding": ("per_item_latent",),
    "input localization by zero patching": ("zero_locate",),
    "input localization by interchange patching": ("interchange_locate",),
    "item-level localization and foreground/background": ("item_locate",),
    "per-item latent counts": ("per_item_latent",),
    "continued counting": ("continued_counting",),
    "type-specific and resetting counters": ("type_specific",),
    "maximum latent count": ("max_latent",),
    "layerwise emergence": ("layerwise",),
    "linear additivity of position differences": ("linear_additivity",),
    "separator shortcut": ("separator_shortcut",),
    "behavioral accuracy and separator ablations": ("behavioral",),
}


def _new_report(cfg: ExperimentConfig, schema: str) -> ExperimentReport:
    cfg.validate()
    return ExperimentReport(
        name=cfg.name,
        schema=schema,
        config=cfg.to_json(),
        metadata={
            "tool_version": __version__,
            "config_hash": cfg.hash(),
            "seed": cfg.seed,
            "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
        },
    )


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> ExperimentReport:
    cfg.validate()
    t0 = time.time()
    report = REGISTRY[cfg.name](cfg)
    report.metadata["seconds"] = round(time.time() - t0, 2)
    if out_dir is not None:
        report.write(Path(out_dir))
    return report


def run_all(base: ExperimentConfig, run_dir, names=None, overrides: dict | None = None) -> dict:
    """Run every registered experiment with shared seeds; failures are recorded, not raised.

    ``overrides`` maps experiment name -> dict of config fields for that experiment.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    names = list(names or REGISTRY)
    entries = []
    for name in names:
        fields = {**dataclasses.asdict(base), "name": name, **(overrides or {}).get(name, {})}
        entry = {"name": name}
        try:
            cfg = ExperimentConfig(**fields)
            report = run_experiment(cfg, run_dir / name)
            entry.update({
                "status": "ok",
                "schema": report.schema,
                "report": f"{name}/report.json",
                "aggregates": f"{name}/aggregates.json",
                "checkpoints": report.metadata.get("checkpoints", {}),
                "config_hash": report.metadata["config_hash"],
                "summary": report.summary(),
                "flags": report.flags,
            })
            log.info(report.summary())
        except Exception as exc:  # recorded; the suite continues
            entry.update({"status": "failed", "error": f"{type(exc).__name__}: {exc}",
                          "traceback": traceback.format_exc(limit=3)})
            log.error("experiment %s failed: %s", name, exc)
        entries.append(entry)
    ran = {e["name"] for e in entries if e["status"] == "ok"}
    coverage = {topic: [n for n in exps if n in ran] for topic, exps in COVERAGE.items()}
    manifest = {
        "tool_version": __version__,
        "seed": base.seed,
        "config_hash": base.hash(),
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "experiments": entries,
        "coverage": coverage,
        "coverage_complete": all(coverage.values()),
    }
    with open(run_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return manifest
