"""Answer-digit training, behavioral evaluation and finite-difference gradient checks."""

from __future__ import annotations

import csv
import logging
import math
import random
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch
import torch.nn.functional as F

from .dataset import (
    CATEGORIES,
    ORDERS,
    QUESTIONS,
    ConfigError,
    CountingSample,
    TextTaskConfig,
    VisualConfig,
    derive_seed,
    generate_text,
    generate_visual,
    pad_prefix,
)
from .model import (
    CountingTransformer,
    InputError,
    ModelConfig,
    NumericError,
    batch_inputs,
    save_checkpoint,
)
from .vocab import FRUITS, default_vocab

log = logging.getLogger(__name__)

HOLDOUT_TYPES = ("fig", "cherry", "plum")


class TrainingDiverged(NumericError):
    def __init__(self, msg: str, last_checkpoint: str | None):
        super().__init__(msg)
        self.last_checkpoint = last_checkpoint


@dataclass
class TaskFamily:
    """One curriculum component; counts are drawn uniformly from ``counts`` (repeat entries to weight them)."""

    modality: str = "text"
    category: str = "monotypic"
    order: str = "question-last"
    question: str = "general"
    separator_condition: str = "normal"
    grid_size: int = 6
    weight: float = 1.0
    counts: tuple[int, ...] = tuple(range(1, 10))

    def make(self, count: int, seed: int, item_types=None) -> CountingSample:
        if self.modality == "visual":
            return generate_visual(
                VisualConfig(count, self.category, self.grid_size, self.order, self.question, seed)
            )
        return generate_text(
            TextTaskConfig(count, self.category, self.order, self.question, self.separator_condition, seed, item_types)
        )


def default_text_curriculum() -> list[TaskFamily]:
    fams = []
    for cat in CATEGORIES:
        for order in ORDERS:
            for q in QUESTIONS:
                # type-filtered counting is the hardest cell and the only place
                # held-out monotypic types meet the specific question; long lists
                # are repeated so large per-type counts are seen for every type
                if cat == "polytypic-replicate":
                    w = 3.0 if q == "specific" else 0.5
                    counts = tuple(range(1, 10)) + (7, 8, 9) * 2 if q == "specific" else tuple(range(1, 10))
                else:
                    w, counts = 1.0, tuple(range(1, 10))
                fams.append(TaskFamily("text", cat, order, q, weight=w, counts=counts))
    return fams


def default_visual_curriculum() -> list[TaskFamily]:
    fams = []
    for g, w in ((3, 0.5), (6, 1.0), (10, 0.5)):
        for cat in ("monotypic", "polytypic-unique"):
            for order in ORDERS:
                fams.append(TaskFamily("visual", cat, order, "general", grid_size=g, weight=w))
    return fams


@dataclass
class TrainConfig:
    curriculum: list[TaskFamily] = field(default_factory=default_text_curriculum)
    batch_size: int = 32
    steps: int = 2000
    learning_rate: float = 1e-3
    warmup_steps: int = 100
    min_lr_ratio: float = 0.1
    betas: tuple[float, float] = (0.9, 0.98)
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    eval_every: int = 250
    eval_samples_per_cell: int = 4
    checkpoint_every: int = 500
    holdout_item_types: tuple[str, ...] = HOLDOUT_TYPES
    # text samples get 0..max_prefix_pad pad tokens after <bos>, so absolute
    # position alone no longer gives away the list length
    max_prefix_pad: int = 0
    seed: int = 0

    def __post_init__(self):
        self.curriculum = [TaskFamily(**f) if isinstance(f, dict) else f for f in self.curriculum]
        for f in self.curriculum:
            f.counts = tuple(f.counts)
        self.betas = tuple(self.betas)
        self.holdout_item_types = tuple(self.holdout_item_types)

    def validate(self) -> None:
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be non-negative")
        if not self.curriculum:
            raise ConfigError("empty curriculum")
        covered = set()
        for f in self.curriculum:
            covered |= set(f.counts)
        if covered != set(range(1, 10)):
            raise ConfigError(f"curriculum must cover counts 1..9, covers {sorted(covered)}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.max_prefix_pad < 0:
            raise ConfigError("max_prefix_pad must be non-negative")

    def lr_at(self, step: int) -> float:
        if self.warmup_steps and step < self.warmup_steps:
            return self.learning_rate * (step + 1) / self.warmup_steps
        span = max(1, self.steps - self.warmup_steps)
        frac = min(1.0, (step - self.warmup_steps) / span)
        cos = 0.5 * (1 + math.cos(math.pi * frac))
        return self.learning_rate * (self.min_lr_ratio + (1 - self.min_lr_ratio) * cos)


def train_pool(category: str, holdout: tuple[str, ...]) -> tuple[str, ...] | None:
    """Monotypic training never sees the held-out types; polytypic lists need the full set."""
    if category == "monotypic" and holdout:
        return tuple(t for t in FRUITS if t not in holdout)
    return None


def sample_batch(cfg: TrainConfig, step: int) -> list[CountingSample]:
    rng = random.Random(derive_seed("batch", cfg.seed, step))
    weights = [f.weight for f in cfg.curriculum]
    out = []
    for b in range(cfg.batch_size):
        fam = rng.choices(cfg.curriculum, weights)[0]
        count = rng.choice(fam.counts)
        seed = derive_seed("train", cfg.seed, step, b)
        sample = fam.make(count, seed, train_pool(fam.category, cfg.holdout_item_types))
        if cfg.max_prefix_pad and sample.modality == "text":
            sample = pad_prefix(sample, random.Random(derive_seed("pad", seed)).randint(0, cfg.max_prefix_pad))
        out.append(sample)
    return out


# -- loss and gradients ------------------------------------------------------


def answer_logits(model: CountingTransformer, samples: list[CountingSample]) -> torch.Tensor:
    ids, regions = batch_inputs(samples)
    logits, _ = model.run(ids, regions)
    pos = torch.tensor([s.answer_position for s in samples])
    return logits[torch.arange(len(samples)), pos]


def loss_from_logits(logits: torch.Tensor, samples: list[CountingSample]) -> torch.Tensor:
    """Mean cross-entropy of the ground-truth digit at the answer position."""
    vocab = default_vocab()
    targets = []
    for s in samples:
        tid = vocab.digit_id(s.ground_truth)
        if tid is None:
            raise InputError(f"sample has no single-digit answer: {s.ground_truth}")
        targets.append(tid)
    return F.cross_entropy(logits, torch.tensor(targets))


def loss(model: CountingTransformer, samples: list[CountingSample]) -> torch.Tensor:
    if not samples:
        raise InputError("empty batch")
    return loss_from_logits(answer_logits(model, samples), samples)


def gradients(model: CountingTransformer, samples: list[CountingSample]) -> dict[str, torch.Tensor]:
    """Reverse-mode derivatives of the mean batch loss for every weight."""
    model.zero_grad(set_to_none=True)
    value = loss(model, samples)
    if not torch.isfinite(value):
        bad = _first_nonfinite(model, samples)
        raise NumericError(f"non-finite loss (sample {bad})")
    value.backward()
    return {n: (w.grad.detach().clone() if w.grad is not None else torch.zeros_like(w)) for n, w in model.named_weights()}


def _first_nonfinite(model, samples) -> int | None:
    with torch.no_grad():
        for i, s in enumerate(samples):
            if not torch.isfinite(loss(model, [s])):
                return i
    return None


def finite_difference_gradients(
    model: CountingTransformer,
    samples: list[CountingSample],
    h: float = 1e-4,
    names: Iterable[str] | None = None,
) -> dict[str, torch.Tensor]:
    """Central differences of the mean loss, one weight entry at a time (slow; tiny models only)."""
    out = {}
    with torch.no_grad():
        for name, w in model.named_weights():
            if names is not None and name not in names:
                continue
            g = torch.zeros_like(w)
            flat, gflat = w.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = loss(model, samples).item()
                flat[i] = orig - h
                down = loss(model, samples).item()
                flat[i] = orig
                gflat[i] = (up - down) / (2 * h)
            out[name] = g
    return out


# -- training loop -------------------------------------------------------------


@dataclass
class TrainReport:
    losses: list[float]
    accuracy: "AccuracyTable | None"
    checkpoint_path: str | None
    log_path: str | None = None
    steps: int = 0
    wall_seconds: float = 0.0


def train(
    cfg: TrainConfig,
    model_cfg: ModelConfig | None = None,
    out_dir=None,
    model: CountingTransformer | None = None,
    eval_config: "EvalConfig | None" = None,
    progress: Callable[[int, float], None] | None = None,
) -> tuple[CountingTransformer, TrainReport]:
    cfg.validate()
    torch.manual_seed(cfg.seed)
    if model is None:
        model = CountingTransformer(model_cfg or ModelConfig(seed=cfg.seed))
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=cfg.betas, eps=cfg.adam_eps)
    out = Path(out_dir) if out_dir is not None else None
    log_rows = []
    losses: list[float] = []
    last_ckpt = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        last_ckpt = str(out / "step_0.ckpt")
        save_checkpoint(model, last_ckpt, step=0, extra={"train": _cfg_json(cfg)})
    t0 = time.time()
    for step in range(cfg.steps):
        lr = cfg.lr_at(step)
        for group in opt.param_groups:
            group["lr"] = lr
        batch = sample_batch(cfg, step)
        opt.zero_grad(set_to_none=True)
        value = loss(model, batch)
        if not torch.isfinite(value):
            raise TrainingDiverged(f"loss became {value.item()} at step {step}", last_ckpt)
        value.backward()
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        if lr > 0:
            opt.step()
        losses.append(value.item())
        row = {"step": step + 1, "loss": value.item(), "lr": lr}
        if cfg.eval_every and (step + 1) % cfg.eval_every == 0:
            quick = evaluate_behavioral(model, quick_eval_config(cfg))
            row["eval_accuracy"] = quick.overall()
            log.info("step %d loss %.4f eval acc %.3f", step + 1, value.item(), row["eval_accuracy"])
            model.train()
        if progress:
            progress(step + 1, value.item())
        log_rows.append(row)
        if out is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            last_ckpt = str(out / f"step_{step + 1}.ckpt")
            save_checkpoint(model, last_ckpt, step=step + 1, extra={"train": _cfg_json(cfg)})
    model.eval()
    table = evaluate_behavioral(model, eval_config or quick_eval_config(cfg)) if cfg.curriculum else None
    ckpt = None
    log_path = None
    if out is not None:
        ckpt = str(out / "model.ckpt")
        save_checkpoint(model, ckpt, step=cfg.steps, extra={"train": _cfg_json(cfg)})
        log_path = str(out / "train_log.csv")
        with open(log_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["step", "loss", "lr", "eval_accuracy"])
            w.writeheader()
            w.writerows(log_rows)
    return model, TrainReport(losses, table, ckpt, log_path, cfg.steps, time.time() - t0)


def _cfg_json(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    for f in d["curriculum"]:
        f["counts"] = list(f["counts"])
    return d


# -- behavioral evaluation -------------------------------------------------------


@dataclass
class EvalConfig:
    families: list[TaskFamily]
    counts: tuple[int, ...] = tuple(range(1, 10))
    samples_per_cell: int = 8
    holdout_item_types: tuple[str, ...] = HOLDOUT_TYPES
    seed: int = 12345
    batch_size: int = 64

    def __post_init__(self):
        self.families = [TaskFamily(**f) if isinstance(f, dict) else f for f in self.families]


def quick_eval_config(cfg: TrainConfig) -> EvalConfig:
    fams = {(f.modality, f.category, f.order, f.question, f.separator_condition, f.grid_size): f for f in cfg.curriculum}
    return EvalConfig(list(fams.values()), samples_per_cell=cfg.eval_samples_per_cell,
                      holdout_item_types=cfg.holdout_item_types, seed=derive_seed("eval", cfg.seed))


def eval_pool(category: str, holdout: tuple[str, ...]) -> tuple[str, ...] | None:
    if category == "monotypic" and holdout:
        return tuple(holdout)
    return None


@dataclass
class AccuracyTable:
    """Rows keyed by (modality, category, order, question, separator, grid, count)."""

    rows: list[dict]

    def overall(self) -> float:
        n = sum(r["n"] for r in self.rows)
        return sum(r["correct"] for r in self.rows) / n if n else float("nan")

    def accuracy(self, **where) -> float:
        sel = [r for r in self.rows if all(r[k] == v for k, v in where.items())]
        n = sum(r["n"] for r in sel)
        return sum(r["correct"] for r in sel) / n if n else float("nan")

    def pivot(self, key: str) -> dict:
        out: dict = {}
        for r in self.rows:
            c = out.setdefault(r[key], [0, 0])
            c[0] += r["correct"]
            c[1] += r["n"]
        return {k: v[0] / v[1] for k, v in out.items()}

    def to_csv(self, path) -> None:
        keys = ["modality", "category", "order", "question", "separator_condition", "grid_size", "count", "n", "correct", "accuracy"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: r[k] for k in keys})


def predict_digits(model: CountingTransformer, samples: list[CountingSample], batch_size: int = 64) -> list[int]:
    """Argmax over the nine digit tokens at each sample's answer position."""
    digit_ids = torch.tensor(default_vocab().digit_ids)
    preds = []
    with torch.no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i : i + batch_size]
            lg = answer_logits(model, chunk)[:, digit_ids]
            preds += (lg.argmax(-1) + 1).tolist()
    return preds


def evaluate_behavioral(model: CountingTransformer, eval_cfg: EvalConfig, predictor=None) -> AccuracyTable:
    """Accuracy per (category x order x question x separator condition x count) cell."""
    was_training = model.training
    model.eval()
    samples, keys = [], []
    for fam in eval_cfg.families:
        for n in eval_cfg.counts:
            if n not in fam.counts:
                continue
            if fam.modality == "visual" and n > fam.grid_size**2:
                continue
            for j in range(eval_cfg.samples_per_cell):
                seed = derive_seed("heldout", eval_cfg.seed, fam.modality, fam.category, fam.order,
                                   fam.question, fam.separator_condition, fam.grid_size, n, j)
                try:
                    samples.append(fam.make(n, seed, eval_pool(fam.category, eval_cfg.holdout_item_types)))
                except ConfigError:
                    continue
                keys.append((fam.modality, fam.category, fam.order, fam.question,
                             fam.separator_condition, fam.grid_size if fam.modality == "visual" else None, n))
    preds = (predictor or predict_digits)(model, samples, eval_cfg.batch_size) if samples else []
    cells: dict = {}
    for key, s, p in zip(keys, samples, preds):
        c = cells.setdefault(key, [0, 0])
        c[0] += int(p == s.ground_truth)
        c[1] += 1
    rows = []
    for key, (correct, n) in cells.items():
        mod, cat, order, q, sep, g, count = key
        rows.append({"modality": mod, "category": cat, "order": order, "question": q,
                     "separator_condition": sep, "grid_size": g, "count": count,
                     "n": n, "correct": correct, "accuracy": correct / n})
    if was_training:
        model.train()
    return AccuracyTable(rows)
