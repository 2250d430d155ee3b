"""Synthetic textual and visual counting samples.

Every generator is a pure function of its config (the seed lives in the
config), so workers can call them concurrently.
"""

from __future__ import annotations

import json
import random
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Literal

from .vocab import (
    ALT_SEPARATORS,
    BACKGROUND,
    BOS,
    COLORS,
    FRUIT_PLURALS,
    FRUITS,
    PAD,
    PLACEHOLDER,
    SHAPES,
    Vocabulary,
    cell_token,
    default_vocab,
    detokenize,
    shape_plural,
)

Category = Literal["monotypic", "polytypic-replicate", "polytypic-unique"]
Order = Literal["question-first", "question-last"]
QuestionKind = Literal["specific", "general"]
SeparatorCondition = Literal["normal", "various", "less", "more", "none"]

CATEGORIES = ("monotypic", "polytypic-replicate", "polytypic-unique")
ORDERS = ("question-first", "question-last")
QUESTIONS = ("specific", "general")
SEPARATOR_CONDITIONS = ("normal", "various", "less", "more", "none")
GRID_SIZES = (3, 6, 10)

# role labels
ITEM, SEPARATOR, QUESTION, PATCH, SPECIAL, PLACEHOLDER_ROLE = (
    "item", "separator", "question", "image-patch", "special", "placeholder",
)


class ConfigError(ValueError):
    """Invalid task configuration."""


@dataclass(frozen=True)
class TextTaskConfig:
    count: int
    category: str = "monotypic"
    order: str = "question-last"
    question: str = "general"
    separator_condition: str = "normal"
    seed: int = 0
    # restricts the item pool (held-out splits); None means all nine fruits
    item_types: tuple[str, ...] | None = None

    def validate(self) -> None:
        if not 1 <= self.count <= 9:
            raise ConfigError(f"count must be in 1..9, got {self.count}")
        if self.category not in CATEGORIES:
            raise ConfigError(f"unknown category {self.category!r}")
        if self.order not in ORDERS:
            raise ConfigError(f"unknown order {self.order!r}")
        if self.question not in QUESTIONS:
            raise ConfigError(f"unknown question kind {self.question!r}")
        if self.separator_condition not in SEPARATOR_CONDITIONS:
            raise ConfigError(f"unknown separator condition {self.separator_condition!r}")
        pool = self.pool
        if any(t not in FRUITS for t in pool):
            raise ConfigError(f"unknown item types in {pool}")
        if self.category == "polytypic-unique" and self.count > len(pool):
            raise ConfigError(
                f"polytypic-unique needs count <= {len(pool)} item types, got {self.count}"
            )
        if self.category == "polytypic-replicate" and self.count > 1 and len(pool) < 2:
            raise ConfigError("polytypic-replicate needs at least two item types")

    @property
    def pool(self) -> tuple[str, ...]:
        return tuple(self.item_types) if self.item_types else FRUITS


@dataclass(frozen=True)
class VisualConfig:
    count: int
    category: str = "monotypic"
    grid_size: int = 6
    order: str = "question-last"
    question: str = "general"
    seed: int = 0

    def validate(self) -> None:
        if self.category not in CATEGORIES:
            raise ConfigError(f"unknown category {self.category!r}")
        if self.grid_size < 1:
            raise ConfigError("grid_size must be positive")
        if not 1 <= self.count <= 9:
            raise ConfigError(f"count must be in 1..9, got {self.count}")
        if self.count > self.grid_size**2:
            raise ConfigError(
                f"count {self.count} does not fit a {self.grid_size}x{self.grid_size} grid"
            )
        if self.order not in ORDERS or self.question not in QUESTIONS:
            raise ConfigError("invalid order/question")


@dataclass
class VisualScene:
    grid: list[list[tuple[str, str] | None]]  # (shape, color) or None for background
    count: int
    category: str
    grid_size: int
    seed: int

    def cells(self) -> list[tuple[int, tuple[str, str]]]:
        """Occupied cells as (row-major index, (shape, color)), in row-major order."""
        out = []
        for r, row in enumerate(self.grid):
            for c, cell in enumerate(row):
                if cell is not None:
                    out.append((r * self.grid_size + c, cell))
        return out


@dataclass
class CountingSample:
    tokens: list[str]
    roles: list[str]
    ground_truth: int
    item_positions: list[int]
    separator_positions: list[int]
    question_span: tuple[int, int]  # half-open
    context_span: tuple[int, int]  # half-open
    config: dict = field(default_factory=dict)
    seed: int = 0
    modality: str = "text"
    # per list item (in order): its type string; parallels `list_positions`
    item_types: list[str] = field(default_factory=list)
    # all count-bearing list entries in order, whatever the question targets
    list_positions: list[int] = field(default_factory=list)
    patch_span: tuple[int, int] | None = None
    grid_size: int | None = None

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def answer_position(self) -> int:
        """Position whose next-token logits carry the answer digit."""
        return len(self.tokens) - 1

    def ids(self, vocab: Vocabulary | None = None) -> list[int]:
        return (vocab or default_vocab()).ids(self.tokens)

    def render(self) -> str:
        """Human-readable prompt; question and context sit on separate lines."""
        qs, qe = self.question_span
        cs, ce = self.context_span
        if self.modality == "visual":
            grid = " ".join(self.tokens[cs:ce])
            question = detokenize(self.tokens[qs:qe])
            parts = [(qs, question), (cs, grid)]
        else:
            parts = [(qs, detokenize(self.tokens[qs:qe])), (cs, detokenize(self.tokens[cs:ce]))]
        parts.sort()
        return "\n".join(p for _, p in parts if p)

    def separator_index(self, pos: int) -> int:
        """1-based index of the list item preceding separator ``pos``."""
        return sum(1 for p in self.list_positions if p < pos)

    def to_json(self) -> dict:
        """Manifest record: {tokens, roles, ground_truth, spans, config, seed, ...}."""
        return {
            "tokens": list(self.tokens),
            "roles": list(self.roles),
            "ground_truth": self.ground_truth,
            "spans": {
                "question": list(self.question_span),
                "context": list(self.context_span),
                "items": list(self.item_positions),
                "separators": list(self.separator_positions),
                "list": list(self.list_positions),
                "patches": list(self.patch_span) if self.patch_span else None,
            },
            "config": self.config,
            "seed": self.seed,
            "modality": self.modality,
            "item_types": list(self.item_types),
            "grid_size": self.grid_size,
        }

    @classmethod
    def from_json(cls, d: dict) -> "CountingSample":
        spans = d["spans"]
        return cls(
            tokens=list(d["tokens"]),
            roles=list(d["roles"]),
            ground_truth=d["ground_truth"],
            item_positions=list(spans["items"]),
            separator_positions=list(spans["separators"]),
            question_span=tuple(spans["question"]),
            context_span=tuple(spans["context"]),
            config=d.get("config", {}),
            seed=d.get("seed", 0),
            modality=d.get("modality", "text"),
            item_types=list(d.get("item_types", [])),
            list_positions=list(spans.get("list", spans["items"])),
            patch_span=tuple(spans["patches"]) if spans.get("patches") else None,
            grid_size=d.get("grid_size"),
        )


def text_question(kind: str, order: str, item: str | None) -> list[str]:
    subject = FRUIT_PLURALS[item] if kind == "specific" else "items"
    where = "following" if order == "question-first" else "above"
    return ["Question", ":", "How", "many", subject, "are", "there", "in", "the", where, "sentence", "?"]


def visual_question(kind: str, target: tuple[str, str] | None) -> list[str]:
    if kind == "specific":
        shape, color = target
        subject = [color, shape_plural(shape)]
    else:
        subject = ["objects"]
    return ["How", "many", *subject, "are", "there", "in", "the", "image", "?"]


def _draw_items(cfg: TextTaskConfig, rng: random.Random) -> tuple[list[str], str | None]:
    """Item list and, for specific questions, the queried type."""
    pool = list(cfg.pool)
    if cfg.category == "monotypic":
        items = [rng.choice(pool)] * cfg.count
        return items, (items[0] if cfg.question == "specific" else None)
    if cfg.category == "polytypic-unique":
        items = rng.sample(pool, cfg.count)
        return items, (rng.choice(items) if cfg.question == "specific" else None)
    if cfg.question == "specific" and cfg.count > 1:
        # queried type count uniform in 1..N-1, the rest drawn from the other types
        target = rng.choice(pool)
        n_target = rng.randint(1, cfg.count - 1)
        others = [t for t in pool if t != target]
        items = [target] * n_target + [rng.choice(others) for _ in range(cfg.count - n_target)]
        rng.shuffle(items)
        return items, target
    while True:
        items = [rng.choice(pool) for _ in range(cfg.count)]
        if cfg.count == 1 or len(set(items)) > 1:
            return items, (rng.choice(items) if cfg.question == "specific" else None)


def _separators(cfg: TextTaskConfig, n_gaps: int, rng: random.Random) -> list[list[str]]:
    """Separator tokens for each gap between consecutive items."""
    gaps = [[","] for _ in range(n_gaps)]
    cond = cfg.separator_condition
    if cond == "normal" or n_gaps == 0:
        return gaps
    if cond == "none":
        return [[] for _ in range(n_gaps)]
    chosen = [rng.random() < 0.5 for _ in range(n_gaps)]
    if not any(chosen):
        chosen[rng.randrange(n_gaps)] = True
    for g, hit in enumerate(chosen):
        if not hit:
            continue
        if cond == "various":
            gaps[g] = [rng.choice(ALT_SEPARATORS)]
        elif cond == "less":
            gaps[g] = []
        elif cond == "more":
            gaps[g] = [",", ","]
    return gaps


def _assemble(
    question: list[str],
    context: list[tuple[str, str]],  # (token, role)
    order: str,
    prefix: list[tuple[str, str]] = (),
) -> tuple[list[str], list[str], tuple[int, int], tuple[int, int]]:
    tokens = [BOS] + [t for t, _ in prefix]
    roles = [SPECIAL] + [r for _, r in prefix]
    if order == "question-first":
        qs = len(tokens)
        tokens += question
        roles += [QUESTION] * len(question)
        cs = len(tokens)
        tokens += [t for t, _ in context]
        roles += [r for _, r in context]
        return tokens, roles, (qs, qs + len(question)), (cs, len(tokens))
    cs = len(tokens)
    tokens += [t for t, _ in context]
    roles += [r for _, r in context]
    qs = len(tokens)
    tokens += question
    roles += [QUESTION] * len(question)
    return tokens, roles, (qs, len(tokens)), (cs, qs)


def build_text_sample(
    items: list[str],
    gaps: list[list[str]],
    order: str,
    question: str,
    target: str | None = None,
    config: dict | None = None,
    seed: int = 0,
) -> CountingSample:
    """Lay out an explicit item list; shared by all text generators."""
    context: list[tuple[str, str]] = []
    for i, item in enumerate(items):
        if i:
            context += [(s, SEPARATOR) for s in gaps[i - 1]]
        context.append((item, ITEM))
    if question == "specific" and target is None:
        target = items[0]
    q = text_question(question, order, target)
    tokens, roles, qspan, cspan = _assemble(q, context, order)
    list_positions = [p for p, r in enumerate(roles) if r == ITEM]
    if question == "specific":
        counted = [p for p, it in zip(list_positions, items) if it == target]
    else:
        counted = list(list_positions)
    return CountingSample(
        tokens=tokens,
        roles=roles,
        ground_truth=len(counted),
        item_positions=counted,
        separator_positions=[p for p, r in enumerate(roles) if r == SEPARATOR],
        question_span=qspan,
        context_span=cspan,
        config=dict(config or {}),
        seed=seed,
        modality="text",
        item_types=list(items),
        list_positions=list_positions,
    )


def generate_text(cfg: TextTaskConfig) -> CountingSample:
    cfg.validate()
    rng = random.Random(cfg.seed)
    items, target = _draw_items(cfg, rng)
    # separator mutations draw from their own stream so items match the normal variant
    sep_rng = random.Random(cfg.seed * 1_000_003 + 17)
    gaps = _separators(cfg, len(items) - 1, sep_rng)
    return build_text_sample(items, gaps, cfg.order, cfg.question, target, _cfg_dict(cfg), cfg.seed)


def generate_text_separator_variant(cfg: TextTaskConfig) -> CountingSample:
    if cfg.separator_condition == "normal":
        raise ConfigError("separator variant requires a non-normal separator condition")
    return generate_text(cfg)


def generate_grouped(
    groups: list[tuple[str, int]],
    order: str = "question-first",
    question: str = "general",
    target: str | None = None,
    seed: int = 0,
) -> CountingSample:
    """Polytypic list where runs of one type are contiguous, e.g. [(apple, 2), (orange, 3)]."""
    items = [t for t, n in groups for _ in range(n)]
    if not 1 <= len(items) <= 9:
        raise ConfigError(f"grouped list length must be in 1..9, got {len(items)}")
    gaps = [[","] for _ in range(len(items) - 1)]
    cfg = {"groups": [list(g) for g in groups], "order": order, "question": question}
    return build_text_sample(items, gaps, order, question, target, cfg, seed)


def generate_scene(cfg: VisualConfig) -> VisualScene:
    cfg.validate()
    rng = random.Random(cfg.seed)
    g = cfg.grid_size
    pairs = [(s, c) for s in SHAPES for c in COLORS]
    if cfg.category == "monotypic":
        objs = [rng.choice(pairs)] * cfg.count
    elif cfg.category == "polytypic-unique":
        objs = rng.sample(pairs, cfg.count)
    else:
        while True:
            objs = [rng.choice(pairs) for _ in range(cfg.count)]
            if cfg.count == 1 or len(set(objs)) > 1:
                break
    grid: list[list[tuple[str, str] | None]] = [[None] * g for _ in range(g)]
    for obj in objs:
        # sampling-and-rejection placement on free cells
        while True:
            r, c = rng.randrange(g), rng.randrange(g)
            if grid[r][c] is None:
                grid[r][c] = obj
                break
    return VisualScene(grid=grid, count=cfg.count, category=cfg.category, grid_size=g, seed=cfg.seed)


def scene_to_tokens(scene: VisualScene, cfg: VisualConfig | None = None) -> CountingSample:
    cfg = cfg or VisualConfig(count=scene.count, category=scene.category, grid_size=scene.grid_size, seed=scene.seed)
    cells = scene.cells()
    target = None
    if cfg.question == "specific":
        target = random.Random(scene.seed + 1).choice(sorted({obj for _, obj in cells}))
    patches = []
    for row in scene.grid:
        for cell in row:
            if cell is None:
                patches.append((BACKGROUND, PATCH))
            else:
                patches.append((cell_token(*cell), ITEM))
    q = visual_question(cfg.question, target)
    tokens, roles, qspan, cspan = _assemble(q, patches, cfg.order)
    start = cspan[0]
    counted = [start + idx for idx, obj in cells if target is None or obj == target]
    d = _cfg_dict(cfg)
    return CountingSample(
        tokens=tokens,
        roles=roles,
        ground_truth=len(counted),
        item_positions=counted,
        separator_positions=[],
        question_span=qspan,
        context_span=cspan,
        config=d,
        seed=scene.seed,
        modality="visual",
        item_types=[cell_token(*obj) for _, obj in cells],
        list_positions=[start + idx for idx, _ in cells],
        patch_span=cspan,
        grid_size=scene.grid_size,
    )


def generate_visual(cfg: VisualConfig) -> CountingSample:
    return scene_to_tokens(generate_scene(cfg), cfg)


def pad_prefix(sample: CountingSample, k: int) -> CountingSample:
    """Insert ``k`` pad tokens after <bos>, shifting every annotated position by ``k``.

    Rendering is unchanged; only absolute positions move.
    """
    if k < 0:
        raise ConfigError("pad length must be non-negative")
    if k == 0:
        return sample
    if sample.modality != "text":
        raise ConfigError("prefix padding applies to text samples only")

    def shift(p: int) -> int:
        return p + k if p >= 1 else p

    return replace(
        sample,
        tokens=sample.tokens[:1] + [PAD] * k + sample.tokens[1:],
        roles=sample.roles[:1] + [SPECIAL] * k + sample.roles[1:],
        item_positions=[shift(p) for p in sample.item_positions],
        separator_positions=[shift(p) for p in sample.separator_positions],
        list_positions=[shift(p) for p in sample.list_positions],
        question_span=tuple(shift(p) for p in sample.question_span),
        context_span=tuple(shift(p) for p in sample.context_span),
        config={**sample.config, "prefix_pad": k},
    )


def placeholder_sample(
    n_placeholders: int,
    order: str = "question-last",
    question: str = "general",
    modality: str = "text",
    target: str | None = None,
) -> CountingSample:
    """Placeholder list plus counting question; only the probe uses this token."""
    context: list[tuple[str, str]] = []
    for i in range(n_placeholders):
        if i:
            context.append((",", SEPARATOR))
        context.append((PLACEHOLDER, PLACEHOLDER_ROLE))
    if modality == "visual":
        if question == "specific":
            raise ConfigError("visual probes only support the general question")
        q = visual_question("general", None)
    else:
        q = text_question(question, order, target or FRUITS[0])
    tokens, roles, qspan, cspan = _assemble(q, context, order)
    ph = [p for p, r in enumerate(roles) if r == PLACEHOLDER_ROLE]
    return CountingSample(
        tokens=tokens,
        roles=roles,
        ground_truth=n_placeholders,
        item_positions=ph,
        separator_positions=[p for p, r in enumerate(roles) if r == SEPARATOR],
        question_span=qspan,
        context_span=cspan,
        config={"probe": True, "n_placeholders": n_placeholders, "order": order, "question": question},
        modality="probe",
        item_types=[PLACEHOLDER] * n_placeholders,
        list_positions=ph,
    )


def _cfg_dict(cfg) -> dict:
    d = asdict(cfg)
    if d.get("item_types") is not None:
        d["item_types"] = list(d["item_types"])
    return d


def text_grid(
    counts: Iterable[int] = range(1, 10),
    categories: Iterable[str] = CATEGORIES,
    orders: Iterable[str] = ORDERS,
    questions: Iterable[str] = QUESTIONS,
    separator_conditions: Iterable[str] = ("normal",),
    n_per_cell: int = 1,
    seed: int = 0,
) -> list[TextTaskConfig]:
    """All configuration cells, each with ``n_per_cell`` derived seeds."""
    out = []
    for cat in categories:
        for order in orders:
            for q in questions:
                for sc in separator_conditions:
                    for n in counts:
                        for j in range(n_per_cell):
                            s = derive_seed(seed, cat, order, q, sc, n, j)
                            out.append(TextTaskConfig(n, cat, order, q, sc, s))
    return out


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary printable parts (hash() is salted per process)."""
    import hashlib

    h = hashlib.sha256("|".join(map(str, parts)).encode()).digest()
    return int.from_bytes(h[:8], "little") >> 1


def write_jsonl(samples: Iterable[CountingSample], path) -> None:
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_json(), sort_keys=True) + "\n")


def read_jsonl(path) -> list[CountingSample]:
    with open(path) as fh:
        return [CountingSample.from_json(json.loads(line)) for line in fh if line.strip()]


def with_seed(cfg, seed: int):
    return replace(cfg, seed=seed)
