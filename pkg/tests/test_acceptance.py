"""Acceptance criteria, one test each.

Criteria 6 to 9 and 11 need the trained checkpoints. They are trained from the
committed configs on first use and cached under $COUNTLAB_ACCEPT_DIR
(default runs/acceptance), keyed by the config file contents and package version.
"""

import functools
import hashlib
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from countlab import __version__
from countlab.activations import PATCH_EMBED, InterventionSpec, all_layers, capture, patched_logits
from countlab.analysis import UndefinedEntry, cosine_similarity_matrix, pca_project
from countlab.cli import main
from countlab.dataset import (
    CATEGORIES,
    ORDERS,
    QUESTIONS,
    TextTaskConfig,
    build_text_sample,
    generate_text,
    generate_visual,
    VisualConfig,
)
from countlab.experiments import (
    COVERAGE,
    REGISTRY,
    ExperimentConfig,
    continued_counting_expected,
    expected_table,
    max_latent_expected,
    run_experiment,
)
from countlab.metrics import ci_score, indirect_effect, kl_divergence, logit_difference
from countlab.model import FAMILIES, CountingTransformer, VisionConfig, next_token_distribution
from countlab.training import EvalConfig, TaskFamily, HOLDOUT_TYPES, evaluate_behavioral, gradients
from countlab.training import finite_difference_gradients
from countlab.vocab import tokenize

import oracles
from conftest import ACCEPTANCE, tiny_config
from expected_tables import CONTINUED_COUNTING, MAX_LATENT

ROOT = Path(__file__).resolve().parents[1]
ACCEPT_DIR = Path(os.environ.get("COUNTLAB_ACCEPT_DIR", ROOT / "runs" / "acceptance"))
WALL_BUDGET = 30 * 60


def criterion(n, title):
    """Record one PASS/FAIL line; the test body returns a detail string or raises."""

    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            t0 = time.time()
            try:
                detail = fn(*args, **kwargs)
            except BaseException as exc:
                msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
                ACCEPTANCE.append(f"criterion {n}: FAIL  {title}  [{time.time() - t0:.1f}s] {msg[:200]}")
                raise
            ACCEPTANCE.append(f"criterion {n}: PASS  {title}  [{time.time() - t0:.1f}s] {detail}")

        return run

    return wrap


def rel_err(a, b, floor=0.0):
    return abs(a - b) / max(abs(a), abs(b), floor) if a != b else 0.0


# -- 1 ---------------------------------------------------------------------------------


@criterion(1, "metric oracle equivalence")
def test_c1_metric_oracles():
    t0 = time.time()
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(1000):
        p = rng.uniform(1e-6, 1, size=4)
        c = ci_score(*p)
        worst = max(worst, rel_err(c, oracles.ci(*p)))
        assert c == -ci_score(p[1], p[0], p[3], p[2])
        assert -1 <= c <= 1
        worst = max(worst, rel_err(indirect_effect(*p), oracles.ie(*p)))
        z = rng.normal(scale=3, size=2)
        worst = max(worst, rel_err(logit_difference(*z), float(z[0]) - float(z[1])))
        a = oracles.softmax(rng.normal(scale=2, size=9))
        b = oracles.softmax(rng.normal(scale=2, size=9))
        k = kl_divergence(a, b)
        assert k >= 0
        worst = max(worst, rel_err(k, oracles.kl(a, b)))
    elapsed = time.time() - t0
    assert worst <= 1e-10, f"max relative error {worst:.3g}"
    assert elapsed < 10
    return f"max rel err {worst:.2g} over 1000 tuples x 4 metrics"


# -- 2 ---------------------------------------------------------------------------------

FD_FLOOR = 1e-6


@criterion(2, "gradient correctness (every weight, finite differences)")
def test_c2_gradients():
    t0 = time.time()
    model = CountingTransformer(tiny_config()).double()
    batch = [generate_text(TextTaskConfig(c, cat, order, seed=40 + c))
             for c, cat, order in ((1, "monotypic", "question-first"), (3, "polytypic-unique", "question-last"),
                                   (5, "polytypic-replicate", "question-first"), (7, "monotypic", "question-last"),
                                   (9, "polytypic-unique", "question-first"))]
    g = gradients(model, batch)
    fd = finite_difference_gradients(model, batch, h=1e-5)
    worst, n = 0.0, 0
    for name, a in g.items():
        f = fd[name]
        rel = (a - f).abs() / torch.clamp(a.abs() + f.abs(), min=FD_FLOOR)
        worst = max(worst, rel.max().item())
        n += a.numel()
    elapsed = time.time() - t0
    assert worst < 1e-4, f"max relative error {worst:.3g}"
    assert elapsed < 120
    return f"{n} entries, max rel err {worst:.2g} (denominator floor {FD_FLOOR})"


# -- 3 ---------------------------------------------------------------------------------


def _max_kl(a, b):
    return max(kl_divergence(next_token_distribution(x), next_token_distribution(y)) for x, y in zip(a, b))


@criterion(3, "patching identities")
def test_c3_patching_identities():
    t0 = time.time()
    worst = 0.0
    models = [CountingTransformer(tiny_config(seed=1)),
              CountingTransformer(tiny_config(seed=2, vision=VisionConfig(1, 10)))]
    for model in models:
        text = model.cfg.vision is None
        mk = (lambda n, s: generate_text(TextTaskConfig(n, seed=s))) if text else \
             (lambda n, s: generate_visual(VisualConfig(n, grid_size=6, seed=s)))
        s = mk(6, 1)
        cache = capture(model, s)
        for regime in ("online", "offline"):
            empty = InterventionSpec("zero", "resid_post", all_layers(model), (), regime=regime)
            worst = max(worst, _max_kl(patched_logits(model, s, empty, cache), cache.logits))
            for family in FAMILIES + (() if text else (PATCH_EMBED,)):
                for layer in range(model.n_layers if family != PATCH_EMBED else 1):
                    pmap = [(p, p) for p in range(len(s))]
                    spec = InterventionSpec("interchange", family, (layer,), pmap, cache, regime)
                    worst = max(worst, _max_kl(patched_logits(model, s, spec, cache), cache.logits))
        src, tgt = mk(3, 2), mk(8, 3)
        sc, tc = capture(model, src), capture(model, tgt)
        last = model.n_layers - 1
        spec = InterventionSpec("interchange", "resid_post", (last,), [(len(src) - 1, len(tgt) - 1)], sc)
        assert torch.equal(patched_logits(model, tgt, spec)[-1], sc.logits[-1])
        same = capture(model, mk(8, 4))
        for p in (len(tgt) - 1, len(tgt) - 3, 0):
            on = InterventionSpec("interchange", "resid_post", (last,), [(p, p)], same, "online")
            off = InterventionSpec("interchange", "resid_post", (last,), [(p, p)], same, "offline")
            a, b = patched_logits(model, tgt, on, tc)[-1], patched_logits(model, tgt, off, tc)[-1]
            assert torch.allclose(a, b, atol=1e-6, rtol=0), f"online/offline differ by {(a - b).abs().max()}"
    assert worst < 1e-12, f"identity KL {worst:.3g}"
    assert time.time() - t0 < 60
    return f"max identity KL {worst:.2g} over every hook family x both regimes, text + visual"


# -- 4 ---------------------------------------------------------------------------------


@criterion(4, "expected-answer tables")
def test_c4_expected_tables():
    t0 = time.time()
    cells = {"continued": 0, "max": 0}
    for k in (1, 2, 3):
        cc = expected_table(continued_counting_expected, k)
        ml = expected_table(max_latent_expected, k)
        assert cc.shape == ml.shape == (8, 8)
        assert cc.tolist() == CONTINUED_COUNTING[k], f"continued counting k={k}"
        assert ml.tolist() == MAX_LATENT[k], f"max latent k={k}"
        cells["continued"] += cc.size
        cells["max"] += ml.size
    assert cells == {"continued": 192, "max": 192}
    assert time.time() - t0 < 1
    return "192 + 192 cells match"


# -- 5 ---------------------------------------------------------------------------------

TEMPLATES = [
    (["apple"] * 5, "question-first", "general",
     "Question: How many items are there in the following sentence?\napple, apple, apple, apple, apple"),
    (["apple", "peach", "orange", "pear", "apple"], "question-first", "specific",
     "Question: How many apples are there in the following sentence?\napple, peach, orange, pear, apple"),
    (["apple"] * 5, "question-last", "general",
     "apple, apple, apple, apple, apple\nQuestion: How many items are there in the above sentence?"),
    (["apple", "peach", "fig", "apple", "mango"], "question-last", "specific",
     "apple, peach, fig, apple, mango\nQuestion: How many apples are there in the above sentence?"),
]


@criterion(5, "dataset conformance")
def test_c5_dataset():
    t0 = time.time()
    for items, order, question, expected in TEMPLATES:
        s = build_text_sample(items, [[","] for _ in items[1:]], order, question, "apple")
        assert s.render() == expected
    assert generate_visual(VisualConfig(3, grid_size=3)).render().splitlines()[-1] == \
        "How many objects are there in the image?"
    n = 0
    for i in range(10_000):
        cfg = TextTaskConfig(1 + i % 9, CATEGORIES[i % 3], ORDERS[(i // 3) % 2], QUESTIONS[(i // 6) % 2], seed=i)
        s = generate_text(cfg)
        # item-role tokens (of the asked type, for specific questions) reproduce the ground truth
        assert len(s.item_positions) == s.ground_truth
        assert all(s.roles[p] == "item" for p in s.item_positions)
        if cfg.question == "general":
            assert s.roles.count("item") == s.ground_truth
        assert generate_text(cfg).ids() == s.ids()
        assert [s.ids()[0]] + tokenize(s.render()) == s.ids()
        if cfg.category == "polytypic-unique":
            assert len(set(s.item_types)) == len(s.item_types)
        if cfg.category == "monotypic":
            assert len(set(s.item_types)) == 1
        n += 1
    elapsed = time.time() - t0
    assert elapsed < 30
    return f"5 templates byte-match; 4 invariants over {n} samples"


# -- 10 --------------------------------------------------------------------------------


@criterion(10, "PCA and cosine oracles")
def test_c10_analysis():
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        n, d = rng.integers(12, 60), rng.integers(3, 12)
        x = rng.normal(size=(n, d)) * np.geomspace(5, 0.2, d)
        res = pca_project(x, 2, seed=seed)
        vals, vecs, coords = oracles.pca_dense(x, 2)
        worst = max(worst, np.abs(res.eigenvalues - vals).max())
        for j in range(2):
            worst = max(worst, min(np.abs(res.components[:, j] - vecs[:, j]).max(),
                                   np.abs(res.components[:, j] + vecs[:, j]).max()))
            worst = max(worst, min(np.abs(res.coords[:, j] - coords[:, j]).max(),
                                   np.abs(res.coords[:, j] + coords[:, j]).max()))
    assert worst < 1e-8, f"PCA deviation {worst:.3g}"
    # constructed cosine cases, each checked entry by entry
    e = np.eye(4)
    m = cosine_similarity_matrix(e, e)
    assert np.array_equal(m, np.eye(4))
    v = np.array([[1.0, 2.0, -3.0], [0.5, 0.0, 1.0], [-2.0, 1.0, 1.0]])
    m = cosine_similarity_matrix(v, v)
    for i in range(3):
        assert abs(m[i, i] - 1) < 1e-12
        for j in range(3):
            assert m[i, j] == m[j, i]
            assert -1 <= m[i, j] <= 1
            direct = v[i] @ v[j] / np.linalg.norm(v[i]) / np.linalg.norm(v[j])
            assert abs(m[i, j] - direct) < 1e-12
    assert np.allclose(cosine_similarity_matrix(v, 7.5 * v), m, atol=1e-12)
    assert np.allclose(cosine_similarity_matrix(v, -v), -m, atol=1e-12)
    with pytest.raises(UndefinedEntry):
        cosine_similarity_matrix(np.zeros((1, 3)), v)
    return f"20 random sets, max deviation {worst:.2g}; cosine cases exact"


# -- trained checkpoints -----------------------------------------------------------------


def _trained(name: str, config: str) -> dict:
    cfg_path = ROOT / "configs" / config
    stamp = hashlib.sha256(cfg_path.read_bytes() + __version__.encode()).hexdigest()[:16]
    out = ACCEPT_DIR / name
    info = out / "train_report.json"
    if not (info.exists() and json.loads((out / "stamp.json").read_text() if (out / "stamp.json").exists()
                                         else "{}").get("stamp") == stamp):
        rc = main(["train", "--config", str(cfg_path), "--out", str(out)])
        assert rc == 0, f"training {name} exited {rc}"
        (out / "stamp.json").write_text(json.dumps({"stamp": stamp, "config": str(cfg_path)}))
    return {"checkpoint": str(out / "model.ckpt"), **json.loads(info.read_text())}


@pytest.fixture(scope="session")
def text_model():
    return _trained("train_text", "train_text.yaml")


@pytest.fixture(scope="session")
def visual_model():
    return _trained("train_visual", "train_visual.yaml")


def _families(categories, orders=ORDERS, questions=QUESTIONS, modality="text", grid=6):
    return [TaskFamily(modality, c, o, q, grid_size=grid) for c in categories for o in orders for q in questions]


@criterion(6, "toy training accuracy")
def test_c6_training(text_model, visual_model):
    from countlab.model import load_checkpoint

    text, _ = load_checkpoint(text_model["checkpoint"])
    tab = evaluate_behavioral(text, EvalConfig(_families(("monotypic", "polytypic-unique")), samples_per_cell=20,
                                               holdout_item_types=HOLDOUT_TYPES, seed=777))
    text_acc = tab.overall()
    vis, _ = load_checkpoint(visual_model["checkpoint"])
    vtab = evaluate_behavioral(vis, EvalConfig(_families(("monotypic",), questions=("general",), modality="visual"),
                                               samples_per_cell=20, seed=778))
    vis_acc = vtab.overall()
    walls = (text_model["wall_seconds"], visual_model["wall_seconds"])
    detail = (f"text held-out {text_acc:.3f} (need 0.95), visual 6x6 {vis_acc:.3f} (need 0.80); "
              f"train wall {walls[0] / 60:.1f} + {walls[1] / 60:.1f} min on {text_model['threads']} thread(s)")
    assert text_acc >= 0.95 and vis_acc >= 0.80, detail
    assert max(walls) < WALL_BUDGET, detail
    return detail


def _experiment(name, text_model, visual_model=None, **kw):
    cfg = ExperimentConfig(name=name, checkpoint=text_model["checkpoint"],
                           visual_checkpoint=visual_model["checkpoint"] if visual_model else None, **kw)
    return run_experiment(cfg, ACCEPT_DIR / "experiments" / name)


@criterion(7, "per-item latent counts (CountScope)")
def test_c7_per_item(text_model, visual_model):
    r = _experiment("per_item_latent", text_model, visual_model, n_samples=10)
    acc = r.cell("monotypic/item/positions_1_5", "argmax_correct")
    heat = r.tables["heatmap_monotypic"].matrix
    assert heat.shape == (9, 9)
    diag = " ".join(f"{heat[i, i]:.2f}" for i in range(9))
    detail = f"positions 1-5 argmax acc {acc['mean']:.3f} (need 0.50, n={acc['n']}); heatmap diagonal {diag}"
    assert acc["mean"] >= 0.5, detail
    return detail


@criterion(8, "layerwise saturation")
def test_c8_layerwise(text_model):
    r = _experiment("layerwise", text_model, n_samples=4)
    st = r.stats
    detail = f"saturation exact {st['saturation_exact']}; min-layer {st['min_layer']} (monotone {st['min_layer_monotone']})"
    assert st["saturation_exact"], detail
    assert len(st["min_layer"]) == 9
    return detail


@criterion(9, "separator shortcut drop table")
def test_c9_separator(text_model):
    r = _experiment("separator_shortcut", text_model, n_samples=6)
    t = r.tables["drop"]
    assert t.row_labels == list(range(3, 10)) and t.col_labels == ["mono", "poly"]
    assert np.isfinite(t.matrix).all()
    mono, poly = r.cell("mono", "drop"), r.cell("poly", "drop")
    detail = (f"mono {mono['mean']:.2f} ± {mono['sd']:.2f}, poly {poly['mean']:.2f} ± {poly['sd']:.2f} "
              f"(reference {r.reference['mono']} / {r.reference['poly']})")
    assert mono["mean"] > 0 and poly["mean"] > 0, detail
    return detail


@criterion(11, "end-to-end reproducibility")
def test_c11_reproducible(text_model, visual_model, tmp_path):
    import yaml

    cfg = yaml.safe_load((ROOT / "configs" / "suite_quick.yaml").read_text())
    cfg["checkpoint"], cfg["visual_checkpoint"] = text_model["checkpoint"], visual_model["checkpoint"]
    path = tmp_path / "suite.yaml"
    path.write_text(yaml.safe_dump(cfg))
    runs = []
    for tag in ("a", "b"):
        out = ACCEPT_DIR / "reproducibility" / tag
        assert main(["experiment", "run", "all", "--config", str(path), "--out", str(out)]) == 0
        runs.append(out)
    manifest = json.loads((runs[0] / "manifest.json").read_text())
    names = [e["name"] for e in manifest["experiments"]]
    assert set(names) == set(REGISTRY) and manifest["coverage_complete"]
    covered = {n for ns in COVERAGE.values() for n in ns}
    assert covered <= set(names)
    for e in manifest["experiments"]:
        a = (runs[0] / e["aggregates"]).read_bytes()
        b = (runs[1] / e["aggregates"]).read_bytes()
        assert a == b, f"{e['name']} aggregates differ"
    return f"{len(names)} experiments, aggregates byte-identical; {len(COVERAGE)} in-scope topics covered"
