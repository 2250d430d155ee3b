import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from countlab.dataset import (
    CATEGORIES,
    GRID_SIZES,
    ORDERS,
    QUESTIONS,
    SEPARATOR_CONDITIONS,
    ConfigError,
    CountingSample,
    TextTaskConfig,
    VisualConfig,
    build_text_sample,
    generate_grouped,
    generate_scene,
    generate_text,
    generate_text_separator_variant,
    generate_visual,
    pad_prefix,
    placeholder_sample,
    read_jsonl,
    write_jsonl,
)
from countlab.vocab import ALT_SEPARATORS, FRUITS, default_vocab, detokenize, tokenize

MONO_QF = "Question: How many items are there in the following sentence?\napple, apple, apple, apple, apple"
POLY_QF = "Question: How many apples are there in the following sentence?\napple, peach, orange, pear, apple"
MONO_QL = "apple, apple, apple, apple, apple\nQuestion: How many items are there in the above sentence?"
POLY_QL = "apple, peach, fig, apple, mango\nQuestion: How many apples are there in the above sentence?"


def commas(n):
    return [[","] for _ in range(n - 1)]


@pytest.mark.parametrize(
    "items,order,question,expected",
    [
        (["apple"] * 5, "question-first", "general", MONO_QF),
        (["apple", "peach", "orange", "pear", "apple"], "question-first", "specific", POLY_QF),
        (["apple"] * 5, "question-last", "general", MONO_QL),
        (["apple", "peach", "fig", "apple", "mango"], "question-last", "specific", POLY_QL),
    ],
)
def test_templates_byte_match(items, order, question, expected):
    s = build_text_sample(items, commas(len(items)), order, question, "apple")
    assert s.render() == expected
    assert s.ground_truth == (2 if question == "specific" else 5)


def test_generated_monotypic_word_sequence():
    s = generate_text(TextTaskConfig(5, "monotypic", "question-first", "general", item_types=("apple",)))
    words = " ".join(s.tokens[1:])
    assert words == "Question : How many items are there in the following sentence ? apple , apple , apple , apple , apple"
    assert s.render() == MONO_QF


def test_visual_prompt():
    s = generate_visual(VisualConfig(3, grid_size=3))
    assert s.render().splitlines()[-1] == "How many objects are there in the image?"


def test_single_item_has_no_separators():
    s = generate_text(TextTaskConfig(1, "monotypic", "question-last", "general"))
    assert s.ground_truth == 1 and s.separator_positions == []


def test_determinism():
    cfg = TextTaskConfig(4, "polytypic-unique", seed=17)
    assert generate_text(cfg).to_json() == generate_text(cfg).to_json()


@pytest.mark.parametrize("bad", [
    dict(count=0), dict(count=10), dict(count=3, category="nope"),
    dict(count=3, order="sideways"), dict(count=3, separator_condition="odd"),
])
def test_invalid_configs(bad):
    with pytest.raises(ConfigError):
        generate_text(TextTaskConfig(**bad))


def test_polytypic_unique_limit():
    with pytest.raises(ConfigError):
        generate_text(TextTaskConfig(5, "polytypic-unique", item_types=("apple", "fig", "plum")))


def _check_invariants(s: CountingSample, cfg: TextTaskConfig):
    # |item_positions| = ground truth; list length = count
    assert len(s.item_positions) == s.ground_truth
    assert len(s.list_positions) == cfg.count
    if cfg.separator_condition == "normal":
        assert len(s.separator_positions) == cfg.count - 1
    # spans partition the non-special tokens
    qs, qe = s.question_span
    cs, ce = s.context_span
    covered = sorted(list(range(qs, qe)) + list(range(cs, ce)))
    specials = [p for p, r in enumerate(s.roles) if r == "special"]
    assert covered == [p for p in range(len(s)) if p not in specials]
    for p in s.list_positions:
        assert s.roles[p] == "item"
    if cfg.category == "polytypic-unique":
        assert len(set(s.item_types)) == cfg.count
    if cfg.category == "monotypic":
        assert len(set(s.item_types)) == 1
    if cfg.question == "general":
        assert s.ground_truth == cfg.count


@settings(max_examples=300, deadline=None)
@given(
    count=st.integers(1, 9),
    category=st.sampled_from(CATEGORIES),
    order=st.sampled_from(ORDERS),
    question=st.sampled_from(QUESTIONS),
    sep=st.sampled_from(SEPARATOR_CONDITIONS),
    seed=st.integers(0, 2**31),
)
def test_text_invariants(count, category, order, question, sep, seed):
    cfg = TextTaskConfig(count, category, order, question, sep, seed)
    _check_invariants(generate_text(cfg), cfg)


@settings(max_examples=200, deadline=None)
@given(count=st.integers(2, 9), category=st.sampled_from(CATEGORIES),
       sep=st.sampled_from(SEPARATOR_CONDITIONS[1:]), seed=st.integers(0, 2**31))
def test_separator_variant_keeps_items(count, category, sep, seed):
    normal = generate_text(TextTaskConfig(count, category, seed=seed))
    var = generate_text_separator_variant(TextTaskConfig(count, category, separator_condition=sep, seed=seed))
    assert var.item_types == normal.item_types
    assert var.ground_truth == normal.ground_truth
    seps = [var.tokens[p] for p in var.separator_positions]
    if sep == "none":
        assert seps == []
    elif sep == "various":
        assert any(t in ALT_SEPARATORS for t in seps)
    elif sep == "less":
        assert len(seps) < count - 1
    elif sep == "more":
        assert len(seps) > count - 1


def test_separator_variant_requires_mutation():
    with pytest.raises(ConfigError):
        generate_text_separator_variant(TextTaskConfig(3))


@settings(max_examples=150, deadline=None)
@given(count=st.integers(1, 9), category=st.sampled_from(CATEGORIES),
       grid=st.sampled_from(GRID_SIZES), seed=st.integers(0, 2**31))
def test_scene_invariants(count, category, grid, seed):
    if count > grid * grid:
        return
    scene = generate_scene(VisualConfig(count, category, grid, seed=seed))
    cells = scene.cells()
    assert len(cells) == count
    if category == "monotypic":
        assert len({obj for _, obj in cells}) == 1
    s = generate_visual(VisualConfig(count, category, grid, seed=seed))
    assert s.patch_span[1] - s.patch_span[0] == grid * grid
    assert len(s.item_positions) == s.ground_truth == count


def test_scene_too_small():
    with pytest.raises(ConfigError):
        generate_scene(VisualConfig(9, grid_size=2))


def test_specific_question_poly_replicate_ground_truth():
    for seed in range(50):
        s = generate_text(TextTaskConfig(7, "polytypic-replicate", question="specific", seed=seed))
        plural = [t for t in s.tokens if t.endswith("s") and t not in ("items", "there", "Question")]
        assert 1 <= s.ground_truth <= 6
        assert len(set(s.item_types)) > 1
        assert plural


def test_grouped_and_placeholder():
    s = generate_grouped([("apple", 2), ("orange", 3), ("peach", 4)])
    assert s.ground_truth == 9 and s.item_types[:2] == ["apple", "apple"]
    p = placeholder_sample(3, "question-first")
    assert p.ground_truth == 3 and len(p.item_positions) == 3
    with pytest.raises(ConfigError):
        generate_grouped([("apple", 5), ("fig", 5)])


def test_jsonl_round_trip(tmp_path):
    samples = [generate_text(TextTaskConfig(n, seed=n)) for n in range(1, 10)]
    samples.append(generate_visual(VisualConfig(4, grid_size=3, seed=2)))
    write_jsonl(samples, tmp_path / "x.jsonl")
    back = read_jsonl(tmp_path / "x.jsonl")
    assert [b.to_json() for b in back] == [s.to_json() for s in samples]
    line = json.loads((tmp_path / "x.jsonl").read_text().splitlines()[0])
    assert {"tokens", "roles", "ground_truth", "spans", "config", "seed"} <= set(line)


def test_vocab_round_trip():
    v = default_vocab()
    text = "Question: How many items are there in the above sentence?"
    ids = tokenize(text)
    assert detokenize(v.decode(ids)) == text
    assert v.digit_id(0) is None and v.digit_id(10) is None
    assert [v.token(i) for i in v.digit_ids] == [str(i) for i in range(1, 10)]
    assert len(set(v.tokens)) == len(v)
    for f in FRUITS:
        assert v.id(f) >= 0


@settings(max_examples=100, deadline=None)
@given(count=st.integers(1, 9), category=st.sampled_from(CATEGORIES), order=st.sampled_from(ORDERS),
       k=st.integers(0, 32), seed=st.integers(0, 2**31))
def test_pad_prefix_shifts_positions(count, category, order, k, seed):
    s = generate_text(TextTaskConfig(count, category, order, seed=seed))
    t = pad_prefix(s, k)
    assert len(t) == len(s) + k and t.render() == s.render()
    assert [t.tokens[p] for p in t.list_positions] == [s.tokens[p] for p in s.list_positions]
    assert [t.tokens[p] for p in t.separator_positions] == [s.tokens[p] for p in s.separator_positions]
    assert t.tokens[t.question_span[0]:t.question_span[1]] == s.tokens[s.question_span[0]:s.question_span[1]]
    assert t.ground_truth == s.ground_truth and t.answer_position == s.answer_position + k
    assert t.tokens[0] == "<bos>" and t.roles[1:k + 1] == ["special"] * k


def test_pad_prefix_errors():
    with pytest.raises(ConfigError):
        pad_prefix(generate_text(TextTaskConfig(3)), -1)
    with pytest.raises(ConfigError):
        pad_prefix(generate_visual(VisualConfig(3, grid_size=3)), 2)
