import json

import numpy as np
import pytest
import torch

from countlab.activations import (
    ActivationCache,
    InterventionSpec,
    MissingDataError,
    SpecError,
    all_layers,
    capture,
    capture_patched,
    compute_mean_store,
    patched_logits,
    position_difference_vector,
    role_key,
    run_patched,
    write_patch_runs,
)
from countlab.dataset import TextTaskConfig, VisualConfig, generate_text, generate_visual
from countlab.metrics import kl_divergence
from countlab.model import FAMILIES, next_token_distribution


def text(n, seed=0, **kw):
    return generate_text(TextTaskConfig(n, seed=seed, **kw))


def kl_all_positions(a, b):
    return max(kl_divergence(next_token_distribution(x), next_token_distribution(y)) for x, y in zip(a, b))


def test_cache_contents(tiny_model):
    s = text(5)
    cache = capture(tiny_model, s)
    assert len(cache) == len(FAMILIES) * tiny_model.n_layers * len(s)
    assert cache.get("resid_post", 1, 3).shape == (16,)


@pytest.mark.parametrize("regime", ["online", "offline"])
def test_empty_spec_is_identity(tiny_model, regime):
    s = text(6, 1)
    cache = capture(tiny_model, s)
    spec = InterventionSpec("zero", "resid_post", all_layers(tiny_model), (), regime=regime)
    out = patched_logits(tiny_model, s, spec, cache)
    assert kl_all_positions(out, cache.logits) < 1e-12


@pytest.mark.parametrize("family", FAMILIES)
@pytest.mark.parametrize("regime", ["online", "offline"])
def test_self_interchange_is_identity(tiny_model, family, regime):
    s = text(7, 2)
    cache = capture(tiny_model, s)
    for layer in range(tiny_model.n_layers):
        pmap = [(p, p) for p in range(len(s))]
        spec = InterventionSpec("interchange", family, (layer,), pmap, cache, regime)
        out = patched_logits(tiny_model, s, spec, cache)
        assert kl_divergence(next_token_distribution(out[-1]), next_token_distribution(cache.logits[-1])) < 1e-12


def test_final_layer_last_position_patch_reproduces_source(tiny_model):
    src, tgt = text(3, 1), text(8, 2)
    sc = capture(tiny_model, src)
    last = tiny_model.n_layers - 1
    spec = InterventionSpec("interchange", "resid_post", (last,), [(len(src) - 1, len(tgt) - 1)], sc)
    out = patched_logits(tiny_model, tgt, spec)
    assert torch.equal(out[-1], sc.logits[-1])


@pytest.mark.parametrize("pos_from_end", [1, 3])
def test_online_equals_offline_at_final_layer(tiny_model, pos_from_end):
    src, tgt = text(5, 3), text(5, 4)
    sc, tc = capture(tiny_model, src), capture(tiny_model, tgt)
    last = tiny_model.n_layers - 1
    p = len(tgt) - pos_from_end
    pmap = [(p, p)]
    on = patched_logits(tiny_model, tgt, InterventionSpec("interchange", "resid_post", (last,), pmap, sc, "online"), tc)
    off = patched_logits(tiny_model, tgt, InterventionSpec("interchange", "resid_post", (last,), pmap, sc, "offline"), tc)
    assert torch.allclose(on[-1], off[-1], atol=1e-6)


def test_offline_freezes_other_positions(tiny_model):
    s = text(6, 5)
    cache = capture(tiny_model, s)
    spec = InterventionSpec("zero", "resid_pre", all_layers(tiny_model), [(4, 4)], regime="offline")
    out = patched_logits(tiny_model, s, spec, cache)
    frozen = [p for p in range(len(s)) if p not in (4, len(s) - 1)]
    assert torch.equal(out[frozen], cache.logits[frozen])
    assert not torch.equal(out[-1], cache.logits[-1])


def test_zero_and_add_vector(tiny_model):
    s = text(4, 6)
    cache = capture(tiny_model, s)
    p = s.list_positions[-1]
    zero = np.zeros(16)
    add0 = InterventionSpec("add_vector", "resid_post", (0, 1), [(p, p)], zero)
    assert torch.allclose(patched_logits(tiny_model, s, add0), cache.logits, atol=1e-6)
    zero_spec = InterventionSpec("zero", "resid_post", (0,), [(p, p)])
    pc = capture_patched(tiny_model, s, zero_spec)
    assert torch.all(pc.get("resid_post", 0, p) == 0)


def test_mean_store(tiny_model):
    samples = [text(n, seed=n, item_types=("apple",)) for n in range(1, 10)] * 2
    store = compute_mean_store(tiny_model, samples, required_items=range(1, 10))
    # item 9 appears in two identical samples: mean is that activation
    c = capture(tiny_model, samples[8])
    assert np.allclose(store.lookup("resid_post", 0, ("item", 9)), c.get("resid_post", 0, samples[8].list_positions[8]).double().numpy())
    v = position_difference_vector(store, 2, 5, 1)
    assert v.shape == (16,)
    with pytest.raises(MissingDataError):
        store.lookup("resid_post", 0, ("item", 10))
    with pytest.raises(MissingDataError):
        compute_mean_store(tiny_model, samples[:3], required_items=range(1, 10))
    with pytest.raises(MissingDataError):
        compute_mean_store(tiny_model, [])
    s = samples[4]
    spec = InterventionSpec("mean", "resid_post", (0,), [(s.list_positions[0],) * 2], store)
    run_patched(tiny_model, s, spec)


def test_role_keys():
    s = text(3)
    assert role_key(s, s.list_positions[1]) == ("item", 2)
    assert role_key(s, s.separator_positions[0]) == ("separator", 1)
    assert role_key(s, 0) == ("position", 0)


@pytest.mark.parametrize("bad", [
    dict(mode="swap"),
    dict(mode="zero", regime="later"),
    dict(mode="zero", family="heads"),
    dict(mode="zero", layers=(5,)),
    dict(mode="zero", position_map=((0, 99),)),
    dict(mode="interchange", position_map=((0, 0),)),
    dict(mode="mean", position_map=((0, 0),)),
    dict(mode="add_vector", layers=(0,), position_map=((0, 0),), source=np.zeros(3)),
])
def test_spec_validation(tiny_model, bad):
    spec = InterventionSpec(**{"layers": (0,), **bad})
    with pytest.raises(SpecError):
        patched_logits(tiny_model, text(3), spec)


def test_mixed_regimes_rejected(tiny_model):
    s = text(3)
    a = InterventionSpec("zero", "resid_post", (0,), [(1, 1)], regime="online")
    b = InterventionSpec("zero", "resid_post", (0,), [(1, 1)], regime="offline")
    with pytest.raises(SpecError):
        patched_logits(tiny_model, s, [a, b])


def test_spec_json_round_trip():
    spec = InterventionSpec("add_vector", "attn_out", (0, 1), [(3, 3)], {0: np.ones(4), 1: np.zeros(4)})
    back = InterventionSpec.from_json(json.loads(json.dumps(spec.to_json())))
    assert back.to_json() == spec.to_json()


def test_patch_run_records(tiny_model, tmp_path):
    src, tgt = text(4, 1), text(6, 2)
    sc = capture(tiny_model, src)
    spec = InterventionSpec("interchange", "resid_post", all_layers(tiny_model),
                            [(src.list_positions[-1], tgt.list_positions[-1])], sc)
    run = run_patched(tiny_model, tgt, spec, src, sc, r_tilde=4)
    assert run.r == 4 and run.r_prime == 6 and run.prob("patched", 12) == 0.0
    assert abs(run.digits().renormalized.sum() - 1) < 1e-9
    write_patch_runs([run], tmp_path / "runs.jsonl")
    rec = json.loads((tmp_path / "runs.jsonl").read_text())
    assert rec["r_tilde"] == 4 and len(rec["patched_digits"]) == 9


def test_visual_patch_embed_hook(tiny_visual_model):
    s = generate_visual(VisualConfig(3, grid_size=3, seed=1))
    cache = capture(tiny_visual_model, s)
    start = s.patch_span[0]
    spec = InterventionSpec("zero", "patch_embed", (0,), [(start, start)])
    out = patched_logits(tiny_visual_model, s, spec)
    assert not torch.equal(out[-1], cache.logits[-1])
    self_spec = InterventionSpec("interchange", "patch_embed", (0,), [(p, p) for p in range(start, start + 9)], cache, "offline")
    out = patched_logits(tiny_visual_model, s, self_spec, cache)
    assert torch.allclose(out[-1], cache.logits[-1], atol=1e-6)
