"""Activation capture and declarative patching (zero, mean, interchange, add_vector).

Online patches run a fresh forward pass of the target with the named
activations overwritten, so every later layer and position recomputes.
Offline patches start from the target's own cache and recompute only the
patched positions plus the readout position; all other positions keep their
cached activations and serve cached keys/values to attention.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch

from .dataset import CountingSample
from .model import FAMILIES, PATCH_EMBED, CountingTransformer, DigitDistribution, batch_inputs, digit_distribution, next_token_distribution

MODES = ("zero", "mean", "interchange", "add_vector")
REGIMES = ("online", "offline")


class SpecError(ValueError):
    pass


class MissingDataError(KeyError):
    pass


@dataclass(frozen=True)
class ActivationCache:
    """Every hook-point vector of one run, keyed (family, layer) -> (T, D)."""

    entries: dict
    ids: tuple[int, ...]
    logits: torch.Tensor  # (T, V)
    sample_id: str = ""
    checkpoint_id: str = ""
    patch_region: tuple[int, int] | None = None

    def __len__(self) -> int:
        """Number of stored decoder (family, layer, position) vectors."""
        return sum(v.shape[0] for (fam, _), v in self.entries.items() if fam in FAMILIES)

    @property
    def seq_len(self) -> int:
        return len(self.ids)

    def get(self, family: str, layer: int, position: int | None = None) -> torch.Tensor:
        t = self.entries[(family, layer)]
        return t if position is None else t[position]

    def batched(self) -> dict:
        """Entries with a leading batch axis, as the model's frozen pass expects."""
        return {k: v[None] for k, v in self.entries.items()}


def sample_id(sample: CountingSample) -> str:
    return f"{sample.modality}:{sample.seed}:{sample.ground_truth}:{len(sample)}"


def capture(model: CountingTransformer, sample: CountingSample, checkpoint_id: str = "") -> ActivationCache:
    ids, regions = batch_inputs([sample])
    with torch.no_grad():
        logits, store = model.run(ids, regions, cache=True)
    entries = {k: v[0] for k, v in store.items()}
    for v in entries.values():
        v.requires_grad_(False)
    return ActivationCache(
        entries=entries,
        ids=tuple(ids[0].tolist()),
        logits=logits[0].detach(),
        sample_id=sample_id(sample),
        checkpoint_id=checkpoint_id,
        patch_region=regions[0] if regions else None,
    )


# -- mean store -------------------------------------------------------------


def role_key(sample: CountingSample, position: int) -> tuple:
    """Position label shared across samples: list item j, separator after item j, or raw position."""
    if position in sample.list_positions:
        return ("item", sample.list_positions.index(position) + 1)
    if position in sample.separator_positions:
        return ("separator", sample.separator_index(position))
    return ("position", position)


@dataclass
class MeanStore:
    means: dict  # (family, layer, role_key) -> np.ndarray (float64)
    counts: dict

    def lookup(self, family: str, layer: int, key: tuple) -> np.ndarray:
        try:
            return self.means[(family, layer, key)]
        except KeyError:
            raise MissingDataError(f"no mean for cell family={family} layer={layer} role={key}") from None


def compute_mean_store(
    model: CountingTransformer,
    samples: Iterable[CountingSample],
    families: Sequence[str] = ("resid_post",),
    roles: Sequence[str] = ("item", "separator"),
    required_items: Iterable[int] = (),
) -> MeanStore:
    """Per (family, layer, list-position role) means with 64-bit accumulation."""
    sums: dict = {}
    counts: dict = {}
    n_samples = 0
    for s in samples:
        n_samples += 1
        cache = capture(model, s)
        for pos in range(len(s)):
            key = role_key(s, pos)
            if key[0] not in roles:
                continue
            for fam in families:
                for layer in range(model.n_layers):
                    cell = (fam, layer, key)
                    v = cache.get(fam, layer, pos).double().numpy()
                    if cell in sums:
                        sums[cell] += v
                        counts[cell] += 1
                    else:
                        sums[cell] = v.copy()
                        counts[cell] = 1
    if n_samples == 0:
        raise MissingDataError("empty dataset for mean store")
    for j in required_items:
        for fam in families:
            for layer in range(model.n_layers):
                if (fam, layer, ("item", j)) not in sums:
                    raise MissingDataError(f"no samples for cell family={fam} layer={layer} item position {j}")
    return MeanStore({k: sums[k] / counts[k] for k in sums}, counts)


def position_difference_vector(store: MeanStore, i: int, j: int, layer: int, family: str = "resid_post") -> np.ndarray:
    """mean(item j) - mean(item i) at one hook/layer."""
    return store.lookup(family, layer, ("item", j)) - store.lookup(family, layer, ("item", i))


# -- interventions --------------------------------------------------------------


@dataclass
class InterventionSpec:
    mode: str
    family: str = "resid_post"
    layers: tuple[int, ...] = ()
    # (source position -> target position); zero/mean/add_vector use (p, p)
    position_map: tuple[tuple[int, int], ...] = ()
    source: object = None  # ActivationCache | MeanStore | vector | {layer: vector}
    regime: str = "online"

    def __post_init__(self):
        self.layers = tuple(int(l) for l in self.layers)
        self.position_map = tuple((int(a), int(b)) for a, b in self.position_map)

    @property
    def k(self) -> int:
        return len(self.position_map)

    @property
    def target_positions(self) -> list[int]:
        return [t for _, t in self.position_map]

    def validate(self, target_len: int, n_layers: int, d_model: int) -> None:
        if self.mode not in MODES:
            raise SpecError(f"unknown mode {self.mode!r}")
        if self.regime not in REGIMES:
            raise SpecError(f"unknown regime {self.regime!r}")
        if self.family not in FAMILIES + (PATCH_EMBED,):
            raise SpecError(f"unknown hook family {self.family!r}")
        for layer in self.layers:
            if not 0 <= layer < max(1, n_layers):
                raise SpecError(f"layer {layer} outside 0..{n_layers - 1}")
        for s, t in self.position_map:
            if not 0 <= t < target_len:
                raise SpecError(f"target position {t} outside sequence of length {target_len}")
        if self.mode == "interchange":
            if not isinstance(self.source, ActivationCache):
                raise SpecError("interchange needs a source activation cache")
            for s, _ in self.position_map:
                if not 0 <= s < self.source.seq_len:
                    raise SpecError(f"source position {s} outside source of length {self.source.seq_len}")
        if self.mode == "mean" and not isinstance(self.source, MeanStore):
            raise SpecError("mean patching needs a MeanStore source")
        if self.mode == "add_vector":
            for layer in self.layers:
                vec = self.vector(layer)
                if vec.shape != (d_model,):
                    raise SpecError(f"add_vector needs length-{d_model} vectors")

    def vector(self, layer: int) -> np.ndarray:
        src = self.source
        if isinstance(src, dict):
            src = src[layer]
        return np.asarray(src, dtype=np.float64)

    def to_json(self) -> dict:
        src = self.source
        if isinstance(src, ActivationCache):
            src_json = {"cache": src.sample_id}
        elif isinstance(src, MeanStore):
            src_json = {"mean_store": len(src.means)}
        elif isinstance(src, dict):
            src_json = {"vectors": {str(k): np.asarray(v).tolist() for k, v in src.items()}}
        elif src is None:
            src_json = None
        else:
            src_json = {"vector": np.asarray(src).tolist()}
        return {
            "mode": self.mode,
            "family": self.family,
            "layers": list(self.layers),
            "position_map": [list(p) for p in self.position_map],
            "source": src_json,
            "regime": self.regime,
        }

    @classmethod
    def from_json(cls, d: dict, source=None) -> "InterventionSpec":
        src = source
        js = d.get("source")
        if src is None and js:
            if "vector" in js:
                src = np.asarray(js["vector"])
            elif "vectors" in js:
                src = {int(k): np.asarray(v) for k, v in js["vectors"].items()}
        return cls(d["mode"], d.get("family", "resid_post"), tuple(d.get("layers", ())),
                   tuple(tuple(p) for p in d.get("position_map", ())), src, d.get("regime", "online"))


def _make_hook(specs: Sequence[InterventionSpec], target: CountingSample | None):
    def hook(family, layer, x):
        for spec in specs:
            if spec.family != family or layer not in spec.layers or not spec.position_map:
                continue
            x = x.clone()
            for s, t in spec.position_map:
                if spec.mode == "zero":
                    x[0, t] = 0.0
                elif spec.mode == "interchange":
                    x[0, t] = spec.source.get(family, layer, s).to(x.dtype)
                elif spec.mode == "mean":
                    key = role_key(target, t)
                    x[0, t] = torch.as_tensor(spec.source.lookup(family, layer, key), dtype=x.dtype)
                elif spec.mode == "add_vector":
                    x[0, t] = x[0, t] + torch.as_tensor(spec.vector(layer), dtype=x.dtype)
        return x

    return hook


@dataclass
class PatchRun:
    target_id: str
    source_id: str | None
    spec: list[dict]
    baseline: np.ndarray  # P(.|C') over the vocabulary at the readout position
    patched: np.ndarray  # P(.|C*)
    source: np.ndarray | None  # P(.|C)
    r: int | None  # source-correct answer
    r_prime: int  # target-correct answer
    r_tilde: int | None  # answer expected under the tested hypothesis
    patched_logits: np.ndarray | None = None

    def digits(self, which: str = "patched") -> DigitDistribution:
        probs = getattr(self, which)
        from .vocab import default_vocab

        raw = probs[default_vocab().digit_ids]
        return DigitDistribution(raw=raw, renormalized=raw / raw.sum())

    def prob(self, which: str, answer: int | None) -> float:
        """Full-vocabulary probability of digit ``answer``; 0 for answers with no digit token."""
        if answer is None or not 1 <= answer <= 9:
            return 0.0
        from .vocab import default_vocab

        return float(getattr(self, which)[default_vocab().digit_id(answer)])

    def to_json(self) -> dict:
        d = self.digits("patched")
        b = self.digits("baseline")
        return {
            "target": self.target_id,
            "source": self.source_id,
            "spec": self.spec,
            "r": self.r,
            "r_prime": self.r_prime,
            "r_tilde": self.r_tilde,
            "baseline_digits": b.raw.tolist(),
            "patched_digits": d.raw.tolist(),
            "source_digits": self.digits("source").raw.tolist() if self.source is not None else None,
        }


def patched_logits(
    model: CountingTransformer,
    target: CountingSample,
    specs: InterventionSpec | Sequence[InterventionSpec],
    target_cache: ActivationCache | None = None,
    readout: int | None = None,
) -> torch.Tensor:
    """Logits (T, V) of the patched target run."""
    if isinstance(specs, InterventionSpec):
        specs = [specs]
    ids, regions = batch_inputs([target])
    cfg = model.cfg
    for spec in specs:
        spec.validate(len(target), cfg.n_layers, cfg.d_model)
    regimes = {s.regime for s in specs}
    if len(regimes) > 1:
        raise SpecError("cannot mix online and offline specs in one run")
    hook = _make_hook(specs, target)
    readout = target.answer_position if readout is None else readout
    with torch.no_grad():
        if not specs or regimes == {"online"}:
            logits, _ = model.run(ids, regions, hook=hook)
            return logits[0]
        if target_cache is None:
            target_cache = capture(model, target)
        positions = {readout}
        for spec in specs:
            positions.update(spec.target_positions)
        return model.run_frozen(ids, target_cache.batched(), sorted(positions), hook=hook, patch_regions=regions)[0]


def run_patched(
    model: CountingTransformer,
    target: CountingSample,
    specs: InterventionSpec | Sequence[InterventionSpec],
    source_sample: CountingSample | None = None,
    source_cache: ActivationCache | None = None,
    target_cache: ActivationCache | None = None,
    r_tilde: int | None = None,
) -> PatchRun:
    if isinstance(specs, InterventionSpec):
        specs = [specs]
    if target_cache is None:
        target_cache = capture(model, target)
    ans = target.answer_position
    logits = patched_logits(model, target, specs, target_cache)
    baseline = next_token_distribution(target_cache.logits[ans])
    patched = next_token_distribution(logits[ans])
    src = None
    if source_sample is not None:
        if source_cache is None:
            source_cache = capture(model, source_sample)
        src = next_token_distribution(source_cache.logits[source_sample.answer_position])
    return PatchRun(
        target_id=sample_id(target),
        source_id=sample_id(source_sample) if source_sample is not None else None,
        spec=[s.to_json() for s in specs],
        baseline=baseline,
        patched=patched,
        source=src,
        r=source_sample.ground_truth if source_sample is not None else None,
        r_prime=target.ground_truth,
        r_tilde=r_tilde,
        patched_logits=logits[ans].double().numpy(),
    )


def all_layers(model: CountingTransformer) -> tuple[int, ...]:
    return tuple(range(model.n_layers))


def write_patch_runs(runs: Iterable[PatchRun], path, mode: str = "a") -> None:
    with open(path, mode) as fh:
        for r in runs:
            fh.write(json.dumps(r.to_json()) + "\n")


def capture_patched(
    model: CountingTransformer,
    target: CountingSample,
    specs: InterventionSpec | Sequence[InterventionSpec],
) -> ActivationCache:
    """Cache of an online-patched run, for decoding activations of C* itself."""
    if isinstance(specs, InterventionSpec):
        specs = [specs]
    for spec in specs:
        if spec.regime != "online":
            raise SpecError("capture_patched supports online specs only")
        spec.validate(len(target), model.n_layers, model.cfg.d_model)
    ids, regions = batch_inputs([target])
    with torch.no_grad():
        logits, store = model.run(ids, regions, hook=_make_hook(specs, target), cache=True)
    return ActivationCache(
        entries={k: v[0] for k, v in store.items()},
        ids=tuple(ids[0].tolist()),
        logits=logits[0].detach(),
        sample_id=sample_id(target) + ":patched",
        patch_region=regions[0] if regions else None,
    )
