"""CountScope: decode the latent count carried by a single activation.

A probe is a minimal context of placeholder tokens plus a counting
question. The source activation is written into one placeholder at layers
1..L (all layers by default) and the digit distribution is read at the
probe's answer position.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .activations import ActivationCache, InterventionSpec, capture, patched_logits
from .dataset import ConfigError, CountingSample, placeholder_sample
from .model import CountingTransformer, DigitDistribution, digit_distribution


@dataclass(frozen=True)
class ProbeConfig:
    n_placeholders: int = 1
    order: str = "question-last"
    question: str = "general"
    inject_position: int | None = None  # index among placeholders; None = last
    layer_cutoff: int | None = None  # L: layers 1..L transferred, rest recomputed
    family: str = "resid_post"
    regime: str = "online"
    modality: str = "text"

    def validate(self, n_layers: int | None = None) -> None:
        if self.n_placeholders < 1:
            raise ConfigError("probe needs at least one placeholder")
        if self.inject_position is not None and not 0 <= self.inject_position < self.n_placeholders:
            raise ConfigError("inject_position must index a placeholder")
        if self.layer_cutoff is not None:
            if self.layer_cutoff < 1 or (n_layers is not None and self.layer_cutoff > n_layers):
                raise ConfigError(f"layer_cutoff must be in 1..{n_layers}")

    @property
    def inject_index(self) -> int:
        return self.n_placeholders - 1 if self.inject_position is None else self.inject_position


@dataclass
class Decoding:
    digits: DigitDistribution
    source: dict = field(default_factory=dict)  # sample, position, layers

    @property
    def argmax(self) -> int:
        return self.digits.argmax

    @property
    def raw(self) -> np.ndarray:
        return self.digits.raw

    @property
    def renormalized(self) -> np.ndarray:
        return self.digits.renormalized

    def to_json(self) -> dict:
        return {
            "argmax": self.argmax,
            "raw": self.raw.tolist(),
            "renormalized": self.renormalized.tolist(),
            "source": self.source,
        }


def build_probe(config: ProbeConfig) -> CountingSample:
    config.validate()
    return placeholder_sample(config.n_placeholders, config.order, config.question, config.modality)


def probe_position(probe: CountingSample, config: ProbeConfig) -> int:
    return probe.item_positions[config.inject_index]


def transfer_layers(config: ProbeConfig, n_layers: int) -> tuple[int, ...]:
    cutoff = n_layers if config.layer_cutoff is None else config.layer_cutoff
    return tuple(range(cutoff))


def decode(
    model: CountingTransformer,
    source_cache: ActivationCache,
    source_position: int,
    probe: ProbeConfig | None = None,
) -> Decoding:
    probe = probe or ProbeConfig()
    probe.validate(model.n_layers)
    if not 0 <= source_position < source_cache.seq_len:
        raise ConfigError(f"source position {source_position} outside source run")
    target = build_probe(probe)
    layers = transfer_layers(probe, model.n_layers)
    spec = InterventionSpec(
        "interchange",
        probe.family,
        layers,
        ((source_position, probe_position(target, probe)),),
        source_cache,
        probe.regime,
    )
    logits = patched_logits(model, target, spec)
    return Decoding(
        digit_distribution(logits[target.answer_position]),
        {"sample": source_cache.sample_id, "position": source_position, "layers": [l + 1 for l in layers]},
    )


def decode_probe_unpatched(model: CountingTransformer, probe: ProbeConfig | None = None) -> Decoding:
    probe = probe or ProbeConfig()
    target = build_probe(probe)
    cache = capture(model, target)
    return Decoding(digit_distribution(cache.logits[target.answer_position]), {"sample": "probe"})


@dataclass
class GridDecoding:
    grid_size: int
    cells: list[Decoding]  # row-major
    foreground: list[bool]
    ground_truth: int

    def gt_probs(self, renormalized: bool = True) -> np.ndarray:
        return np.array([d.digits.prob(self.ground_truth, renormalized) for d in self.cells])

    def means(self, renormalized: bool = True) -> dict:
        p = self.gt_probs(renormalized)
        fg = np.array(self.foreground)
        return {
            "foreground": float(p[fg].mean()) if fg.any() else None,
            "background": float(p[~fg].mean()) if (~fg).any() else None,
        }


def decode_grid(
    model: CountingTransformer,
    scene_sample: CountingSample,
    probe: ProbeConfig | None = None,
    cache: ActivationCache | None = None,
) -> GridDecoding:
    """One decoding per grid cell of a visual sample, labeled foreground/background."""
    if scene_sample.patch_span is None:
        raise ConfigError("decode_grid needs a visual sample")
    probe = probe or ProbeConfig(modality="visual")
    cache = cache or capture(model, scene_sample)
    start, end = scene_sample.patch_span
    objects = set(scene_sample.list_positions)
    cells, fg = [], []
    for pos in range(start, end):
        cells.append(decode(model, cache, pos, probe))
        fg.append(pos in objects)
    return GridDecoding(scene_sample.grid_size, cells, fg, scene_sample.ground_truth)


def write_heatmap_csv(path, matrix, row_labels, col_labels=tuple(range(1, 10)), normalization: str = "none") -> None:
    """CSV matrix with a leading header row recording the normalization mode."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["normalization", normalization])
        w.writerow(["row"] + [str(c) for c in col_labels])
        for label, row in zip(row_labels, np.asarray(matrix)):
            w.writerow([label] + [repr(float(v)) for v in row])


def read_heatmap_csv(path) -> tuple[str, list[str], list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    norm = rows[0][1]
    cols = rows[1][1:]
    labels = [r[0] for r in rows[2:]]
    mat = np.array([[float(v) for v in r[1:]] for r in rows[2:]])
    return norm, labels, cols, mat


def column_max_normalize(matrix) -> np.ndarray:
    m = np.asarray(matrix, dtype=np.float64)
    peak = m.max(axis=0, keepdims=True)
    peak[peak == 0] = 1.0
    return m / peak
