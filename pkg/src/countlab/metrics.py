"""Intervention metrics: causal influence, indirect effect, logit difference, KL, drops."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


class MetricInputError(ValueError):
    pass


class UndefinedMetric(ArithmeticError):
    pass


class AggregationError(ValueError):
    pass


def _check_prob(*ps: float) -> None:
    for p in ps:
        if not (0.0 <= p <= 1.0):
            raise MetricInputError(f"probability out of [0, 1]: {p}")


def ci_score(p_tilde_star: float, p_tilde_prime: float, p_rp_prime: float, p_rp_star: float) -> float:
    """Causal influence of a patch.

    Average of the gain in the hypothesis answer's probability (patched vs
    target run) and the loss in the target answer's probability.
    """
    _check_prob(p_tilde_star, p_tilde_prime, p_rp_prime, p_rp_star)
    return 0.5 * ((p_tilde_star - p_tilde_prime) + (p_rp_prime - p_rp_star))


def indirect_effect(p_r_star: float, p_r_prime: float, p_rp_prime: float, p_rp_star: float) -> float:
    _check_prob(p_r_star, p_r_prime, p_rp_prime, p_rp_star)
    if p_r_prime == 0 or p_rp_star == 0:
        raise UndefinedMetric("indirect effect has a zero denominator")
    return 0.5 * ((p_r_star - p_r_prime) / p_r_prime + (p_rp_prime - p_rp_star) / p_rp_star)


def logit_difference(logit_r: float, logit_rp: float) -> float:
    return float(logit_r) - float(logit_rp)


def kl_divergence(p: Sequence[float], q: Sequence[float], tol: float = 1e-6) -> float:
    """D_KL(p || q) in nats; 0 ln 0 = 0 and +inf where q vanishes under p."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise MetricInputError("distributions differ in shape")
    for name, d in (("p", p), ("q", q)):
        if np.any(d < 0) or abs(d.sum() - 1.0) > tol:
            raise MetricInputError(f"{name} is not a normalized distribution (sum={d.sum()})")
    support = p > 0
    if np.any(q[support] == 0):
        return math.inf
    # clamp at zero: rounding can leave -1e-17 for identical inputs
    return max(0.0, float(np.sum(p[support] * np.log(p[support] / q[support]))))


def probability_drop(p_before: float, p_after: float) -> float:
    _check_prob(p_before, p_after)
    return p_before - p_after


@dataclass
class MetricReport:
    metric: str
    value: float | None  # None marks an undefined metric (kept, excluded from aggregates)
    p_tilde_star: float | None = None
    p_tilde_prime: float | None = None
    p_rp_prime: float | None = None
    p_rp_star: float | None = None
    sample_id: str = ""
    note: str = ""

    CSV_FIELDS = ("metric", "value", "p_tilde_star", "p_tilde_prime", "p_rp_prime", "p_rp_star", "sample_id")

    def row(self) -> dict:
        return {k: getattr(self, k) for k in self.CSV_FIELDS}


def write_metric_csv(reports: Iterable[MetricReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=MetricReport.CSV_FIELDS)
        w.writeheader()
        for r in reports:
            w.writerow({k: ("" if v is None else v) for k, v in r.row().items()})


@dataclass
class Aggregate:
    mean: float
    sd: float  # population convention (divide by n)
    n: int
    excluded: int = 0

    def as_dict(self) -> dict:
        return {"mean": self.mean, "sd": self.sd, "n": self.n, "excluded": self.excluded}

    def __str__(self) -> str:
        return f"{self.mean:.3f} ± {self.sd:.3f} (n={self.n})"


def aggregate(values: Iterable) -> Aggregate:
    """Mean and population sd; None / NaN entries and undefined reports are counted, not used."""
    vals, excluded = [], 0
    for v in values:
        if isinstance(v, MetricReport):
            v = v.value
        if v is None or (isinstance(v, float) and math.isnan(v)):
            excluded += 1
            continue
        vals.append(float(v))
    if not vals:
        raise AggregationError(f"nothing to aggregate ({excluded} undefined entries)")
    arr = np.asarray(vals, dtype=np.float64)
    mean = float(arr.mean())
    sd = float(np.sqrt(np.mean((arr - mean) ** 2)))
    return Aggregate(mean, sd, len(vals), excluded)


def try_aggregate(values: Iterable) -> Aggregate | None:
    try:
        return aggregate(values)
    except AggregationError:
        return None
