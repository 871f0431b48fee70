"""Balance-ratio schedules and the routing logits that realise them.

A balance ratio (br) is a rank's routed token volume relative to a perfectly
even split. Schedules are drawn from a monotone piecewise-linear quantile
function pinned at (0, br_min), (0.5, br_med) and (1, br_max); the interior
knot heights are fitted by least squares to hit the target mean, standard
deviation and skewness.
"""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass

import numpy as np
from scipy import optimize
from scipy import stats as sps

from .errors import EmulationError


class InfeasibleProfile(EmulationError):
    pass


class InfeasibleCounts(EmulationError):
    pass


@dataclass(frozen=True)
class BalanceRatioProfile:
    br_min: float
    br_max: float
    br_avg: float
    br_std: float
    br_med: float
    br_skew: float

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


FIELDS = ("br_min", "br_max", "br_avg", "br_std", "br_med", "br_skew")
TOLERANCE = {"avg": 0.05, "std": 0.05, "med": 0.05, "min": 0.05, "max": 0.05, "skew": 0.15}

_LOWER = np.array([0, .005, .02, .05, .1, .2, .3, .4, .5])
_UPPER = np.array([.5, .6, .7, .8, .9, .95, .98, .995, 1])
_KNOTS = np.concatenate([_LOWER, _UPPER[1:]])


def stats(schedule: np.ndarray) -> BalanceRatioProfile:
    """Pooled statistics; population std, Fisher moment skewness."""
    x = np.asarray(schedule, dtype=float).ravel()
    if x.size == 0:
        raise ValueError("empty schedule")
    sd = float(np.std(x))
    skew = float(sps.skew(x, bias=True)) if sd > 0 else 0.0
    return BalanceRatioProfile(float(x.min()), float(x.max()), float(x.mean()), sd,
                               float(np.median(x)), skew)


def within_tolerance(got: BalanceRatioProfile, want: BalanceRatioProfile, check_avg: bool = True
                     ) -> list[str]:
    """Names of the statistics that miss their tolerance."""
    bad = []

    def rel(a, b, tol):
        return abs(a - b) <= tol * abs(b) if b else abs(a) <= 1e-9

    if check_avg and not rel(got.br_avg, want.br_avg, TOLERANCE["avg"]):
        bad.append("avg")
    if not (rel(got.br_std, want.br_std, TOLERANCE["std"]) or abs(got.br_std - want.br_std) < 1e-9):
        bad.append("std")
    if not rel(got.br_med, want.br_med, TOLERANCE["med"]):
        bad.append("med")
    if abs(got.br_min - want.br_min) > TOLERANCE["min"]:
        bad.append("min")
    if abs(got.br_max - want.br_max) > TOLERANCE["max"]:
        bad.append("max")
    if abs(got.br_skew - want.br_skew) > TOLERANCE["skew"]:
        bad.append("skew")
    return bad


def check_profile(p: BalanceRatioProfile) -> None:
    lo, hi = p.br_min, p.br_max
    if not all(np.isfinite(getattr(p, f)) for f in FIELDS):
        raise InfeasibleProfile("non-finite statistic")
    if lo < 0 or lo > hi:
        raise InfeasibleProfile(f"br_min {lo} / br_max {hi} out of order")
    if not lo <= p.br_med <= hi:
        raise InfeasibleProfile(f"br_med {p.br_med} outside [{lo}, {hi}]")
    if not lo <= p.br_avg <= hi:
        raise InfeasibleProfile(f"br_avg {p.br_avg} outside [{lo}, {hi}]")
    if p.br_std < 0:
        raise InfeasibleProfile("negative br_std")
    # Bhatia-Davis bound on the variance of a bounded variable
    if p.br_std ** 2 > (hi - p.br_avg) * (p.br_avg - lo) + 1e-12:
        raise InfeasibleProfile(f"br_std {p.br_std} impossible within [{lo}, {hi}] at mean {p.br_avg}")
    if (hi > lo) != (p.br_std > 0):
        raise InfeasibleProfile("spread and br_std disagree")


def _quantile(params: np.ndarray, p: BalanceRatioProfile, u: np.ndarray) -> np.ndarray:
    n_lo = len(_LOWER) - 1
    w_lo = np.cumsum(np.exp(params[:n_lo]))
    w_hi = np.cumsum(np.exp(params[n_lo:]))
    q_lo = p.br_min + (p.br_med - p.br_min) * np.concatenate([[0.0], w_lo / w_lo[-1]])
    q_hi = p.br_med + (p.br_max - p.br_med) * (w_hi / w_hi[-1])
    return np.interp(u, _KNOTS, np.concatenate([q_lo, q_hi]))


def _sample(p: BalanceRatioProfile, n: int, rng: np.random.Generator) -> np.ndarray:
    if p.br_max == p.br_min:
        return np.full(n, p.br_min)
    u = (np.arange(n) + rng.uniform(0.25, 0.75, n)) / n
    u[0], u[-1] = 0.0, 1.0
    std_scale = max(p.br_std, 1e-9)

    def residuals(params):
        x = _quantile(params, p, u)
        sd = x.std()
        sk = sps.skew(x, bias=True) if sd > 0 else 0.0
        return [(x.mean() - p.br_avg) / max(p.br_avg, 1e-9), (sd - p.br_std) / std_scale,
                (sk - p.br_skew) / 2, 1e-3 * np.linalg.norm(params)]

    fit = optimize.least_squares(residuals, np.zeros(len(_KNOTS) - 1))
    return _quantile(fit.x, p, u)


def derive_schedule(profile: BalanceRatioProfile, events: int, ranks: int, seed: int = 0,
                    normalize_per_event: bool = False, retries: int = 4) -> np.ndarray:
    """(events x ranks) matrix of balance ratios whose pooled statistics match
    ``profile``. With ``normalize_per_event`` every row is rescaled to mean 1
    afterwards and the average is no longer checked."""
    check_profile(profile)
    n = events * ranks
    if n < 8:
        raise InfeasibleProfile(f"{n} samples are too few for moment matching (need 8)")
    for attempt in range(retries):
        rng = np.random.default_rng([seed, attempt])
        x = rng.permutation(_sample(profile, n, rng)).reshape(events, ranks)
        if not within_tolerance(stats(x), profile):
            break
    else:
        missed = within_tolerance(stats(x), profile)
        raise InfeasibleProfile(f"could not match {', '.join(missed)} within tolerance")
    if normalize_per_event:
        x = x / x.mean(axis=1, keepdims=True)
    return x


def schedule_csv(schedule: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["event"] + [f"rank{r}" for r in range(schedule.shape[1])])
    for e, row in enumerate(schedule):
        w.writerow([e] + [f"{v:.6f}" for v in row])
    return buf.getvalue()


# -- counts and logits ------------------------------------------------------

def _largest_remainder(quota: np.ndarray, total: int) -> np.ndarray:
    base = np.floor(quota).astype(np.int64)
    short = int(total - base.sum())
    if short > 0:
        frac = quota - base
        order = np.lexsort((np.arange(len(quota)), -frac))
        base[order[:short]] += 1
    return base


def br_to_counts(row, total_tokens: int, normalize: bool = True) -> np.ndarray:
    """Tokens per rank for one gating event."""
    row = np.asarray(row, dtype=float)
    r = len(row)
    if total_tokens < r:
        raise ValueError("need at least one token per rank")
    if not normalize:
        return np.floor(row * total_tokens / r + 0.5).astype(np.int64)
    s = row.sum()
    if s <= 0:
        raise ValueError("balance ratios sum to zero")
    return _largest_remainder(row * total_tokens / s, total_tokens)


def split_evenly(count: int, parts: int) -> np.ndarray:
    return _largest_remainder(np.full(parts, count / parts), count)


def rank_counts_to_expert_counts(rank_counts, experts: int) -> np.ndarray:
    """Spread each rank's assignments over its local experts (contiguous
    expert blocks per rank)."""
    rank_counts = np.asarray(rank_counts)
    per = experts // len(rank_counts)
    if per * len(rank_counts) != experts:
        raise InfeasibleCounts(f"{experts} experts do not divide over {len(rank_counts)} ranks")
    return np.concatenate([split_evenly(int(c), per) for c in rank_counts])


def counts_to_logits(counts, tokens: int, experts: int, top_k: int, high: float = 10.0) -> np.ndarray:
    """(tokens x experts) logits whose top-k selection hits every expert
    exactly ``counts[e]`` times.

    Assignment slots are laid out expert by expert and dealt to tokens
    round-robin, so a run of at most ``tokens`` equal experts never lands on
    one token twice.
    """
    counts = np.asarray(counts, dtype=np.int64)
    if len(counts) != experts:
        raise InfeasibleCounts(f"{len(counts)} counts for {experts} experts")
    if top_k < 1 or top_k > experts:
        raise InfeasibleCounts(f"top_k {top_k} not in [1, {experts}]")
    if (counts < 0).any() or counts.sum() != tokens * top_k:
        raise InfeasibleCounts(f"counts sum to {counts.sum()}, need tokens*top_k = {tokens * top_k}")
    if counts.max(initial=0) > tokens:
        raise InfeasibleCounts(f"an expert wants {counts.max()} tokens but only {tokens} exist")
    slots = np.repeat(np.arange(experts), counts)
    logits = np.zeros((tokens, experts))
    logits[np.arange(slots.size) % tokens, slots] = high
    return logits


def top_k_select(logits: np.ndarray, top_k: int) -> np.ndarray:
    """(tokens x top_k) chosen experts, highest logit first, ties to the lower id."""
    order = np.argsort(-logits, axis=1, kind="stable")
    return order[:, :top_k]


def selection_counts(choice: np.ndarray, experts: int) -> np.ndarray:
    return np.bincount(choice.ravel(), minlength=experts)
