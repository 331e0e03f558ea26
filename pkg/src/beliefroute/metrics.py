"""Evaluation metrics: risk discrimination and calibration, long-horizon control.

Risk metrics take either a sequence of :class:`LabeledScore` or two arrays
``(p_hat, e)``. Control metrics work on per-step quality indicators or on
episode logs.
"""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

NLL_CLAMP = 1e-9


@dataclass(frozen=True)
class LabeledScore:
    p_hat: float
    e: int

    def __post_init__(self):
        if not 0.0 <= self.p_hat <= 1.0:
            raise ValueError(f"p_hat outside [0, 1]: {self.p_hat}")
        if self.e not in (0, 1):
            raise ValueError(f"error label must be 0 or 1, got {self.e}")


@dataclass
class EpisodeSummary:
    occ: float
    discounted_cost: float
    escalations: int
    utility: float
    records: Optional[list] = None


def _split(scores, labels=None):
    if labels is None:
        scores = list(scores)
        p = np.array([s.p_hat for s in scores], dtype=float)
        e = np.array([s.e for s in scores], dtype=float)
    else:
        p = np.asarray(scores, dtype=float).ravel()
        e = np.asarray(labels, dtype=float).ravel()
        if p.shape != e.shape:
            raise ValueError("scores and labels differ in length")
    return p, e


def token_f1(prediction: Sequence[str], reference: Sequence[str]) -> float:
    if not prediction and not reference:
        return 1.0
    if not prediction or not reference:
        return 0.0
    common = sum((Counter(prediction) & Counter(reference)).values())
    if common == 0:
        return 0.0
    precision = common / len(prediction)
    recall = common / len(reference)
    return 2 * precision * recall / (precision + recall)


def auroc(scores, labels=None) -> float:
    """Mann-Whitney AUC with average ranks for ties."""
    p, e = _split(scores, labels)
    n1 = int(e.sum())
    n0 = e.size - n1
    if n1 == 0 or n0 == 0:
        raise ValueError("auroc needs both classes")
    ranks = rankdata(p)
    return float((ranks[e == 1].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def auprc(scores, labels=None) -> float:
    """Average precision; equal scores form a single threshold."""
    p, e = _split(scores, labels)
    n_pos = e.sum()
    if n_pos == 0:
        raise ValueError("auprc needs at least one positive")
    order = np.argsort(-p, kind="stable")
    p, e = p[order], e[order]
    # last index of every tie group in descending order
    ends = np.flatnonzero(np.r_[p[1:] != p[:-1], True])
    tp = np.cumsum(e)[ends]
    seen = ends + 1.0
    new_pos = np.diff(np.r_[0.0, tp])
    return float(np.sum(new_pos * tp / seen) / n_pos)


def brier(scores, labels=None) -> float:
    p, e = _split(scores, labels)
    if p.size == 0:
        raise ValueError("brier of an empty sample")
    return float(np.mean((p - e) ** 2))


def nll(scores, labels=None) -> float:
    p, e = _split(scores, labels)
    if p.size == 0:
        raise ValueError("nll of an empty sample")
    p = np.clip(p, NLL_CLAMP, 1.0 - NLL_CLAMP)
    return float(-np.mean(e * np.log(p) + (1 - e) * np.log1p(-p)))


def ece(scores, labels=None, bins: int = 10) -> float:
    """Equal-width binned calibration error; the top bin includes 1."""
    p, e = _split(scores, labels)
    if p.size == 0:
        raise ValueError("ece of an empty sample")
    idx = np.minimum(np.floor(p * bins).astype(int), bins - 1)
    n = np.bincount(idx, minlength=bins)
    sum_p = np.bincount(idx, weights=p, minlength=bins)
    sum_e = np.bincount(idx, weights=e, minlength=bins)
    used = n > 0
    return float(np.sum(np.abs(sum_e[used] - sum_p[used])) / p.size)


def low_quality(utilities, threshold: float = 1.0) -> np.ndarray:
    return np.asarray(utilities, dtype=float) < threshold


def occ(utilities, threshold: float = 1.0) -> float:
    """Fraction of returned responses whose utility falls below ``threshold``."""
    u = _utilities(utilities)
    if u.size == 0:
        raise ValueError("occ of an empty episode")
    return float(np.mean(u < threshold))


def cvar(occs: Iterable[float], beta: float = 0.9) -> float:
    occs = np.sort(np.asarray(list(occs), dtype=float))[::-1]
    if occs.size == 0:
        raise ValueError("cvar of an empty list")
    if not 0.0 <= beta < 1.0:
        raise ValueError(f"beta must lie in [0, 1), got {beta}")
    # 1e-9 guards against (1 - beta) * E landing just above an integer
    k = max(1, math.ceil((1.0 - beta) * occs.size - 1e-9))
    return float(occs[:k].mean())


def recd(utilities, L: int = 3, M: int = 5, threshold: float = 1.0) -> Optional[float]:
    """Mean recovery delay after runs of at least ``L`` low-quality steps.

    Steps are numbered from 1. A run ending at step ``e`` recovers at the
    first later step that starts ``M`` acceptable steps in a row; the delay
    is that step minus ``e``. Unrecovered runs count ``H - e``.
    """
    if L < 1 or M < 1:
        raise ValueError("run and recovery lengths must be >= 1")
    bad = low_quality(_utilities(utilities), threshold)
    H = bad.size
    good = (~bad).astype(int)
    # ok_from[i]: steps i..i+M-1 (0-based) are all acceptable
    c = np.r_[0, np.cumsum(good)]
    starts = np.arange(max(H - M + 1, 0))
    ok_from = np.zeros(H, dtype=bool)
    ok_from[starts] = (c[starts + M] - c[starts]) == M
    delays = []
    t = 0
    while t < H:
        if not bad[t]:
            t += 1
            continue
        s = t
        while t < H and bad[t]:
            t += 1
        if t - s >= L:
            end = t  # 1-based index of the run's last step
            later = np.flatnonzero(ok_from[end:])
            delays.append(float(later[0] + 1) if later.size else float(H - end))
    return float(np.mean(delays)) if delays else None


def discounted_cost(costs, gamma: float) -> float:
    costs = _costs(costs)
    return float(np.sum(costs * gamma ** np.arange(costs.size)))


def _utilities(x) -> np.ndarray:
    if hasattr(x, "column"):
        return np.asarray(x.column("utility"), dtype=float)
    return np.asarray(x, dtype=float).ravel()


def _costs(x) -> np.ndarray:
    if hasattr(x, "column"):
        return np.asarray(x.column("cost"), dtype=float)
    return np.asarray(x, dtype=float).ravel()


def summarize_episode(log, gamma: float, threshold: float = 1.0) -> EpisodeSummary:
    u = _utilities(log)
    return EpisodeSummary(occ(u, threshold), discounted_cost(log, gamma),
                          int(np.sum(np.asarray(log.column("action")) == 1)), float(u.mean()))


# --- reports -----------------------------------------------------------------

REPORT_FIELDS = ("controller", "seed", "metric", "value", "std")


def episode_metrics(log, gamma: float, threshold: float = 1.0, L: int = 3, M: int = 5) -> dict:
    """Per-episode metric values; risk metrics are omitted for single-class episodes."""
    u = _utilities(log)
    out = {"utility": float(u.mean()), "occ": occ(u, threshold),
           "discounted_cost": discounted_cost(log, gamma),
           "escalations": float(np.sum(np.asarray(log.column("action")) == 1))}
    rd = recd(u, L, M, threshold)
    out["recd"] = float("nan") if rd is None else rd
    labels = log.labels("e_label")
    if labels is None:
        return out
    p, e = np.asarray(log.column("p_hat"), float), np.asarray(labels, float)
    out["brier"] = brier(p, e)
    out["nll"] = nll(p, e)
    out["ece"] = ece(p, e)
    if 0 < e.sum() < e.size:
        out["auroc"] = auroc(p, e)
        out["auprc"] = auprc(p, e)
    return out


def report_rows(per_cell: dict, cvar_beta: float = 0.9) -> list[dict]:
    """Rows for the CSV report.

    ``per_cell`` maps ``(controller, seed)`` to the dict of
    :func:`episode_metrics`. Aggregate rows use seed ``"ALL"``; CVaR exists
    only at that level.
    """
    rows = []
    by_ctrl: dict = {}
    for (name, seed), metrics in sorted(per_cell.items(), key=lambda kv: (kv[0][0], kv[0][1])):
        for metric, value in metrics.items():
            rows.append({"controller": name, "seed": seed, "metric": metric,
                         "value": value, "std": ""})
            by_ctrl.setdefault(name, {}).setdefault(metric, []).append(value)
    for name, metrics in by_ctrl.items():
        for metric, values in metrics.items():
            v = np.asarray(values, dtype=float)
            v = v[np.isfinite(v)]
            mean = float(v.mean()) if v.size else float("nan")
            std = float(v.std(ddof=1)) if v.size > 1 else 0.0
            rows.append({"controller": name, "seed": "ALL", "metric": metric,
                         "value": mean, "std": std})
        rows.append({"controller": name, "seed": "ALL", "metric": "cvar",
                     "value": cvar(metrics["occ"], cvar_beta), "std": ""})
    return rows


def write_report(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def read_report(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["value"] = float(r["value"])
        r["std"] = float(r["std"]) if r["std"] != "" else None
    return rows


def report_value(rows, controller, metric, seed="ALL"):
    for r in rows:
        if r["controller"] == controller and r["metric"] == metric and str(r["seed"]) == str(seed):
            return r["value"]
    raise KeyError((controller, metric, seed))
