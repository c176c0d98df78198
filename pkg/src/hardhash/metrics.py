"""Retrieval metrics over Hamming rankings: MAP, Precision@k and precision
within a Hamming radius.

A database item is relevant to a query when their label sets intersect.
Rankings sort by Hamming distance, ties by ascending id.
"""

from __future__ import annotations

import csv
import io
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .hashing import CodeDatabase, HammingIndex


def average_precision(ranking: Sequence[bool], n_relevant: int | None = None) -> float:
    """``(1/N) * sum_i i / position(i)`` over the relevant items of ``ranking``."""
    rel = np.asarray(ranking, dtype=bool)
    n = int(rel.sum()) if n_relevant is None else int(n_relevant)
    if n <= 0:
        raise ValueError("average precision is undefined with no relevant items")
    positions = np.flatnonzero(rel)[:n] + 1
    return float((np.arange(1, len(positions) + 1) / positions).sum() / n)


@dataclass
class EvalConfig:
    topk: list[int] = field(default_factory=lambda: [100, 500, 1000])
    radius: int = 2
    metrics: tuple[str, ...] = ("map", "p@k", "p@h")


@dataclass
class EvalReport:
    map: float | None
    precision_at_k: list[tuple[int, float]]
    p_at_h: float | None
    radius: int
    per_query_ap: list[float | None]
    num_queries: int
    num_evaluable: int
    db_size: int
    hash_bits: int

    def to_dict(self) -> dict:
        return {
            "map": round6(self.map),
            "precision_at_k": [[k, round6(v)] for k, v in self.precision_at_k],
            f"p_at_h{self.radius}": round6(self.p_at_h),
            "radius": self.radius,
            "per_query_ap": [round6(a) for a in self.per_query_ap],
            "counts": {
                "queries": self.num_queries,
                "evaluable_queries": self.num_evaluable,
                "database": self.db_size,
                "hash_bits": self.hash_bits,
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def precision_curve_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["k", "value"])
        for k, v in self.precision_at_k:
            w.writerow([k, round6(v)])
        return buf.getvalue()


def round6(x: float | None):
    """Round to 6 significant digits so reports diff cleanly."""
    if x is None:
        return None
    return float(f"{x:.6g}")


def radius_curve_csv(reports: Sequence[EvalReport]) -> str:
    """``bits,value`` rows of radius precision, one per report."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bits", "value"])
    for r in sorted(reports, key=lambda r: r.hash_bits):
        w.writerow([r.hash_bits, round6(r.p_at_h)])
    return buf.getvalue()


def _threads() -> int:
    env = os.environ.get("HEGH_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _per_query(index: HammingIndex, queries: CodeDatabase, topk: Sequence[int], radius: int):
    db = index.db
    if queries.k != db.k:
        raise ValueError(f"query codes have {queries.k} bits, database has {db.k}")
    if queries.num_classes != db.num_classes:
        raise ValueError("query and database label spaces differ")

    def one(qi: int):
        order, dist = index.ranking(queries.codes[qi])
        rel = (db.labels[order] & queries.labels[qi]).any(axis=1)
        n_rel = int(rel.sum())
        ap = average_precision(rel, n_rel) if n_rel else None
        pk = [rel[:k].sum() / k for k in topk]
        in_r = dist <= radius
        n_h = int(in_r.sum())
        ph = rel[in_r].sum() / n_h if n_h else 0.0
        return ap, pk, ph

    idx = range(len(queries))
    workers = min(_threads(), len(queries))
    if workers > 1 and len(queries) > 64:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(one, idx))
    return [one(i) for i in idx]


def evaluate(queries: CodeDatabase, db: CodeDatabase, cfg: EvalConfig | None = None,
             index: HammingIndex | None = None) -> EvalReport:
    cfg = cfg or EvalConfig()
    if len(queries) == 0:
        raise ValueError("empty query set")
    if not 0 <= cfg.radius <= db.k:
        raise ValueError(f"radius {cfg.radius} outside [0, {db.k}]")
    if any(k < 1 for k in cfg.topk):
        raise ValueError("every k in Precision@k must be >= 1")
    index = index or HammingIndex(db)
    rows = _per_query(index, queries, cfg.topk, cfg.radius)
    aps = [r[0] for r in rows]
    valid = [a for a in aps if a is not None]
    want = set(cfg.metrics)
    if "map" in want and not valid:
        raise ValueError("no query has a relevant database item; MAP is undefined")
    return EvalReport(
        map=float(np.mean(valid)) if "map" in want else None,
        precision_at_k=[(k, float(np.mean([r[1][i] for r in rows]))) for i, k in enumerate(cfg.topk)]
        if "p@k" in want else [],
        p_at_h=float(np.mean([r[2] for r in rows])) if "p@h" in want else None,
        radius=cfg.radius,
        per_query_ap=aps,
        num_queries=len(queries),
        num_evaluable=len(valid),
        db_size=len(db),
        hash_bits=db.k,
    )


def mean_average_precision(queries: CodeDatabase, db: CodeDatabase, index: HammingIndex | None = None) -> float:
    return evaluate(queries, db, EvalConfig(topk=[], metrics=("map",)), index).map


def precision_at_k(queries: CodeDatabase, db: CodeDatabase, k_list: Sequence[int],
                   index: HammingIndex | None = None) -> list[tuple[int, float]]:
    return evaluate(queries, db, EvalConfig(topk=list(k_list), metrics=("p@k",)), index).precision_at_k


def precision_within_radius(queries: CodeDatabase, db: CodeDatabase, r: int = 2,
                            index: HammingIndex | None = None) -> float:
    return evaluate(queries, db, EvalConfig(topk=[], radius=r, metrics=("p@h",)), index).p_at_h


def save_report(report: EvalReport, path: str | Path) -> None:
    Path(path).write_text(report.to_json())
