"""Top-k hit ratio evaluation and comparison tables."""
from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from .ingest import Corpus, truncate_before
from .rank import Query, RankedList

logger = logging.getLogger(__name__)

DEFAULT_KS = (50, 100, 200)
REFERENCE_SOURCE = "published"

# published top-k hit ratios; displayed next to measured rows, never asserted
REFERENCE_ROWS = {
    10_000: {
        "TF-IDF": (0.48, 0.58, 0.68),
        "random forest": (0.0065, 0.015, 0.043),
        "XGBoost": (0.011, 0.023, 0.101),
        "graph embedding": (0.64, 0.77, 0.85),
    },
    100_000: {
        "TF-IDF": (0.35, 0.59, 0.55),
        "random forest": (0.007, 0.012, 0.02),
        "XGBoost": (0.01, 0.014, 0.021),
        "graph embedding": (0.70, 0.65, 0.78),
    },
}


class SupportsRankMany(Protocol):
    name: str

    def rank_many(self, queries: Sequence[Query]) -> list[RankedList]: ...


@dataclass(frozen=True)
class EvalCase:
    query: Query
    truth: frozenset[str]


def make_eval_cases(split: Corpus, engineers: Iterable[str] | None = None) -> list[EvalCase]:
    """One case per incident with a known resolver or swarm responder.

    The query carries the description plus only the messages written before
    the first message by any truth engineer.
    """
    known = set(engineers) if engineers is not None else set(split.engineer_ids)
    cases = []
    for inc in split.incidents:
        everyone = split.truth_for(inc.incident_id)
        truth = everyone & known
        if not truth:
            continue
        query = Query(
            description=inc.description,
            communication=truncate_before(inc.communication_summary, everyone),
            component_ids=inc.component_ids,
            created_date=inc.created_date,
            incident_id=inc.incident_id,
        )
        cases.append(EvalCase(query, frozenset(truth)))
    return cases


def hit_at_k(ranked: RankedList | Sequence[str], truth: Iterable[str], k: int) -> int:
    if k < 1:
        raise ValueError("k must be >= 1")
    truth = set(truth)
    if not truth:
        raise ValueError("truth set is empty")
    ids = ranked.engineer_ids if isinstance(ranked, RankedList) else list(ranked)
    return int(any(e in truth for e in ids[:k]))


def first_hit_rank(ranked: RankedList, truth: Iterable[str]) -> int | None:
    truth = set(truth)
    for r, (eid, _) in enumerate(ranked.entries, start=1):
        if eid in truth:
            return r
    return None


@dataclass
class HitReport:
    ranker: str
    n: int
    ratios: dict[int, float]
    seconds: float = 0.0
    hits: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.n <= 0:
            raise ValueError("a report needs at least one case")
        for k, r in self.ratios.items():
            if not 0.0 <= r <= 1.0:
                raise ValueError(f"hit ratio at k={k} outside [0, 1]")


def evaluate(
    ranker: SupportsRankMany,
    cases: Sequence[EvalCase],
    ks: Sequence[int] = DEFAULT_KS,
    sample_size: int | None = None,
    seed: int = 0,
    name: str | None = None,
) -> HitReport:
    if not cases:
        raise ValueError("no evaluation cases")
    ks = sorted(set(ks))
    if sample_size is not None and sample_size < len(cases):
        pick = np.sort(np.random.default_rng(seed).choice(len(cases), size=sample_size, replace=False))
        cases = [cases[i] for i in pick]
    t0 = time.perf_counter()
    ranked = ranker.rank_many([c.query for c in cases])
    seconds = time.perf_counter() - t0
    first = np.array([first_hit_rank(r, c.truth) or np.inf for r, c in zip(ranked, cases)])
    hits = {k: (first <= k).astype(np.int64) for k in ks}
    return HitReport(name or ranker.name, len(cases), {k: float(h.mean()) for k, h in hits.items()}, seconds, hits)


@dataclass
class TableRow:
    ranker: str
    n: int
    ratios: dict[int, float]
    seconds: float
    source: str = "measured"


@dataclass
class ComparisonTable:
    ks: list[int]
    rows: list[TableRow]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["ranker", "n", "k", "hit_ratio", "seconds", "source"])
        for row in self.rows:
            for k in self.ks:
                w.writerow([row.ranker, row.n, k, repr(row.ratios[k]), f"{row.seconds:.3f}", row.source])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ComparisonTable":
        rows: dict[tuple[str, str, str], TableRow] = {}
        ks: list[int] = []
        for rec in csv.DictReader(io.StringIO(text)):
            k = int(rec["k"])
            if k not in ks:
                ks.append(k)
            key = (rec["ranker"], rec["n"], rec["source"])
            row = rows.setdefault(key, TableRow(rec["ranker"], int(rec["n"]), {}, float(rec["seconds"]), rec["source"]))
            row.ratios[k] = float(rec["hit_ratio"])
        return cls(ks, list(rows.values()))

    def to_text(self) -> str:
        head = ["ranker", "n"] + [f"top {k}" for k in self.ks] + ["seconds", "source"]
        body = [
            [r.ranker, str(r.n)] + [f"{r.ratios[k]:.4f}" for k in self.ks]
            + ([f"{r.seconds:.1f}"] if r.source == "measured" else ["-"]) + [r.source]
            for r in self.rows
        ]
        widths = [max(len(x) for x in col) for col in zip(head, *body)]
        lines = ["  ".join(c.ljust(w) for c, w in zip(line, widths)).rstrip() for line in [head] + body]
        return "\n".join(lines) + "\n"

    def write(self, outdir: str | Path, stem: str = "bench") -> None:
        outdir = Path(outdir)
        (outdir / f"{stem}.csv").write_text(self.to_csv(), encoding="utf-8")
        (outdir / f"{stem}.txt").write_text(self.to_text(), encoding="utf-8")


def compare(reports: Sequence[HitReport], reference_rows: dict[int, dict[str, Sequence[float]]] | None = None) -> ComparisonTable:
    if not reports:
        raise ValueError("nothing to compare")
    ks = sorted(reports[0].ratios)
    for rep in reports[1:]:
        if sorted(rep.ratios) != ks:
            raise ValueError(f"report {rep.ranker!r} uses ks {sorted(rep.ratios)} but expected {ks}")
    rows = [TableRow(r.ranker, r.n, dict(r.ratios), r.seconds) for r in reports]
    if reference_rows:
        for n, table in reference_rows.items():
            for name, values in table.items():
                ref = dict(zip(DEFAULT_KS, values))
                if all(k in ref for k in ks):
                    rows.append(TableRow(f"{name} (published, not reproduced)", n, {k: ref[k] for k in ks}, 0.0, REFERENCE_SOURCE))
                else:
                    logger.info("reference row %r skipped: ks %s not published", name, ks)
    return ComparisonTable(ks, rows)
