"""Synthetic support corpora with planted component expertise.

Each component owns a disjoint token vocabulary; engineers are experts of one
to three components. Incidents are resolved by an expert of their component
unless the noise coin fires, in which case any engineer may resolve them.
Swarms pull in further experts of the same component.
"""
from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .ingest import (
    CUSTOMER,
    ComponentRecord,
    Corpus,
    EngineerRecord,
    IncidentRecord,
    KbaRecord,
    Manifest,
    Message,
    SwarmRecord,
    format_messages,
    write_manifest,
    write_records,
)
from .rank import Query, RankedList

KBA_CATEGORIES = ("how-to", "bug", "configuration", "performance")


@dataclass(frozen=True)
class SynthConfig:
    n_engineers: int = 200
    n_components: int = 20
    n_incidents: int = 10_000
    n_kbas: int = 1_000
    experts_per_component: int = 10
    vocab_per_component: int = 50
    shared_vocab: int = 200
    text_len: int = 40
    swarm_rate: float = 0.3
    noise: float = 0.2
    date_start: dt.date = dt.date(2018, 1, 1)
    date_end: dt.date = dt.date(2020, 12, 31)
    seed: int = 42
    topic_fraction: float = 0.8
    handoff_rate: float = 0.5
    newcomer_fraction: float = 0.5
    ramp_date: dt.date = dt.date(2020, 1, 1)
    sentinel: str = ""

    def __post_init__(self):
        for name in ("n_engineers", "n_components", "n_incidents", "experts_per_component",
                     "vocab_per_component", "text_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        for name in ("n_kbas", "shared_vocab"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.experts_per_component > self.n_engineers:
            raise ValueError("experts_per_component cannot exceed n_engineers")
        for name in ("swarm_rate", "noise", "topic_fraction", "handoff_rate", "newcomer_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.shared_vocab == 0 and self.topic_fraction < 1.0:
            raise ValueError("topic_fraction < 1 needs a shared vocabulary")
        if self.date_end < self.date_start:
            raise ValueError("date_end precedes date_start")
        if self.sentinel and not self.sentinel.isalnum():
            raise ValueError("sentinel must be a single alphanumeric token")

    @classmethod
    def from_dict(cls, values: dict[str, str]) -> "SynthConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise ValueError(f"unknown synth config field {key!r}")
            default = getattr(cls, key)
            if isinstance(default, dt.date):
                kwargs[key] = dt.date.fromisoformat(raw)
            elif isinstance(default, bool):
                kwargs[key] = raw.lower() in ("1", "true", "yes")
            else:
                kwargs[key] = type(default)(raw)
        return cls(**kwargs)


@dataclass(frozen=True)
class PlantedTruth:
    experts_of: dict[str, tuple[str, ...]]
    components_of: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.components_of:
            inv: dict[str, list[str]] = {}
            for comp, experts in self.experts_of.items():
                for e in experts:
                    inv.setdefault(e, []).append(comp)
            object.__setattr__(self, "components_of", {e: tuple(sorted(c)) for e, c in inv.items()})

    def write(self, path: str | Path) -> None:
        lines = [f"{c}\t{','.join(self.experts_of[c])}\n" for c in sorted(self.experts_of)]
        Path(path).write_text("".join(lines), encoding="utf-8")

    @classmethod
    def read(cls, path: str | Path) -> "PlantedTruth":
        experts = {}
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line.strip():
                comp, ids = line.split("\t")
                experts[comp] = tuple(i for i in ids.split(",") if i)
        return cls(experts)


def _ids(prefix: str, n: int) -> list[str]:
    width = max(len(str(n - 1)), 1)
    return [f"{prefix}{i:0{width}d}" for i in range(n)]


def assign_experts(n_engineers: int, n_components: int, per_component: int, rng: np.random.Generator) -> list[list[int]]:
    """Exactly ``per_component`` distinct experts per component; one to three components per engineer when feasible."""
    slots = n_components * per_component
    counts = np.zeros(n_engineers, dtype=np.int64)
    if slots >= n_engineers:
        counts[:] = 1
        extra = min(slots - n_engineers, 2 * n_engineers)
        pool = np.repeat(np.arange(n_engineers), 2)
        counts += np.bincount(rng.choice(pool, size=extra, replace=False), minlength=n_engineers)
        counts = np.minimum(counts, n_components)
    else:
        counts[rng.choice(n_engineers, size=slots, replace=False)] = 1

    capacity = np.full(n_components, per_component, dtype=np.int64)
    comps_of: list[list[int]] = [[] for _ in range(n_engineers)]
    tiebreak = rng.permutation(n_engineers)
    for e in sorted(range(n_engineers), key=lambda i: (-counts[i], tiebreak[i])):
        jitter = rng.random(n_components)
        order = np.lexsort((jitter, -capacity))
        chosen = [c for c in order[: counts[e]] if capacity[c] > 0]
        for c in chosen:
            capacity[c] -= 1
        comps_of[e] = sorted(int(c) for c in chosen)
    return comps_of


def generate(config: SynthConfig, rng: np.random.Generator | None = None) -> tuple[Corpus, PlantedTruth]:
    rng = np.random.default_rng(config.seed) if rng is None else rng
    eng_ids = _ids("E", config.n_engineers)
    comp_ids = _ids("C", config.n_components)

    comps_of = assign_experts(config.n_engineers, config.n_components, config.experts_per_component, rng)
    experts: list[list[int]] = [[] for _ in comp_ids]
    for e, comps in enumerate(comps_of):
        for c in comps:
            experts[c].append(e)
    # newcomers only join swarms until ramp_date, then resolve like everyone else
    veterans: list[list[int]] = []
    for c in range(len(comp_ids)):
        n_new = min(int(round(config.newcomer_fraction * len(experts[c]))), len(experts[c]) - 1)
        shuffled = [int(e) for e in rng.permutation(experts[c])]
        veterans.append(sorted(shuffled[n_new:]))

    topic_vocab = [[f"{comp_ids[c].lower()}t{j}" for j in range(config.vocab_per_component)] for c in range(len(comp_ids))]
    shared = [f"sh{j}" for j in range(config.shared_vocab)]

    def text(c: int, n: int | None = None, topic_fraction: float | None = None) -> str:
        n = config.text_len if n is None else n
        frac = config.topic_fraction if topic_fraction is None else topic_fraction
        topical = rng.random(n) < frac
        t_idx = rng.integers(0, config.vocab_per_component, size=n)
        s_idx = rng.integers(0, max(config.shared_vocab, 1), size=n)
        return " ".join(topic_vocab[c][t] if is_t else shared[s] for is_t, t, s in zip(topical, t_idx, s_idx))

    n_days = (config.date_end - config.date_start).days + 1

    def day() -> dt.date:
        return config.date_start + dt.timedelta(days=int(rng.integers(0, n_days)))

    engineers = []
    for e, eid in enumerate(eng_ids):
        expertise = {comp_ids[c]: int(rng.integers(3, 6)) for c in comps_of[e]}
        others = [c for c in range(len(comp_ids)) if c not in comps_of[e]]
        for c in rng.permutation(others)[: int(rng.integers(0, 3))]:
            expertise[comp_ids[c]] = int(rng.integers(1, 3))
        engineers.append(EngineerRecord(eid, dict(sorted(expertise.items()))))

    components = [ComponentRecord(cid, text(c, topic_fraction=1.0)) for c, cid in enumerate(comp_ids)]

    kbas = []
    kbas_of: list[list[str]] = [[] for _ in comp_ids]
    for kid in _ids("K", config.n_kbas):
        c = int(rng.integers(0, len(comp_ids)))
        authors = [eng_ids[e] for e in rng.permutation(experts[c])[:2]]
        procs = tuple(authors[1:]) if len(authors) > 1 and rng.random() < 0.3 else ()
        body = text(c)
        see_also = text(c, n=5)
        keywords = text(c, n=5, topic_fraction=1.0)
        kbas.append(KbaRecord(
            kba_id=kid,
            full_text=f"{body}\nSee Also: {see_also}\nKeywords: {keywords}",
            responsible_id=authors[0],
            processor_ids=procs,
            category=KBA_CATEGORIES[int(rng.integers(0, len(KBA_CATEGORIES)))],
            component_id=comp_ids[c],
            created_date=day(),
        ))
        kbas_of[c].append(kid)

    incidents, swarms = [], []
    swarm_ids = iter(_ids("S", config.n_incidents))
    for iid in _ids("I", config.n_incidents):
        c = int(rng.integers(0, len(comp_ids)))
        created = day()
        if rng.random() < config.noise:
            resolver = int(rng.integers(0, config.n_engineers))
        else:
            resolver = int(rng.choice(experts[c] if created >= config.ramp_date else veterans[c]))
        procs = []
        if rng.random() < config.handoff_rate:
            procs.append(int(rng.integers(0, config.n_engineers)))
        procs.append(resolver)
        procs = list(dict.fromkeys(procs))
        if procs[-1] != resolver:
            procs = [p for p in procs if p != resolver] + [resolver]

        messages = [Message(CUSTOMER, text(c))]
        for p in procs:
            body = text(c, n=max(config.text_len // 2, 1))
            if p == resolver and config.sentinel:
                body = f"{body} {config.sentinel}"
            messages.append(Message(eng_ids[p], body))
        incidents.append(IncidentRecord(
            incident_id=iid,
            description=text(c),
            communication_summary=format_messages(messages),
            processor_ids=tuple(eng_ids[p] for p in procs),
            component_ids=(comp_ids[c],),
            created_date=created,
            confirmed_date=created + dt.timedelta(days=int(rng.integers(0, 15))),
        ))

        if rng.random() < config.swarm_rate:
            requestor = procs[0]
            pool = [e for e in experts[c] if e != requestor]
            k = min(int(rng.integers(2, 4)), len(pool))
            if k == 0:
                continue
            responders = [eng_ids[e] for e in rng.permutation(pool)[:k]]
            linked = ()
            if kbas_of[c] and rng.random() < 0.5:
                linked = (kbas_of[c][int(rng.integers(0, len(kbas_of[c])))],)
            swarms.append(SwarmRecord(
                swarm_id=next(swarm_ids),
                incident_id=iid,
                requestor_id=eng_ids[requestor],
                responder_ids=tuple(responders),
                kba_ids=linked,
                component_id=comp_ids[c],
                created_date=created + dt.timedelta(days=int(rng.integers(0, 4))),
            ))

    corpus = Corpus(tuple(incidents), tuple(engineers), tuple(kbas), tuple(swarms), tuple(components))
    planted = PlantedTruth({comp_ids[c]: tuple(sorted(eng_ids[e] for e in experts[c])) for c in range(len(comp_ids))})
    return corpus, planted


def write_corpus(
    corpus: Corpus,
    planted: PlantedTruth | None,
    outdir: str | Path,
    top_m: int = 5000,
    train_cutoff: dt.date | None = None,
    val_cutoff: dt.date | None = None,
) -> Path:
    """Write the five ingest files, the planted-truth file and a manifest; return the manifest path."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    names = {
        "incidents": "incidents.jsonl",
        "engineers": "engineers.jsonl",
        "kbas": "kbas.jsonl",
        "swarms": "swarms.jsonl",
        "components": "components.jsonl",
    }
    write_records(outdir / names["incidents"], corpus.incidents)
    write_records(outdir / names["engineers"], corpus.engineers)
    write_records(outdir / names["kbas"], corpus.kbas)
    write_records(outdir / names["swarms"], corpus.swarms)
    write_records(outdir / names["components"], corpus.components)
    truth = None
    if planted is not None:
        truth = outdir / "truth.tsv"
        planted.write(truth)
    manifest = Manifest(
        **{k: outdir / v for k, v in names.items()},
        top_m=top_m,
        train_cutoff=train_cutoff,
        val_cutoff=val_cutoff,
        truth=truth,
    )
    path = outdir / "manifest.txt"
    write_manifest(path, manifest)
    return path


def oracle_rank(planted: PlantedTruth, query: Query, engineer_ids: Sequence[str]) -> RankedList:
    """Planted experts of the query's components first, then everyone else; id order within each group."""
    experts = set()
    for cid in query.component_ids:
        experts.update(planted.experts_of.get(cid, ()))
    ids = sorted(engineer_ids)
    scores = np.array([1.0 if e in experts else 0.0 for e in ids])
    return RankedList.from_scores(ids, scores, exclude=query.current_swarm)


class OracleRanker:
    """Upper-bound control that reads the planted expert assignment."""

    name = "oracle"

    def __init__(self, planted: PlantedTruth):
        self.planted = planted

    def fit(self, corpus: Corpus):
        self.engineer_ids_ = corpus.engineer_ids
        return self

    def rank(self, query: Query) -> RankedList:
        return oracle_rank(self.planted, query, self.engineer_ids_)

    def rank_many(self, queries: Sequence[Query]) -> list[RankedList]:
        return [self.rank(q) for q in queries]
