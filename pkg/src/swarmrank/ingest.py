"""Source record schemas, flat-file loading, corpus joining and temporal splits.

Every entity kind lives in its own UTF-8 file with one JSON object per line.
Dates are ISO-8601 strings. A manifest file (``key = value`` lines) names the
five files plus the prolific-engineer filter size and the split cutoffs.
"""
from __future__ import annotations

import dataclasses
import datetime as dt
import hashlib
import json
import logging
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

from .exceptions import DataError

logger = logging.getLogger(__name__)

RATING_MIN, RATING_MAX = 0, 5
CUSTOMER = "CUSTOMER"

KINDS = ("incident", "engineer", "kba", "swarm", "component")


def _unique(ids: Iterable[str]) -> tuple[str, ...]:
    """Deduplicate preserving first occurrence."""
    return tuple(dict.fromkeys(ids))


@dataclass(frozen=True)
class IncidentRecord:
    incident_id: str
    description: str
    communication_summary: str
    processor_ids: tuple[str, ...]
    component_ids: tuple[str, ...]
    created_date: dt.date
    confirmed_date: dt.date | None = None

    @property
    def resolver_id(self) -> str | None:
        # the final processor is taken as the engineer who solved the ticket
        return self.processor_ids[-1] if self.processor_ids else None

    @property
    def text(self) -> str:
        return f"{self.description}\n{self.communication_summary}".strip()


@dataclass(frozen=True)
class EngineerRecord:
    engineer_id: str
    expertise: dict[str, int] = field(default_factory=dict, hash=False)


@dataclass(frozen=True)
class KbaRecord:
    kba_id: str
    full_text: str
    responsible_id: str
    processor_ids: tuple[str, ...]
    category: str
    component_id: str
    created_date: dt.date

    @property
    def author_ids(self) -> tuple[str, ...]:
        return _unique((self.responsible_id, *self.processor_ids))


@dataclass(frozen=True)
class SwarmRecord:
    swarm_id: str
    incident_id: str
    requestor_id: str
    responder_ids: tuple[str, ...]
    kba_ids: tuple[str, ...]
    component_id: str
    created_date: dt.date

    @property
    def members(self) -> tuple[str, ...]:
        return _unique((self.requestor_id, *self.responder_ids))


@dataclass(frozen=True)
class ComponentRecord:
    component_id: str
    description: str


# --------------------------------------------------------------------------
# parsing


def _date(value) -> dt.date:
    if not isinstance(value, str):
        raise ValueError(f"date must be an ISO string, got {value!r}")
    return dt.date.fromisoformat(value)


def _str(obj: dict, key: str, required: bool = True) -> str:
    value = obj.get(key, None if required else "")
    if not isinstance(value, str):
        raise ValueError(f"field {key!r} must be a string")
    if required and not value:
        raise ValueError(f"field {key!r} is empty")
    return value


def _str_list(obj: dict, key: str) -> tuple[str, ...]:
    value = obj.get(key, [])
    if not isinstance(value, list) or not all(isinstance(v, str) and v for v in value):
        raise ValueError(f"field {key!r} must be a list of non-empty strings")
    return _unique(value)


def _parse_incident(obj: dict) -> IncidentRecord:
    confirmed = obj.get("confirmed_date")
    rec = IncidentRecord(
        incident_id=_str(obj, "incident_id"),
        description=_str(obj, "description", required=False),
        communication_summary=_str(obj, "communication_summary", required=False),
        processor_ids=_str_list(obj, "processor_ids"),
        component_ids=_str_list(obj, "component_ids"),
        created_date=_date(obj.get("created_date")),
        confirmed_date=None if confirmed is None else _date(confirmed),
    )
    if rec.confirmed_date is not None and rec.confirmed_date < rec.created_date:
        raise ValueError("confirmed_date precedes created_date")
    return rec


def _parse_engineer(obj: dict) -> EngineerRecord:
    expertise = obj.get("expertise", {})
    if not isinstance(expertise, dict):
        raise ValueError("field 'expertise' must be an object")
    for comp, rating in expertise.items():
        if isinstance(rating, bool) or not isinstance(rating, int):
            raise ValueError(f"rating for {comp!r} must be an integer")
        if not RATING_MIN <= rating <= RATING_MAX:
            raise ValueError(f"rating for {comp!r} outside [{RATING_MIN}, {RATING_MAX}]")
    return EngineerRecord(_str(obj, "engineer_id"), dict(expertise))


def _parse_kba(obj: dict) -> KbaRecord:
    return KbaRecord(
        kba_id=_str(obj, "kba_id"),
        full_text=_str(obj, "full_text", required=False),
        responsible_id=_str(obj, "responsible_id"),
        processor_ids=_str_list(obj, "processor_ids"),
        category=_str(obj, "category", required=False),
        component_id=_str(obj, "component_id"),
        created_date=_date(obj.get("created_date")),
    )


def _parse_swarm(obj: dict) -> SwarmRecord:
    rec = SwarmRecord(
        swarm_id=_str(obj, "swarm_id"),
        incident_id=_str(obj, "incident_id"),
        requestor_id=_str(obj, "requestor_id"),
        responder_ids=_str_list(obj, "responder_ids"),
        kba_ids=_str_list(obj, "kba_ids"),
        component_id=_str(obj, "component_id"),
        created_date=_date(obj.get("created_date")),
    )
    if not rec.responder_ids:
        raise ValueError("responder_ids is empty")
    return rec


def _parse_component(obj: dict) -> ComponentRecord:
    return ComponentRecord(_str(obj, "component_id"), _str(obj, "description", required=False))


_PARSERS = {
    "incident": _parse_incident,
    "engineer": _parse_engineer,
    "kba": _parse_kba,
    "swarm": _parse_swarm,
    "component": _parse_component,
}

_KEYS = {
    IncidentRecord: "incident_id",
    EngineerRecord: "engineer_id",
    KbaRecord: "kba_id",
    SwarmRecord: "swarm_id",
    ComponentRecord: "component_id",
}


def record_key(record) -> str:
    try:
        return getattr(record, _KEYS[type(record)])
    except KeyError:
        raise TypeError(f"not a source record: {record!r}") from None


def record_to_dict(record) -> dict:
    out = {}
    for f in dataclasses.fields(record):
        value = getattr(record, f.name)
        if isinstance(value, dt.date):
            value = value.isoformat()
        elif isinstance(value, tuple):
            value = list(value)
        elif isinstance(value, dict):
            value = dict(sorted(value.items()))
        out[f.name] = value
    return out


def load_records(path: str | Path, kind: str) -> tuple[list, int]:
    """Parse a line-delimited JSON file into records of ``kind``.

    Malformed lines, and lines repeating an already-seen key, are skipped with
    a warning naming the line number. Returns ``(records, n_skipped)``.
    """
    if kind not in _PARSERS:
        raise ValueError(f"unknown record kind {kind!r}; expected one of {KINDS}")
    parse = _PARSERS[kind]
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot read {kind} file {path}: {exc}") from exc

    records, seen, skipped = [], set(), 0
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            if not isinstance(obj, dict):
                raise ValueError("line is not a JSON object")
            rec = parse(obj)
        except (ValueError, TypeError) as exc:
            logger.warning("%s:%d: skipping malformed %s record (%s)", path, lineno, kind, exc)
            skipped += 1
            continue
        key = record_key(rec)
        if key in seen:
            logger.warning("%s:%d: skipping duplicate %s %r", path, lineno, kind, key)
            skipped += 1
            continue
        seen.add(key)
        records.append(rec)
    if skipped:
        logger.warning("%s: %d malformed line(s) skipped", path, skipped)
    return records, skipped


def write_records(path: str | Path, records: Iterable) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(record_to_dict(rec), ensure_ascii=False, sort_keys=True))
            fh.write("\n")


# --------------------------------------------------------------------------
# communication threads

_MESSAGE_HEAD = re.compile(r"^\[([^\[\]\s]+)\]\s?(.*)$")


@dataclass(frozen=True)
class Message:
    author: str | None
    text: str


def parse_messages(summary: str) -> list[Message]:
    """Split a concatenated communication blob into authored messages.

    A message starts with a line ``[author_id] text``; following lines without
    that prefix continue the current message. Text before the first header is
    kept as an anonymous message.
    """
    messages: list[Message] = []
    author, buf = None, []
    for line in summary.splitlines():
        m = _MESSAGE_HEAD.match(line)
        if m:
            if buf or author is not None:
                messages.append(Message(author, "\n".join(buf).strip()))
            author, buf = m.group(1), [m.group(2)]
        else:
            buf.append(line)
    if buf or author is not None:
        messages.append(Message(author, "\n".join(buf).strip()))
    return [m for m in messages if m.text or m.author is not None]


def format_messages(messages: Iterable[Message]) -> str:
    return "\n".join(
        f"[{m.author}] {m.text}" if m.author is not None else m.text for m in messages
    )


def truncate_before(summary: str, authors: Iterable[str]) -> str:
    """Keep only the messages preceding the first one written by any of ``authors``."""
    stop = set(authors)
    kept = []
    for msg in parse_messages(summary):
        if msg.author in stop:
            break
        kept.append(msg)
    return format_messages(kept)


def authored_text(summary: str, author: str) -> str:
    return "\n".join(m.text for m in parse_messages(summary) if m.author == author)


# --------------------------------------------------------------------------
# corpus


@dataclass(frozen=True)
class Corpus:
    """Joined, validated collection of the five source kinds."""

    incidents: tuple[IncidentRecord, ...]
    engineers: tuple[EngineerRecord, ...]
    kbas: tuple[KbaRecord, ...]
    swarms: tuple[SwarmRecord, ...]
    components: tuple[ComponentRecord, ...]

    @cached_property
    def incident_by_id(self) -> dict[str, IncidentRecord]:
        return {r.incident_id: r for r in self.incidents}

    @cached_property
    def engineer_by_id(self) -> dict[str, EngineerRecord]:
        return {r.engineer_id: r for r in self.engineers}

    @cached_property
    def kba_by_id(self) -> dict[str, KbaRecord]:
        return {r.kba_id: r for r in self.kbas}

    @cached_property
    def swarm_by_id(self) -> dict[str, SwarmRecord]:
        return {r.swarm_id: r for r in self.swarms}

    @cached_property
    def component_ids(self) -> tuple[str, ...]:
        return tuple(sorted(c.component_id for c in self.components))

    @cached_property
    def engineer_ids(self) -> tuple[str, ...]:
        return tuple(sorted(e.engineer_id for e in self.engineers))

    @cached_property
    def resolved_by(self) -> dict[str, list[str]]:
        """engineer -> incidents they resolved (final processor)."""
        out: dict[str, list[str]] = defaultdict(list)
        for inc in self.incidents:
            if inc.resolver_id is not None:
                out[inc.resolver_id].append(inc.incident_id)
        return dict(out)

    @cached_property
    def processed_by(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = defaultdict(list)
        for inc in self.incidents:
            for eid in inc.processor_ids:
                out[eid].append(inc.incident_id)
        return dict(out)

    @cached_property
    def kbas_by(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = defaultdict(list)
        for kba in self.kbas:
            for eid in kba.author_ids:
                out[eid].append(kba.kba_id)
        return dict(out)

    @cached_property
    def swarms_of(self) -> dict[str, list[str]]:
        """incident -> swarms raised on it."""
        out: dict[str, list[str]] = defaultdict(list)
        for s in self.swarms:
            out[s.incident_id].append(s.swarm_id)
        return dict(out)

    @cached_property
    def swarms_joined(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = defaultdict(list)
        for s in self.swarms:
            for eid in s.members:
                out[eid].append(s.swarm_id)
        return dict(out)

    def truth_for(self, incident_id: str) -> frozenset[str]:
        """Final resolver plus every swarm responder on the incident."""
        inc = self.incident_by_id[incident_id]
        truth = set() if inc.resolver_id is None else {inc.resolver_id}
        for sid in self.swarms_of.get(incident_id, ()):
            truth.update(self.swarm_by_id[sid].responder_ids)
        return frozenset(truth)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for kind, recs in zip(KINDS, (self.incidents, self.engineers, self.kbas, self.swarms, self.components)):
            for rec in sorted(recs, key=record_key):
                h.update(kind.encode())
                h.update(json.dumps(record_to_dict(rec), sort_keys=True).encode())
        return h.hexdigest()[:16]


@dataclass
class JoinReport:
    dropped: Counter = field(default_factory=Counter)
    engineers_retained: int = 0


def join_corpus(
    incidents: Sequence[IncidentRecord],
    engineers: Sequence[EngineerRecord],
    kbas: Sequence[KbaRecord],
    swarms: Sequence[SwarmRecord],
    components: Sequence[ComponentRecord],
    top_m: int,
    report: JoinReport | None = None,
) -> Corpus:
    """Resolve foreign keys and keep only the ``top_m`` most prolific engineers.

    Records pointing at unknown engineers, components, incidents or KBAs are
    dropped. Engineers are ranked by resolved-incident count (ties by id).
    Incidents survive the prolific filter when their resolver does; other
    references to filtered-out engineers are stripped, and KBAs or swarms left
    without a responsible engineer, requestor or responder are dropped.
    """
    if top_m < 1:
        raise ValueError("top_m must be a positive integer")
    report = report if report is not None else JoinReport()
    dropped = report.dropped

    comp_ids = {c.component_id for c in components}
    eng_ids = {e.engineer_id for e in engineers}

    engineers = [
        EngineerRecord(e.engineer_id, {c: r for c, r in e.expertise.items() if c in comp_ids})
        for e in engineers
    ]

    kept_inc = []
    for inc in incidents:
        if not inc.component_ids or not set(inc.component_ids) <= comp_ids:
            dropped["incident:component"] += 1
        elif not set(inc.processor_ids) <= eng_ids:
            dropped["incident:engineer"] += 1
        else:
            kept_inc.append(inc)

    solved = Counter(inc.resolver_id for inc in kept_inc if inc.resolver_id is not None)
    ranked = sorted(eng_ids, key=lambda e: (-solved[e], e))
    retained = set(ranked[:top_m])
    if not retained:
        raise DataError("no engineers survive the prolific-engineer filter")
    report.engineers_retained = len(retained)
    dropped["engineer:prolific"] += len(eng_ids) - len(retained)

    final_inc = []
    for inc in kept_inc:
        if inc.resolver_id is not None and inc.resolver_id not in retained:
            dropped["incident:prolific"] += 1
            continue
        procs = tuple(p for p in inc.processor_ids if p in retained)
        final_inc.append(dataclasses.replace(inc, processor_ids=procs) if procs != inc.processor_ids else inc)
    inc_ids = {inc.incident_id for inc in final_inc}

    final_kba = []
    for kba in kbas:
        if kba.component_id not in comp_ids:
            dropped["kba:component"] += 1
        elif kba.responsible_id not in eng_ids or not set(kba.processor_ids) <= eng_ids:
            dropped["kba:engineer"] += 1
        elif kba.responsible_id not in retained:
            dropped["kba:prolific"] += 1
        else:
            procs = tuple(p for p in kba.processor_ids if p in retained)
            final_kba.append(dataclasses.replace(kba, processor_ids=procs) if procs != kba.processor_ids else kba)
    kba_ids = {k.kba_id for k in final_kba}

    final_swarm = []
    for s in swarms:
        if s.incident_id not in inc_ids:
            dropped["swarm:incident"] += 1
        elif s.component_id not in comp_ids:
            dropped["swarm:component"] += 1
        elif not set(s.members) <= eng_ids or not set(s.kba_ids) <= kba_ids:
            dropped["swarm:reference"] += 1
        else:
            responders = tuple(r for r in s.responder_ids if r in retained)
            if s.requestor_id not in retained or not responders:
                dropped["swarm:prolific"] += 1
                continue
            final_swarm.append(dataclasses.replace(s, responder_ids=responders) if responders != s.responder_ids else s)

    for reason, n in sorted(dropped.items()):
        if n:
            logger.info("join: dropped %d (%s)", n, reason)

    return Corpus(
        incidents=tuple(final_inc),
        engineers=tuple(e for e in engineers if e.engineer_id in retained),
        kbas=tuple(final_kba),
        swarms=tuple(final_swarm),
        components=tuple(components),
    )


def split_by_time(corpus: Corpus, train_cutoff: dt.date, val_cutoff: dt.date) -> tuple[Corpus, Corpus, Corpus]:
    """Partition incidents (and their swarms) on ``created_date``.

    Intervals are half-open: train ``< train_cutoff <=`` validation
    ``< val_cutoff <=`` test. KBAs, engineers and components are shared.
    """
    if not train_cutoff < val_cutoff:
        raise ValueError("train_cutoff must precede val_cutoff")
    buckets: tuple[list, list, list] = ([], [], [])
    for inc in corpus.incidents:
        if inc.created_date < train_cutoff:
            buckets[0].append(inc)
        elif inc.created_date < val_cutoff:
            buckets[1].append(inc)
        else:
            buckets[2].append(inc)
    if not buckets[0]:
        raise DataError(f"no incidents created before {train_cutoff}; training split is empty")
    for name, bucket in zip(("validation", "test"), buckets[1:]):
        if not bucket:
            logger.warning("%s split is empty", name)

    out = []
    for bucket in buckets:
        ids = {inc.incident_id for inc in bucket}
        out.append(
            Corpus(
                incidents=tuple(bucket),
                engineers=corpus.engineers,
                kbas=corpus.kbas,
                swarms=tuple(s for s in corpus.swarms if s.incident_id in ids),
                components=corpus.components,
            )
        )
    return out[0], out[1], out[2]


# --------------------------------------------------------------------------
# manifest


@dataclass(frozen=True)
class Manifest:
    incidents: Path
    engineers: Path
    kbas: Path
    swarms: Path
    components: Path
    top_m: int = 5000
    train_cutoff: dt.date | None = None
    val_cutoff: dt.date | None = None
    truth: Path | None = None

    def paths(self) -> dict[str, Path]:
        return {
            "incident": self.incidents,
            "engineer": self.engineers,
            "kba": self.kbas,
            "swarm": self.swarms,
            "component": self.components,
        }


def read_kv_file(path: str | Path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment line."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    kv = read_kv_file(path)
    base = path.parent
    try:
        return Manifest(
            incidents=base / kv["incidents"],
            engineers=base / kv["engineers"],
            kbas=base / kv["kbas"],
            swarms=base / kv["swarms"],
            components=base / kv["components"],
            top_m=int(kv.get("top_m", 5000)),
            train_cutoff=dt.date.fromisoformat(kv["train_cutoff"]) if kv.get("train_cutoff") else None,
            val_cutoff=dt.date.fromisoformat(kv["val_cutoff"]) if kv.get("val_cutoff") else None,
            truth=base / kv["truth"] if kv.get("truth") else None,
        )
    except KeyError as exc:
        raise DataError(f"{path}: manifest is missing {exc.args[0]!r}") from exc
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc


def write_manifest(path: str | Path, manifest: Manifest) -> None:
    path = Path(path)
    lines = [f"{kind} = {Path(p).name}" for kind, p in (
        ("incidents", manifest.incidents),
        ("engineers", manifest.engineers),
        ("kbas", manifest.kbas),
        ("swarms", manifest.swarms),
        ("components", manifest.components),
    )]
    lines.append(f"top_m = {manifest.top_m}")
    if manifest.train_cutoff:
        lines.append(f"train_cutoff = {manifest.train_cutoff.isoformat()}")
    if manifest.val_cutoff:
        lines.append(f"val_cutoff = {manifest.val_cutoff.isoformat()}")
    if manifest.truth:
        lines.append(f"truth = {Path(manifest.truth).name}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_corpus(manifest: Manifest, report: JoinReport | None = None) -> Corpus:
    loaded = {kind: load_records(p, kind)[0] for kind, p in manifest.paths().items()}
    return join_corpus(
        loaded["incident"],
        loaded["engineer"],
        loaded["kba"],
        loaded["swarm"],
        loaded["component"],
        top_m=manifest.top_m,
        report=report,
    )
