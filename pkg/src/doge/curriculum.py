"""Knowledge pool, seed problem pool, pass-rate band filtering, external generator.

Pool files are line-delimited JSON, one :class:`ProblemRecord` per line::

    {"id", "family", "context_tokens", "question_tokens", "gold_tokens",
     "pass_rate", "round_added", "provenance"}

Token lists are stored as vocabulary symbols. Every record is re-checked
against its family oracle when it enters a pool; inconsistent lines are
rejected, never repaired.
"""

from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import httpx
import numpy as np

from .errors import DogeError, InvalidInputError
from .policy import PolicySnapshot, Vocabulary
from .rewards import mean_at_k
from .tasks import (
    GENERATORS,
    KnowledgeRecord,
    TaskInstance,
    expand_record,
    family_of,
    is_consistent,
    make_task,
    make_variant,
)

log = logging.getLogger(__name__)

PROVENANCES = ("knowledge_pool", "variant", "external", "seed_init")
DEFAULT_BAND = (0.1, 0.3)


@dataclass(frozen=True)
class ProblemRecord:
    task: TaskInstance
    pass_rate: float | None = None
    round_added: int = 0
    provenance: str = "knowledge_pool"

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise InvalidInputError(f"unknown provenance {self.provenance!r}")
        if self.pass_rate is not None and not (0.0 <= self.pass_rate <= 1.0):
            raise InvalidInputError(f"pass_rate {self.pass_rate} outside [0, 1]")

    def to_json(self, vocab: Vocabulary) -> dict:
        t = self.task
        return {
            "id": t.id,
            "family": t.family,
            "context_tokens": vocab.decode(t.context),
            "question_tokens": vocab.decode(t.question),
            "gold_tokens": vocab.decode(t.gold),
            "pass_rate": self.pass_rate,
            "round_added": self.round_added,
            "provenance": self.provenance,
        }

    @classmethod
    def from_json(cls, d: dict, vocab: Vocabulary) -> "ProblemRecord":
        """Parse and oracle-check one pool line. Raises InvalidInputError on any defect."""
        if not isinstance(d, dict):
            raise InvalidInputError("record must be a JSON object")
        try:
            task = make_task(vocab, d["family"], vocab.encode(d["context_tokens"]), vocab.encode(d["question_tokens"]))
            gold = tuple(vocab.encode(d["gold_tokens"]))
            pass_rate = d.get("pass_rate")
            rec = cls(
                replace(task, id=str(d["id"])),
                None if pass_rate is None else float(pass_rate),
                int(d.get("round_added", 0)),
                str(d.get("provenance", "knowledge_pool")),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidInputError(f"malformed record: {exc}") from None
        if gold != task.gold:
            raise InvalidInputError(f"record {d['id']}: gold disagrees with the {task.family} oracle")
        return rec


@dataclass
class PoolStore:
    knowledge: list[KnowledgeRecord] = field(default_factory=list)
    seeds: list[ProblemRecord] = field(default_factory=list)
    band: tuple[float, float] = DEFAULT_BAND

    def __post_init__(self):
        lo, hi = self.band
        if not (0.0 <= lo < hi <= 1.0):
            raise InvalidInputError(f"band must satisfy 0 <= low < high <= 1, got {self.band}")

    def in_band(self, rate: float) -> bool:
        lo, hi = self.band
        return lo <= rate <= hi

    def band_violations(self) -> list[ProblemRecord]:
        return [r for r in self.seeds if r.pass_rate is None or not self.in_band(r.pass_rate)]


def save_records(path: str | Path, records: Iterable[ProblemRecord], vocab: Vocabulary) -> None:
    """Write a pool file atomically (temp file + rename)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r.to_json(vocab), sort_keys=True) + "\n")
    os.replace(tmp, path)


def load_records(path: str | Path, vocab: Vocabulary) -> tuple[list[ProblemRecord], list[tuple[int, str]]]:
    """Read a pool file; returns (records, [(line_no, reason), ...] for rejected lines)."""
    records, rejected = [], []
    with open(path, encoding="utf-8") as f:
        for no, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                records.append(ProblemRecord.from_json(json.loads(line), vocab))
            except (json.JSONDecodeError, InvalidInputError) as exc:
                rejected.append((no, str(exc)))
    return records, rejected


def synth_tasks(
    vocab: Vocabulary,
    knowledge: Sequence[KnowledgeRecord],
    n: int,
    families: Sequence[str],
    rng: np.random.Generator,
) -> list[TaskInstance]:
    """Draw ``n`` tasks from the knowledge pool, expanding information-poor records first."""
    if not knowledge:
        raise InvalidInputError("knowledge pool is empty")
    out = []
    for _ in range(n):
        rec = expand_record(knowledge[int(rng.integers(len(knowledge)))])
        fam = families[int(rng.integers(len(families)))]
        out.append(GENERATORS[fam](vocab, rec, rng))
    return out


def variants(vocab: Vocabulary, seeds: Sequence[TaskInstance], per_seed: int, rng: np.random.Generator) -> list[TaskInstance]:
    return [make_variant(vocab, s, rng) for s in seeds for _ in range(per_seed)]


def measure_pass_rates(
    policy: PolicySnapshot,
    records: Sequence[ProblemRecord],
    k: int,
    rng: np.random.Generator,
    max_len: int = 8,
) -> list[ProblemRecord]:
    if not records:
        return []
    result = mean_at_k(policy, [r.task for r in records], k, rng, max_len)
    return [replace(r, pass_rate=rate) for r, rate in zip(records, result.rates)]


def update_seed_pool(store: PoolStore, measured: Sequence[ProblemRecord], round_index: int | None = None) -> PoolStore:
    """Keep in-band measurements, evict seeds re-measured outside the band.

    Seeds that were not re-measured are kept as they are. Existing seeds keep
    their provenance and round index; only the pass rate is refreshed. If a
    task is measured more than once, its last measurement wins.
    """
    seeds = {r.task.id: r for r in store.seeds}
    latest: dict[str, ProblemRecord] = {}
    for r in measured:
        if r.pass_rate is None:
            raise InvalidInputError(f"record {r.task.id} has no pass_rate")
        latest[r.task.id] = r
    for r in latest.values():
        if store.in_band(r.pass_rate):
            if r.task.id in seeds:
                seeds[r.task.id] = replace(seeds[r.task.id], pass_rate=r.pass_rate)
            else:
                seeds[r.task.id] = r if round_index is None else replace(r, round_added=round_index)
        else:
            seeds.pop(r.task.id, None)
    return PoolStore(list(store.knowledge), list(seeds.values()), store.band)


class GeneratorError(DogeError):
    """The external generator could not be reached after all retries."""


@dataclass
class GeneratorClient:
    """Client for ``POST {base_url}/generate``.

    Response items are ``{"context": [...], "question": [...], "answer": [...]}``
    with token symbols; each is checked against its family oracle.
    """

    base_url: str
    timeout: float = 30.0
    retries: int = 3
    backoff: float = 0.5
    max_in_flight: int = 4
    vocab: Vocabulary = field(default_factory=Vocabulary.default)

    @classmethod
    def from_env(cls, default_url: str | None = None, **kw) -> "GeneratorClient | None":
        url = os.environ.get("DOGE_GEN_URL") or default_url
        return cls(url, **kw) if url else None

    def _post(self, body: dict) -> httpx.Response:
        url = self.base_url.rstrip("/") + "/generate"
        last: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                resp = httpx.post(url, json=body, timeout=self.timeout)
                if resp.status_code == 200:
                    return resp
                last = GeneratorError(f"HTTP {resp.status_code} from {url}")
            except httpx.HTTPError as exc:
                last = exc
            if attempt < self.retries:
                time.sleep(self.backoff * 2**attempt)
        raise GeneratorError(f"generator request failed after {self.retries} retries: {last}")

    def generate(self, kind: str, payload: dict, n: int) -> list[TaskInstance]:
        if kind not in ("variant", "from_knowledge"):
            raise InvalidInputError(f"unknown generator kind {kind!r}")
        if n < 1:
            raise InvalidInputError("n must be >= 1")
        resp = self._post({"kind": kind, "payload": payload, "n": int(n)})
        try:
            problems = resp.json()["problems"]
            if not isinstance(problems, list):
                raise TypeError("problems is not a list")
        except (ValueError, KeyError, TypeError) as exc:
            log.error("generator returned a malformed body: %s", exc)
            return []
        out = []
        for i, item in enumerate(problems):
            try:
                q = self.vocab.encode(item["question"])
                task = make_task(self.vocab, family_of(self.vocab, q), self.vocab.encode(item["context"]), q)
                if tuple(self.vocab.encode(item["answer"])) != task.gold:
                    raise InvalidInputError("answer disagrees with the family oracle")
            except (KeyError, TypeError, InvalidInputError) as exc:
                log.warning("rejected generated problem %d: %s", i, exc)
                continue
            out.append(task)
            if len(out) == n:
                break
        return out

    def generate_many(self, requests: Sequence[tuple[str, dict, int]]) -> list[list[TaskInstance]]:
        """Run several requests with bounded concurrency; results keep request order."""
        with ThreadPoolExecutor(max_workers=self.max_in_flight) as pool:
            return list(pool.map(lambda r: self.generate(*r), requests))


def fetch_external(kind: str, payload: dict, n: int, client: GeneratorClient) -> list[ProblemRecord]:
    return [ProblemRecord(t, provenance="external") for t in client.generate(kind, payload, n)]


def oracle_consistent(vocab: Vocabulary, records: Iterable[ProblemRecord]) -> bool:
    return all(is_consistent(vocab, r.task) for r in records)
