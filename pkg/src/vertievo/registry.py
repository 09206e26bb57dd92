"""File-backed registry of (prompt, fitness, solution) triplets and user signatures.

Records live as one JSON document per line in ``triplets.jsonl`` and
``signatures.jsonl`` under a registry directory. Writes are appended under an
exclusive lock file; the in-memory index is rebuilt from disk on open and
refreshed whenever another writer has grown a file.
"""
from __future__ import annotations

import json
import math
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Mapping, Sequence

import numpy as np
from filelock import FileLock

from .prompts import EMBED_DIM, Prompt, embed, normalize_tokens

SWARM_METRICS = ("accuracy", "creativity", "generality", "robustness")
MAX_TOP_PROMPTS = 5


class RegistryError(RuntimeError):
    """Persistence failure."""


class RecordValidationError(ValueError):
    pass


# --------------------------------------------------------------------------
# records


@dataclass(frozen=True)
class Triplet:
    prompt_id: str
    prompt_text: str
    fitness: float
    solution_summary: Mapping[str, Any]
    timestamp: float = 0.0
    user_id: str = "anonymous"
    domain: str = "general"

    def __post_init__(self) -> None:
        if not math.isfinite(self.fitness):
            raise RecordValidationError("triplet fitness must be finite")

    def to_json(self) -> dict[str, Any]:
        return {
            "kind": "triplet",
            "prompt_id": self.prompt_id,
            "prompt_text": self.prompt_text,
            "fitness": self.fitness,
            "solution_summary": self.solution_summary,
            "timestamp": self.timestamp,
            "user_id": self.user_id,
            "domain": self.domain,
        }

    @classmethod
    def from_json(cls, d: Mapping[str, Any]) -> "Triplet":
        return cls(
            prompt_id=d["prompt_id"],
            prompt_text=d["prompt_text"],
            fitness=float(d["fitness"]),
            solution_summary=d["solution_summary"],
            timestamp=float(d.get("timestamp", 0.0)),
            user_id=d.get("user_id", "anonymous"),
            domain=d.get("domain", "general"),
        )

    def vector(self) -> np.ndarray:
        return embed(Prompt.from_text(self.prompt_text) if _has_tokens(self.prompt_text) else Prompt((self.prompt_id,)))


@dataclass(frozen=True)
class TopPrompt:
    prompt: str
    response: str
    score: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise RecordValidationError(f"top prompt score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class CognitiveSignature:
    """Per-user record; JSON keys mirror the published example signature.

    ``ku``/``ki`` entries may be multi-word phrases. ``centroid`` is the
    normalized mean embedding of the top prompts and is computed when absent.
    ``source_text`` keeps the document exactly as it was ingested.
    """

    user: str
    domain: str
    ku: tuple[str, ...] = ()
    ki: tuple[str, ...] = ()
    top_prompts: tuple[TopPrompt, ...] = ()
    behavior_tags: tuple[str, ...] = ()
    rho: float = 1.0
    centroid: tuple[float, ...] = ()
    source_text: str | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        for name in ("ku", "ki", "top_prompts", "behavior_tags"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if len(self.top_prompts) > MAX_TOP_PROMPTS:
            raise RecordValidationError(f"at most {MAX_TOP_PROMPTS} top prompts")
        if not 0.0 <= self.rho <= 1.0:
            raise RecordValidationError("rho must lie in [0, 1]")
        if not self.centroid:
            object.__setattr__(self, "centroid", tuple(_centroid([t.prompt for t in self.top_prompts], self.user).tolist()))
        c = np.asarray(self.centroid, dtype=np.float64)
        if c.shape != (EMBED_DIM,) or abs(float(np.linalg.norm(c)) - 1.0) > 1e-9:
            raise RecordValidationError("centroid must be a unit vector")

    def to_json(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "kind": "signature",
            "user": self.user,
            "domain": self.domain,
            "KU": list(self.ku),
            "KI": list(self.ki),
            "Top5_Prompts": [{"prompt": t.prompt, "response": t.response, "score": t.score} for t in self.top_prompts],
            "behavior_tags": list(self.behavior_tags),
            "rho": self.rho,
            "centroid": list(self.centroid),
        }
        if self.source_text is not None:
            d["source_text"] = self.source_text
        return d

    @classmethod
    def from_json(cls, d: Mapping[str, Any], source_text: str | None = None) -> "CognitiveSignature":
        try:
            tops = tuple(TopPrompt(t["prompt"], t.get("response", ""), float(t["score"])) for t in d.get("Top5_Prompts", ()))
            return cls(
                user=d["user"],
                domain=d["domain"],
                ku=tuple(d.get("KU", ())),
                ki=tuple(d.get("KI", ())),
                top_prompts=tops,
                behavior_tags=tuple(d.get("behavior_tags", ())),
                rho=float(d.get("rho", 1.0)),
                centroid=tuple(d.get("centroid", ())),
                source_text=source_text if source_text is not None else d.get("source_text"),
            )
        except KeyError as exc:
            raise RecordValidationError(f"signature is missing field {exc.args[0]!r}") from None

    def vector(self) -> np.ndarray:
        return np.asarray(self.centroid, dtype=np.float64)


def _has_tokens(text: str) -> bool:
    try:
        Prompt.from_text(text)
    except ValueError:
        return False
    return True


def _centroid(texts: Sequence[str], fallback: str) -> np.ndarray:
    vecs = [embed(Prompt.from_text(t)) for t in texts if _has_tokens(t)]
    if not vecs:
        return embed(Prompt.from_text(fallback) if _has_tokens(fallback) else Prompt(("signature",)))
    m = np.mean(vecs, axis=0)
    norm = float(np.linalg.norm(m))
    return m / norm if norm > 0 else vecs[0]


_ELLIPSIS_LINE = re.compile(r"^\s*(\.\.\.|…)\s*,?\s*$")
_TRAILING_COMMA = re.compile(r",(\s*[\]}])")


def parse_signature_document(text: str) -> CognitiveSignature:
    """Parse a signature document, tolerating elision lines such as ``...``.

    The original text is kept on the record as ``source_text``.
    """
    cleaned = "\n".join(line for line in text.splitlines() if not _ELLIPSIS_LINE.match(line))
    cleaned = _TRAILING_COMMA.sub(r"\1", cleaned)
    try:
        doc = json.loads(cleaned)
    except json.JSONDecodeError as exc:
        raise RecordValidationError(f"signature document is not valid JSON: {exc}") from None
    return CognitiveSignature.from_json(doc, source_text=text)


# --------------------------------------------------------------------------
# store


Record = Triplet | CognitiveSignature
_FILES = {"T": "triplets.jsonl", "S": "signatures.jsonl"}


def _decode(line: str) -> Record:
    d = json.loads(line)
    body = d["record"]
    return Triplet.from_json(body) if body["kind"] == "triplet" else CognitiveSignature.from_json(body)


class Registry:
    """Append-only registry directory.

    Record ids are ``T<n>`` for triplets and ``S<n>`` for signatures, numbered
    in write order per kind. Scans run in id order.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        try:
            self.root.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise RegistryError(f"cannot create registry at {self.root}: {exc}") from exc
        self.lock = FileLock(str(self.root / ".lock"))
        self._records: dict[str, Record] = {}
        self._offsets = {k: 0 for k in _FILES}
        self._counts = {k: 0 for k in _FILES}
        self.refresh()

    def _path(self, kind: str) -> Path:
        return self.root / _FILES[kind]

    def refresh(self) -> None:
        """Read any lines appended since the last refresh."""
        for kind in _FILES:
            path = self._path(kind)
            if not path.exists():
                continue
            with open(path, "r", encoding="utf-8") as fh:
                fh.seek(self._offsets[kind])
                chunk = fh.read()
                self._offsets[kind] = fh.tell()
            for line in chunk.splitlines():
                if not line.strip():
                    continue
                d = json.loads(line)
                rid = d["id"]
                if rid in self._records:
                    raise RegistryError(f"duplicate record id {rid} on disk")
                self._records[rid] = _decode(line)
                self._counts[kind] += 1

    def store(self, record: Record) -> str:
        return self.store_many([record])[0]

    def store_many(self, records: Sequence[Record]) -> list[str]:
        for r in records:
            if not isinstance(r, (Triplet, CognitiveSignature)):
                raise RecordValidationError(f"cannot store {type(r).__name__}")
        ids: list[str] = []
        try:
            with self.lock:
                self.refresh()
                buffers: dict[str, list[str]] = {k: [] for k in _FILES}
                staged: list[tuple[str, Record]] = []
                for r in records:
                    kind = "T" if isinstance(r, Triplet) else "S"
                    self._counts[kind] += 1
                    rid = f"{kind}{self._counts[kind]:06d}"
                    buffers[kind].append(json.dumps({"id": rid, "record": r.to_json()}, sort_keys=True) + "\n")
                    staged.append((rid, r))
                    ids.append(rid)
                for kind, lines in buffers.items():
                    if lines:
                        with open(self._path(kind), "a", encoding="utf-8") as fh:
                            fh.writelines(lines)
                            fh.flush()
                            os.fsync(fh.fileno())
                            self._offsets[kind] = fh.tell()
                for rid, r in staged:
                    self._records[rid] = r
        except OSError as exc:
            raise RegistryError(f"write to {self.root} failed: {exc}") from exc
        return ids

    def store_unique(self, record: Record) -> str:
        """Id of an equal stored record, storing ``record`` only if there is none."""
        with self.lock:
            self.refresh()
            for rid, r in self.scan("T" if isinstance(record, Triplet) else "S"):
                if r == record:
                    return rid
            return self.store(record)

    def get(self, rid: str) -> Record:
        try:
            return self._records[rid]
        except KeyError:
            raise KeyError(f"no record {rid!r}") from None

    def __len__(self) -> int:
        return len(self._records)

    def scan(self, kind: str | None = None) -> Iterator[tuple[str, Record]]:
        for rid in sorted(self._records):
            if kind is None or rid[0] == kind:
                yield rid, self._records[rid]

    def ids(self) -> list[str]:
        return sorted(self._records)

    def signatures(self) -> list[CognitiveSignature]:
        return [r for _, r in self.scan("S")]  # type: ignore[misc]

    def query_similar(self, vector: np.ndarray, k: int) -> list[tuple[str, float]]:
        """Exact top-k by cosine; ties go to the smaller record id."""
        if k <= 0:
            raise ValueError("k must be positive")
        if not self._records:
            raise ValueError("registry is empty")
        v = np.asarray(vector, dtype=np.float64)
        v = v / np.linalg.norm(v)
        rids = sorted(self._records)
        mat = np.stack([self._records[r].vector() for r in rids])
        sims = mat @ v
        order = sorted(range(len(rids)), key=lambda i: (-sims[i], rids[i]))[:k]
        return [(rids[i], float(sims[i])) for i in order]


# --------------------------------------------------------------------------
# swarm scoring


@dataclass(frozen=True)
class SwarmWeights:
    weights: tuple[float, ...] = (0.25, 0.25, 0.25, 0.25)
    metrics: tuple[str, ...] = SWARM_METRICS

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (len(self.metrics),):
            raise ValueError("one weight per metric required")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("swarm weights must be nonnegative and sum to 1")


def swarm_fitness(metrics: np.ndarray, w: SwarmWeights) -> tuple[np.ndarray, list[int]]:
    """Weighted sums per agent and the agent ranking (best first, ties by index)."""
    m = np.asarray(metrics, dtype=np.float64)
    if m.ndim != 2 or m.shape[1] != len(w.weights):
        raise ValueError(f"metric matrix must have {len(w.weights)} columns")
    scores = m @ np.asarray(w.weights)
    return scores, sorted(range(m.shape[0]), key=lambda i: (-scores[i], i))


def phrase_hits(tokens: Sequence[str], phrases: Sequence[str]) -> int:
    """How many phrases occur as contiguous token runs of ``tokens``."""
    hits = 0
    for ph in phrases:
        pt = normalize_tokens(re.findall(r"[a-z0-9_@.'-]+", ph.lower()))
        if pt and any(tuple(tokens[i : i + len(pt)]) == pt for i in range(len(tokens) - len(pt) + 1)):
            hits += 1
    return hits


def signature_score(p: Prompt, sig: CognitiveSignature, ku_bonus: float = 0.1, ki_penalty: float = 0.1) -> float:
    """``max(0, cos) + ku_bonus * KU hit rate - ki_penalty * KI hit rate``, floored at 0."""
    cos = max(0.0, float(embed(p) @ sig.vector()))
    ku = phrase_hits(p.tokens, sig.ku) / len(sig.ku) if sig.ku else 0.0
    ki = phrase_hits(p.tokens, sig.ki) / len(sig.ki) if sig.ki else 0.0
    return max(0.0, cos + ku_bonus * ku - ki_penalty * ki)


def aggregate_q(
    prompts: Sequence[Prompt],
    signatures: Sequence[CognitiveSignature],
    ku_bonus: float = 0.1,
    ki_penalty: float = 0.1,
) -> np.ndarray:
    """Reliability-weighted distribution over prompts."""
    if not prompts or not signatures:
        raise ValueError("aggregate_q needs prompts and signatures")
    rho = np.array([s.rho for s in signatures], dtype=np.float64)
    tot = rho.sum()
    a = rho / tot if tot > 0 else np.zeros_like(rho)
    S = np.array([[signature_score(p, s, ku_bonus, ki_penalty) for s in signatures] for p in prompts])
    q = S @ a
    z = q.sum()
    if z <= 0:
        return np.full(len(prompts), 1.0 / len(prompts))
    return q / z


@dataclass(frozen=True)
class PatternEntry:
    domain: str
    records: tuple[tuple[str, Triplet], ...]
    ku_union: tuple[str, ...]


def distill(registry: Registry, top_k: int, maximize: bool = True) -> dict[str, PatternEntry]:
    """Best ``top_k`` triplets per domain with the domain's KU union.

    Ties in fitness go to the earlier timestamp, then the smaller id.
    """
    if top_k <= 0:
        raise ValueError("top_k must be positive")
    by_domain: dict[str, list[tuple[str, Triplet]]] = {}
    for rid, t in registry.scan("T"):
        by_domain.setdefault(t.domain, []).append((rid, t))  # type: ignore[arg-type]
    if not by_domain:
        raise ValueError("registry holds no triplets")
    sign = -1.0 if maximize else 1.0
    ku: dict[str, set[str]] = {}
    for s in registry.signatures():
        ku.setdefault(s.domain, set()).update(s.ku)
    out = {}
    for dom in sorted(by_domain):
        rows = sorted(by_domain[dom], key=lambda r: (sign * r[1].fitness, r[1].timestamp, r[0]))[:top_k]
        out[dom] = PatternEntry(dom, tuple(rows), tuple(sorted(ku.get(dom, ()))))
    return out


__all__ = [
    "CognitiveSignature",
    "PatternEntry",
    "RecordValidationError",
    "Registry",
    "RegistryError",
    "SWARM_METRICS",
    "SwarmWeights",
    "TopPrompt",
    "Triplet",
    "aggregate_q",
    "distill",
    "parse_signature_document",
    "phrase_hits",
    "signature_score",
    "swarm_fitness",
]
