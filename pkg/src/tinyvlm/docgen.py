"""Synthetic document-QA factory.

Pipeline: ingest page transcriptions (JSON lines), render five prompt
variants per document, call a pluggable text generator, parse the raw
output into QA pairs, filter (code-looking answers via regex, answers
containing "unanswerable", empty/unparseable output), and shard the kept
records deterministically with a content-digest manifest.

The generator interface is synchronous text-in/text-out with a seed; tests
use the deterministic mock, production can point the HTTP adapter at a
completion endpoint via environment variables.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Protocol

log = logging.getLogger(__name__)

MAX_PAGES = 4


class GenerationError(RuntimeError):
    """Generator failed permanently for one document."""

    def __init__(self, message: str, doc_id: str | None = None):
        super().__init__(message if doc_id is None else f"{message} (doc {doc_id})")
        self.doc_id = doc_id


@dataclass
class TranscriptRecord:
    doc_id: str
    pages: list[str]
    source: dict = field(default_factory=dict)

    def transcription(self) -> str:
        return "\n\n".join(p for p in self.pages if p.strip())


@dataclass
class PromptTemplate:
    template_id: int
    text: str  # must contain {transcription} exactly once
    output_format: str = "Q:/A: pairs"

    def __post_init__(self) -> None:
        if self.text.count("{transcription}") != 1:
            raise ValueError(
                f"template {self.template_id}: placeholder must appear exactly once"
            )


_QA_FORMAT = (
    "Write each pair as:\nQ: <question>\nA: <answer>"
)

DEFAULT_TEMPLATES: list[PromptTemplate] = [
    PromptTemplate(
        1,
        "Read the document below and write three short factual questions a reader "
        "might ask, each with a concise answer taken from the text.\n"
        f"{_QA_FORMAT}\n\nDocument:\n{{transcription}}",
    ),
    PromptTemplate(
        2,
        "Extract every distinct fact stated in this document and turn each into a "
        "question/answer pair. Cover different sections.\n"
        f"{_QA_FORMAT}\n\nDocument:\n{{transcription}}",
    ),
    PromptTemplate(
        3,
        "Focus on numbers, dates, amounts, and table-like values in the document. "
        "Write lookup questions whose answers are those exact values.\n"
        f"{_QA_FORMAT}\n\nDocument:\n{{transcription}}",
    ),
    PromptTemplate(
        4,
        "Write yes/no verification questions about claims made in this document, "
        "answering each with Yes or No plus at most a short clause.\n"
        f"{_QA_FORMAT}\n\nDocument:\n{{transcription}}",
    ),
    PromptTemplate(
        5,
        "For each section of the document, write one question asking what the "
        "section is about, answered with a one-sentence summary.\n"
        f"{_QA_FORMAT}\n\nDocument:\n{{transcription}}",
    ),
]


@dataclass
class QARecord:
    doc_id: str
    question: str
    answer: str
    template_id: int
    verdict: str = "kept"  # "kept" or "dropped:<reason>"

    @property
    def kept(self) -> bool:
        return self.verdict == "kept"


@dataclass
class FilterReport:
    total: int = 0
    kept: int = 0
    dropped_by_reason: dict[str, int] = field(default_factory=dict)

    def add(self, record: QARecord) -> None:
        self.total += 1
        if record.kept:
            self.kept += 1
        else:
            reason = record.verdict.split(":", 1)[1]
            self.dropped_by_reason[reason] = self.dropped_by_reason.get(reason, 0) + 1

    def merge(self, other: "FilterReport") -> None:
        self.total += other.total
        self.kept += other.kept
        for reason, n in other.dropped_by_reason.items():
            self.dropped_by_reason[reason] = self.dropped_by_reason.get(reason, 0) + n

    @property
    def dropped(self) -> int:
        return sum(self.dropped_by_reason.values())

    @property
    def drop_fraction(self) -> float:
        return self.dropped / self.total if self.total else 0.0

    def as_dict(self) -> dict:
        return {
            "total": self.total,
            "kept": self.kept,
            "dropped_by_reason": dict(sorted(self.dropped_by_reason.items())),
            "drop_fraction": self.drop_fraction,
        }


def load_transcripts(
    path: str | Path,
    issues: list[tuple[int, str]] | None = None,
) -> Iterator[TranscriptRecord]:
    """Stream validated transcript records from a JSON-lines file.

    Malformed or invalid lines are reported as (line_number, reason) into
    ``issues`` (and logged) and the stream continues.
    """
    def report(line_no: int, reason: str) -> None:
        if issues is not None:
            issues.append((line_no, reason))
        log.warning("transcripts %s line %d: %s", path, line_no, reason)

    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError:
                report(line_no, "json")
                continue
            doc_id = obj.get("doc_id")
            pages = obj.get("pages")
            if not doc_id or not isinstance(pages, list):
                report(line_no, "schema")
                continue
            if len(pages) > MAX_PAGES:
                report(line_no, "page_count")
                continue
            if not any(str(p).strip() for p in pages):
                report(line_no, "empty_pages")
                continue
            yield TranscriptRecord(
                doc_id=str(doc_id),
                pages=[str(p) for p in pages],
                source={k: v for k, v in obj.items() if k not in ("doc_id", "pages")},
            )


def render_prompts(
    rec: TranscriptRecord, templates: list[PromptTemplate] | None = None
) -> list[str]:
    """One prompt per template with the transcription substituted verbatim
    (single substitution, so placeholder-like text in the document stays
    literal)."""
    templates = templates if templates is not None else DEFAULT_TEMPLATES
    text = rec.transcription()
    return [t.text.replace("{transcription}", text, 1) for t in templates]


class TextGenerator(Protocol):
    def complete(self, prompt: str, seed: int = 0) -> str: ...


class DeterministicMockGenerator:
    """Offline stand-in: emits QA text derived purely from a hash of the
    prompt, including a controlled fraction of flagged outputs so the
    filters stay exercised."""

    def __init__(self, flaw_rate: float = 0.15):
        self.flaw_rate = flaw_rate

    def complete(self, prompt: str, seed: int = 0) -> str:
        digest = hashlib.sha256(f"{seed}:{prompt}".encode("utf-8")).digest()
        words = [w.strip(".,:;!?") for w in prompt.split() if w.strip(".,:;!?")]
        pick = lambda i: words[digest[i] % len(words)] if words else "datum"
        n_pairs = 1 + digest[0] % 3
        flawed = digest[1] / 255.0 < self.flaw_rate
        flaw_kind = digest[2] % 3
        if flawed and flaw_kind == 2:
            return f"I could not find structured content about {pick(3)}."
        lines = []
        for i in range(n_pairs):
            q = f"What does the document say about {pick(3 + 2 * i)}?"
            a = f"It mentions {pick(4 + 2 * i)}."
            if flawed and i == n_pairs - 1:
                if flaw_kind == 0:
                    a = "This is unanswerable from the given text."
                else:
                    a = f"```\ndef extract():\n    return {pick(5)!r};\n```"
            lines.append(f"Q: {q}\nA: {a}")
        return "\n".join(lines)


class FlakyGenerator:
    """Test helper: fail transiently n times, then defer to the inner
    generator."""

    def __init__(self, inner: TextGenerator, failures: int):
        self.inner = inner
        self.remaining = failures

    def complete(self, prompt: str, seed: int = 0) -> str:
        if self.remaining > 0:
            self.remaining -= 1
            raise ConnectionError("transient generator failure")
        return self.inner.complete(prompt, seed)


ENDPOINT_ENV = "TINYVLM_GENERATOR_ENDPOINT"
API_KEY_ENV = "TINYVLM_GENERATOR_API_KEY"


class HttpCompletionGenerator:
    """POSTs {"prompt", "seed"} to the endpoint named by
    TINYVLM_GENERATOR_ENDPOINT and returns the response's "text" field.
    Never used by the test suite."""

    def __init__(self, endpoint: str | None = None, api_key: str | None = None, timeout: float = 30.0):
        self.endpoint = endpoint or os.environ.get(ENDPOINT_ENV)
        self.api_key = api_key or os.environ.get(API_KEY_ENV)
        self.timeout = timeout
        if not self.endpoint:
            raise ValueError(f"no generator endpoint; set {ENDPOINT_ENV}")

    def complete(self, prompt: str, seed: int = 0) -> str:
        import requests

        headers = {}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        resp = requests.post(
            self.endpoint,
            json={"prompt": prompt, "seed": seed},
            headers=headers,
            timeout=self.timeout,
        )
        resp.raise_for_status()
        return resp.json()["text"]


def generate_qa(
    prompt: str,
    generator: TextGenerator,
    *,
    seed: int = 0,
    doc_id: str | None = None,
    max_attempts: int = 3,
    base_delay: float = 0.5,
    sleep: Callable[[float], None] = time.sleep,
) -> tuple[str, dict]:
    """Call the generator with exponential backoff on transient failures.

    Returns (raw_text, meta) where meta records attempts, retries, and
    elapsed seconds; raises GenerationError after max_attempts failures.
    """
    t0 = time.perf_counter()
    last: Exception | None = None
    for attempt in range(1, max_attempts + 1):
        try:
            text = generator.complete(prompt, seed=seed)
            return text, {
                "attempts": attempt,
                "retries": attempt - 1,
                "elapsed_s": time.perf_counter() - t0,
            }
        except Exception as exc:  # transient by assumption; retried below
            last = exc
            if attempt < max_attempts:
                delay = base_delay * 2 ** (attempt - 1)
                log.warning("generator attempt %d failed (%s); retrying in %.2fs", attempt, exc, delay)
                sleep(delay)
    raise GenerationError(f"generator failed after {max_attempts} attempts: {last}", doc_id)


DEFAULT_CODE_PATTERNS = (
    r"```",                       # fenced block
    r"</?[a-zA-Z][^>\n]*>",       # HTML tag
    r"(?m)^.*(?:[;{}].*){3,}$",   # bracket/semicolon-dense line
)


def parse_and_filter(
    raw: str,
    doc_id: str,
    template_id: int = 0,
    code_patterns: tuple[str, ...] = DEFAULT_CODE_PATTERNS,
) -> tuple[list[QARecord], FilterReport]:
    """Split raw generator text into Q/A pairs and attach a filter verdict
    to each; unparseable output is one whole-output drop with reason
    "format"."""
    report = FilterReport()
    pairs = re.findall(r"Q:\s*(.*?)\s*\nA:\s*(.*?)(?=\nQ:|\Z)", raw, flags=re.DOTALL)
    records: list[QARecord] = []
    if not pairs:
        rec = QARecord(doc_id, "", "", template_id, verdict="dropped:format")
        report.add(rec)
        return [rec], report
    for q, a in pairs:
        q, a = q.strip(), a.strip()
        if not q or not a:
            verdict = "dropped:empty"
        elif "unanswerable" in a.lower():
            verdict = "dropped:unanswerable"
        elif any(re.search(p, a) for p in code_patterns):
            verdict = "dropped:code"
        else:
            verdict = "kept"
        rec = QARecord(doc_id, q, a, template_id, verdict=verdict)
        records.append(rec)
        report.add(rec)
    return records, report


def shard_dataset(
    records: Iterable[QARecord],
    shard_size: int,
    out_dir: str | Path,
    prefix: str = "shard",
) -> dict:
    """Write kept records into JSON-lines shards of at most shard_size rows;
    returns the manifest (paths, counts, sha256 digests)."""
    if shard_size < 1:
        raise ValueError(f"shard_size must be >= 1, got {shard_size}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest: dict = {"shards": [], "total": 0}
    buf: list[str] = []
    idx = 0

    def flush() -> None:
        nonlocal idx, buf
        if not buf:
            return
        payload = "".join(buf).encode("utf-8")
        path = out_dir / f"{prefix}-{idx:05d}.jsonl"
        try:
            path.write_bytes(payload)
        except OSError as exc:
            raise OSError(f"failed writing shard {path}: {exc}") from exc
        manifest["shards"].append(
            {"path": path.name, "count": len(buf), "sha256": hashlib.sha256(payload).hexdigest()}
        )
        manifest["total"] += len(buf)
        idx += 1
        buf = []

    for rec in records:
        row = {
            "doc_id": rec.doc_id,
            "question": rec.question,
            "answer": rec.answer,
            "template_id": rec.template_id,
        }
        buf.append(json.dumps(row, sort_keys=True, ensure_ascii=False) + "\n")
        if len(buf) == shard_size:
            flush()
    flush()
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")
    return manifest


def run_pipeline(
    transcripts_path: str | Path,
    out_dir: str | Path,
    generator: TextGenerator,
    *,
    shard_size: int = 1000,
    seed: int = 0,
    templates: list[PromptTemplate] | None = None,
    report_path: str | Path | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> tuple[dict, FilterReport]:
    """Transcripts -> prompts -> generator -> filter -> shards + report."""
    templates = templates if templates is not None else DEFAULT_TEMPLATES
    issues: list[tuple[int, str]] = []
    report = FilterReport()
    kept: list[QARecord] = []
    n_docs = 0
    for rec in load_transcripts(transcripts_path, issues):
        n_docs += 1
        for template, prompt in zip(templates, render_prompts(rec, templates)):
            raw, _meta = generate_qa(
                prompt, generator, seed=seed, doc_id=rec.doc_id, sleep=sleep
            )
            records, delta = parse_and_filter(raw, rec.doc_id, template.template_id)
            report.merge(delta)
            kept.extend(r for r in records if r.kept)
    manifest = shard_dataset(kept, shard_size, out_dir)
    summary = {
        "transcripts": n_docs,
        "load_issues": [{"line": l, "reason": r} for l, r in issues],
        "qa": report.as_dict(),
        "manifest": manifest,
    }
    if report_path is not None:
        Path(report_path).write_text(
            json.dumps(summary, indent=1, sort_keys=True), encoding="utf-8"
        )
    return summary, report
