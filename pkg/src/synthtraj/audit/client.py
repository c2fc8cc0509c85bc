"""HTTP client for an OpenAI-compatible chat-completions auditor endpoint."""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import requests

from ..records import Record
from ..vocab import Vocabulary
from .prompt import record_to_csv, render_prompt

__all__ = ["AuditorConfig", "AuditResult", "AuditReport", "call_auditor", "audit_cohort"]


@dataclass
class AuditorConfig:
    base_url: str
    api_key: str = ""
    model_name: str = "auditor"
    temperature: float = 0.0
    timeout_seconds: float = 60.0
    max_retries: int = 3
    max_concurrency: int = 4
    backoff_base_seconds: float = 1.0  # delays: base, 2*base, 4*base, ...

    def __post_init__(self):
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.max_concurrency < 1:
            raise ValueError("max_concurrency must be >= 1")

    @classmethod
    def from_env(cls, **overrides) -> "AuditorConfig":
        kwargs = {
            "base_url": os.environ.get("AUDITOR_BASE_URL", ""),
            "api_key": os.environ.get("AUDITOR_API_KEY", ""),
            "model_name": os.environ.get("AUDITOR_MODEL", "auditor"),
        }
        kwargs.update(overrides)
        return cls(**kwargs)


@dataclass
class AuditResult:
    record_id: str
    realism_score: int | None
    reasoning: str
    raw_response: str
    attempts: int = 1
    failed: bool = False
    failure_reason: str = ""

    def to_json(self) -> dict:
        return {
            "record_id": self.record_id,
            "realism_score": self.realism_score,
            "reasoning": self.reasoning,
            "attempts": self.attempts,
            "failed": self.failed,
            "failure_reason": self.failure_reason,
        }


@dataclass
class AuditReport:
    threshold: int
    results: list[AuditResult] = field(default_factory=list)

    @property
    def n_kept(self) -> int:
        return sum(
            1 for r in self.results if not r.failed and r.realism_score >= self.threshold
        )

    @property
    def n_failed(self) -> int:
        return sum(1 for r in self.results if r.failed)

    def scores(self) -> list[int]:
        return [r.realism_score for r in self.results if not r.failed]

    def to_json(self) -> dict:
        return {
            "threshold": self.threshold,
            "n_kept": self.n_kept,
            "n_failed": self.n_failed,
            "results": [r.to_json() for r in self.results],
        }


def _strip_code_fences(text: str) -> str:
    text = text.strip()
    if text.startswith("```"):
        lines = text.splitlines()
        if lines and lines[0].startswith("```"):
            lines = lines[1:]
        if lines and lines[-1].strip() == "```":
            lines = lines[:-1]
        text = "\n".join(lines).strip()
    return text


def _extract_json_object(text: str) -> dict:
    """Lenient parse: strip fences, then decode from the first '{'."""
    text = _strip_code_fences(text)
    start = text.find("{")
    if start < 0:
        raise ValueError("no JSON object in auditor response")
    obj, _ = json.JSONDecoder().raw_decode(text[start:])
    if not isinstance(obj, dict):
        raise ValueError("auditor response is not a JSON object")
    return obj


def _validate_verdict(obj: dict) -> tuple[int, str]:
    score = obj.get("realism_score")
    if isinstance(score, bool) or not isinstance(score, int):
        raise ValueError(f"realism_score is not an integer: {score!r}")
    if not 1 <= score <= 10:
        raise ValueError(f"realism_score {score} outside 1-10")
    reasoning = obj.get("reasoning")
    if not isinstance(reasoning, str):
        raise ValueError("reasoning missing or not a string")
    return score, reasoning


def call_auditor(config: AuditorConfig, prompt: str, record_id: str = "") -> AuditResult:
    """POST the prompt to {base_url}/chat/completions and parse the verdict.

    Retries with exponential backoff on transport errors, non-2xx statuses,
    and malformed or out-of-range verdicts; issues at most 1 + max_retries
    requests. A permanently failing audit is returned flagged, not raised.
    """
    url = config.base_url.rstrip("/") + "/chat/completions"
    headers = {"Content-Type": "application/json"}
    if config.api_key:
        headers["Authorization"] = f"Bearer {config.api_key}"
    body = {
        "model": config.model_name,
        "messages": [
            {"role": "system", "content": prompt},
            {"role": "user", "content": "Audit the record above and reply with the JSON object only."},
        ],
        "temperature": config.temperature,
    }
    last_error = ""
    raw = ""
    for attempt in range(1, config.max_retries + 2):
        if attempt > 1:
            time.sleep(config.backoff_base_seconds * 2 ** (attempt - 2))
        try:
            resp = requests.post(url, json=body, headers=headers, timeout=config.timeout_seconds)
            if resp.status_code // 100 != 2:
                last_error = f"HTTP {resp.status_code}"
                continue
            payload = resp.json()
            raw = payload["choices"][0]["message"]["content"]
            score, reasoning = _validate_verdict(_extract_json_object(raw))
            return AuditResult(
                record_id=record_id,
                realism_score=score,
                reasoning=reasoning,
                raw_response=raw,
                attempts=attempt,
            )
        except (requests.RequestException, ValueError, KeyError, IndexError) as exc:
            last_error = f"{type(exc).__name__}: {exc}"
    return AuditResult(
        record_id=record_id,
        realism_score=None,
        reasoning="",
        raw_response=raw,
        attempts=config.max_retries + 1,
        failed=True,
        failure_reason=last_error,
    )


def audit_cohort(
    records: list[Record],
    vocab: Vocabulary | None,
    config: AuditorConfig,
    threshold: int = 7,
) -> tuple[list[Record], AuditReport]:
    """Audit every record and keep those scoring at least `threshold`.

    Permanently failed audits are excluded from the kept set and flagged in
    the report. Requests run on up to max_concurrency threads; results are
    reported in input order.
    """
    report = AuditReport(threshold=threshold)
    if not records:
        return [], report

    def task(item: tuple[int, Record]) -> tuple[int, AuditResult]:
        idx, record = item
        prompt = render_prompt(record_to_csv(record, vocab))
        return idx, call_auditor(config, prompt, record_id=record.patient_id)

    with ThreadPoolExecutor(max_workers=config.max_concurrency) as pool:
        indexed = list(pool.map(task, enumerate(records)))
    indexed.sort(key=lambda pair: pair[0])
    report.results = [res for _, res in indexed]
    kept = [
        records[i]
        for i, res in indexed
        if not res.failed and res.realism_score >= threshold
    ]
    return kept, report
