"""LLM-based trajectory auditing: prompt, client, offline stub, statistics."""

from .client import AuditorConfig, AuditReport, AuditResult, audit_cohort, call_auditor
from .prompt import AUDIT_PROMPT_TEMPLATE, CSV_PLACEHOLDER, record_to_csv, render_prompt
from .stats import cohens_d, rank_sum_p
from .stub import StubAuditorServer, StubBehavior, stub_score

__all__ = [
    "AuditorConfig",
    "AuditReport",
    "AuditResult",
    "audit_cohort",
    "call_auditor",
    "AUDIT_PROMPT_TEMPLATE",
    "CSV_PLACEHOLDER",
    "record_to_csv",
    "render_prompt",
    "cohens_d",
    "rank_sum_p",
    "StubAuditorServer",
    "StubBehavior",
    "stub_score",
]
