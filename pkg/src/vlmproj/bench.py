"""Generation-speed measurement and benchmark score aggregation."""

from __future__ import annotations

import csv
import io
import statistics
import time
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Any, Protocol

import numpy as np

from .errors import ContextOverflowError, ValidationError
from .toyvlm import KVCache

DEFAULT_N_OUT = 256
SCORE_FIELDS = ("gqa", "sqa_i", "vqa_t", "pope", "mme_p", "mmb_dev")
MME_MAX = 2000


class GenerationPipeline(Protocol):
    def check(self, prompt: Any, n_out: int) -> None:
        """Raise ContextOverflowError if ``n_out`` tokens cannot be generated."""

    def prefill(self, prompt: Any) -> Any:
        """Consume the prompt; return decoding state."""

    def decode(self, state: Any) -> int:
        """Produce the next token id."""


@dataclass
class BenchReport:
    label: str
    n_generated: int
    total_s: float
    eval_avg: float
    prefill_tokens: int
    repeats: int
    totals: list[float] = field(default_factory=list)
    prefill_s: float = 0.0
    decode_s: float = 0.0

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "n_generated": self.n_generated,
            "total_s": self.total_s,
            "eval_avg_tokens_per_s": self.eval_avg,
            "prefill_tokens": self.prefill_tokens,
            "repeats": self.repeats,
            "per_repeat_total_s": list(self.totals),
            "prefill_s": self.prefill_s,
            "decode_s": self.decode_s,
        }


def measure_generation(
    pipeline: GenerationPipeline,
    prompt,
    n_out: int = DEFAULT_N_OUT,
    repeats: int = 3,
    label: str = "model",
    prefill_tokens: int = 0,
) -> BenchReport:
    """Time ``repeats`` generations of exactly ``n_out`` tokens after one warmup.

    total_s is the median repeat (prefill + decode); eval_avg = n_out / total_s.
    """
    if n_out < 1:
        raise ValidationError("n_out must be >= 1")
    if repeats < 1:
        raise ValidationError("repeats must be >= 1")
    pipeline.check(prompt, n_out)

    def run():
        t0 = time.perf_counter()
        state = pipeline.prefill(prompt)
        t1 = time.perf_counter()
        for _ in range(n_out):
            pipeline.decode(state)
        t2 = time.perf_counter()
        return t1 - t0, t2 - t1

    run()  # warmup, untimed
    runs = [run() for _ in range(repeats)]
    totals = [p + d for p, d in runs]
    total = statistics.median(totals)
    mid = sorted(range(repeats), key=lambda i: totals[i])[(repeats - 1) // 2]
    return BenchReport(
        label=label,
        n_generated=n_out,
        total_s=total,
        eval_avg=n_out / total,
        prefill_tokens=prefill_tokens,
        repeats=repeats,
        totals=totals,
        prefill_s=runs[mid][0],
        decode_s=runs[mid][1],
    )


class ToyPipeline:
    """Adapts a ToyVLM to the GenerationPipeline protocol (cached greedy decoding)."""

    def __init__(self, model):
        self.model = model

    def _sequence(self, prompt):
        return self.model.prompt_sequence(prompt.get("image"), prompt.get("text_ids", []))

    def prompt_length(self, prompt) -> int:
        n_text = len(prompt.get("text_ids", []))
        n_vis = self.model.cfg.projector_spec().n_tokens_out if prompt.get("image") is not None else 0
        return n_vis + n_text

    def check(self, prompt, n_out):
        need = self.prompt_length(prompt) + n_out - 1
        if self.prompt_length(prompt) == 0:
            raise ValidationError("prompt is empty")
        if need > self.model.cfg.lm.max_seq:
            raise ContextOverflowError(
                f"prompt of {self.prompt_length(prompt)} tokens + {n_out} generated exceeds "
                f"max_seq {self.model.cfg.lm.max_seq}"
            )

    def prefill(self, prompt):
        lm = self.model.lm
        cache = KVCache(lm.cfg.depth)
        logits = lm.step(cache, self._sequence(prompt).embeddings)[-1]
        return {"cache": cache, "next": int(np.argmax(logits)), "pending": False}

    def decode(self, state) -> int:
        lm = self.model.lm
        if state["pending"]:
            logits = lm.step(state["cache"], lm.embed([state["next"]]))[-1]
            state["next"] = int(np.argmax(logits))
        state["pending"] = True
        return state["next"]


# ---------------------------------------------------------------------------
# score aggregation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScoreRow:
    gqa: float
    sqa_i: float
    vqa_t: float
    pope: float
    mme_p: float
    mmb_dev: float

    def __post_init__(self):
        for name in SCORE_FIELDS:
            v = float(getattr(self, name))
            hi = MME_MAX if name == "mme_p" else 100
            if not 0 <= v <= hi:
                raise ValidationError(f"{name}={v} outside [0, {hi}]")


def _dec(x) -> Decimal:
    return Decimal(repr(float(x))) if not isinstance(x, str) else Decimal(x)


def aggregate_scores_exact(row: ScoreRow) -> Decimal:
    """Unrounded six-benchmark mean; MME perception rescaled to percent (x / 2000 * 100)."""
    parts = [_dec(row.gqa), _dec(row.sqa_i), _dec(row.vqa_t), _dec(row.pope),
             _dec(row.mme_p) / MME_MAX * 100, _dec(row.mmb_dev)]
    return sum(parts) / 6


def aggregate_scores(row: ScoreRow) -> float:
    """Average rounded half-up to one decimal."""
    return float(aggregate_scores_exact(row).quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))


def format_avg(row: ScoreRow) -> str:
    return str(aggregate_scores_exact(row).quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))


REPORT_HEADER = ["label", *SCORE_FIELDS, "avg", "eval_avg_tokens_per_s", "total_s"]


def report_table(rows) -> str:
    """CSV of (label, ScoreRow, BenchReport | None) rows; averages are recomputed."""
    seen = set()
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    for label, score, bench in rows:
        if label in seen:
            raise ValidationError(f"duplicate label {label!r}")
        seen.add(label)
        w.writerow([
            label,
            *(repr(float(getattr(score, f))) for f in SCORE_FIELDS),
            format_avg(score),
            "" if bench is None else f"{bench.eval_avg:.2f}",
            "" if bench is None else f"{bench.total_s:.2f}",
        ])
    return buf.getvalue()


def read_score_rows(text: str) -> list[tuple[str, ScoreRow]]:
    """Parse ``label,gqa,sqa_i,vqa_t,pope,mme_p,mmb_dev`` CSV (header required)."""
    reader = csv.DictReader(io.StringIO(text))
    missing = {"label", *SCORE_FIELDS} - set(reader.fieldnames or [])
    if missing:
        raise ValidationError(f"score CSV missing columns: {sorted(missing)}")
    rows = []
    for rec in reader:
        try:
            vals = {f: float(rec[f]) for f in SCORE_FIELDS}
        except ValueError as e:
            raise ValidationError(f"row {rec.get('label')!r}: {e}") from None
        rows.append((rec["label"], ScoreRow(**vals)))
    return rows
