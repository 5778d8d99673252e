"""Parameter counting (closed-form and enumerated) and the PE metric."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import Optional

from .peft import HEAD_PATHS, AdaptedModel

FORMULA_METHODS = ("adapter", "lora", "compacter", "kadaptation")
M0_DEFAULT = 1e8

KADAPTATION_NOTE = (
    "The closed form 2L(d_model/n + r/n) + n^3 does not match direct enumeration "
    "of the factors, which gives r*(k+d) fast parameters per adapted k x d site plus n^3 shared."
)
COMPACTER_NOTE = (
    "The closed form 4L(k/n + d/n) + n^3 counts one rank-one pair per projection; "
    "enumeration of n rank-one pairs per projection gives n times that, plus biases."
)
LORA_NOTE = "The closed form 2*L*r*d_model counts one adapted d_model x d_model matrix per layer."


class DivisibilityError(ValueError):
    """A closed-form count did not resolve to an integer."""


@dataclass(frozen=True)
class CountInputs:
    L: int = 12
    k: int = 768
    d: int = 64
    d_model: int = 768
    r: int = 4
    n: int = 4

    def __post_init__(self) -> None:
        for name in ("L", "k", "d", "d_model", "r", "n"):
            if getattr(self, name) <= 0:
                raise ValueError(f"CountInputs.{name} must be positive")


def formula_count(method: str, inputs: CountInputs) -> int:
    """Evaluate the closed-form parameter count literally, in exact rationals."""
    L, k, d, dm, r, n = (Fraction(getattr(inputs, a)) for a in ("L", "k", "d", "d_model", "r", "n"))
    if method == "adapter":
        value = 4 * L * k * d
    elif method == "lora":
        value = 2 * L * r * dm
    elif method == "compacter":
        value = 4 * L * (k / n + d / n) + n**3
    elif method == "kadaptation":
        value = 2 * L * (dm / n + r / n) + n**3
    else:
        raise ValueError(f"no closed-form count for {method!r}; expected one of {FORMULA_METHODS}")
    if value.denominator != 1:
        raise DivisibilityError(f"{method} count {value} is not an integer for {inputs}")
    return int(value)


@dataclass
class Enumeration:
    head: int
    non_head: int
    breakdown: list

    @property
    def total(self) -> int:
        return self.head + self.non_head


def enumerate_count(adapted: AdaptedModel) -> Enumeration:
    """Exact trainable-parameter count split into head and non-head parts."""
    breakdown = sorted((p, adapted.params[p].size) for p in adapted.trainable)
    head = sum(c for p, c in breakdown if p in HEAD_PATHS)
    non_head = sum(c for p, c in breakdown if p not in HEAD_PATHS)
    return Enumeration(head, non_head, breakdown)


@dataclass(frozen=True)
class PEScore:
    score: float
    trainable_params: int
    M0: float
    pe: float


def pe_metric(score: float, trainable_params: int, M0: float = M0_DEFAULT) -> PEScore:
    """``score * exp(-log10(params / M0 + 1))``."""
    if not 0.0 <= score <= 1.0:
        raise ValueError(f"score must lie in [0, 1], got {score}")
    if trainable_params < 0:
        raise ValueError("trainable_params must be non-negative")
    if M0 <= 0:
        raise ValueError("M0 must be positive")
    pe = score * math.exp(-math.log10(trainable_params / M0 + 1.0))
    return PEScore(score, int(trainable_params), M0, pe)


def inputs_for(adapted: AdaptedModel) -> CountInputs:
    """Closed-form inputs matching an adapted vit's configuration."""
    s, cfg = adapted.strategy, adapted.config
    return CountInputs(
        L=1 if s and s.kind == "adapter_drop" else cfg.num_layers,
        k=cfg.d_model,
        d=s.bottleneck if s else 1,
        d_model=cfg.d_model,
        r=s.r if s else 1,
        n=s.n if s else 1,
    )


def _method_of(adapted: AdaptedModel) -> str:
    kind = adapted.strategy.kind if adapted.strategy else None
    if kind in ("adapter", "adapter_drop"):
        return "adapter"
    if kind in FORMULA_METHODS:
        return kind
    raise ValueError(f"strategy {kind!r} has no closed-form row")


def reconcile(method: Optional[str], inputs: Optional[CountInputs], adapted: AdaptedModel) -> dict:
    """Compare the closed form against enumeration of the adapted model's trainables."""
    method = method or _method_of(adapted)
    inputs = inputs or inputs_for(adapted)
    formula = formula_count(method, inputs)
    enum = enumerate_count(adapted)
    non_head_no_bias = sum(c for p, c in enum.breakdown if p not in HEAD_PATHS and not (p.startswith("adapter.") and p.endswith(".b")) and not p.endswith(".bias"))
    gap = enum.non_head - formula
    report = {
        "method": method,
        "strategy": adapted.strategy.label if adapted.strategy else None,
        "inputs": asdict(inputs),
        "formula_count": formula,
        "enumerated_non_head": enum.non_head,
        "enumerated_non_head_without_bias": non_head_no_bias,
        "enumerated_head": enum.head,
        "gap": gap,
        "relative_gap": gap / formula if formula else float("nan"),
        "gap_without_bias": non_head_no_bias - formula,
    }
    note = {"kadaptation": KADAPTATION_NOTE, "compacter": COMPACTER_NOTE, "lora": LORA_NOTE}.get(method)
    if note and gap != 0:
        report["note"] = note
    return report


# ------------------------------------------------------------------ reports

RESULT_COLUMNS_TAIL = ("mean_accuracy", "head_params", "non_head_params", "total_params", "pe", "failed_cells")
TIMING_COLUMNS = ("strategy", "dataset", "seed", "wall_clock_s", "peak_live_bytes", "inference_ms_per_image")


def results_csv(rows: list[dict], datasets: list[str]) -> str:
    """Results table: accuracy per dataset, mean, parameter counts, PE."""
    cols = ["strategy"] + [f"acc_{d}" for d in datasets] + list(RESULT_COLUMNS_TAIL)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for row in rows:
        out = []
        for c in cols:
            v = row.get(c, "")
            out.append(f"{v:.4f}" if isinstance(v, float) else v)
        w.writerow(out)
    return buf.getvalue()


def timing_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TIMING_COLUMNS)
    for row in rows:
        w.writerow([f"{row[c]:.4f}" if isinstance(row[c], float) else row[c] for c in TIMING_COLUMNS])
    return buf.getvalue()


def count_report_csv(rows: list[dict]) -> str:
    cols = ("strategy", "head_params", "non_head_params", "total_params", "formula_count", "gap")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for row in rows:
        w.writerow([row.get(c, "") for c in cols])
    return buf.getvalue()


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True)
