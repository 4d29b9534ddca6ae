from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd


@dataclass
class IterationRecord:
    """
    Telemetry of one outer attack iteration.

    target_category / target_score / target_score_after are filled by SCA
    (summed softmax of the attacked category over its pixel set, before and
    after the iteration). loss_sum is filled by DCA.
    """
    outer: int
    remaining_pixels: int
    inner_steps: int = 0
    target_category: Optional[int] = None
    target_score: Optional[float] = None
    target_score_after: Optional[float] = None
    loss_sum: Optional[float] = None
    degenerate: bool = False

    def to_record(self) -> Dict[str, Any]:
        return {k: v for k, v in asdict(self).items() if v is not None}


@dataclass
class AttackResult:
    method: str
    adversarial: np.ndarray   # H x W x 3 in [0, 1]
    perturbation: np.ndarray  # adversarial - clean, float64
    success: bool
    outer_iterations: int
    inner_iterations: int
    p_l0: float
    p_l2: float
    linf: float
    elapsed_s: float
    telemetry: List[IterationRecord] = field(default_factory=list)
    budget: Dict[str, float] = field(default_factory=dict)
    t_attack: Optional[float] = None
    detected_only: bool = False

    @property
    def l0_pixels(self) -> int:
        return int(np.any(np.abs(self.perturbation) > 1e-12, axis=-1).sum())

    def to_record(self, include_timing: bool = False) -> Dict[str, Any]:
        record: Dict[str, Any] = {
            "method": self.method,
            "success": self.success,
            "outer_iterations": self.outer_iterations,
            "inner_iterations": self.inner_iterations,
            "l0_pixels": self.l0_pixels,
            "p_l0": self.p_l0,
            "p_l2": self.p_l2,
            "linf": self.linf,
            "t_attack": self.t_attack,
            "detected_only": self.detected_only,
            "telemetry": [it.to_record() for it in self.telemetry],
        }
        if self.budget:
            record["budget"] = dict(self.budget)
        if include_timing:
            record["elapsed_s"] = self.elapsed_s
        return record

    @classmethod
    def from_record(cls, record: Dict[str, Any], adversarial: np.ndarray, perturbation: np.ndarray
                    ) -> "AttackResult":
        return cls(
            method=record["method"],
            adversarial=adversarial,
            perturbation=perturbation,
            success=bool(record["success"]),
            outer_iterations=int(record["outer_iterations"]),
            inner_iterations=int(record["inner_iterations"]),
            p_l0=float(record["p_l0"]),
            p_l2=float(record["p_l2"]),
            linf=float(record["linf"]),
            elapsed_s=float(record.get("elapsed_s", 0.0)),
            telemetry=[IterationRecord(**it) for it in record.get("telemetry", [])],
            budget=dict(record.get("budget", {})),
            t_attack=record.get("t_attack"),
            detected_only=bool(record.get("detected_only", False)),
        )


def summary_frame(records: List[Dict[str, Any]]) -> pd.DataFrame:
    """One row per attacked image from per-image JSON records (``index`` key added by the caller)."""
    columns = ["index", "method", "success", "outer_iterations", "inner_iterations",
               "l0_pixels", "p_l0", "p_l2", "linf"]
    if not records:
        return pd.DataFrame(columns=columns)
    frame = pd.DataFrame([{k: r.get(k) for k in columns + ["elapsed_s"]} for r in records])
    return frame.sort_values("index").reset_index(drop=True)


def telemetry_frame(records: List[Dict[str, Any]]) -> pd.DataFrame:
    """Long table of per-iteration telemetry across images."""
    rows = []
    for record in records:
        for it in record.get("telemetry", []):
            rows.append({"index": record.get("index"), "method": record.get("method"), **it})
    if not rows:
        return pd.DataFrame(columns=["index", "method", "outer", "remaining_pixels"])
    return pd.DataFrame(rows).sort_values(["index", "outer"]).reset_index(drop=True)
