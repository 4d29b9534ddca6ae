# attack_report.py
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Union

import pandas as pd
from jinja2 import Environment, FileSystemLoader, select_autoescape
from markupsafe import Markup, escape

from eval_metrics import EvalReport
from figure_logic.attack_figures import category_ap_figure, perceptibility_figure, telemetry_figure
from utils import atomic_write_bytes

try:
    from plotly.offline import get_plotlyjs  # type: ignore
except Exception:  # pragma: no cover
    get_plotlyjs = None  # type: ignore

TEMPLATE_DIR = Path(__file__).resolve().parent / "figure_logic"
TEMPLATE_NAME = "attack_report_template.html"


def _slugify(s: str) -> str:
    s = s.strip().lower()
    s = re.sub(r"[^a-z0-9]+", "-", s)
    s = re.sub(r"-{2,}", "-", s).strip("-")
    return s or "figure"


@dataclass
class FigureEntry:
    category: str
    title: str
    figure_html: str
    notes: List[str] = field(default_factory=list)
    id: Optional[str] = None

    def normalized_id(self) -> str:
        if self.id and self.id.strip():
            return _slugify(self.id)
        return _slugify(f"{self.category}-{self.title}")


class AttackReport:
    """
    Single-file offline HTML report: Jinja2 page with plotly.js inlined once
    and one fragment per figure.
    """

    def __init__(self, *, version: str, run_info: Dict[str, str],
                 report_title_base: str = "Category-wise Attack Lab") -> None:
        self.version = str(version)
        self.run_info = {str(k): str(v) for k, v in run_info.items()}
        self.report_title_base = str(report_title_base)
        self._figures: List[FigureEntry] = []

    def add_figure(self, entry: Union[FigureEntry, Dict[str, Any]]) -> str:
        """Add a figure entry; returns its unique id."""
        if isinstance(entry, dict):
            entry = FigureEntry(
                category=entry["category"],
                title=entry["title"],
                figure_html=entry["figure_html"],
                notes=list(entry.get("notes", [])),
                id=entry.get("id"),
            )
        if not entry.category or not entry.title:
            raise ValueError("Figure entry must have non-empty 'category' and 'title'.")
        if not isinstance(entry.figure_html, str) or not entry.figure_html.strip():
            raise ValueError("Figure entry must have non-empty 'figure_html' string.")
        entry.notes = [str(x) for x in entry.notes or []]
        self._figures.append(entry)
        return self._unique_ids()[-1]

    def add_figures(self, entries: Iterable[Union[FigureEntry, Dict[str, Any]]]) -> List[str]:
        return [self.add_figure(e) for e in entries]

    def add_default_figures(self, report: EvalReport, summary: pd.DataFrame, telemetry: pd.DataFrame) -> List[str]:
        return self.add_figures([
            {
                "category": "Accuracy",
                "title": "Per-category AP",
                "figure_html": self.plotly_fragment(category_ap_figure(report)),
                "notes": [f"ASR = 1 - mAP_attack / mAP_clean = {report.asr:.4f}"],
            },
            {
                "category": "Perceptibility",
                "title": "P_L0 vs P_L2",
                "figure_html": self.plotly_fragment(perceptibility_figure(summary)),
                "notes": [f"Means over successful attacks: P_L0 {report.p_l0:.4f}, P_L2 {report.p_l2:.5f}"],
            },
            {
                "category": "Telemetry",
                "title": "Outer iterations",
                "figure_html": self.plotly_fragment(telemetry_figure(telemetry)),
                "notes": ["Pixels leave a target set once their score falls below t_attack."],
            },
        ])

    @staticmethod
    def plotly_fragment(fig: Any, *, div_id: Optional[str] = None) -> str:
        """Embeddable fragment of a plotly figure, without plotly.js."""
        to_html = getattr(fig, "to_html", None)
        if not callable(to_html):
            raise TypeError("fig must be a Plotly figure with a .to_html(...) method")
        return str(fig.to_html(full_html=False, include_plotlyjs=False, div_id=div_id,
                               config={"responsive": True}))

    def render(self, output_path: Union[str, Path]) -> Path:
        output_path = Path(output_path)
        atomic_write_bytes(output_path, self.render_string().encode("utf-8"))
        return output_path

    def render_string(self) -> str:
        if get_plotlyjs is None:
            raise RuntimeError("plotly.offline.get_plotlyjs is not available; install 'plotly'.")

        ids = self._unique_ids()
        figures = [{
            "id": ids[i],
            "category": e.category,
            "title": e.title,
            "figure_html": Markup(e.figure_html),
            "notes": [escape(n) for n in e.notes],
        } for i, e in enumerate(self._figures)]

        # sidebar groups keep first-appearance order
        groups: Dict[str, List[Dict[str, str]]] = {}
        for f in figures:
            groups.setdefault(f["category"], []).append({"id": f["id"], "title": f["title"]})

        env = Environment(loader=FileSystemLoader(TEMPLATE_DIR), autoescape=select_autoescape(["html"]))
        return env.get_template(TEMPLATE_NAME).render(
            page_title=f"{self.report_title_base} v{self.version}",
            report_title_base=self.report_title_base,
            version=self.version,
            run_info_items=list(self.run_info.items()),
            categories=[{"name": k, "items": v} for k, v in groups.items()],
            figures=figures,
            plotly_js=Markup(get_plotlyjs()),
            figures_index_json=Markup(json.dumps(
                [{"id": f["id"], "title": f["title"], "category": f["category"]} for f in figures],
                ensure_ascii=False,
            )),
        )

    def _unique_ids(self) -> List[str]:
        used: Dict[str, int] = {}
        result: List[str] = []
        for e in self._figures:
            base = e.normalized_id()
            n = used.get(base, 0)
            used[base] = n + 1
            result.append(base if n == 0 else f"{base}-{n + 1}")
        return result
