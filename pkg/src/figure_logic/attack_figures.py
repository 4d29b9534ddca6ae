from __future__ import annotations

import numpy as np
import pandas as pd
import plotly.graph_objects as go
from plotly.subplots import make_subplots

from eval_metrics import EvalReport

CLEAN_COLOR = "steelblue"
ATTACK_COLOR = "lightcoral"


def category_ap_figure(report: EvalReport) -> go.Figure:
    names = list(report.per_category.keys())
    fig = go.Figure()
    fig.add_trace(
        go.Bar(
            x=names,
            y=[report.per_category[n].clean for n in names],
            name="clean",
            marker=dict(color=CLEAN_COLOR),
            hovertemplate="<b>%{x}</b><br>AP clean: %{y:.3f}<extra></extra>",
        )
    )
    fig.add_trace(
        go.Bar(
            x=names,
            y=[report.per_category[n].attack for n in names],
            name="attack",
            marker=dict(color=ATTACK_COLOR),
            hovertemplate="<b>%{x}</b><br>AP attack: %{y:.3f}<extra></extra>",
        )
    )
    fig.update_layout(
        title=f"Per-category AP, mAP {report.map_clean:.3f} -> {report.map_attack:.3f} (ASR {report.asr:.3f})",
        barmode="group",
        height=450,
        margin=dict(l=20, r=20, t=70, b=20),
        yaxis=dict(title="AP@0.5", range=[0, 1.05]),
    )
    return fig


def perceptibility_figure(summary: pd.DataFrame) -> go.Figure:
    """P_L0 against P_L2 per image, successful attacks and failures separated."""
    fig = go.Figure()
    if summary.empty:
        fig.update_layout(title="Perceptibility (no attacked images)", height=450)
        return fig

    for success, color, label in ((True, ATTACK_COLOR, "success"), (False, "gray", "failed")):
        part = summary[summary["success"] == success]
        if part.empty:
            continue
        fig.add_trace(
            go.Scatter(
                x=part["p_l0"],
                y=part["p_l2"],
                mode="markers",
                name=label,
                marker=dict(color=color, size=8, opacity=0.7),
                customdata=np.stack([part["index"], part["outer_iterations"]], axis=-1),
                hovertemplate=(
                    "<b>image %{customdata[0]:05d}</b><br>"
                    "P_L0: %{x:.4f}<br>"
                    "P_L2: %{y:.5f}<br>"
                    "outer iterations: %{customdata[1]}"
                    "<extra></extra>"
                ),
            )
        )
    fig.update_layout(
        title="Perceptibility per image",
        height=450,
        margin=dict(l=20, r=20, t=70, b=20),
        xaxis_title="P_L0 (fraction of pixels)",
        yaxis_title="P_L2 (RMS)",
    )
    return fig


def telemetry_figure(telemetry: pd.DataFrame) -> go.Figure:
    fig = make_subplots(
        rows=2,
        cols=1,
        shared_xaxes=True,
        vertical_spacing=0.08,
        subplot_titles=["Remaining target pixels", "Attack objective"],
    )
    if telemetry.empty:
        fig.update_layout(title="Attack telemetry (empty)", height=600)
        return fig

    for index, part in telemetry.groupby("index", sort=True):
        fig.add_trace(
            go.Scatter(
                x=part["outer"],
                y=part["remaining_pixels"],
                mode="lines",
                line=dict(color="gray", width=1),
                opacity=0.3,
                showlegend=False,
                hovertemplate=f"image {int(index):05d}<br>" + "outer %{x}: %{y} pixels<extra></extra>",
            ),
            row=1, col=1,
        )

    mean_remaining = telemetry.groupby("outer")["remaining_pixels"].mean()
    fig.add_trace(
        go.Scatter(
            x=mean_remaining.index,
            y=mean_remaining.values,
            mode="lines+markers",
            line=dict(color=ATTACK_COLOR, width=3),
            name="mean remaining",
        ),
        row=1, col=1,
    )

    objective = "target_score_after" if "target_score_after" in telemetry else "loss_sum"
    if objective in telemetry:
        per_outer = telemetry.groupby("outer")[objective].mean()
        fig.add_trace(
            go.Scatter(
                x=per_outer.index,
                y=per_outer.values,
                mode="lines+markers",
                line=dict(color=CLEAN_COLOR, width=3),
                name="target summed softmax" if objective == "target_score_after" else "cross-entropy sum",
            ),
            row=2, col=1,
        )

    fig.update_layout(
        title="Attack telemetry per outer iteration",
        height=600,
        margin=dict(l=20, r=20, t=70, b=20),
    )
    fig.update_xaxes(title_text="outer iteration", row=2, col=1)
    return fig
