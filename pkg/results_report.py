"""
Results Report Module
PDF export of evaluation tables and MPC success summaries
"""

import logging
from datetime import datetime
from pathlib import Path
from typing import Dict, Optional, Union

import pandas as pd
from reportlab.lib import colors
from reportlab.lib.enums import TA_CENTER
from reportlab.lib.pagesizes import letter
from reportlab.lib.styles import ParagraphStyle, getSampleStyleSheet
from reportlab.lib.units import inch
from reportlab.platypus import Paragraph, SimpleDocTemplate, Spacer, Table, TableStyle

logger = logging.getLogger(__name__)

COLUMN_LABELS = {
    "rmse_pos_abs": "Pos. RMSE (m)",
    "rmse_pos_rel": "Pos. rel.",
    "rmse_rot_abs": "Rot. RMSE (rad)",
    "rmse_rot_rel": "Rot. rel.",
    "force_rmse": "Force RMSE (N)",
    "torque_rmse": "Torque RMSE (N m)",
}


def _format(value) -> str:
    if isinstance(value, float):
        if pd.isna(value):
            return "N/A"
        return f"{value:.4g}"
    return str(value)


def export_pdf(results: pd.DataFrame, path: Union[str, Path], title: str = "Rollout Evaluation",
               mpc_summary: Optional[Dict] = None, notes: Optional[Dict[str, str]] = None) -> Path:
    """
    Render the results table (and an optional MPC summary) to a PDF file

    Args:
        results: evaluation table, one row per model
        path: output PDF path
        title: document title
        mpc_summary: episodes / successes / halfway counts from the agent
        notes: extra key-value lines printed under the title (dataset, checkpoint, ...)

    Returns:
        Path of the written PDF
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = SimpleDocTemplate(str(path), pagesize=letter)
    elements = []
    styles = getSampleStyleSheet()

    title_style = ParagraphStyle(
        "ReportTitle",
        parent=styles["Heading1"],
        fontSize=22,
        textColor=colors.HexColor("#2c3e50"),
        spaceAfter=24,
        alignment=TA_CENTER,
    )
    elements.append(Paragraph(title, title_style))
    elements.append(Paragraph(f"Generated: {datetime.now().strftime('%Y-%m-%d %H:%M')}", styles["Normal"]))
    for key, value in (notes or {}).items():
        elements.append(Paragraph(f"{key}: {value}", styles["Normal"]))
    elements.append(Spacer(1, 20))

    if mpc_summary:
        summary_data = [
            ["Episodes", "Successes", "Inserted halfway", "Mean steps"],
            [str(mpc_summary.get("episodes", 0)), str(mpc_summary.get("successes", 0)),
             str(mpc_summary.get("halfway", 0)), _format(float(mpc_summary.get("mean_steps", 0.0)))],
        ]
        summary_table = Table(summary_data, colWidths=[1.6 * inch] * 4)
        summary_table.setStyle(TableStyle([
            ("BACKGROUND", (0, 0), (-1, 0), colors.HexColor("#3498db")),
            ("TEXTCOLOR", (0, 0), (-1, 0), colors.whitesmoke),
            ("ALIGN", (0, 0), (-1, -1), "CENTER"),
            ("FONTNAME", (0, 0), (-1, 0), "Helvetica-Bold"),
            ("BOTTOMPADDING", (0, 0), (-1, 0), 10),
            ("BACKGROUND", (0, 1), (-1, -1), colors.beige),
            ("GRID", (0, 0), (-1, -1), 1, colors.black),
        ]))
        elements.append(summary_table)
        elements.append(Spacer(1, 24))

    if results is not None and not results.empty:
        elements.append(Paragraph("Rollout Errors", styles["Heading2"]))
        elements.append(Spacer(1, 10))
        columns = list(results.columns)
        data = [[COLUMN_LABELS.get(c, c) for c in columns]]
        for _, row in results.iterrows():
            data.append([_format(row[c]) for c in columns])
        width = 7.0 * inch / max(len(columns), 1)
        table = Table(data, colWidths=[width] * len(columns))
        table.setStyle(TableStyle([
            ("BACKGROUND", (0, 0), (-1, 0), colors.HexColor("#34495e")),
            ("TEXTCOLOR", (0, 0), (-1, 0), colors.whitesmoke),
            ("FONTNAME", (0, 0), (-1, 0), "Helvetica-Bold"),
            ("FONTSIZE", (0, 0), (-1, -1), 8),
            ("BOTTOMPADDING", (0, 0), (-1, 0), 8),
            ("BACKGROUND", (0, 1), (-1, -1), colors.white),
            ("GRID", (0, 0), (-1, -1), 0.5, colors.grey),
            ("VALIGN", (0, 0), (-1, -1), "TOP"),
        ]))
        elements.append(table)

    doc.build(elements)
    logger.info("PDF report written to %s", path)
    return path
