from __future__ import annotations

from io import BytesIO
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import pandas as pd
from openpyxl import Workbook
from openpyxl.styles import Font
from openpyxl.utils import get_column_letter

from exporters.metrics_csv import summary_rows


# Excel caps sheet titles at 31 characters
MAX_TITLE = 31


def build_summary_xlsx(summary: Dict[str, Any], tables: Optional[Dict[str, pd.DataFrame]] = None) -> bytes:
    """
    One "Summary" sheet of scalar results and one sheet per replica table
    (normally the per-replica summaries, not the per-step metrics).
    """
    wb = Workbook()
    ws = wb.active
    ws.title = "Summary"

    ws.append(["Key", "Value"])
    for cell in ws[1]:
        cell.font = Font(bold=True)
    for row in summary_rows(summary):
        ws.append([row["key"], row["value"]])

    widths = [48, 28]
    for i, w in enumerate(widths, start=1):
        ws.column_dimensions[get_column_letter(i)].width = w

    for name, frame in (tables or {}).items():
        sheet = wb.create_sheet(title=name[:MAX_TITLE])
        headers: List[str] = [str(c) for c in frame.columns]
        sheet.append(headers)
        for cell in sheet[1]:
            cell.font = Font(bold=True)
        for values in frame.itertuples(index=False):
            sheet.append([None if pd.isna(v) else (v.item() if hasattr(v, "item") else v) for v in values])
        for i, h in enumerate(headers, start=1):
            sheet.column_dimensions[get_column_letter(i)].width = max(12, min(40, len(h) + 2))

    out = BytesIO()
    wb.save(out)
    return out.getvalue()


def write_summary_xlsx(summary: Dict[str, Any], path: Union[str, Path], tables: Optional[Dict[str, pd.DataFrame]] = None) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(build_summary_xlsx(summary, tables))
    return out
