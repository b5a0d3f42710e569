"""Plain-text results table in the appendix layout."""

from __future__ import annotations

HEADER = "Year & Outcome & ATE & se"


def summary_row(outcome: str, year: int, late: float, late_se: float) -> str:
    return f"{year} & {outcome} & {late:.2f} & {late_se:.2f}"


def render_report(rows: list[dict]) -> str:
    """One line per (outcome, year) summary, in the order given."""
    lines = [HEADER]
    for row in rows:
        lines.append(
            summary_row(row["outcome"], int(row["year"]),
                        float(row["late"]), float(row["late_se"]))
        )
    return "\n".join(lines) + "\n"
