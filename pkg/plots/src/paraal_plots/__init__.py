"""Figures from paraal experiment CSVs: learning curves, selection
tables, and entropy histograms."""

from .figures import (FigureSpec, SchemaError, entropy_histogram_groups,
                      learning_curve_series, render, type_table_cells)

__all__ = ["FigureSpec", "SchemaError", "entropy_histogram_groups",
           "learning_curve_series", "render", "type_table_cells"]
