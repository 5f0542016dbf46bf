"""
Report Exporter
Writes per-frame run data and benchmark tables to CSV files for analysis.
"""

import os
from datetime import datetime
from typing import Dict, List, Optional, Sequence

import pandas as pd

from src.streaming.modes import ModeResult


class ReportExporter:
    """
    Exports run results to timestamped CSV files.
    """

    def __init__(self, export_dir: str = "data/exports/"):
        """
        Initialize exporter.

        Args:
            export_dir: Directory for the CSV files (created if missing)
        """
        self.export_dir = export_dir
        os.makedirs(self.export_dir, exist_ok=True)

    def _path(self, prefix: str, filename: Optional[str]) -> str:
        if filename is None:
            timestamp = datetime.now().strftime("%Y%m%d_%H%M%S")
            filename = f"{prefix}_{timestamp}.csv"
        return os.path.join(self.export_dir, filename)

    def export_frames(self, result: ModeResult, filename: str = None) -> str:
        """
        One row per output frame: index, steps taken, latency.

        Args:
            result: Result of run_mode
            filename: Optional custom filename. If None, generates timestamped name.

        Returns:
            Path to created CSV file
        """
        filepath = self._path(f"frames_{result.mode}", filename)
        rows = [
            {
                "mode": result.mode,
                "frame_index": out.frame_index,
                "steps": len(out.step_log),
                "first_step": out.step_log[0] if out.step_log else None,
                "latency_ms": out.latency * 1000.0,
            }
            for out in result.outputs
        ]
        if rows:
            pd.DataFrame(rows).to_csv(filepath, index=False, encoding="utf-8")
            print(f"✓ Exported {len(rows)} frame rows to: {filepath}")
        else:
            pd.DataFrame(columns=["mode", "frame_index", "steps", "first_step", "latency_ms"]).to_csv(
                filepath, index=False, encoding="utf-8"
            )
            print("⚠ No frames to export")
        return filepath

    def export_bench(self, rows: Sequence[Dict], filename: str = None) -> str:
        """Write a benchmark table (one row per mode)."""
        filepath = self._path("bench", filename)
        pd.DataFrame(list(rows)).to_csv(filepath, index=False, encoding="utf-8")
        print(f"✓ Exported bench table to: {filepath}")
        return filepath

    def export_verification(self, rows: List[Dict], filename: str = None) -> str:
        filepath = self._path("verify", filename)
        pd.DataFrame(rows).to_csv(filepath, index=False, encoding="utf-8")
        print(f"✓ Exported {len(rows)} check results to: {filepath}")
        return filepath
