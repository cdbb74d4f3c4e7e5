"""Module for listing the checkpoints of a run directory in a pandas DataFrame."""

from pathlib import Path
import re
from typing import Optional
from consistent_df import enforce_dtypes
import pandas as pd
from .constants import CHECKPOINT_COLUMNS

CHECKPOINT_PATTERN = re.compile(r"^ckpt_(\d+)\.rcvt$")


def checkpoint_name(step: int) -> str:
    return f"ckpt_{step:07d}.rcvt"


def list_checkpoints(directory: str | Path) -> pd.DataFrame:
    """Lists checkpoints in a run directory, with their step, size and
    modification time.

    Args:
        directory (str | Path): The run directory.

    Returns:
        pd.DataFrame: One row per checkpoint with CHECKPOINT_COLUMNS schema,
                      sorted by step. 'mtime' is in UTC.

    Raises:
        FileNotFoundError: If the directory does not exist or is not a directory.
    """
    directory_path = Path(directory).expanduser()
    if not directory_path.exists():
        raise FileNotFoundError(f"Directory not found: {directory}.")
    if not directory_path.is_dir():
        raise FileNotFoundError(f"`directory` is not a directory: {directory}.")

    rows = []
    for entry in directory_path.iterdir():
        match = CHECKPOINT_PATTERN.match(entry.name)
        if match and entry.is_file():
            stat = entry.stat()
            rows.append({
                "path": entry.name,
                "step": int(match.group(1)),
                "size": stat.st_size,
                "mtime_ns": stat.st_mtime_ns,
            })
    df = pd.DataFrame(rows, columns=["path", "step", "size", "mtime_ns"])
    df["mtime"] = (pd.to_datetime(df["mtime_ns"].astype("int64"), unit="ns")
                   .dt.tz_localize("UTC"))
    df = df.drop(columns="mtime_ns").sort_values("step").reset_index(drop=True)
    return enforce_dtypes(df, CHECKPOINT_COLUMNS)


def latest_checkpoint(directory: str | Path) -> Optional[Path]:
    """Path of the checkpoint with the highest step, or None if there is none."""
    df = list_checkpoints(directory)
    if df.empty:
        return None
    return Path(directory).expanduser() / df["path"].iloc[-1]
