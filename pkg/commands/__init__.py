"""One module per pipeline stage; each exposes `run(args, config) -> int`."""

import logging
import os

import pandas as pd

from utils.errors import ConfigError

logger = logging.getLogger(__name__)


def parse_cell(text: str):
    """'3,5' -> (3, 5)"""
    try:
        ix, iy = (int(part) for part in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"cell must look like 'ix,iy', got {text!r}") from exc
    return ix, iy


def write_frame(frame: pd.DataFrame, out_dir: str, filename: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, filename)
    frame.to_csv(path, index=False)
    logger.info("Wrote %s (%d rows)", path, len(frame))
    return path
