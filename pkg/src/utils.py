"""
Utility functions for reading and writing run artifacts.
"""
import hashlib
import json
from pathlib import Path
from typing import Any, Union

import pandas as pd

# Constants
DEFAULT_OUTPUT_DIR = "data/runs"
HASH_LENGTH = 12


def _target(filename: str, output_dir: Union[str, Path]) -> Path:
    # Strip any directory components from the filename
    output_path = Path(output_dir).resolve()
    output_path.mkdir(parents=True, exist_ok=True)
    return output_path / Path(filename).name


def save_to_json(data: Any, filename: str, output_dir: Union[str, Path] = DEFAULT_OUTPUT_DIR) -> str:
    """Save data to JSON file.

    Keys are sorted so identical data always produces identical bytes.

    Args:
        data: Data to save
        filename: Output filename
        output_dir: Output directory path

    Returns:
        Absolute path to saved file
    """
    filepath = _target(filename, output_dir)
    with open(filepath, 'w', encoding='utf-8') as f:
        json.dump(data, f, indent=2, sort_keys=True, ensure_ascii=False)
        f.write("\n")
    return str(filepath)


def load_json(path: Union[str, Path]) -> Any:
    """Load a JSON file."""
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)


def save_to_csv(data: Union[list[dict], pd.DataFrame], filename: str,
                output_dir: Union[str, Path] = DEFAULT_OUTPUT_DIR) -> str:
    """Save tabular data to CSV file.

    Args:
        data: List of dictionaries or a DataFrame
        filename: Output filename
        output_dir: Output directory path

    Returns:
        Absolute path to saved file
    """
    filepath = _target(filename, output_dir)
    df = data if isinstance(data, pd.DataFrame) else pd.DataFrame(data)
    df.to_csv(filepath, index=False, encoding='utf-8')
    return str(filepath)


def save_to_excel(data: Union[list[dict], pd.DataFrame], filename: str,
                  output_dir: Union[str, Path] = DEFAULT_OUTPUT_DIR) -> str:
    """Save tabular data to an Excel workbook.

    Args:
        data: List of dictionaries or a DataFrame
        filename: Output filename
        output_dir: Output directory path

    Returns:
        Absolute path to saved file
    """
    filepath = _target(filename, output_dir)
    df = data if isinstance(data, pd.DataFrame) else pd.DataFrame(data)
    df.to_excel(filepath, index=False, engine='openpyxl')
    return str(filepath)


def config_hash(canonical_config: str, seed: int) -> str:
    """Short, stable identifier of a (config, seed) pair."""
    digest = hashlib.sha256(f"{canonical_config}|seed={seed}".encode("utf-8")).hexdigest()
    return digest[:HASH_LENGTH]
