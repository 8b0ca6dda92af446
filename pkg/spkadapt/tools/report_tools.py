#   Copyright 2024 The spkadapt Authors
#   Licensed under the Apache License, Version 2.0 (the "License");
#   you may not use this file except in compliance with the License.
#   You may obtain a copy of the License at
#       http://www.apache.org/licenses/LICENSE-2.0
#   Unless required by applicable law or agreed to in writing, software
#   distributed under the License is distributed on an "AS IS" BASIS,
#   WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
#   See the License for the specific language governing permissions and
#   limitations under the License.

"""
Grid reports: an aligned plain-text table for people and long-form TAB-separated
records (one line per grid cell) for scripts. Both renderings are deterministic.
"""

import logging
import os

import pandas as pd

from spkadapt.exceptions import SpkadaptDevError
from spkadapt.tools.file_tools import atomic_write

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "{:.4f}"


def standardize_axes_names(df, index_name):
    """Name the row axis; unnamed single-level columns are named "Name"."""
    df.index.name = index_name
    if isinstance(df.columns, pd.MultiIndex):
        if any(name is None for name in df.columns.names):
            raise SpkadaptDevError(f"Grid columns need named levels, got {list(df.columns.names)}.")
    elif df.columns.name is None:
        df.columns.name = "Name"
    return df


def format_table(df, title=None):
    """Render a grid as an aligned plain-text table, missing cells shown as '-'."""
    body = df.to_string(float_format=FLOAT_FORMAT.format, na_rep="-")
    return f"{title}\n{body}\n" if title else f"{body}\n"


def line_records(df, table):
    """Long-form records: one TAB-separated line per grid cell with a header line.

    Columns are Table, the row axis name, one column per column level, and FER.
    """
    long_form = df.stack(list(range(df.columns.nlevels)), future_stack=True).rename("FER").reset_index()
    long_form.insert(0, "Table", table)
    return long_form.to_csv(sep="\t", index=False, float_format="%.6f", na_rep="NA", lineterminator="\n")


def write_report(df, out_dir, table, title=None):
    """Write <table>.txt and <table>.tsv into out_dir.

    Returns:
    tuple: (text table path, records path)
    """
    text_path = os.path.join(out_dir, f"{table}.txt")
    records_path = os.path.join(out_dir, f"{table}.tsv")
    with atomic_write(text_path, "w", encoding="utf-8") as out:
        out.write(format_table(df, title))
    with atomic_write(records_path, "w", encoding="utf-8") as out:
        out.write(line_records(df, table))
    logger.info("Wrote report %s (%d x %d)", table, *df.shape)
    return text_path, records_path
