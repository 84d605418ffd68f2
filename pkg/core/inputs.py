# core/inputs.py
from __future__ import annotations
import io
from dataclasses import dataclass
from pathlib import Path
from typing import List, Union

import numpy as np
import pandas as pd

from core.errors import InputParseError, InvalidDataset
from core.km import SurvivalDataset


@dataclass(frozen=True, eq=False)
class InputTable:
    """ヘッダ time,status,x1,…,xp の CSV"""
    frame: pd.DataFrame
    source: str = "<memory>"

    @property
    def covariate_names(self) -> List[str]:
        return list(self.frame.columns[2:])

    @property
    def n(self) -> int:
        return int(len(self.frame))

    @property
    def p(self) -> int:
        return int(self.frame.shape[1] - 2)

    def to_dataset(self) -> SurvivalDataset:
        f = self.frame
        return SurvivalDataset(
            f["time"].to_numpy(float), f["status"].to_numpy(np.int64), f[self.covariate_names].to_numpy(float)
        )


def _first_bad(mask: np.ndarray) -> int:
    # データ 1 行目はファイルの 2 行目
    return int(np.flatnonzero(mask)[0]) + 2


def parse_csv(text: str, source: str = "<memory>") -> InputTable:
    if not text.strip():
        raise InputParseError("empty input; expected header time,status,x1,...", line=1)
    try:
        raw = pd.read_csv(io.StringIO(text), dtype=str, skipinitialspace=True, keep_default_na=False)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise InputParseError(f"malformed CSV: {e}") from e

    # pandas は重複列名を x, x.1 に書き換えるのでヘッダ行は生のまま見る
    cols = [c.strip() for c in text.lstrip().splitlines()[0].split(",")]
    if len(cols) < 3 or cols[0] != "time" or cols[1] != "status":
        raise InputParseError(f"header must be time,status,x1,...,xp; got {','.join(cols)}", line=1)
    if len(set(cols)) != len(cols):
        raise InputParseError("duplicate column names in header", line=1)
    if len(cols) != raw.shape[1]:
        raise InputParseError("header could not be parsed as plain comma-separated names", line=1)
    raw.columns = cols
    if raw.empty:
        raise InputParseError("no data rows after the header", line=2)

    blank = (raw.isna() | (raw.apply(lambda s: s.str.strip()) == "")).to_numpy()
    if blank.any():
        raise InputParseError("missing cell", line=_first_bad(blank.any(axis=1)))
    num = raw.apply(pd.to_numeric, errors="coerce")
    bad = num.isna().to_numpy()
    if bad.any():
        line = _first_bad(bad.any(axis=1))
        col = cols[int(np.flatnonzero(bad[line - 2])[0])]
        raise InputParseError(f"non-numeric value in column {col}", line=line)

    t = num["time"].to_numpy(float)
    if not np.all(np.isfinite(t)) or np.any(t <= 0):
        raise InvalidDataset(f"line {_first_bad(~(np.isfinite(t) & (t > 0)))}: time must be positive")
    s = num["status"].to_numpy(float)
    if not np.all(np.isin(s, (0.0, 1.0))):
        raise InvalidDataset(f"line {_first_bad(~np.isin(s, (0.0, 1.0)))}: status must be 0 or 1")
    num["status"] = num["status"].astype(np.int64)
    return InputTable(num, source)


def read_table(path: Union[str, Path]) -> InputTable:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as e:
        raise InputParseError(f"{path}: not UTF-8 text") from e
    return parse_csv(text, str(path))
