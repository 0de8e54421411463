from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Dict, List, Mapping, Sequence, Union

from pir.core.errors import NonFiniteLossError

BASE_COLUMNS = ("iter", "stage")


class LossLog:
    """Append-only CSV of per-iteration loss terms: ``iter,stage,<terms...>,total``.

    The term columns are fixed by the first row; later rows missing a term
    leave that cell empty.
    """

    def __init__(self, path: Union[str, Path], terms: Sequence[str] = (), resume: bool = False) -> None:
        self.path = Path(path)
        self.terms: List[str] = [t for t in terms if t != "total"]
        self._started = False
        if resume and self.path.exists():
            with open(self.path, "r", encoding="utf-8", newline="") as handle:
                header = next(csv.reader(handle), [])
            if header:
                self.terms = [name for name in header if name not in BASE_COLUMNS and name != "total"]
                self._started = True

    @property
    def columns(self) -> List[str]:
        return [*BASE_COLUMNS, *self.terms, "total"]

    def _start(self, row: Mapping[str, float]) -> None:
        for name in row:
            if name != "total" and name not in self.terms:
                self.terms.append(name)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w", encoding="utf-8", newline="") as handle:
            csv.writer(handle).writerow(self.columns)
        self._started = True

    def drop_from(self, iteration: int, stage: str) -> int:
        """Remove rows of ``stage`` at or after ``iteration``; returns how many were removed."""
        if not self.path.exists():
            return 0
        with open(self.path, "r", encoding="utf-8", newline="") as handle:
            records = list(csv.reader(handle))
        if not records:
            return 0
        header, body = records[0], records[1:]
        kept = [cells for cells in body if not (cells[1] == stage and int(cells[0]) >= iteration)]
        with open(self.path, "w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(header)
            writer.writerows(kept)
        return len(body) - len(kept)

    def append(self, iteration: int, stage: str, row: Mapping[str, float]) -> None:
        for name, value in row.items():
            if not math.isfinite(float(value)):
                raise NonFiniteLossError(name, float(value))
        if not self._started:
            self._start(row)
        unknown = [name for name in row if name != "total" and name not in self.terms]
        if unknown:
            raise KeyError(f"loss log {self.path} has no column for {', '.join(unknown)}")
        cells = [str(int(iteration)), stage]
        cells += [repr(float(row[name])) if name in row else "" for name in self.terms]
        cells.append(repr(float(row.get("total", 0.0))))
        with open(self.path, "a", encoding="utf-8", newline="") as handle:
            csv.writer(handle).writerow(cells)


def read_loss_log(path: Union[str, Path]) -> List[Dict[str, object]]:
    rows: List[Dict[str, object]] = []
    with open(path, "r", encoding="utf-8", newline="") as handle:
        for record in csv.DictReader(handle):
            parsed: Dict[str, object] = {"iter": int(record["iter"]), "stage": record["stage"]}
            for key, value in record.items():
                if key in BASE_COLUMNS:
                    continue
                parsed[key] = float(value) if value != "" else None
            rows.append(parsed)
    return rows
