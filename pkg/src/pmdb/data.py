"""Offline transition datasets: ``(s, a, r, s_next, done)`` records."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

CSV_HEADER = ("s", "a", "r", "s_next", "done")


class DatasetRecord(NamedTuple):
    s: int
    a: int
    r: float
    s_next: int
    done: bool


@dataclass
class Dataset:
    """Column-oriented store of logged transitions, in visit order."""

    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    done: np.ndarray

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=np.int64)
        self.a = np.asarray(self.a, dtype=np.int64)
        self.r = np.asarray(self.r, dtype=float)
        self.s_next = np.asarray(self.s_next, dtype=np.int64)
        self.done = np.asarray(self.done, dtype=bool)
        n = len(self.s)
        if not all(len(col) == n for col in (self.a, self.r, self.s_next, self.done)):
            raise ValueError("dataset columns have different lengths")

    def __len__(self) -> int:
        return len(self.s)

    def __iter__(self) -> Iterator[DatasetRecord]:
        for i in range(len(self)):
            yield DatasetRecord(int(self.s[i]), int(self.a[i]), float(self.r[i]),
                                int(self.s_next[i]), bool(self.done[i]))

    @classmethod
    def empty(cls) -> "Dataset":
        return cls([], [], [], [], [])

    @classmethod
    def from_records(cls, records) -> "Dataset":
        records = list(records)
        if not records:
            return cls.empty()
        cols = list(zip(*records))
        return cls(*cols)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.s[idx], self.a[idx], self.r[idx], self.s_next[idx], self.done[idx])

    def check_indices(self, num_states: int, num_actions: int):
        if len(self) == 0:
            return
        if (self.s.min() < 0 or self.s.max() >= num_states
                or self.s_next.min() < 0 or self.s_next.max() >= num_states):
            raise ValueError(f"dataset references a state outside [0, {num_states})")
        if self.a.min() < 0 or self.a.max() >= num_actions:
            raise ValueError(f"dataset references an action outside [0, {num_actions})")

    def counts(self, num_states: int, num_actions: int) -> np.ndarray:
        """Transition counts ``n[s, a, s']``."""
        self.check_indices(num_states, num_actions)
        flat = (self.s * num_actions + self.a) * num_states + self.s_next
        n = np.bincount(flat, minlength=num_states * num_actions * num_states)
        return n.reshape(num_states, num_actions, num_states).astype(float)

    def mean_rewards(self, num_states: int, num_actions: int,
                     default: np.ndarray | float = 0.0) -> np.ndarray:
        """Per-(s, a) average logged reward; unseen cells take ``default``."""
        self.check_indices(num_states, num_actions)
        flat = self.s * num_actions + self.a
        size = num_states * num_actions
        total = np.bincount(flat, weights=self.r, minlength=size)
        n = np.bincount(flat, minlength=size)
        out = np.broadcast_to(np.asarray(default, dtype=float), (num_states, num_actions)).ravel().copy()
        seen = n > 0
        out[seen] = total[seen] / n[seen]
        return out.reshape(num_states, num_actions)

    def to_csv(self, path: str | Path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(CSV_HEADER)
            for rec in self:
                w.writerow([rec.s, rec.a, repr(rec.r), rec.s_next, int(rec.done)])

    @classmethod
    def from_csv(cls, path: str | Path) -> "Dataset":
        with open(path, newline="") as f:
            reader = csv.DictReader(f)
            if tuple(reader.fieldnames or ()) != CSV_HEADER:
                raise ValueError(f"expected header {','.join(CSV_HEADER)}, got {reader.fieldnames}")
            records = [DatasetRecord(int(row["s"]), int(row["a"]), float(row["r"]),
                                     int(row["s_next"]), row["done"].strip() in ("1", "true", "True"))
                       for row in reader]
        return cls.from_records(records)
