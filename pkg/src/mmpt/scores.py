"""ScoreTable: per-sample attribute/object probabilities, the model -> metrics contract.

JSON layout::

    {"format": "mmpt-scores/1", "attributes": [...], "objects": [...],
     "sample_ids": [...], "labels": [[attr, obj], ...],
     "rho_a": [[...]], "rho_o": [[...]],      # factorized producers
     "grid": [[[...]]],                        # or dense n x |A| x |O| scores
     "space": {...}}                           # optional space definition

CSV layout: one row per sample with columns ``sample_id, label_attribute,
label_object`` followed by ``a:<name>`` and ``o:<name>`` probability columns.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .space import CompositionSpace, space_from_dict


class ScoreTableError(ValueError):
    pass


@dataclass
class ScoreTable:
    attributes: list
    objects: list
    sample_ids: list
    rho_a: np.ndarray | None = None
    rho_o: np.ndarray | None = None
    labels: np.ndarray | None = None  # (n, 2) attribute/object indices
    grid: np.ndarray | None = None
    space: CompositionSpace | None = field(default=None, repr=False)

    def __post_init__(self):
        n = len(self.sample_ids)
        if self.grid is None:
            if self.rho_a is None or self.rho_o is None:
                raise ScoreTableError("need either rho_a and rho_o, or a dense grid")
            self.rho_a = np.asarray(self.rho_a, dtype=np.float64)
            self.rho_o = np.asarray(self.rho_o, dtype=np.float64)
            if self.rho_a.shape != (n, len(self.attributes)):
                raise ScoreTableError(f"rho_a has shape {self.rho_a.shape}, expected {(n, len(self.attributes))}")
            if self.rho_o.shape != (n, len(self.objects)):
                raise ScoreTableError(f"rho_o has shape {self.rho_o.shape}, expected {(n, len(self.objects))}")
        else:
            self.grid = np.asarray(self.grid, dtype=np.float64)
            if self.grid.shape != (n, len(self.attributes), len(self.objects)):
                raise ScoreTableError(f"grid has shape {self.grid.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(n, 2)

    def __len__(self) -> int:
        return len(self.sample_ids)

    @property
    def factorized(self) -> bool:
        return self.grid is None

    def composition_scores(self) -> np.ndarray:
        """(n, |A|, |O|) grid of rho_a(a) * rho_o(o), or the stored dense grid."""
        if self.grid is not None:
            return self.grid
        return self.rho_a[:, :, None] * self.rho_o[:, None, :]

    def check_normalized(self, tol: float = 1e-6) -> None:
        if not self.factorized:
            return
        for name, rho in (("rho_a", self.rho_a), ("rho_o", self.rho_o)):
            if not np.all(rho > 0):
                raise ScoreTableError(f"{name} has non-positive entries")
            if np.max(np.abs(rho.sum(axis=1) - 1)) > tol:
                raise ScoreTableError(f"{name} rows do not sum to 1")

    def to_dict(self) -> dict:
        d = {
            "format": "mmpt-scores/1",
            "attributes": list(self.attributes),
            "objects": list(self.objects),
            "sample_ids": [int(s) if isinstance(s, (int, np.integer)) else s for s in self.sample_ids],
        }
        if self.labels is not None:
            d["labels"] = [[self.attributes[a], self.objects[o]] for a, o in self.labels]
        if self.grid is None:
            d["rho_a"] = self.rho_a.tolist()
            d["rho_o"] = self.rho_o.tolist()
        else:
            d["grid"] = self.grid.tolist()
        if self.space is not None:
            d["space"] = self.space.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScoreTable":
        for key in ("attributes", "objects", "sample_ids"):
            if key not in d:
                raise ScoreTableError(f"score table is missing {key!r}")
        attrs, objs = list(d["attributes"]), list(d["objects"])
        labels = None
        if "labels" in d:
            try:
                labels = [[attrs.index(a), objs.index(o)] for a, o in d["labels"]]
            except ValueError as e:
                raise ScoreTableError(f"label not in the score table vocabulary: {e}") from None
        space = space_from_dict(d["space"]) if "space" in d else None
        return cls(attrs, objs, list(d["sample_ids"]), d.get("rho_a"), d.get("rho_o"), labels, d.get("grid"), space)

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    def save_csv(self, path) -> None:
        if not self.factorized:
            raise ScoreTableError("CSV export supports factorized tables only; use JSON for dense grids")
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["sample_id", "label_attribute", "label_object"]
                       + [f"a:{a}" for a in self.attributes] + [f"o:{o}" for o in self.objects])
            for i, sid in enumerate(self.sample_ids):
                la, lo = ("", "") if self.labels is None else (
                    self.attributes[self.labels[i, 0]], self.objects[self.labels[i, 1]])
                w.writerow([sid, la, lo] + [repr(float(v)) for v in self.rho_a[i]]
                           + [repr(float(v)) for v in self.rho_o[i]])


def load_score_table(path, space: CompositionSpace | None = None) -> ScoreTable:
    path = Path(path)
    if path.suffix == ".csv":
        table = _load_csv(path)
    else:
        try:
            table = ScoreTable.from_dict(json.loads(path.read_text()))
        except json.JSONDecodeError as e:
            raise ScoreTableError(f"{path}: invalid JSON ({e})") from None
    if space is not None:
        if table.space is not None and not table.space.same_labels(space):
            raise ScoreTableError("score table space does not match the supplied space")
        table.space = space
    return table


def _load_csv(path: Path) -> ScoreTable:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        rows = list(reader)
    attrs = [h[2:] for h in header if h.startswith("a:")]
    objs = [h[2:] for h in header if h.startswith("o:")]
    na = len(attrs)
    ids, labels, ra, ro = [], [], [], []
    for row in rows:
        sid = row[0]
        ids.append(int(sid) if sid.lstrip("-").isdigit() else sid)
        if row[1]:
            labels.append([attrs.index(row[1]), objs.index(row[2])])
        vals = [float(v) for v in row[3:]]
        ra.append(vals[:na])
        ro.append(vals[na:])
    n = len(ids)
    return ScoreTable(attrs, objs, ids, np.array(ra).reshape(n, na), np.array(ro).reshape(n, len(objs)),
                      labels if labels else None)
