"""Linear-scan reference implementation for query equivalence checks.

Deliberately independent of the storage engine: rows are transformed and
placed one at a time with the scalar expression evaluator, and rectangle
queries are answered by scanning every placed row. Slow and simple; if an
index or a fetch path disagrees with this, the index is wrong.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import appspec as A
from . import expr as E
from .geom import Box
from .storage import RecordTable


@dataclass
class ScanOracle:
    """All placed rows of one layer, held as plain arrays for scanning."""

    tuple_ids: np.ndarray
    minx: np.ndarray
    miny: np.ndarray
    maxx: np.ndarray
    maxy: np.ndarray

    @classmethod
    def build(cls, layer: A.LayerSpec, table: RecordTable) -> "ScanOracle":
        if layer.placement is None:
            raise ValueError("static layers place nothing")
        ids: list[int] = []
        minx: list[float] = []
        miny: list[float] = []
        maxx: list[float] = []
        maxy: list[float] = []
        steps = layer.transform.steps
        reached = [0] * len(steps)  # rows that arrived at each limit step
        for tid in range(table.n):
            row = {k: float(v[tid]) for k, v in table.numeric.items()}
            for k, v in table.text.items():
                row[k] = v[tid]
            keep = True
            for i, step in enumerate(steps):
                if isinstance(step, A.FilterStep):
                    if not E.evaluate(step.predicate, row):
                        keep = False
                        break
                elif isinstance(step, A.DeriveStep):
                    row[step.name] = E.evaluate(step.expression, row)
                else:
                    reached[i] += 1
                    if reached[i] > step.n:
                        keep = False
                        break
            if not keep:
                continue
            x = E.evaluate(layer.placement.x, row)
            y = E.evaluate(layer.placement.y, row)
            w = E.evaluate(layer.placement.width, row)
            h = E.evaluate(layer.placement.height, row)
            ids.append(tid)
            minx.append(x - w / 2.0)
            miny.append(y - h / 2.0)
            maxx.append(x + w / 2.0)
            maxy.append(y + h / 2.0)
        return cls(
            tuple_ids=np.array(ids, dtype=np.int64),
            minx=np.array(minx), miny=np.array(miny),
            maxx=np.array(maxx), maxy=np.array(maxy),
        )

    def query_ids(self, box: Box) -> np.ndarray:
        """Ascending tupleIds whose closed bbox meets the closed box."""
        hit = ((self.minx <= box.x2) & (self.maxx >= box.x) &
               (self.miny <= box.y2) & (self.maxy >= box.y))
        return self.tuple_ids[hit]

    def tile_ids(self, col: int, row: int, size: float) -> np.ndarray:
        """Closed-open tile membership: [col*s,(col+1)*s) x [row*s,(row+1)*s)."""
        x0, x1 = col * size, (col + 1) * size
        y0, y1 = row * size, (row + 1) * size
        hit = ((self.minx < x1) & (self.maxx >= x0) &
               (self.miny < y1) & (self.maxy >= y0))
        return self.tuple_ids[hit]
