"""Sliding-window history of per-position predictive distributions.

The buffer keeps the most recent d iterations' top-V snapshots, newest
first.  Each slot maps still-relevant masked positions to the distribution
the predictor produced for them at that iteration.  Decoded positions are
purged from every slot; a slot whose entries were all consumed stays in the
window (ages are unaffected) but carries no evidence about the remaining
masked positions, so the consistency intersection skips it rather than
treating it as a veto.

Memory never exceeds d*V stored distributions.
"""

from __future__ import annotations

from collections import deque
from typing import Iterable, Mapping

from ccd.core import Distribution


class HistoryBuffer:
    def __init__(self, d: int, v: int):
        if d < 1:
            raise ValueError(f"window depth d must be >= 1, got {d}")
        if v < 1:
            raise ValueError(f"top size v must be >= 1, got {v}")
        self.d = d
        self.v = v
        # index 0 is age 1 (most recent); maxlen evicts slots older than d
        self._slots: deque[dict[int, Distribution]] = deque(maxlen=d)

    def __len__(self) -> int:
        return len(self._slots)

    def push_iteration(self, entries: Mapping[int, Distribution]) -> None:
        """Record one iteration's snapshot; oldest slot falls out past depth d."""
        if len(entries) > self.v:
            raise ValueError(f"snapshot with {len(entries)} entries exceeds top size {self.v}")
        slot: dict[int, Distribution] = {}
        for pos, dist in entries.items():
            if pos < 0:
                raise ValueError(f"negative position {pos}")
            if not isinstance(dist, Distribution):
                raise ValueError(f"entry for position {pos} is not a Distribution")
            slot[pos] = dist
        self._slots.appendleft(slot)

    def intersection_positions(self) -> set[int]:
        """Positions present in every evidence-bearing slot; empty buffer -> {}."""
        live = [slot for slot in self._slots if slot]
        if not live:
            return set()
        out = set(live[0])
        for slot in live[1:]:
            out &= slot.keys()
        return out

    def consistent_current(self, current_top: Mapping[int, Distribution]) -> set[int]:
        """Gate: history-consistent positions that are also in the current top-V."""
        return self.intersection_positions() & current_top.keys()

    def contributing(self, current_top: Mapping[int, Distribution], i: int) -> list[Distribution]:
        """The distributions averaged for position i: history (newest first) then current.

        Requires i in the current top-V and in every evidence-bearing slot.
        """
        if i not in current_top:
            raise ValueError(f"position {i} not in current top-V")
        dists: list[Distribution] = []
        for slot in self._slots:
            if not slot:
                continue
            if i not in slot:
                raise ValueError(f"position {i} missing from a history slot")
            dists.append(slot[i])
        dists.append(current_top[i])
        return dists

    def marginalize(self, current_top: Mapping[int, Distribution], i: int) -> Distribution:
        """Equal-weight average of history plus current for position i."""
        dists = self.contributing(current_top, i)
        n = len(dists)
        size = len(dists[0])
        acc = [0.0] * size
        for dist in dists:
            if len(dist) != size:
                raise ValueError("contributing distributions disagree on vocabulary size")
            for k in range(size):
                acc[k] += dist[k]
        return Distribution([a / n for a in acc])

    def purge(self, decoded: Iterable[int]) -> None:
        """Drop entries for decoded positions from every slot; ages unaffected."""
        gone = set(decoded)
        if not gone:
            return
        for slot in self._slots:
            for pos in gone & slot.keys():
                del slot[pos]

    def clear(self) -> None:
        self._slots.clear()

    def stored_count(self) -> int:
        return sum(len(slot) for slot in self._slots)

    def slot_position_sets(self) -> list[list[int]]:
        """Newest-first position sets per slot, for debug traces."""
        return [sorted(slot) for slot in self._slots]
