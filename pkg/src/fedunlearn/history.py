"""Segmented history of global models across training and unlearning epochs.

Positions are global 0-based round counts over the concatenated timeline:
position p is the model after p recorded rounds.  Each unlearning request
truncates the timeline at its rollback position and starts a new segment
whose first model is the perturbed checkpoint, so consecutive segments
overlap at exactly one position.  Lookups at an overlapping position return
the newest segment's model (the live, perturbed one).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import models
from .models import Params


@dataclass
class Segment:
    index: int
    start: int
    model_list: list[Params] = field(default_factory=list)

    @property
    def end(self) -> int:
        return self.start + len(self.model_list) - 1


class TrainingHistory:
    """Ordered global-model checkpoints, one segment per unlearning epoch."""

    def __init__(self, theta0: Params, segment_index: int = 0):
        theta0 = models.as_params(theta0)
        self.segments: list[Segment] = [Segment(segment_index, 0, [theta0.copy()])]

    @property
    def end_position(self) -> int:
        return self.segments[-1].end

    @property
    def final_model(self) -> Params:
        return self.segments[-1].model_list[-1]

    def append_model(self, model: Params) -> int:
        """Record the model after one more round; returns its position."""
        self.segments[-1].model_list.append(models.as_params(model).copy())
        return self.end_position

    def model_at(self, position: int) -> Params:
        """Model at a global position; newest segment wins at overlaps."""
        self._check_position(position)
        for segment in reversed(self.segments):
            if segment.start <= position <= segment.end:
                return segment.model_list[position - segment.start]
        raise IndexError(f"position {position} not covered by any segment")

    def segment_at(self, position: int) -> int:
        """Segment index owning the model returned by model_at(position)."""
        self._check_position(position)
        for segment in reversed(self.segments):
            if segment.start <= position <= segment.end:
                return segment.index
        raise IndexError(f"position {position} not covered by any segment")

    def truncate(self, position: int) -> None:
        """Discard every model strictly after `position`."""
        self._check_position(position)
        kept: list[Segment] = []
        for segment in self.segments:
            if segment.start > position:
                continue
            if segment.end > position:
                segment.model_list = segment.model_list[: position - segment.start + 1]
            kept.append(segment)
        self.segments = kept

    def start_segment(self, index: int, first_model: Params) -> None:
        """Open a new segment at the current end position."""
        first_model = models.as_params(first_model)
        self.segments.append(Segment(index, self.end_position, [first_model.copy()]))

    def validate(self) -> None:
        """Raise if segment starts are not contiguous with predecessor ends."""
        for prev, cur in zip(self.segments, self.segments[1:]):
            if cur.start != prev.end:
                raise ValueError(
                    f"segment {cur.index} starts at {cur.start}, expected {prev.end}"
                )
            if cur.index <= prev.index:
                raise ValueError("segment indices must increase")

    def _check_position(self, position: int) -> None:
        if not 0 <= position <= self.end_position:
            raise IndexError(
                f"position {position} outside history range [0, {self.end_position}]"
            )

    @classmethod
    def from_positions(cls, position_models: dict[int, Params], segment_index: int = 0) -> "TrainingHistory":
        """Rebuild a single-segment history from {position: model}.

        Positions must form the contiguous range 0..N.
        """
        if 0 not in position_models:
            raise ValueError("history reload needs the position-0 model")
        top = max(position_models)
        hist = cls(position_models[0], segment_index)
        for p in range(1, top + 1):
            if p not in position_models:
                raise ValueError(f"history reload missing position {p}")
            hist.append_model(position_models[p])
        return hist
