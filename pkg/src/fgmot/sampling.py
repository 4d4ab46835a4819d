"""Segment-level batch scheduling for embedding training.

Each video is cut independently into consecutive segments of exactly the
batch size (tail frames are dropped), and the segment order is shuffled once
per epoch. One segment is one batch, so every batch holds same-video
consecutive frames and, for identities that persist across the segment,
guaranteed positive pairs.
"""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Segment:
    video: int
    frames: tuple  # consecutive frame indices within the video

    def __len__(self):
        return len(self.frames)


@dataclass
class SegmentSchedule:
    segments: list
    batch_size: int
    seed: int

    def epoch(self, epoch_index: int = 0) -> list:
        """Deterministic per-epoch shuffle; contents of segments untouched."""
        return epoch_order(self.segments, self.seed + epoch_index)


def build_segments(video_lengths, batch_size: int) -> list:
    """Cut each video into floor(len/B) consecutive segments of exactly B frames."""
    if batch_size < 2:
        raise ValueError("batch_size must be >= 2 (no positive pairs otherwise)")
    segments = []
    for video, length in enumerate(video_lengths):
        for start in range(0, (length // batch_size) * batch_size, batch_size):
            segments.append(Segment(video, tuple(range(start, start + batch_size))))
    return segments


def epoch_order(segments, seed: int) -> list:
    if not segments:
        raise ValueError("no segments to order")
    perm = np.random.default_rng(seed).permutation(len(segments))
    return [segments[i] for i in perm]


def build_schedule(video_lengths, batch_size: int, seed: int) -> SegmentSchedule:
    return SegmentSchedule(build_segments(video_lengths, batch_size), batch_size, seed)
