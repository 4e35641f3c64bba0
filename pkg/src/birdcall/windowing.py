"""Second-stage windowing: feature sequences to fixed-size images.

Each feature column is cut into non-overlapping chunks of 1000 frames
(the final partial chunk is zero-padded, never dropped) and every chunk
is reshaped row-major into a 25x40 single-channel image. One training
sample is one (record, segment index) pair and carries one image per
feature, in canonical feature order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .container import read_container, write_container
from .features import FeatureMatrix

SEGMENT_LEN = 1000
IMAGE_SHAPE = (25, 40)


@dataclass(frozen=True)
class SegmentTensor:
    """All feature images of one record: (segments, features, 25, 40)."""

    record_id: str
    label: int
    images: np.ndarray
    feature_names: tuple[str, ...]

    @property
    def segment_count(self) -> int:
        return self.images.shape[0]

    @property
    def feature_count(self) -> int:
        return self.images.shape[1]


@dataclass(frozen=True)
class Sample:
    """One segment index of one record: the network's unit of input."""

    record_id: str
    segment_index: int
    label: int
    images: np.ndarray  # (features, 25, 40)


def segment_feature(column: np.ndarray, seg_len: int = SEGMENT_LEN) -> list[np.ndarray]:
    """Cut one feature's frame sequence into zero-padded fixed chunks."""
    column = np.asarray(column, dtype=np.float64)
    if column.size == 0:
        raise ValueError("cannot segment an empty feature column")
    n_segments = -(-column.size // seg_len)
    padded = np.zeros(n_segments * seg_len, dtype=np.float64)
    padded[: column.size] = column
    return [padded[i * seg_len : (i + 1) * seg_len] for i in range(n_segments)]


def reshape_segment(segment: np.ndarray) -> np.ndarray:
    """Row-major reshape of a 1000-value segment into a 25x40 image."""
    segment = np.asarray(segment, dtype=np.float64)
    expected = IMAGE_SHAPE[0] * IMAGE_SHAPE[1]
    if segment.size != expected:
        raise ValueError(f"segment has {segment.size} values, expected {expected}")
    return segment.reshape(IMAGE_SHAPE)


def record_to_tensor(matrix: FeatureMatrix, record_id: str, label: int) -> SegmentTensor:
    """Segment and reshape every feature column of one record."""
    n_frames, n_features = matrix.values.shape
    if n_frames == 0:
        raise ValueError(f"record {record_id!r} has no frames")
    n_segments = -(-n_frames // SEGMENT_LEN)
    images = np.zeros((n_segments, n_features, *IMAGE_SHAPE), dtype=np.float64)
    for f in range(n_features):
        for s, chunk in enumerate(segment_feature(matrix.values[:, f])):
            images[s, f] = reshape_segment(chunk)
    return SegmentTensor(
        record_id=record_id,
        label=label,
        images=images,
        feature_names=matrix.feature_names,
    )


def build_dataset(
    records: Sequence[tuple[FeatureMatrix, int]],
    record_ids: Sequence[str] | None = None,
) -> list[Sample]:
    """Flatten records into per-segment training samples.

    Every record must use the same feature set; sample count is the sum
    of ceil(frames / 1000) over records.
    """
    if record_ids is None:
        record_ids = [str(i) for i in range(len(records))]
    if len(record_ids) != len(records):
        raise ValueError("record_ids and records must have equal length")

    samples: list[Sample] = []
    names: tuple[str, ...] | None = None
    for rid, (matrix, label) in zip(record_ids, records):
        if names is None:
            names = matrix.feature_names
        elif matrix.feature_names != names:
            raise ValueError(
                f"record {rid!r} uses feature columns {matrix.feature_names}, "
                f"but the dataset was started with {names}"
            )
        tensor = record_to_tensor(matrix, rid, label)
        for s in range(tensor.segment_count):
            samples.append(
                Sample(record_id=rid, segment_index=s, label=label, images=tensor.images[s])
            )
    return samples


def save_segments(path, tensors: Sequence[SegmentTensor]) -> None:
    """Persist segment tensors to a self-describing binary cache."""
    meta = {
        "kind": "segment-cache",
        "records": [
            {
                "record_id": t.record_id,
                "label": t.label,
                "feature_names": list(t.feature_names),
            }
            for t in tensors
        ],
    }
    arrays = {f"images/{i}": t.images for i, t in enumerate(tensors)}
    write_container(path, meta, arrays)


def load_segments(path) -> list[SegmentTensor]:
    meta, arrays = read_container(path)
    if meta.get("kind") != "segment-cache":
        raise ValueError(f"{path} is not a segment cache")
    tensors = []
    for i, entry in enumerate(meta["records"]):
        tensors.append(
            SegmentTensor(
                record_id=entry["record_id"],
                label=int(entry["label"]),
                images=arrays[f"images/{i}"],
                feature_names=tuple(entry["feature_names"]),
            )
        )
    return tensors
