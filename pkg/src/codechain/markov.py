"""Coarse-code transition matrices, smoothing, and sequence likelihoods.

Transition probabilities are row-normalized bigram counts over code
sequences. Codes never observed as a departure state get a uniform row.
Matrices are estimated separately per (class, channel) on labeled data
and pooled per channel across all instances of a domain.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import records
from .errors import ConfigError, DataError
from .rvq import CodeGrid

_ROW_TOL = 1e-9


@dataclass(frozen=True)
class TransitionMatrix:
    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 2 or probs.shape[0] != probs.shape[1]:
            raise DataError("transition matrix must be square")
        if probs.shape[0] < 2:
            raise DataError("transition matrix needs at least 2 states")
        if np.any(probs < 0.0) or not np.all(np.isfinite(probs)):
            raise DataError("transition probabilities must be finite and non-negative")
        if np.max(np.abs(probs.sum(axis=1) - 1.0)) > _ROW_TOL:
            raise DataError("transition matrix rows must sum to 1")
        object.__setattr__(self, "probs", probs)

    @property
    def n_codes(self) -> int:
        return self.probs.shape[0]


def estimate_tm(sequences: Iterable[np.ndarray], n_codes: int) -> TransitionMatrix:
    """Row-normalized bigram counts; unseen departure codes get uniform rows."""
    if n_codes < 2:
        raise ConfigError("n_codes must be >= 2")
    counts = np.zeros((n_codes, n_codes), dtype=np.float64)
    any_seq = False
    for seq in sequences:
        seq = np.asarray(seq, dtype=np.int64)
        if seq.ndim != 1 or seq.size < 2:
            raise DataError("each code sequence must be 1-D with length >= 2")
        if seq.min() < 0 or seq.max() >= n_codes:
            raise DataError(f"code out of range [0, {n_codes}) in sequence")
        np.add.at(counts, (seq[:-1], seq[1:]), 1.0)
        any_seq = True
    if not any_seq:
        raise DataError("estimate_tm needs at least one sequence")
    totals = counts.sum(axis=1)
    probs = np.full((n_codes, n_codes), 1.0 / n_codes)
    seen = totals > 0
    probs[seen] = counts[seen] / totals[seen, None]
    return TransitionMatrix(probs=probs)


@dataclass(frozen=True)
class ClassChannelTM:
    """One transition matrix per (class, channel)."""

    tms: tuple[tuple[TransitionMatrix, ...], ...]

    def __post_init__(self):
        tms = tuple(tuple(row) for row in self.tms)
        if not tms or not tms[0]:
            raise DataError("class/channel matrix collection is empty")
        width = len(tms[0])
        n = tms[0][0].n_codes
        for row in tms:
            if len(row) != width or any(tm.n_codes != n for tm in row):
                raise DataError("ragged class/channel matrix collection")
        object.__setattr__(self, "tms", tms)

    @property
    def n_classes(self) -> int:
        return len(self.tms)

    @property
    def n_channels(self) -> int:
        return len(self.tms[0])

    @property
    def n_codes(self) -> int:
        return self.tms[0][0].n_codes

    def smoothed(self, epsilon: float) -> "ClassChannelTM":
        return ClassChannelTM(
            tms=tuple(tuple(smooth(tm, epsilon) for tm in row) for row in self.tms)
        )

    def probs_array(self) -> np.ndarray:
        """(n_classes, n_channels, n_codes, n_codes) stacked probabilities."""
        return np.asarray(
            [[tm.probs for tm in row] for row in self.tms], dtype=np.float64
        )


@dataclass(frozen=True)
class ChannelTM:
    """One transition matrix per channel, pooled over a whole domain."""

    tms: tuple[TransitionMatrix, ...]

    def __post_init__(self):
        tms = tuple(self.tms)
        if not tms:
            raise DataError("channel matrix collection is empty")
        n = tms[0].n_codes
        if any(tm.n_codes != n for tm in tms):
            raise DataError("channel matrices disagree on n_codes")
        object.__setattr__(self, "tms", tms)

    @property
    def n_channels(self) -> int:
        return len(self.tms)

    @property
    def n_codes(self) -> int:
        return self.tms[0].n_codes

    def smoothed(self, epsilon: float) -> "ChannelTM":
        return ChannelTM(tms=tuple(smooth(tm, epsilon) for tm in self.tms))

    def probs_array(self) -> np.ndarray:
        return np.asarray([tm.probs for tm in self.tms], dtype=np.float64)


def build_class_tm(
    code_grids: Sequence[CodeGrid],
    labels: Sequence[int],
    n_classes: int,
    n_codes: int,
) -> ClassChannelTM:
    """Per-(class, channel) matrices from labeled coarse-code grids.

    A class with no instances gets uniform matrices and a warning.
    """
    grids = list(code_grids)
    labels = [int(x) for x in labels]
    if len(grids) != len(labels):
        raise DataError("code grids and labels must align")
    if not grids:
        raise DataError("no code grids given")
    if any(not 0 <= y < n_classes for y in labels):
        raise DataError(f"label out of range [0, {n_classes})")
    n_channels = grids[0].n_channels
    if any(g.n_channels != n_channels for g in grids):
        raise DataError("code grids disagree on channel count")
    uniform = TransitionMatrix(np.full((n_codes, n_codes), 1.0 / n_codes))
    rows = []
    for k in range(n_classes):
        members = [g for g, y in zip(grids, labels) if y == k]
        if not members:
            warnings.warn(f"class {k} has no instances; using uniform transitions")
            rows.append(tuple(uniform for _ in range(n_channels)))
            continue
        rows.append(
            tuple(
                estimate_tm([g.coarse_idx[d] for g in members], n_codes)
                for d in range(n_channels)
            )
        )
    return ClassChannelTM(tms=tuple(rows))


def build_channel_tm(code_grids: Sequence[CodeGrid], n_codes: int) -> ChannelTM:
    """Per-channel matrices pooled over every instance of a domain."""
    grids = list(code_grids)
    if not grids:
        raise DataError("no code grids given")
    n_channels = grids[0].n_channels
    if any(g.n_channels != n_channels for g in grids):
        raise DataError("code grids disagree on channel count")
    return ChannelTM(
        tms=tuple(
            estimate_tm([g.coarse_idx[d] for g in grids], n_codes)
            for d in range(n_channels)
        )
    )


def smooth(tm: TransitionMatrix, epsilon: float) -> TransitionMatrix:
    """(p + eps) / (1 + n*eps) per row: strictly positive, still stochastic."""
    if not epsilon > 0.0:
        raise ConfigError("epsilon must be > 0")
    n = tm.n_codes
    return TransitionMatrix(probs=(tm.probs + epsilon) / (1.0 + n * epsilon))


def log_likelihood(
    sequence: np.ndarray, tm: TransitionMatrix, per_transition: bool = False
) -> float:
    """Sequence-length-normalized log probability of a code sequence.

    Sums ln p(s[t+1] | s[t]) and divides by the sequence length N (or by
    N - 1 when per_transition is set). Requires a smoothed matrix: any
    zero-probability transition raises instead of returning -inf.
    """
    seq = np.asarray(sequence, dtype=np.int64)
    if seq.ndim != 1 or seq.size < 2:
        raise DataError("sequence must be 1-D with length >= 2")
    if seq.min() < 0 or seq.max() >= tm.n_codes:
        raise DataError(f"code out of range [0, {tm.n_codes}) in sequence")
    p = tm.probs[seq[:-1], seq[1:]]
    if np.any(p <= 0.0):
        raise DataError(
            "zero transition probability encountered; smooth the matrix before scoring"
        )
    denom = seq.size - 1 if per_transition else seq.size
    return float(np.log(p).sum() / denom)


def save_transitions(
    path,
    class_tm: ClassChannelTM,
    channel_src: ChannelTM,
    epsilon: float,
    channel_trg: ChannelTM | None = None,
    config: dict | None = None,
) -> None:
    """Bundle of raw (unsmoothed) matrices; epsilon travels alongside."""
    if class_tm.n_channels != channel_src.n_channels:
        raise DataError("class and channel matrices disagree on channel count")
    if class_tm.n_codes != channel_src.n_codes:
        raise DataError("class and channel matrices disagree on n_codes")
    header = {
        "kind": "transitions",
        "n_classes": class_tm.n_classes,
        "n_channels": class_tm.n_channels,
        "n_coarse": class_tm.n_codes,
    }
    if config is not None:
        header["config"] = config
    rec = {
        "epsilon": epsilon,
        "class_tms": class_tm.probs_array().tolist(),
        "channel_tms_source": channel_src.probs_array().tolist(),
        "channel_tms_target": None if channel_trg is None else channel_trg.probs_array().tolist(),
    }
    records.write_record_file(path, header, [rec])


def load_transitions(path) -> tuple[ClassChannelTM, ChannelTM, ChannelTM | None, float]:
    header, recs = records.read_record_file(path, expected_kind="transitions")
    if len(recs) != 1:
        raise DataError(f"{path}: transitions bundle must hold exactly one record")
    rec = recs[0]
    for key in ("epsilon", "class_tms", "channel_tms_source"):
        if key not in rec:
            raise DataError(f"{path}: transitions record missing {key!r}")
    class_arr = np.asarray(rec["class_tms"], dtype=np.float64)
    if class_arr.ndim != 4:
        raise DataError(f"{path}: class_tms must be 4-D")
    class_tm = ClassChannelTM(
        tms=tuple(
            tuple(TransitionMatrix(probs=class_arr[k, d]) for d in range(class_arr.shape[1]))
            for k in range(class_arr.shape[0])
        )
    )
    src_arr = np.asarray(rec["channel_tms_source"], dtype=np.float64)
    channel_src = ChannelTM(tms=tuple(TransitionMatrix(probs=m) for m in src_arr))
    channel_trg = None
    if rec.get("channel_tms_target") is not None:
        trg_arr = np.asarray(rec["channel_tms_target"], dtype=np.float64)
        channel_trg = ChannelTM(tms=tuple(TransitionMatrix(probs=m) for m in trg_arr))
    return class_tm, channel_src, channel_trg, float(rec["epsilon"])
