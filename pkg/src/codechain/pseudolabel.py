"""Channel-wise Bayesian posteriors and weighted pseudo-label aggregation.

Each channel scores every class by the likelihood of its coarse-code
sequence under that class's transition matrix, combined with a label
prior whose influence is tempered by tau. Channel posteriors are then
averaged with the alignment weights; the aggregate scores are reported
as-is (not renormalized), so confidence reflects both class preference
and how much total weight the channels carried.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import records
from .dataset import DomainDataset, patchify
from .errors import ConfigError, DataError
from .markov import ClassChannelTM, log_likelihood
from .rvq import EmbedSpec, ResidualQuantizer, embed, encode
from .transport import ChannelWeights

_PRIOR_FLOOR = 1e-12


@dataclass(frozen=True)
class LabelPrior:
    """Class prior with temperature tau; entries floored at 1e-12."""

    probs: np.ndarray
    tau: float = 1.0

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 1 or probs.size < 2:
            raise DataError("prior must be a 1-D vector with >= 2 classes")
        if np.any(probs < 0.0) or not np.all(np.isfinite(probs)):
            raise DataError("prior entries must be finite and non-negative")
        if abs(probs.sum() - 1.0) > 1e-9:
            raise DataError("prior must sum to 1 within 1e-9")
        if not self.tau > 0.0:
            raise ConfigError("tau must be > 0")
        probs = np.maximum(probs, _PRIOR_FLOOR)
        probs = probs / probs.sum()
        object.__setattr__(self, "probs", probs)

    @property
    def n_classes(self) -> int:
        return self.probs.size

    @classmethod
    def uniform(cls, n_classes: int, tau: float = 1.0) -> "LabelPrior":
        return cls(probs=np.full(n_classes, 1.0 / n_classes), tau=tau)


def channel_posterior(logliks: np.ndarray, prior: LabelPrior) -> np.ndarray:
    """softmax over classes of loglik + log(prior)/tau; sums to 1."""
    logliks = np.asarray(logliks, dtype=np.float64)
    if logliks.shape != (prior.n_classes,):
        raise DataError("log-likelihood vector does not match the prior's class count")
    if not np.all(np.isfinite(logliks)):
        raise DataError("log-likelihoods must be finite")
    logits = logliks + np.log(prior.probs) / prior.tau
    logits = logits - logits.max()
    w = np.exp(logits)
    return w / w.sum()


@dataclass(frozen=True)
class PseudoLabel:
    instance_id: str
    scores: np.ndarray
    label: int
    confidence: float
    per_channel_posteriors: np.ndarray


def aggregate(posteriors: np.ndarray, weights, instance_id: str = "") -> PseudoLabel:
    """Weight-averaged class scores; argmax label, ties to the lowest index.

    posteriors is (n_channels, n_classes); weights is a ChannelWeights
    or a plain vector. Scores are sum_d w_d * posterior_d / n_channels,
    deliberately not renormalized.
    """
    post = np.asarray(posteriors, dtype=np.float64)
    if post.ndim != 2:
        raise DataError("posteriors must be 2-D (n_channels, n_classes)")
    w = weights.weights if isinstance(weights, ChannelWeights) else np.asarray(weights, dtype=np.float64)
    if w.shape != (post.shape[0],):
        raise DataError("weights do not match the posterior channel count")
    scores = (w[:, None] * post).sum(axis=0) / post.shape[0]
    label = int(np.argmax(scores))
    return PseudoLabel(
        instance_id=instance_id,
        scores=scores,
        label=label,
        confidence=float(scores[label]),
        per_channel_posteriors=post,
    )


def _label_one(inst, grid, log_probs, prior, weights):
    n_classes, n_channels = log_probs.shape[0], log_probs.shape[1]
    n = grid.n_patches
    if n < 2:
        raise DataError(
            f"instance {inst.id!r}: needs at least 2 patches to score transitions"
        )
    logliks = np.empty((n_channels, n_classes))
    for d in range(n_channels):
        seq = grid.coarse_idx[d]
        frm, to = seq[:-1], seq[1:]
        logliks[d] = log_probs[:, d, frm, to].sum(axis=1) / n
    posteriors = np.stack([channel_posterior(logliks[d], prior) for d in range(n_channels)])
    return aggregate(posteriors, weights, instance_id=inst.id)


def label_dataset(
    target: DomainDataset,
    quantizer: ResidualQuantizer,
    model: ClassChannelTM,
    weights: ChannelWeights,
    prior: LabelPrior,
    patch_length: int,
    spec: EmbedSpec = EmbedSpec(),
    threads: int = 1,
    precomputed: Sequence | None = None,
) -> list[PseudoLabel]:
    """Pseudo-label every target instance.

    The model must already be smoothed (strictly positive); per-channel
    log-likelihoods follow the same length normalization as
    markov.log_likelihood. precomputed, when given, must be the
    dataset's code grids in order and skips re-encoding. Results are
    ordered like the dataset and do not depend on the thread count.
    """
    if target.role != "target":
        raise DataError(f"labeling expects a target dataset, got role {target.role!r}")
    if model.n_classes != prior.n_classes:
        raise DataError("model and prior disagree on the class count")
    if model.n_channels != target.n_channels:
        raise DataError("model and dataset disagree on the channel count")
    if weights.n_channels != target.n_channels:
        raise DataError("weights and dataset disagree on the channel count")
    if threads < 1:
        raise ConfigError("threads must be >= 1")
    if precomputed is not None and len(precomputed) != len(target):
        raise DataError("precomputed code grids do not align with the dataset")
    probs = model.probs_array()
    if np.any(probs <= 0.0):
        raise DataError("model has zero transition probabilities; smooth it first")
    log_probs = np.log(probs)

    def work(i: int) -> PseudoLabel:
        inst = target.instances[i]
        if precomputed is not None:
            grid = precomputed[i]
        else:
            grid = encode(quantizer, embed(patchify(inst, patch_length), spec))
        return _label_one(inst, grid, log_probs, prior, weights)

    if threads == 1 or len(target) <= 1:
        return [work(i) for i in range(len(target))]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(work, range(len(target))))


def top_r_select(labels: Sequence[PseudoLabel], r_top: float) -> np.ndarray:
    """Indices of the ceil(r_top * n) most confident labels, ascending.

    Confidence ties resolve to the lower index; the count is guarded
    against float artifacts in r_top * n.
    """
    if not 0.0 < r_top <= 1.0:
        raise ConfigError(f"r_top must lie in (0, 1], got {r_top}")
    n = len(labels)
    if n == 0:
        raise DataError("no labels to select from")
    k = int(math.ceil(r_top * n - 1e-9))
    k = max(1, min(k, n))
    conf = np.asarray([pl.confidence for pl in labels], dtype=np.float64)
    order = np.argsort(-conf, kind="stable")
    return np.sort(order[:k])


def save_labels(path, labels: Sequence[PseudoLabel], weights: ChannelWeights, config: dict | None = None) -> None:
    header = {
        "kind": "pseudo_labels",
        "n_instances": len(labels),
        "n_classes": int(labels[0].scores.size) if labels else 0,
        "channel_weights": [float(x) for x in weights.weights],
    }
    if config is not None:
        header["config"] = config
    recs = (
        {
            "id": pl.instance_id,
            "label": pl.label,
            "confidence": pl.confidence,
            "scores": [float(x) for x in pl.scores],
            "per_channel_posteriors": pl.per_channel_posteriors.tolist(),
        }
        for pl in labels
    )
    records.write_record_file(path, header, recs)


def load_labels(path) -> tuple[list[PseudoLabel], dict]:
    header, recs = records.read_record_file(path, expected_kind="pseudo_labels")
    out = []
    for rec in recs:
        for key in ("id", "label", "confidence", "scores", "per_channel_posteriors"):
            if key not in rec:
                raise DataError(f"{path}: pseudo-label record missing {key!r}")
        out.append(
            PseudoLabel(
                instance_id=rec["id"],
                scores=np.asarray(rec["scores"], dtype=np.float64),
                label=int(rec["label"]),
                confidence=float(rec["confidence"]),
                per_channel_posteriors=np.asarray(rec["per_channel_posteriors"], dtype=np.float64),
            )
        )
    return out, header


def save_selection(path, labels: Sequence[PseudoLabel], indices: np.ndarray, r_top: float, config: dict | None = None) -> None:
    header = {"kind": "selection", "r_top": r_top, "n_selected": int(len(indices))}
    if config is not None:
        header["config"] = config
    recs = (
        {
            "index": int(i),
            "id": labels[int(i)].instance_id,
            "label": labels[int(i)].label,
            "confidence": labels[int(i)].confidence,
        }
        for i in indices
    )
    records.write_record_file(path, header, recs)


def load_selection(path) -> tuple[list[dict], dict]:
    header, recs = records.read_record_file(path, expected_kind="selection")
    for rec in recs:
        if "id" not in rec or "index" not in rec:
            raise DataError(f"{path}: selection record missing 'id' or 'index'")
    return recs, header
