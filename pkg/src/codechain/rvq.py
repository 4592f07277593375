"""Residual coarse/fine codebooks over latent patch vectors.

Patches are embedded by per-patch standardization (mean removed, scaled
by the standard deviation with a small floor, so constant patches map to
the zero vector), optionally followed by a fixed random orthogonal
projection. Quantization is a two-stage residual scheme with cosine
geometry: both the latent and the codewords are L2-normalized before
the nearest-neighbor search, first against the coarse book, then the
residual against the fine book. Stored codewords stay un-normalized.

Codebooks are fit with Lloyd iterations rather than gradient descent.
For both stages the assignment metric and the mean update form a
monotone descent pair, and empty codes are re-seeded from the point
with the largest current quantization error, so a fit on the training
pool terminates with every code in use.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import records
from .dataset import DomainDataset, PatchGrid, patchify
from .errors import ConfigError, DataError, InternalError

# diagnostic weighting of the commitment terms in the combined code loss
COMMITMENT_WEIGHT = 0.25

EMBED_MODES = ("znorm", "raw")
_STD_FLOOR = 1e-8


def l2_normalize(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """v / ||v||, with zero vectors mapped to themselves."""
    norms = np.linalg.norm(x, axis=axis, keepdims=True)
    return x / np.where(norms == 0.0, 1.0, norms)


@dataclass(frozen=True)
class EmbedSpec:
    """How raw patches become latent vectors.

    mode "znorm" standardizes each patch; "raw" passes values through.
    d_dim, when set below the patch length, applies a fixed random
    orthogonal projection drawn from projection_seed.
    """

    mode: str = "znorm"
    d_dim: int | None = None
    projection_seed: int = 0

    def __post_init__(self):
        if self.mode not in EMBED_MODES:
            raise ConfigError(f"embed mode must be one of {EMBED_MODES}, got {self.mode!r}")
        if self.d_dim is not None and self.d_dim < 2:
            raise ConfigError("d_dim must be >= 2")

    def latent_dim(self, patch_length: int) -> int:
        return patch_length if self.d_dim is None else self.d_dim

    def projection(self, patch_length: int) -> np.ndarray | None:
        """The (patch_length, d_dim) projection, or None when dimensions match."""
        if self.d_dim is None or self.d_dim == patch_length:
            return None
        if self.d_dim > patch_length:
            raise ConfigError(
                f"d_dim {self.d_dim} exceeds patch_length {patch_length}; projection cannot raise dimension"
            )
        rng = np.random.default_rng(self.projection_seed)
        g = rng.standard_normal((patch_length, self.d_dim))
        q, r = np.linalg.qr(g)
        # canonical column signs so the projection is unique
        return q * np.sign(np.diag(r))[None, :]


@dataclass(frozen=True)
class LatentGrid:
    """Latent vectors of one instance: (n_channels, n_patches, d_dim)."""

    latents: np.ndarray


def embed(grid: PatchGrid, spec: EmbedSpec = EmbedSpec()) -> LatentGrid:
    """Map a patch grid to latent vectors.

    Standardization uses the population std with a 1e-8 floor; an exactly
    constant patch becomes the zero vector, which downstream assignment
    resolves to code 0 by the lowest-index tie rule.
    """
    patches = np.asarray(grid.patches, dtype=np.float64)
    if spec.mode == "znorm":
        mean = patches.mean(axis=-1, keepdims=True)
        std = patches.std(axis=-1, keepdims=True)
        lat = (patches - mean) / (std + _STD_FLOOR)
    else:
        lat = patches.copy()
    proj = spec.projection(grid.patch_length)
    if proj is not None:
        lat = lat @ proj
    return LatentGrid(latents=lat)


def embed_dataset(
    dataset: DomainDataset, patch_length: int, spec: EmbedSpec = EmbedSpec()
) -> list[LatentGrid]:
    return [embed(patchify(inst, patch_length), spec) for inst in dataset]


@dataclass(frozen=True)
class Codebook:
    vectors: np.ndarray

    def __post_init__(self):
        vectors = np.asarray(self.vectors, dtype=np.float64)
        if vectors.ndim != 2:
            raise DataError("codebook vectors must be 2-D (n_codes, d_dim)")
        if vectors.shape[0] < 2:
            raise DataError("codebook needs at least 2 codes")
        if not np.all(np.isfinite(vectors)):
            raise DataError("codebook contains non-finite vectors")
        if len(np.unique(vectors, axis=0)) != len(vectors):
            raise DataError("codebook contains duplicate vectors")
        object.__setattr__(self, "vectors", vectors)

    @property
    def n_codes(self) -> int:
        return self.vectors.shape[0]

    @property
    def d_dim(self) -> int:
        return self.vectors.shape[1]


@dataclass(frozen=True)
class ResidualQuantizer:
    coarse: Codebook
    fine: Codebook
    d_dim: int

    def __post_init__(self):
        if self.coarse.d_dim != self.d_dim or self.fine.d_dim != self.d_dim:
            raise DataError("codebook dimensions do not match quantizer d_dim")


@dataclass(frozen=True)
class CodeGrid:
    """Code indices of one instance, both (n_channels, n_patches)."""

    coarse_idx: np.ndarray
    fine_idx: np.ndarray

    def __post_init__(self):
        coarse = np.asarray(self.coarse_idx, dtype=np.int64)
        fine = np.asarray(self.fine_idx, dtype=np.int64)
        if coarse.shape != fine.shape or coarse.ndim != 2:
            raise DataError("coarse_idx and fine_idx must share a 2-D shape")
        object.__setattr__(self, "coarse_idx", coarse)
        object.__setattr__(self, "fine_idx", fine)

    @property
    def n_channels(self) -> int:
        return self.coarse_idx.shape[0]

    @property
    def n_patches(self) -> int:
        return self.coarse_idx.shape[1]


@dataclass(frozen=True)
class QuantizerFit:
    """Fit output: the quantizer plus per-iteration diagnostic traces.

    coarse_losses / fine_losses are mean squared quantization errors per
    Lloyd iteration of each stage. code_losses is the combined
    commitment-weighted loss over the fine stage, with the coarse term
    frozen at its final value.
    """

    quantizer: ResidualQuantizer
    coarse_losses: tuple[float, ...]
    fine_losses: tuple[float, ...]
    code_losses: tuple[float, ...]


def _nearest(points: np.ndarray, codewords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Assignment to the nearest L2-normalized codeword; ties -> lowest index."""
    cn = l2_normalize(codewords, axis=1)
    d2 = (
        (points * points).sum(axis=1)[:, None]
        - 2.0 * points @ cn.T
        + (cn * cn).sum(axis=1)[None, :]
    )
    assign = np.argmin(d2, axis=1)
    best = d2[np.arange(len(points)), assign]
    return assign, np.maximum(best, 0.0)


def _reseed_empty(points, centroids, assign, err, n_codes):
    """Re-seed codes with no members from the worst-quantized point."""
    for _ in range(n_codes):
        used = np.bincount(assign, minlength=n_codes)
        empty = np.flatnonzero(used == 0)
        if empty.size == 0:
            break
        centroids = centroids.copy()
        centroids[empty[0]] = points[int(np.argmax(err))]
        assign, err = _nearest(points, centroids)
    return centroids, assign, err


def _lloyd(points, n_codes, max_iters, rng):
    """Lloyd iterations under the normalized-codeword metric.

    Initial codewords are drawn without replacement from the distinct
    rows of the pool. Per iteration: assign, re-seed empties, record the
    mean error, stop when assignments repeat, update means. The recorded
    trace is non-increasing.
    """
    distinct = np.unique(points, axis=0)
    if len(distinct) < n_codes:
        raise DataError(
            f"need at least {n_codes} distinct vectors to fit {n_codes} codes, have {len(distinct)}"
        )
    centroids = distinct[rng.choice(len(distinct), size=n_codes, replace=False)]
    losses: list[float] = []
    prev = None
    for _ in range(max_iters):
        assign, err = _nearest(points, centroids)
        centroids, assign, err = _reseed_empty(points, centroids, assign, err, n_codes)
        losses.append(float(err.mean()))
        if prev is not None and np.array_equal(assign, prev):
            break
        prev = assign
        sums = np.zeros_like(centroids)
        np.add.at(sums, assign, points)
        counts = np.bincount(assign, minlength=n_codes).astype(np.float64)
        centroids = sums / counts[:, None]
    else:
        # ran out of iterations after an update: re-sync assignments
        assign, err = _nearest(points, centroids)
        centroids, assign, err = _reseed_empty(points, centroids, assign, err, n_codes)
        losses.append(float(err.mean()))
    return centroids, assign, losses


def fit(
    latent_grids: Sequence[LatentGrid],
    n_coarse: int,
    n_fine: int,
    max_iters: int = 50,
    seed: int = 0,
) -> QuantizerFit:
    """Fit coarse then fine codebooks on the pooled latents.

    The coarse stage clusters L2-normalized latents; the fine stage
    clusters the residuals against the chosen normalized coarse
    codewords. Deterministic given (inputs, seed).
    """
    if n_coarse < 2 or n_fine < 2:
        raise ConfigError("n_coarse and n_fine must be >= 2")
    if max_iters < 1:
        raise ConfigError("max_iters must be >= 1")
    grids = [np.asarray(g.latents, dtype=np.float64) for g in latent_grids]
    if not grids:
        raise DataError("no latent grids to fit on")
    d_dim = grids[0].shape[-1]
    pool = np.concatenate([g.reshape(-1, d_dim) for g in grids], axis=0)
    if n_coarse >= len(pool):
        raise DataError(f"n_coarse {n_coarse} must be below the pooled patch count {len(pool)}")
    if n_fine >= len(pool):
        raise DataError(f"n_fine {n_fine} must be below the pooled patch count {len(pool)}")

    rng = np.random.default_rng(seed)
    zn = l2_normalize(pool, axis=1)
    coarse_vecs, coarse_assign, coarse_losses = _lloyd(zn, n_coarse, max_iters, rng)
    residuals = zn - l2_normalize(coarse_vecs, axis=1)[coarse_assign]
    fine_vecs, _, fine_losses = _lloyd(residuals, n_fine, max_iters, rng)

    frozen = coarse_losses[-1]
    code_losses = tuple(
        (1.0 + COMMITMENT_WEIGHT) * (frozen + f) for f in fine_losses
    )
    quantizer = ResidualQuantizer(
        coarse=Codebook(coarse_vecs), fine=Codebook(fine_vecs), d_dim=d_dim
    )
    return QuantizerFit(
        quantizer=quantizer,
        coarse_losses=tuple(coarse_losses),
        fine_losses=tuple(fine_losses),
        code_losses=code_losses,
    )


def encode(quantizer: ResidualQuantizer, latents: LatentGrid) -> CodeGrid:
    """Assign each latent to its coarse and fine code, lowest index on ties."""
    lat = np.asarray(latents.latents, dtype=np.float64)
    if lat.ndim != 3 or lat.shape[-1] != quantizer.d_dim:
        raise DataError(
            f"latents of shape {lat.shape} do not match quantizer d_dim {quantizer.d_dim}"
        )
    n_ch, n_patch = lat.shape[0], lat.shape[1]
    z = lat.reshape(-1, quantizer.d_dim)
    zn = l2_normalize(z, axis=1)
    coarse_idx, _ = _nearest(zn, quantizer.coarse.vectors)
    residual = zn - l2_normalize(quantizer.coarse.vectors, axis=1)[coarse_idx]
    fine_idx, _ = _nearest(residual, quantizer.fine.vectors)
    return CodeGrid(
        coarse_idx=coarse_idx.reshape(n_ch, n_patch),
        fine_idx=fine_idx.reshape(n_ch, n_patch),
    )


def encode_dataset(
    quantizer: ResidualQuantizer,
    dataset: DomainDataset,
    patch_length: int,
    spec: EmbedSpec = EmbedSpec(),
) -> list[CodeGrid]:
    return [encode(quantizer, g) for g in embed_dataset(dataset, patch_length, spec)]


def reconstruct(
    quantizer: ResidualQuantizer, codes: CodeGrid, coarse_only: bool = False
) -> LatentGrid:
    """Sum of the raw (un-normalized) code vectors for each patch."""
    coarse = np.asarray(codes.coarse_idx)
    fine = np.asarray(codes.fine_idx)
    if coarse.min() < 0 or coarse.max() >= quantizer.coarse.n_codes:
        raise DataError("coarse index out of range for this quantizer")
    if fine.min() < 0 or fine.max() >= quantizer.fine.n_codes:
        raise DataError("fine index out of range for this quantizer")
    out = quantizer.coarse.vectors[coarse]
    if not coarse_only:
        out = out + quantizer.fine.vectors[fine]
    return LatentGrid(latents=out)


@dataclass(frozen=True)
class CodeUsageReport:
    coarse_counts: np.ndarray
    fine_counts: np.ndarray
    coarse_dead_pct: float
    fine_dead_pct: float
    mse_coarse_only: float
    mse_coarse_fine: float
    n_patches: int


def code_stats(
    code_grids: Iterable[CodeGrid],
    quantizer: ResidualQuantizer,
    latent_grids: Iterable[LatentGrid],
) -> CodeUsageReport:
    """Usage counts, dead-code percentages, and reconstruction MSE.

    MSE compares the raw code-vector sums against the L2-normalized
    latents the assignment actually quantizes.
    """
    code_grids = list(code_grids)
    latent_grids = list(latent_grids)
    if len(code_grids) != len(latent_grids):
        raise DataError("code grids and latent grids must align")
    if not code_grids:
        raise DataError("no code grids given")
    coarse_counts = np.zeros(quantizer.coarse.n_codes, dtype=np.int64)
    fine_counts = np.zeros(quantizer.fine.n_codes, dtype=np.int64)
    sse_c = 0.0
    sse_cf = 0.0
    total = 0
    for codes, lats in zip(code_grids, latent_grids):
        coarse_counts += np.bincount(
            codes.coarse_idx.ravel(), minlength=quantizer.coarse.n_codes
        )
        fine_counts += np.bincount(codes.fine_idx.ravel(), minlength=quantizer.fine.n_codes)
        zn = l2_normalize(np.asarray(lats.latents, dtype=np.float64), axis=-1)
        rec_c = reconstruct(quantizer, codes, coarse_only=True).latents
        rec_cf = reconstruct(quantizer, codes).latents
        sse_c += float(((zn - rec_c) ** 2).sum())
        sse_cf += float(((zn - rec_cf) ** 2).sum())
        total += codes.coarse_idx.size
    denom = total * quantizer.d_dim
    return CodeUsageReport(
        coarse_counts=coarse_counts,
        fine_counts=fine_counts,
        coarse_dead_pct=100.0 * float((coarse_counts == 0).sum()) / quantizer.coarse.n_codes,
        fine_dead_pct=100.0 * float((fine_counts == 0).sum()) / quantizer.fine.n_codes,
        mse_coarse_only=sse_c / denom,
        mse_coarse_fine=sse_cf / denom,
        n_patches=total,
    )


def save_quantizer(
    path,
    quantizer: ResidualQuantizer,
    embed_spec: EmbedSpec,
    patch_length: int,
    seed: int,
    config: dict | None = None,
) -> None:
    header = {
        "kind": "quantizer",
        "d_dim": quantizer.d_dim,
        "n_coarse": quantizer.coarse.n_codes,
        "n_fine": quantizer.fine.n_codes,
    }
    if config is not None:
        header["config"] = config
    rec = {
        "coarse": quantizer.coarse.vectors.tolist(),
        "fine": quantizer.fine.vectors.tolist(),
        "embed_mode": embed_spec.mode,
        "embed_d_dim": embed_spec.d_dim,
        "projection_seed": embed_spec.projection_seed,
        "patch_length": patch_length,
        "seed": seed,
    }
    records.write_record_file(path, header, [rec])


def load_quantizer(path) -> tuple[ResidualQuantizer, EmbedSpec, int, int]:
    """Load (quantizer, embed_spec, patch_length, fit seed) from a bundle."""
    header, recs = records.read_record_file(path, expected_kind="quantizer")
    if len(recs) != 1:
        raise DataError(f"{path}: quantizer bundle must hold exactly one record")
    rec = recs[0]
    for key in ("coarse", "fine", "embed_mode", "patch_length", "seed"):
        if key not in rec:
            raise DataError(f"{path}: quantizer record missing {key!r}")
    quantizer = ResidualQuantizer(
        coarse=Codebook(np.asarray(rec["coarse"], dtype=np.float64)),
        fine=Codebook(np.asarray(rec["fine"], dtype=np.float64)),
        d_dim=int(header.get("d_dim", np.asarray(rec["coarse"]).shape[1])),
    )
    spec = EmbedSpec(
        mode=rec["embed_mode"],
        d_dim=rec.get("embed_d_dim"),
        projection_seed=int(rec.get("projection_seed", 0)),
    )
    return quantizer, spec, int(rec["patch_length"]), int(rec["seed"])
