"""Source images to normalized 256x256 patches at a 40x-equivalent scale.

Tiling uses a non-overlapping grid anchored at the image origin. Edge tiles
are zero-padded on the bottom/right when the padding needed on each axis is
at most half a tile; tiles needing more are dropped. ``pad_fraction`` records
the larger of the two per-axis padded fractions, so it is always <= 0.5 for
emitted patches.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol

import numpy as np
from PIL import Image

DEFAULT_TILE = 256
DEFAULT_TOPK = 1500
DEFAULT_MPP_40X = 0.25
DEFAULT_REF_NUCLEUS_UM = 8.0
BACKGROUND_LUMINANCE = 220.0


@dataclass
class PatchRecord:
    """One tile with provenance back to its source image."""

    source_image_id: str
    grid_row: int
    grid_col: int
    pixels: np.ndarray  # [tile, tile, 3] uint8
    pad_fraction: float
    effective_magnification: float

    def filename(self) -> str:
        return f"{self.source_image_id}_r{self.grid_row}_c{self.grid_col}.png"

    def metadata(self) -> dict:
        return {
            "source_image_id": self.source_image_id,
            "grid_row": self.grid_row,
            "grid_col": self.grid_col,
            "pad_fraction": self.pad_fraction,
            "effective_magnification": self.effective_magnification,
            "filename": self.filename(),
        }


@dataclass(frozen=True)
class MagnificationEstimate:
    mean_nucleus_px: float
    reference_nucleus_um: float
    mpp: float
    scale_factor_to_40x: float


class Scorer(Protocol):
    """Maps a patch to a relevance probability in [0, 1]."""

    def __call__(self, patch: PatchRecord) -> float: ...


def tiles_per_axis(n: int, tile: int = DEFAULT_TILE) -> int:
    """Closed-form tile count along one axis of length ``n``."""
    full = n // tile
    rem = n % tile
    extra = 1 if rem > 0 and (tile - rem) <= tile // 2 else 0
    return full + extra


def tile_image(
    image: np.ndarray,
    tile: int = DEFAULT_TILE,
    source_image_id: str = "",
    effective_magnification: float = 40.0,
) -> list[PatchRecord]:
    """Split a 40x-rescaled RGB image into non-overlapping tiles.

    Returns tiles_per_axis(H) * tiles_per_axis(W) patches in row-major grid
    order; padded pixels are exactly zero.
    """
    if tile <= 0:
        raise ValueError(f"tile must be positive, got {tile}")
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected H x W x 3 image, got shape {img.shape}")
    height, width = int(img.shape[0]), int(img.shape[1])
    if height < 1 or width < 1:
        raise ValueError("empty image")
    img = img.astype(np.uint8, copy=False)

    rows = tiles_per_axis(height, tile)
    cols = tiles_per_axis(width, tile)
    patches = []
    for r in range(rows):
        for c in range(cols):
            y0, x0 = r * tile, c * tile
            h = min(tile, height - y0)
            w = min(tile, width - x0)
            pixels = np.zeros((tile, tile, 3), dtype=np.uint8)
            pixels[:h, :w] = img[y0 : y0 + h, x0 : x0 + w]
            pad_fraction = max((tile - h) / tile, (tile - w) / tile)
            patches.append(
                PatchRecord(
                    source_image_id=source_image_id,
                    grid_row=r,
                    grid_col=c,
                    pixels=pixels,
                    pad_fraction=pad_fraction,
                    effective_magnification=effective_magnification,
                )
            )
    return patches


def infer_magnification(
    nucleus_diameters_px: list[float],
    reference_nucleus_um: float = DEFAULT_REF_NUCLEUS_UM,
    mpp_40x_reference: float = DEFAULT_MPP_40X,
) -> MagnificationEstimate:
    """Estimate microns-per-pixel from measured nucleus diameters.

    mpp = reference_nucleus_um / mean(diameters); the factor to reach the 40x
    reference scale is mpp / mpp_40x_reference.
    """
    diameters = [float(d) for d in nucleus_diameters_px]
    if not diameters:
        raise ValueError("at least one nucleus measurement is required")
    if any(d <= 0 for d in diameters):
        raise ValueError("nucleus diameters must be positive")
    if reference_nucleus_um <= 0 or mpp_40x_reference <= 0:
        raise ValueError("reference constants must be positive")
    mean_px = float(np.mean(diameters))
    mpp = reference_nucleus_um / mean_px
    return MagnificationEstimate(
        mean_nucleus_px=mean_px,
        reference_nucleus_um=reference_nucleus_um,
        mpp=mpp,
        scale_factor_to_40x=mpp / mpp_40x_reference,
    )


def rescale_to_40x(image: np.ndarray, scale_factor: float) -> np.ndarray:
    """Bilinear rescale by ``scale_factor``; a factor of 1.0 is the identity."""
    if scale_factor <= 0:
        raise ValueError(f"scale_factor must be positive, got {scale_factor}")
    img = np.asarray(image).astype(np.uint8, copy=False)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected H x W x 3 image, got shape {img.shape}")
    if scale_factor == 1.0:
        return img.copy()
    height, width = img.shape[:2]
    new_h = int(round(height * scale_factor))
    new_w = int(round(width * scale_factor))
    if new_h < 1 or new_w < 1:
        raise ValueError(
            f"rescaling {height}x{width} by {scale_factor} would produce an empty image"
        )
    resized = Image.fromarray(img).resize((new_w, new_h), Image.Resampling.BILINEAR)
    return np.asarray(resized)


def relevance_topk(
    patches: list[PatchRecord],
    scorer: Callable[[PatchRecord], float],
    k: int = DEFAULT_TOPK,
) -> list[PatchRecord]:
    """Keep the min(k, n) highest-scoring patches.

    Ordered by descending score; ties broken by (grid_row, grid_col) so the
    selection is deterministic.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    scores = []
    for patch in patches:
        s = float(scorer(patch))
        if not 0.0 <= s <= 1.0:
            raise ValueError(
                f"scorer returned {s} for patch ({patch.grid_row}, {patch.grid_col}); "
                "scores must lie in [0, 1]"
            )
        scores.append(s)
    order = sorted(
        range(len(patches)),
        key=lambda i: (-scores[i], patches[i].grid_row, patches[i].grid_col),
    )
    return [patches[i] for i in order[: min(k, len(patches))]]


class NonBackgroundScorer:
    """Reference relevance scorer: fraction of non-background pixels.

    A pixel is background when its Rec.601 luminance is at or above the
    threshold (default 220/255). Stands in for a trained relevance classifier.
    """

    def __init__(self, threshold: float = BACKGROUND_LUMINANCE):
        if not 0 < threshold <= 255:
            raise ValueError("threshold must lie in (0, 255]")
        self.threshold = float(threshold)

    def __call__(self, patch: PatchRecord) -> float:
        px = patch.pixels.astype(np.float64)
        luminance = 0.299 * px[:, :, 0] + 0.587 * px[:, :, 1] + 0.114 * px[:, :, 2]
        return float(np.mean(luminance < self.threshold))


def load_image(path: Path | str) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def resolve_scale_factor(
    magnification: float | None,
    nucleus_diameters_px: list[float] | None,
    mpp_40x_reference: float = DEFAULT_MPP_40X,
    reference_nucleus_um: float = DEFAULT_REF_NUCLEUS_UM,
) -> float:
    """Scale factor to 40x from declared magnification or nucleus measurements.

    A declared magnification >= 4 is read as objective power (40 -> 1.0);
    smaller values are read as microns-per-pixel. Without either input the
    image is assumed to be at 40x already.
    """
    if magnification is not None:
        if magnification >= 4.0:
            return 40.0 / magnification
        return magnification / mpp_40x_reference
    if nucleus_diameters_px:
        est = infer_magnification(nucleus_diameters_px, reference_nucleus_um, mpp_40x_reference)
        return est.scale_factor_to_40x
    return 1.0


def preprocess_image(
    image: np.ndarray,
    image_id: str,
    scale_factor: float,
    tile: int = DEFAULT_TILE,
) -> list[PatchRecord]:
    rescaled = rescale_to_40x(image, scale_factor)
    return tile_image(rescaled, tile=tile, source_image_id=image_id, effective_magnification=40.0)


def preprocess_dataset(
    record,
    out_dir: Path | str,
    topk: int = DEFAULT_TOPK,
    scorer: Callable[[PatchRecord], float] | None = None,
    mpp_40x_reference: float = DEFAULT_MPP_40X,
    reference_nucleus_um: float = DEFAULT_REF_NUCLEUS_UM,
    nucleus_measurements: dict[str, list[float]] | None = None,
    tile: int = DEFAULT_TILE,
) -> dict:
    """Preprocess every source image of a registered dataset.

    Writes PNG patches named ``<image_id>_r<row>_c<col>.png`` plus a
    ``patches.jsonl`` metadata file into ``out_dir``. Relevance filtering
    keeps at most ``topk`` patches per image. Returns summary counts.
    """
    from .datasets import source_image_paths

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scorer = scorer if scorer is not None else NonBackgroundScorer()
    measurements = nucleus_measurements or {}

    paths = source_image_paths(record)
    if not paths:
        raise ValueError(f"dataset {record.name!r} has no source images under {record.root_path}")

    total = 0
    lines = []
    for image_id in sorted(paths):
        image = load_image(paths[image_id])
        diams = measurements.get(image_id, measurements.get("*"))
        scale = resolve_scale_factor(
            record.magnification, diams, mpp_40x_reference, reference_nucleus_um
        )
        patches = preprocess_image(image, image_id, scale, tile=tile)
        if not patches:
            continue
        kept = relevance_topk(patches, scorer, k=topk)
        for patch in kept:
            Image.fromarray(patch.pixels).save(out_dir / patch.filename())
            meta = patch.metadata()
            meta["relevance_score"] = float(scorer(patch))
            lines.append(json.dumps(meta, sort_keys=True))
        total += len(kept)

    with open(out_dir / "patches.jsonl", "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))
    return {"dataset": record.name, "n_images": len(paths), "n_patches": total}
