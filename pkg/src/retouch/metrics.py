"""Reference image metrics (MSE, PSNR, SSIM) and the manifest evaluation harness.

The harness runs the full pipeline once per manifest entry, assesses the
proposals under each enable-flag variant, and reports metrics of the
selected output against the ORIGINAL input image (there is no edited
ground truth; background fidelity is what the numbers measure).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import correlate1d

from .assessment import AssessmentConfig, assess
from .core import Image, TextPrompt
from .diffusion import RetouchConfig, retouch
from .errors import NoMatchingEntityError, ShapeError
from .imageio import read_image
from .mask_gen import MaskGenConfig, generate_mask

log = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

VARIANTS = (
    ("none", False, False),
    ("cma", True, False),
    ("iqa", False, True),
    ("cma+iqa", True, True),
)


def _check_dims(a: Image, b: Image) -> None:
    if (a.height, a.width) != (b.height, b.width):
        raise ShapeError(
            f"image dimensions differ: {a.height}x{a.width} vs {b.height}x{b.width}"
        )


def mse(a: Image, b: Image) -> float:
    """Mean squared difference over all H*W*3 values."""
    _check_dims(a, b)
    diff = a.data.astype(np.float64) - b.data.astype(np.float64)
    return float((diff * diff).mean())


def psnr(a: Image, b: Image) -> float:
    """10*log10(1/mse) dB for unit-range images; +inf when the images match."""
    err = mse(a, b)
    if err == 0.0:
        return math.inf
    return float(10.0 * math.log10(1.0 / err))


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size, dtype=np.float64) - half
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def _local_mean(channel: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    # separable correlation; the constant-padded border is sliced away,
    # leaving exactly the valid 11x11 window positions
    half = kernel.size // 2
    out = correlate1d(channel, kernel, axis=0, mode="constant")
    out = correlate1d(out, kernel, axis=1, mode="constant")
    return out[half:channel.shape[0] - half, half:channel.shape[1] - half]


def ssim(a: Image, b: Image) -> float:
    """Structural similarity with an 11x11 Gaussian window (sigma 1.5).

    Channelwise over all valid window positions with K1=0.01, K2=0.03
    and unit dynamic range; the result is the mean over windows and
    channels.  Images smaller than the window are rejected.
    """
    _check_dims(a, b)
    if a.height < SSIM_WINDOW or a.width < SSIM_WINDOW:
        raise ShapeError(
            f"ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, "
            f"got {a.height}x{a.width}"
        )
    kernel = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    c1 = SSIM_K1 * SSIM_K1
    c2 = SSIM_K2 * SSIM_K2
    total = 0.0
    for ch in range(3):
        x = a.data[:, :, ch].astype(np.float64)
        y = b.data[:, :, ch].astype(np.float64)
        mu_x = _local_mean(x, kernel)
        mu_y = _local_mean(y, kernel)
        var_x = _local_mean(x * x, kernel) - mu_x * mu_x
        var_y = _local_mean(y * y, kernel) - mu_y * mu_y
        cov = _local_mean(x * y, kernel) - mu_x * mu_y
        num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
        den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
        total += float((num / den).mean())
    return total / 3.0


@dataclass
class ManifestEntry:
    image_path: str
    query: str
    conditional_text: str
    reference_path: Optional[str] = None

    @classmethod
    def from_dict(cls, obj: dict) -> "ManifestEntry":
        try:
            return cls(
                image_path=obj["image_path"],
                query=obj["query"],
                conditional_text=obj["conditional_text"],
                reference_path=obj.get("reference_path"),
            )
        except KeyError as exc:
            raise ValueError(f"manifest entry missing field {exc}") from exc


def load_manifest(path: str | Path) -> list[ManifestEntry]:
    """Read a JSON array of {image_path, query, conditional_text, reference_path?}."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"cannot read manifest {path}: {exc}") from exc
    if not isinstance(raw, list) or not raw:
        raise ValueError(f"manifest {path} must be a non-empty JSON array")
    entries = [ManifestEntry.from_dict(obj) for obj in raw]
    base = path.parent
    for e in entries:
        e.image_path = str(base / e.image_path)
        if e.reference_path is not None:
            e.reference_path = str(base / e.reference_path)
    return entries


@dataclass
class MetricRow:
    index: int
    image_path: str
    ssim: Optional[float] = None
    psnr: Optional[float] = None
    mse: Optional[float] = None
    chosen: Optional[int] = None
    no_match: bool = False
    error: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "image_path": self.image_path,
            "ssim": self.ssim,
            "psnr": None if self.psnr is not None and math.isinf(self.psnr) else self.psnr,
            "psnr_infinite": self.psnr is not None and math.isinf(self.psnr),
            "mse": self.mse,
            "chosen": self.chosen,
            "no_match": self.no_match,
            "error": self.error,
        }


@dataclass
class MetricReport:
    """Per-variant metric table; means are over non-error rows."""

    variant: str
    enable_cma: bool
    enable_iqa: bool
    timesteps: int
    proposals: int
    alpha: float
    rows: list[MetricRow] = field(default_factory=list)
    excluded: int = 0
    reference: str = "original"

    def _included(self) -> list[MetricRow]:
        return [r for r in self.rows if r.error is None]

    def mean(self, name: str) -> float:
        rows = self._included()
        if not rows:
            return math.nan
        return sum(getattr(r, name) for r in rows) / len(rows)

    def to_dict(self) -> dict:
        mean_psnr = self.mean("psnr")
        return {
            "variant": self.variant,
            "config": {
                "enable_cma": self.enable_cma,
                "enable_iqa": self.enable_iqa,
                "timesteps": self.timesteps,
                "proposals": self.proposals,
                "alpha": self.alpha,
            },
            "reference": self.reference,
            "rows": [r.to_dict() for r in self.rows],
            "means": {
                "ssim": self.mean("ssim"),
                "psnr": None if math.isinf(mean_psnr) else mean_psnr,
                "psnr_infinite": math.isinf(mean_psnr),
                "mse": self.mean("mse"),
            },
            "excluded": self.excluded,
            "fid": None,
            "lpips": None,
        }


def _metric_row(index: int, path: str, original: Image, output: Image,
                chosen: Optional[int], no_match: bool) -> MetricRow:
    return MetricRow(
        index=index, image_path=path,
        ssim=ssim(original, output), psnr=psnr(original, output),
        mse=mse(original, output), chosen=chosen, no_match=no_match,
    )


def evaluate_manifest(
    entries: Sequence[ManifestEntry],
    bundle,
    retouch_config: RetouchConfig = RetouchConfig(),
    mask_config: MaskGenConfig = MaskGenConfig(),
    alpha: float = 5.0,
    variants: Sequence[tuple[str, bool, bool]] = VARIANTS,
    jobs: int = 1,
) -> list[MetricReport]:
    """Run the pipeline over a manifest and emit one MetricReport per variant.

    Proposals are generated once per entry and re-assessed under each
    variant.  An entry whose query matches nothing degrades to
    output = input (the no-edit result); an entry that errors out is
    excluded from that variant's means and counted.
    """
    if len(entries) == 0:
        raise ValueError("manifest is empty")
    reports = [
        MetricReport(
            variant=name, enable_cma=cma, enable_iqa=iqa,
            timesteps=retouch_config.timesteps, proposals=retouch_config.proposals,
            alpha=alpha,
        )
        for name, cma, iqa in variants
    ]

    for index, entry in enumerate(entries):
        try:
            original = read_image(entry.image_path)
        except Exception as exc:
            log.warning("entry %d unreadable: %s", index, exc)
            for report in reports:
                report.rows.append(MetricRow(
                    index=index, image_path=entry.image_path, error=str(exc)))
                report.excluded += 1
            continue

        query = TextPrompt(entry.query, role="query")
        conditional = TextPrompt(entry.conditional_text, role="conditional")
        proposals = None
        no_match = False
        entry_error: Optional[str] = None
        try:
            region, _ = generate_mask(
                original, query, bundle.segmenter,
                bundle.text_embedder, bundle.image_embedder, mask_config,
            )
            proposals = retouch(
                original, region, conditional, bundle.codec, bundle.denoiser,
                retouch_config, jobs=jobs,
            )
        except NoMatchingEntityError:
            no_match = True
        except Exception as exc:
            log.warning("entry %d failed: %s", index, exc)
            entry_error = str(exc)

        for report in reports:
            if entry_error is not None:
                report.rows.append(MetricRow(
                    index=index, image_path=entry.image_path, error=entry_error))
                report.excluded += 1
                continue
            if no_match:
                report.rows.append(_metric_row(
                    index, entry.image_path, original, original, None, True))
                continue
            try:
                selection = assess(
                    original, [p.image for p in proposals], conditional,
                    bundle.text_embedder, bundle.image_embedder,
                    AssessmentConfig(
                        alpha=alpha, enable_cma=report.enable_cma,
                        enable_iqa=report.enable_iqa,
                    ),
                )
                output = proposals[selection.chosen].image
                report.rows.append(_metric_row(
                    index, entry.image_path, original, output,
                    selection.chosen, False))
            except Exception as exc:
                log.warning("entry %d variant %s failed: %s", index, report.variant, exc)
                report.rows.append(MetricRow(
                    index=index, image_path=entry.image_path, error=str(exc)))
                report.excluded += 1
    return reports
