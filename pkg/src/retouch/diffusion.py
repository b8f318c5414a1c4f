"""Latent denoising loop with per-step background blending.

Latents are (c, h, w) arrays.  Step arithmetic runs in float64; the
proposal loop rounds to float32 once, when the final latent is stored.
Blending is a per-cell selection, so unmasked cells carry the background
latent's exact bit pattern through the whole loop and the float32
round-trip.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import BinaryMask, Image, TextPrompt
from .errors import BackendError, ShapeError

log = logging.getLogger(__name__)

DEFAULT_TIMESTEPS = 200
DEFAULT_PROPOSALS = 4
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


@dataclass(frozen=True)
class DiffusionSchedule:
    """Noise schedule: betas (length T) and running products alpha_bars (length T+1)."""

    betas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        bars = np.asarray(self.alpha_bars, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ValueError("betas must be a non-empty 1-D sequence")
        if betas.min() <= 0.0 or betas.max() >= 1.0:
            raise ValueError("betas must lie strictly inside (0, 1)")
        if betas.size > 1 and not np.all(np.diff(betas) > 0):
            raise ValueError("betas must be strictly increasing")
        if bars.shape != (betas.size + 1,):
            raise ValueError("alpha_bars must have length T+1")
        if bars[0] != 1.0:
            raise ValueError("alpha_bars[0] must be exactly 1")
        if not np.all(np.diff(bars) < 0):
            raise ValueError("alpha_bars must be strictly decreasing")
        expected = np.cumprod(1.0 - betas)
        if not np.allclose(bars[1:], expected, rtol=1e-9, atol=0.0):
            raise ValueError("alpha_bars inconsistent with betas")
        for name, arr in (("betas", betas), ("alpha_bars", bars)):
            arr = np.ascontiguousarray(arr)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def timesteps(self) -> int:
        return int(self.betas.size)


def build_schedule(
    timesteps: int,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
) -> DiffusionSchedule:
    """Linear beta schedule with alpha_bars as the running product of (1 - beta)."""
    if timesteps < 1:
        raise ValueError("timesteps must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    if timesteps > 1 and beta_start == beta_end:
        raise ValueError("beta_start == beta_end only allowed for a single step")
    betas = np.linspace(beta_start, beta_end, timesteps, dtype=np.float64)
    alpha_bars = np.concatenate(([1.0], np.cumprod(1.0 - betas)))
    return DiffusionSchedule(betas=betas, alpha_bars=alpha_bars)


@dataclass(frozen=True)
class RetouchConfig:
    """Proposal-loop knobs; seeds default to 0..m-1 when not given."""

    proposals: int = DEFAULT_PROPOSALS
    timesteps: int = DEFAULT_TIMESTEPS
    eta: float = 0.0
    guidance_free: bool = True
    seeds: tuple[int, ...] = ()
    beta_start: float = DEFAULT_BETA_START
    beta_end: float = DEFAULT_BETA_END

    def __post_init__(self):
        if self.proposals < 1:
            raise ValueError("proposal count must be >= 1")
        if not (0.0 <= self.eta <= 1.0):
            raise ValueError("eta must lie in [0, 1]")
        seeds = tuple(int(s) for s in self.seeds)
        if not seeds:
            seeds = tuple(range(self.proposals))
        if len(seeds) != self.proposals:
            raise ValueError("need exactly one seed per proposal")
        if len(set(seeds)) != len(seeds):
            raise ValueError("proposal seeds must be pairwise distinct")
        object.__setattr__(self, "seeds", seeds)

    @classmethod
    def with_base_seed(cls, base_seed: int, **kwargs) -> "RetouchConfig":
        m = kwargs.pop("proposals", DEFAULT_PROPOSALS)
        return cls(proposals=m, seeds=tuple(base_seed + k for k in range(m)), **kwargs)

    @classmethod
    def from_dict(cls, obj: dict) -> "RetouchConfig":
        """Accepts the short config-file keys: m, T, eta, beta_start, beta_end, seeds."""
        return cls(
            proposals=int(obj.get("m", obj.get("proposals", DEFAULT_PROPOSALS))),
            timesteps=int(obj.get("T", obj.get("timesteps", DEFAULT_TIMESTEPS))),
            eta=float(obj.get("eta", 0.0)),
            guidance_free=bool(obj.get("guidance_free", True)),
            seeds=tuple(obj.get("seeds", ())),
            beta_start=float(obj.get("beta_start", DEFAULT_BETA_START)),
            beta_end=float(obj.get("beta_end", DEFAULT_BETA_END)),
        )

    @classmethod
    def from_file(cls, path) -> "RetouchConfig":
        import json
        from pathlib import Path

        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_dict(self) -> dict:
        return {
            "m": self.proposals, "T": self.timesteps, "eta": self.eta,
            "beta_start": self.beta_start, "beta_end": self.beta_end,
            "seeds": list(self.seeds),
        }


@dataclass(frozen=True)
class Proposal:
    """One decoded candidate edit."""

    index: int
    image: Image
    seed: int
    final_latent: np.ndarray = field(repr=False)


def _as_latent(arr, name: str) -> np.ndarray:
    out = np.asarray(arr, dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise ValueError(f"{name} must be finite")
    return out


def forward_noise(
    z0: np.ndarray, t: int, eps: np.ndarray, schedule: DiffusionSchedule
) -> np.ndarray:
    """Noise a clean latent to step t: sqrt(a_bar_t)*z0 + sqrt(1-a_bar_t)*eps."""
    z0 = _as_latent(z0, "z0")
    eps = _as_latent(eps, "eps")
    if z0.shape != eps.shape:
        raise ShapeError(f"z0 shape {z0.shape} != eps shape {eps.shape}")
    if not (0 <= t <= schedule.timesteps):
        raise ValueError(f"t={t} outside [0, {schedule.timesteps}]")
    if t == 0:
        return z0.copy()
    a_bar = schedule.alpha_bars[t]
    return np.sqrt(a_bar) * z0 + np.sqrt(1.0 - a_bar) * eps


def denoise_step(
    z_t: np.ndarray,
    t: int,
    eps_pred: np.ndarray,
    schedule: DiffusionSchedule,
    eta: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """One reverse update from step t to t-1.

    With eta=0 the update is deterministic and never touches the rng;
    with eta>0 a fresh standard-normal draw scaled by sigma_t is added.
    """
    z_t = _as_latent(z_t, "z_t")
    eps_pred = _as_latent(eps_pred, "eps_pred")
    if z_t.shape != eps_pred.shape:
        raise ShapeError(f"z_t shape {z_t.shape} != eps_pred shape {eps_pred.shape}")
    if not (1 <= t <= schedule.timesteps):
        raise ValueError(f"t={t} outside [1, {schedule.timesteps}]")
    if not (0.0 <= eta <= 1.0):
        raise ValueError("eta must lie in [0, 1]")

    a_t = schedule.alpha_bars[t]
    a_prev = schedule.alpha_bars[t - 1]

    z0_hat = (z_t - np.sqrt(1.0 - a_t) * eps_pred) / np.sqrt(a_t)
    sigma = eta * np.sqrt((1.0 - a_prev) / (1.0 - a_t)) * np.sqrt(1.0 - a_t / a_prev)
    dir_coef = np.sqrt(max(0.0, 1.0 - a_prev - sigma * sigma))
    out = np.sqrt(a_prev) * z0_hat + dir_coef * eps_pred
    if eta > 0.0:
        if rng is None:
            raise ValueError("eta > 0 requires an rng for the stochastic term")
        out = out + sigma * rng.standard_normal(z_t.shape)
    return out


def blend(
    z_background: np.ndarray, z_denoised: np.ndarray, latent_mask: np.ndarray
) -> np.ndarray:
    """Per-cell selection: mask=1 takes the denoised latent, mask=0 the background.

    Input dtypes are preserved (promoted only if they differ), so the
    output carries the selected operands' exact bit patterns.
    """
    bg = np.asarray(z_background)
    fg = np.asarray(z_denoised)
    if not (np.all(np.isfinite(bg)) and np.all(np.isfinite(fg))):
        raise ValueError("latents must be finite")
    if bg.shape != fg.shape:
        raise ShapeError(f"background shape {bg.shape} != denoised shape {fg.shape}")
    mask = np.asarray(latent_mask)
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("latent mask values must be exactly 0 or 1")
    if mask.ndim == bg.ndim - 1:
        if mask.shape != bg.shape[1:]:
            raise ShapeError(f"mask shape {mask.shape} != spatial shape {bg.shape[1:]}")
        mask = mask[None, ...]
    elif mask.shape != bg.shape:
        raise ShapeError(f"mask shape {mask.shape} incompatible with {bg.shape}")
    return np.where(mask != 0, fg, bg)


def downsample_mask(mask: BinaryMask, latent_h: int, latent_w: int) -> np.ndarray:
    """Max-pool a pixel mask onto the latent grid (any covered pixel sets the cell)."""
    if latent_h < 1 or latent_w < 1:
        raise ValueError("latent dims must be >= 1")
    if mask.height % latent_h != 0 or mask.width % latent_w != 0:
        raise ShapeError(
            f"latent dims {latent_h}x{latent_w} do not divide mask {mask.height}x{mask.width}"
        )
    stride_h = mask.height // latent_h
    stride_w = mask.width // latent_w
    if stride_h != stride_w:
        raise ShapeError(f"anisotropic stride {stride_h}x{stride_w} not supported")
    pooled = mask.data.reshape(latent_h, stride_h, latent_w, stride_w).max(axis=(1, 3))
    return pooled.astype(np.uint8)


def _run_proposal(
    index: int,
    seed: int,
    z0: np.ndarray,
    latent_mask: np.ndarray,
    text: Optional[TextPrompt],
    codec,
    denoiser,
    schedule: DiffusionSchedule,
    eta: float,
) -> Proposal:
    rng = np.random.default_rng(seed)
    shape = z0.shape
    z = rng.standard_normal(shape)
    for t in range(schedule.timesteps, 0, -1):
        eps_pred = _as_latent(denoiser.predict_noise(z, t, text), "eps_pred")
        if eps_pred.shape != shape:
            raise BackendError(
                f"denoiser returned shape {eps_pred.shape}, expected {shape}"
            )
        z_fg = denoise_step(z, t, eps_pred, schedule, eta, rng)
        eps_bg = rng.standard_normal(shape)
        z_bg = forward_noise(z0, t - 1, eps_bg, schedule)
        z = blend(z_bg, z_fg, latent_mask)
    final = z.astype(np.float32)
    image = codec.decode(final)
    return Proposal(index=index, image=image, seed=seed, final_latent=final)


def retouch(
    image: Image,
    region: BinaryMask,
    text: Optional[TextPrompt],
    codec,
    denoiser,
    config: RetouchConfig,
    jobs: int = 1,
) -> list[Proposal]:
    """Generate config.proposals candidate edits of `region` guided by `text`.

    Each proposal owns an independent rng stream seeded from config.seeds,
    with a fixed draw order (initial latent, then per step: the stochastic
    DDIM term when eta>0, then the background noise), so results do not
    depend on `jobs`.  A proposal whose backend call fails is dropped with
    a warning; if every proposal fails a BackendError is raised.
    """
    if (image.height, image.width) != (region.height, region.width):
        raise ShapeError(
            f"image {image.height}x{image.width} vs region {region.height}x{region.width}"
        )
    schedule = build_schedule(config.timesteps, config.beta_start, config.beta_end)
    z0 = _as_latent(codec.encode(image), "encoded latent")
    if z0.ndim != 3:
        raise BackendError(f"codec latent must be (c, h, w), got shape {z0.shape}")
    latent_mask = downsample_mask(region, z0.shape[1], z0.shape[2])

    def run(k: int) -> Proposal:
        return _run_proposal(
            k, config.seeds[k], z0, latent_mask, text, codec, denoiser,
            schedule, config.eta,
        )

    results: list[Optional[Proposal]] = [None] * config.proposals
    failures: list[tuple[int, Exception]] = []
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            futures = {k: pool.submit(run, k) for k in range(config.proposals)}
            for k, fut in futures.items():
                try:
                    results[k] = fut.result()
                except Exception as exc:
                    failures.append((k, exc))
    else:
        for k in range(config.proposals):
            try:
                results[k] = run(k)
            except Exception as exc:
                failures.append((k, exc))

    for k, exc in failures:
        log.warning("proposal %d (seed %d) failed: %s", k, config.seeds[k], exc)
    proposals = [p for p in results if p is not None]
    if not proposals:
        raise BackendError(f"all {config.proposals} proposals failed: {failures[0][1]}")
    return proposals
