import json
import math

import numpy as np
import pytest

from retouch import (
    Image,
    ManifestEntry,
    MaskGenConfig,
    RetouchConfig,
    ShapeError,
    evaluate_manifest,
    load_manifest,
    mse,
    psnr,
    ssim,
    write_image,
)
from retouch.backends import resolve_backend
from retouch.metrics import SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW
from conftest import rand_image


def pixel(r, g, b):
    return Image(np.array([[[r, g, b]]], dtype=np.float32))


def ssim_windowed_oracle(a: Image, b: Image) -> float:
    """Direct per-window reimplementation (plain loops, no convolution)."""
    half = SSIM_WINDOW // 2
    x1d = np.arange(SSIM_WINDOW, dtype=np.float64) - half
    g = np.exp(-(x1d ** 2) / (2 * SSIM_SIGMA ** 2))
    kernel = np.outer(g, g)
    kernel /= kernel.sum()
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    h, w = a.height, a.width
    values = []
    for ch in range(3):
        x = a.data[:, :, ch].astype(np.float64)
        y = b.data[:, :, ch].astype(np.float64)
        for i in range(h - SSIM_WINDOW + 1):
            for j in range(w - SSIM_WINDOW + 1):
                wx = x[i:i + SSIM_WINDOW, j:j + SSIM_WINDOW]
                wy = y[i:i + SSIM_WINDOW, j:j + SSIM_WINDOW]
                mx = float((kernel * wx).sum())
                my = float((kernel * wy).sum())
                vx = float((kernel * wx * wx).sum()) - mx * mx
                vy = float((kernel * wy * wy).sum()) - my * my
                cov = float((kernel * wx * wy).sum()) - mx * my
                num = (2 * mx * my + c1) * (2 * cov + c2)
                den = (mx * mx + my * my + c1) * (vx + vy + c2)
                values.append(num / den)
    return float(np.mean(values))


class TestMse:
    def test_identical_is_zero(self, rng):
        img = rand_image(rng, 4, 4)
        assert mse(img, img) == 0.0

    def test_unit_difference(self):
        assert mse(pixel(0, 0, 0), pixel(1, 1, 1)) == pytest.approx(1.0)

    def test_single_channel_difference(self):
        assert mse(pixel(0, 0, 0), pixel(0.5, 0, 0)) == pytest.approx(0.25 / 3)

    def test_symmetry(self, rng):
        a, b = rand_image(rng, 5, 5), rand_image(rng, 5, 5)
        assert mse(a, b) == mse(b, a)

    def test_dim_mismatch(self, rng):
        with pytest.raises(ShapeError):
            mse(rand_image(rng, 2, 2), rand_image(rng, 3, 2))


class TestPsnr:
    def test_known_values(self):
        # mse ~0.01 -> 20 dB (up to float32 pixel quantization); mse 1 -> 0 dB
        a = pixel(0, 0, 0)
        b = pixel(math.sqrt(0.03), 0, 0)  # squared error 0.03 over 3 values
        assert psnr(a, b) == pytest.approx(20.0, abs=1e-5)
        assert psnr(a, b) == 10.0 * math.log10(1.0 / mse(a, b))
        assert psnr(pixel(0, 0, 0), pixel(1, 1, 1)) == pytest.approx(0.0, abs=1e-12)

    def test_identical_is_infinite(self, rng):
        img = rand_image(rng, 3, 3)
        assert math.isinf(psnr(img, img))

    def test_monotone_decreasing_in_mse(self, rng):
        pairs = [(rand_image(rng, 4, 4), rand_image(rng, 4, 4)) for _ in range(100)]
        stats = sorted((mse(a, b), psnr(a, b)) for a, b in pairs)
        for (m1, p1), (m2, p2) in zip(stats, stats[1:]):
            if m2 > m1:
                assert p2 < p1


class TestSsim:
    def test_identical_is_one(self, rng):
        for _ in range(10):
            img = rand_image(rng, 12, 15)
            assert ssim(img, img) == pytest.approx(1.0, abs=1e-12)

    def test_negative_image_matches_windowed_oracle(self, rng):
        # keep values away from mid-gray so 1-a differs from a everywhere
        data = rng.uniform(0.0, 0.4, (13, 14, 3)).astype(np.float32)
        a = Image(data)
        b = Image(1.0 - a.data)
        value = ssim(a, b)
        assert value < 1.0
        assert value == pytest.approx(ssim_windowed_oracle(a, b), abs=1e-6)

    def test_random_pair_matches_windowed_oracle(self, rng):
        a, b = rand_image(rng, 12, 12), rand_image(rng, 12, 12)
        assert ssim(a, b) == pytest.approx(ssim_windowed_oracle(a, b), abs=1e-6)

    def test_constant_images_closed_form(self):
        c1v, c2v = 0.25, 0.75
        a = Image(np.full((16, 16, 3), c1v, dtype=np.float32))
        b = Image(np.full((16, 16, 3), c2v, dtype=np.float32))
        x = float(np.float32(c1v))
        y = float(np.float32(c2v))
        expected = (2 * x * y + SSIM_K1 ** 2) / (x * x + y * y + SSIM_K1 ** 2)
        assert ssim(a, b) == pytest.approx(expected, abs=1e-9)

    def test_symmetry(self, rng):
        a, b = rand_image(rng, 12, 12), rand_image(rng, 12, 12)
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)

    def test_too_small_rejected(self, rng):
        with pytest.raises(ShapeError):
            ssim(rand_image(rng, 10, 12), rand_image(rng, 10, 12))


class TestManifest:
    def _write_manifest(self, tmp_path, rng, n=2, size=16):
        entries = []
        for i in range(n):
            img = rand_image(rng, size, size)
            path = tmp_path / f"img_{i}.png"
            write_image(img, path)
            entries.append({
                "image_path": path.name,
                "query": f"object {i}",
                "conditional_text": f"replacement {i}",
            })
        manifest_path = tmp_path / "manifest.json"
        manifest_path.write_text(json.dumps(entries))
        return manifest_path

    def test_load_validates(self, tmp_path):
        path = tmp_path / "m.json"
        path.write_text("[]")
        with pytest.raises(ValueError):
            load_manifest(path)
        path.write_text("{not json")
        with pytest.raises(ValueError):
            load_manifest(path)
        with pytest.raises(ValueError):
            load_manifest(tmp_path / "missing.json")

    def test_empty_manifest_rejected(self):
        with pytest.raises(ValueError):
            evaluate_manifest([], None)

    def test_four_variants_consistent_rows(self, tmp_path, rng):
        manifest = self._write_manifest(tmp_path, rng, n=2)
        entries = load_manifest(manifest)
        bundle = resolve_backend("mock")
        reports = evaluate_manifest(
            entries, bundle,
            retouch_config=RetouchConfig(proposals=2, timesteps=10, seeds=(1, 2)),
            mask_config=MaskGenConfig(floor=-1.0),
        )
        assert [r.variant for r in reports] == ["none", "cma", "iqa", "cma+iqa"]
        assert all(len(r.rows) == 2 for r in reports)

    def test_no_match_degrades_to_identity_metrics(self, tmp_path, rng):
        manifest = self._write_manifest(tmp_path, rng, n=1)
        entries = load_manifest(manifest)
        bundle = resolve_backend("mock")
        # floor above any cosine the hash embedder can produce -> no match
        reports = evaluate_manifest(
            entries, bundle,
            retouch_config=RetouchConfig(proposals=1, timesteps=5, seeds=(1,)),
            mask_config=MaskGenConfig(floor=1.0),
        )
        for report in reports:
            row = report.rows[0]
            assert row.no_match
            assert row.mse == 0.0
            assert row.ssim == pytest.approx(1.0, abs=1e-12)
            assert math.isinf(row.psnr)

    def test_means_recomputable_from_rows(self, tmp_path, rng):
        manifest = self._write_manifest(tmp_path, rng, n=3)
        entries = load_manifest(manifest)
        bundle = resolve_backend("mock")
        reports = evaluate_manifest(
            entries, bundle,
            retouch_config=RetouchConfig(proposals=2, timesteps=8, seeds=(3, 4)),
            mask_config=MaskGenConfig(floor=-1.0),
        )
        for report in reports:
            rows = [r for r in report.rows if r.error is None]
            for name in ("ssim", "mse", "psnr"):
                values = [getattr(r, name) for r in rows]
                expected = sum(values) / len(values)
                got = report.mean(name)
                if math.isinf(expected):
                    assert math.isinf(got)
                else:
                    assert got == pytest.approx(expected, abs=1e-12)

    def test_unreadable_entry_excluded(self, tmp_path, rng):
        manifest = self._write_manifest(tmp_path, rng, n=1)
        entries = load_manifest(manifest)
        entries.append(ManifestEntry(
            image_path=str(tmp_path / "missing.png"),
            query="x", conditional_text="y"))
        bundle = resolve_backend("mock")
        reports = evaluate_manifest(
            entries, bundle,
            retouch_config=RetouchConfig(proposals=1, timesteps=5, seeds=(1,)),
            mask_config=MaskGenConfig(floor=-1.0),
        )
        for report in reports:
            assert report.excluded == 1
            assert report.rows[1].error is not None
            assert len(report.rows) == 2

    def test_report_serialization_handles_infinite_psnr(self, tmp_path, rng):
        manifest = self._write_manifest(tmp_path, rng, n=1)
        entries = load_manifest(manifest)
        bundle = resolve_backend("mock")
        reports = evaluate_manifest(
            entries, bundle,
            retouch_config=RetouchConfig(proposals=1, timesteps=5, seeds=(1,)),
            mask_config=MaskGenConfig(floor=1.0),  # no match -> identical output
        )
        payload = reports[0].to_dict()
        assert payload["rows"][0]["psnr"] is None
        assert payload["rows"][0]["psnr_infinite"] is True
        json.dumps(payload)  # must be JSON-serializable
