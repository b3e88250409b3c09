"""Blur degradations for simulating video frames from still images.

Two families plus their composition, 38 configurations in total:
12 linear motion kernels (extent L in {7,9,11} pixels, direction theta in
{0, pi/4, pi/2, 3pi/4}), 2 Gaussian out-of-focus kernels (sigma in {1.5, 3.0}
on a 9x9 support), and the 24 defocus-then-motion compositions.

Motion kernels rasterize the line segment through the kernel center and
spread uniform weight over the hit lattice points; diagonal directions hit
fewer points than L, so every kernel is renormalized to unit sum (brightness
preservation). The Gaussian support is |i|,|j| <= R//2. Images are blurred by
per-channel 2-D correlation with replicate border padding; all kernels here
are centrally symmetric, so correlation and convolution coincide.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from . import imageio
from .errors import DimensionError, ParameterError
from .rng import STREAM_BLUR, substream

MOTION_EXTENTS = (7, 9, 11)
MOTION_ANGLES = (0.0, math.pi / 4, math.pi / 2, 3 * math.pi / 4)
DEFOCUS_SIGMAS = (1.5, 3.0)
DEFOCUS_SUPPORT = 9


@dataclass(frozen=True)
class BlurSpec:
    kind: str  # motion | defocus | defocus_then_motion
    L: int | None = None
    theta: float | None = None
    sigma: float | None = None
    R: int | None = None

    def describe(self) -> str:
        if self.kind == "motion":
            return f"motion(L={self.L},theta={self.theta:.4f})"
        if self.kind == "defocus":
            return f"defocus(sigma={self.sigma},R={self.R})"
        return f"defocus(sigma={self.sigma},R={self.R})+motion(L={self.L},theta={self.theta:.4f})"


def enumerate_specs() -> list[BlurSpec]:
    """The 38 degradation configurations, in a fixed order."""
    specs: list[BlurSpec] = []
    for L in MOTION_EXTENTS:
        for theta in MOTION_ANGLES:
            specs.append(BlurSpec(kind="motion", L=L, theta=theta))
    for sigma in DEFOCUS_SIGMAS:
        specs.append(BlurSpec(kind="defocus", sigma=sigma, R=DEFOCUS_SUPPORT))
    for sigma in DEFOCUS_SIGMAS:
        for L in MOTION_EXTENTS:
            for theta in MOTION_ANGLES:
                specs.append(
                    BlurSpec(kind="defocus_then_motion", L=L, theta=theta, sigma=sigma, R=DEFOCUS_SUPPORT)
                )
    return specs


def make_motion_kernel(L: int, theta: float) -> np.ndarray:
    """Uniform weight over the rasterized length-L segment at direction theta."""
    if L % 2 == 0 or L < 3:
        raise ParameterError(f"motion extent must be odd and >= 3, got {L}")
    if not 0.0 <= theta < math.pi:
        raise ParameterError(f"theta must lie in [0, pi), got {theta}")
    half = (L - 1) // 2
    c = half
    pts = set()
    for t in range(-half, half + 1):
        dx = int(round(t * math.cos(theta)))
        dy = int(round(t * math.sin(theta)))
        pts.add((dy, dx))
    k = np.zeros((L, L), dtype=np.float64)
    for dy, dx in pts:
        k[c + dy, c + dx] = 1.0
    return k / k.sum()


def make_defocus_kernel(sigma: float, R: int = DEFOCUS_SUPPORT) -> np.ndarray:
    """Gaussian kernel on the (R x R) support, scaled to unit volume."""
    if sigma <= 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    if R % 2 == 0 or R < 1:
        raise ParameterError(f"support must be odd and >= 1, got {R}")
    half = R // 2
    idx = np.arange(-half, half + 1, dtype=np.float64)
    sq = idx[:, None] ** 2 + idx[None, :] ** 2
    k = np.exp(-sq / (2.0 * sigma * sigma))
    return k / k.sum()


def compose_kernels(first: np.ndarray, second: np.ndarray) -> np.ndarray:
    """Full discrete convolution of two kernels, renormalized to unit sum."""
    a = np.asarray(first, dtype=np.float64)
    b = np.asarray(second, dtype=np.float64)
    ha, wa = a.shape
    hb, wb = b.shape
    out = np.zeros((ha + hb - 1, wa + wb - 1), dtype=np.float64)
    for i in range(hb):
        for j in range(wb):
            out[i : i + ha, j : j + wa] += b[i, j] * a
    return out / out.sum()


def make_kernel(spec: BlurSpec) -> np.ndarray:
    if spec.kind == "motion":
        return make_motion_kernel(spec.L, spec.theta)
    if spec.kind == "defocus":
        return make_defocus_kernel(spec.sigma, spec.R)
    if spec.kind == "defocus_then_motion":
        return compose_kernels(
            make_defocus_kernel(spec.sigma, spec.R), make_motion_kernel(spec.L, spec.theta)
        )
    raise ParameterError(f"unknown blur kind {spec.kind!r}")


def apply_blur(image: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Per-channel 2-D correlation with replicate padding; output size = input.

    Math runs in float64; the result is cast back to the image dtype, so a
    constant image comes back bit-identical (unit-sum kernel).
    """
    img = np.asarray(image)
    squeeze = False
    if img.ndim == 2:
        img = img[None]
        squeeze = True
    if img.ndim != 3:
        raise DimensionError(f"image must be [C,H,W] or [H,W], got shape {image.shape}")
    k = np.asarray(kernel, dtype=np.float64)
    kh, kw = k.shape
    _, h, w = img.shape
    if kh >= h or kw >= w:
        raise DimensionError(f"kernel {kh}x{kw} must be smaller than image {h}x{w}")
    pt, pb = kh // 2, kh - 1 - kh // 2
    pl, pr = kw // 2, kw - 1 - kw // 2
    xp = np.pad(img.astype(np.float64), ((0, 0), (pt, pb), (pl, pr)), mode="edge")
    out = np.zeros_like(img, dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            wij = k[i, j]
            if wij != 0.0:
                out += wij * xp[:, i : i + h, j : j + w]
    res = out.astype(img.dtype)
    return res[0] if squeeze else res


def sample_blur_spec(rng: np.random.Generator) -> BlurSpec:
    specs = enumerate_specs()
    return specs[int(rng.integers(len(specs)))]


def build_two_stream(manifest_in: str, manifest_out: str, seed: int) -> tuple[str, list[str]]:
    """Emit a blurred sim_video twin for every still record.

    The output manifest holds the input records followed by one "sim_video"
    record per still, same subject, blur spec drawn per record from the blur
    substream. Images land under sim_video/ next to the output manifest.
    Unreadable source images are skipped and reported; the run continues.

    Returns (manifest_out, error lines).
    """
    records = imageio.read_manifest(manifest_in)
    out_dir = os.path.dirname(os.path.abspath(manifest_out))
    sim_dir = os.path.join(out_dir, "sim_video")
    os.makedirs(sim_dir, exist_ok=True)

    # pass-through records keep pointing at their files when the output
    # manifest lives in a different directory
    out_records = [
        r.with_path(os.path.relpath(imageio.record_abspath(manifest_in, r), out_dir))
        for r in records
    ]
    errors: list[str] = []
    for idx, rec in enumerate(records):
        if rec.stream != "still":
            continue
        rng = substream(seed, STREAM_BLUR, idx)
        spec = sample_blur_spec(rng)
        try:
            img = imageio.load_record_image(manifest_in, rec)
        except Exception as exc:  # per-record failure must not kill the run
            errors.append(f"{rec.path}\t{exc}")
            continue
        blurred = apply_blur(img, make_kernel(spec))
        stem = os.path.splitext(os.path.basename(rec.path))[0]
        rel = f"sim_video/{stem}_sim.pgm" if img.shape[0] == 1 else f"sim_video/{stem}_sim.ppm"
        imageio.write_image(os.path.join(out_dir, rel), blurred)
        out_records.append(
            imageio.Record(
                path=rel,
                subject_id=rec.subject_id,
                video_id=None,
                frame_idx=None,
                stream="sim_video",
                role="train",
            )
        )
    imageio.write_manifest(manifest_out, out_records)
    if errors:
        with open(manifest_out + ".errors.txt", "w", encoding="utf-8") as fh:
            fh.write("\n".join(errors) + "\n")
    return manifest_out, errors
