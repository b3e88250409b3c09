"""Procedural identity corpus for desk-scale experiments.

Every subject gets a synthetic 64x64 grayscale "face": a shared face-like
template plus identity-specific random patterns at three spatial scales
(coarse 6x6, mid 16x16, fine 32x32 grids, bilinearly upsampled). The fine
scale carries the strongest identity signal, so models trained on sharp
stills lean on cues that motion/defocus blur destroys; a per-frame lighting
gradient keeps the coarse scale from being a free ride.

A subject contributes enrollment stills (stream "still"; the first is the
gallery entry, the rest are training-only) and probe videos (stream
"real_video"): frames are affine-perturbed, lit, optionally blurred with a
kernel sampled from the degradation set, and noised. Everything derives from
named substreams of one root seed, so regeneration is byte-identical.
"""

from __future__ import annotations

import math
import os

import numpy as np

from . import blur, imageio
from .errors import ParameterError
from .rng import STREAM_CORPUS, substream

SIZE = 64

# identity-pattern amplitudes per scale (coarse, mid, fine)
AMP_COARSE = 0.10
AMP_MID = 0.20
AMP_FINE = 0.30


def resize_bilinear(src: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-center bilinear resize of a 2-D array."""
    h, w = src.shape
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = src[np.ix_(y0, x0)]
    b = src[np.ix_(y0, x1)]
    c = src[np.ix_(y1, x0)]
    d = src[np.ix_(y1, x1)]
    return (a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx + c * fy * (1 - fx) + d * fy * fx)


def warp_affine(img: np.ndarray, tx: float = 0.0, ty: float = 0.0, scale: float = 1.0, rot: float = 0.0) -> np.ndarray:
    """Translate/scale/rotate [C,H,W] about the center, bilinear, edge-clamped."""
    c, h, w = img.shape
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    xd = xx - cx - tx
    yd = yy - cy - ty
    cs, sn = math.cos(-rot), math.sin(-rot)
    xs = (cs * xd - sn * yd) / scale + cx
    ys = (sn * xd + cs * yd) / scale + cy
    xs = np.clip(xs, 0, w - 1)
    ys = np.clip(ys, 0, h - 1)
    x0 = np.floor(xs).astype(int)
    y0 = np.floor(ys).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xs - x0
    fy = ys - y0
    out = np.empty_like(img, dtype=np.float64)
    for ch in range(c):
        p = img[ch]
        out[ch] = (
            p[y0, x0] * (1 - fy) * (1 - fx)
            + p[y0, x1] * (1 - fy) * fx
            + p[y1, x0] * fy * (1 - fx)
            + p[y1, x1] * fy * fx
        )
    return out.astype(img.dtype)


def _face_template(size: int) -> np.ndarray:
    t = np.linspace(-1.0, 1.0, size)
    yy, xx = np.meshgrid(t, t, indexing="ij")
    face = np.exp(-(((xx / 0.78) ** 2 + (yy / 0.92) ** 2) ** 3))
    base = 0.30 + 0.38 * face
    for ex in (-0.38, 0.38):  # eye sockets
        base -= 0.15 * np.exp(-(((xx - ex) / 0.17) ** 2 + ((yy + 0.30) / 0.11) ** 2))
    base -= 0.13 * np.exp(-((xx / 0.27) ** 2 + ((yy - 0.52) / 0.13) ** 2))  # mouth
    base += 0.06 * np.exp(-((xx / 0.10) ** 2 + ((yy - 0.05) / 0.35) ** 2))  # nose ridge
    return base


def identity_image(root_seed: int, subject_idx: int, size: int = SIZE) -> np.ndarray:
    """The subject's canonical (unperturbed) face, float64 [1,H,W] in [0,1]."""
    rng = substream(root_seed, STREAM_CORPUS, subject_idx, 0)
    coarse = resize_bilinear(rng.uniform(-1, 1, (6, 6)), size, size)
    mid = resize_bilinear(rng.uniform(-1, 1, (16, 16)), size, size)
    fine = resize_bilinear(rng.uniform(-1, 1, (32, 32)), size, size)
    img = _face_template(size) + AMP_COARSE * coarse + AMP_MID * mid + AMP_FINE * fine
    return np.clip(img, 0.0, 1.0)[None]


def _lighting_plane(size: int, ax: float, ay: float) -> np.ndarray:
    t = np.linspace(-1.0, 1.0, size)
    yy, xx = np.meshgrid(t, t, indexing="ij")
    return (ax * xx + ay * yy)[None]


def _perturb(base: np.ndarray, rng: np.random.Generator, *, strong: bool) -> np.ndarray:
    size = base.shape[-1]
    if strong:  # video frames move more than enrollment stills
        tx, ty = rng.uniform(-2, 2, 2)
        scale = rng.uniform(0.96, 1.04)
        rot = rng.uniform(-0.05, 0.05)
        light = rng.uniform(-0.08, 0.08, 2)
        noise_sd = 0.02
    else:
        tx, ty = rng.uniform(-1, 1, 2)
        scale = rng.uniform(0.98, 1.02)
        rot = rng.uniform(-0.02, 0.02)
        light = rng.uniform(-0.04, 0.04, 2)
        noise_sd = 0.015
    img = warp_affine(base, tx=tx, ty=ty, scale=scale, rot=rot)
    img = img + _lighting_plane(size, *light)
    return img, noise_sd


def generate_corpus(
    out_dir: str,
    n_subjects: int,
    frames_per_video: int,
    seed: int,
    *,
    stills_per_subject: int = 1,
    videos_per_subject: int = 1,
    blur_probes: bool = True,
    size: int = SIZE,
) -> str:
    """Write images + manifest.tsv under out_dir; returns the manifest path."""
    if n_subjects < 1:
        raise ParameterError(f"n_subjects must be >= 1, got {n_subjects}")
    if frames_per_video < 1 or stills_per_subject < 1 or videos_per_subject < 1:
        raise ParameterError("frames_per_video, stills_per_subject, videos_per_subject must be >= 1")
    still_dir = os.path.join(out_dir, "still")
    os.makedirs(still_dir, exist_ok=True)
    records: list[imageio.Record] = []
    for s in range(n_subjects):
        sid = f"s{s:03d}"
        base = identity_image(seed, s, size)
        rng = substream(seed, STREAM_CORPUS, s, 1)
        for j in range(stills_per_subject):
            img, noise_sd = _perturb(base, rng, strong=False)
            img = np.clip(img + rng.normal(0.0, noise_sd, img.shape), 0.0, 1.0)
            rel = f"still/{sid}_k{j}.pgm"
            imageio.write_image(os.path.join(out_dir, rel), img)
            records.append(
                imageio.Record(rel, sid, None, None, "still", "gallery" if j == 0 else "train")
            )
        for v in range(videos_per_subject):
            vid = f"{sid}_v{v}"
            vdir = os.path.join(out_dir, "video", vid)
            os.makedirs(vdir, exist_ok=True)
            for f in range(frames_per_video):
                img, noise_sd = _perturb(base, rng, strong=True)
                if blur_probes:
                    spec = blur.sample_blur_spec(rng)
                    img = blur.apply_blur(img, blur.make_kernel(spec))
                img = np.clip(img + rng.normal(0.0, noise_sd, img.shape), 0.0, 1.0)
                rel = f"video/{vid}/f{f:02d}.pgm"
                imageio.write_image(os.path.join(out_dir, rel), img)
                records.append(imageio.Record(rel, sid, vid, f, "real_video", "probe"))
    manifest = os.path.join(out_dir, "manifest.tsv")
    imageio.write_manifest(manifest, records)
    return manifest


def occlude_frames(frames: np.ndarray, area_fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Blank one random square patch per frame with featureless mid gray.

    Mid gray carries no signal for centered inputs; black patches act like a
    strong synthetic feature and drown the whole image for every model.
    """
    if not 0.0 < area_fraction < 1.0:
        raise ParameterError(f"area_fraction must be in (0,1), got {area_fraction}")
    out = frames.copy()
    n, _, h, w = out.shape
    side_h = max(1, int(round(math.sqrt(area_fraction) * h)))
    side_w = max(1, int(round(math.sqrt(area_fraction) * w)))
    for i in range(n):
        y0 = int(rng.integers(h - side_h + 1))
        x0 = int(rng.integers(w - side_w + 1))
        out[i, :, y0 : y0 + side_h, x0 : x0 + side_w] = 0.5
    return out
