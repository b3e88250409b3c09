"""Binary PGM/PPM images and the line-oriented dataset manifest.

Images are 8-bit binary netpbm files (P5 grayscale, P6 RGB), loaded as
float32 [C,H,W] scaled by 1/255. Manifests are TSV, one record per line:

    path  subject_id  video_id  frame_idx  stream  role

"-" marks a null field. Paths are relative to the manifest's own directory so
a corpus tree can be moved or regenerated anywhere byte-identically.
stream is one of {still, sim_video, real_video}. role tags how evaluation
uses a record: "gallery" (enrolled stills), "probe" (query videos), "train"
(training-only records such as extra stills and blurred twins).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace

import numpy as np

from .errors import ImageFormatError, ManifestError

STREAMS = ("still", "sim_video", "real_video")
ROLES = ("gallery", "probe", "train")


# ------------------------------------------------------------------- images


def _read_token(fh) -> bytes:
    # netpbm header token: skips whitespace and '#' comments
    tok = b""
    while True:
        ch = fh.read(1)
        if not ch:
            raise ImageFormatError("unexpected end of file in image header")
        if ch == b"#":
            while ch and ch != b"\n":
                ch = fh.read(1)
            continue
        if ch.isspace():
            if tok:
                return tok
            continue
        tok += ch


def read_image(path) -> np.ndarray:
    """Load a binary PGM (P5) or PPM (P6) as float32 [C,H,W] in [0,1]."""
    with open(path, "rb") as fh:
        magic = fh.read(2)
        if magic == b"P5":
            channels = 1
        elif magic == b"P6":
            channels = 3
        else:
            raise ImageFormatError(f"{path}: unsupported magic {magic!r} (want P5 or P6)")
        width = int(_read_token(fh))
        height = int(_read_token(fh))
        maxval = int(_read_token(fh))
        if maxval != 255:
            raise ImageFormatError(f"{path}: maxval {maxval} unsupported, need 8-bit (255)")
        if width < 1 or height < 1:
            raise ImageFormatError(f"{path}: bad dimensions {width}x{height}")
        n = width * height * channels
        raw = fh.read(n)
        if len(raw) != n:
            raise ImageFormatError(f"{path}: truncated pixel data ({len(raw)} of {n} bytes)")
    flat = np.frombuffer(raw, dtype=np.uint8)
    if channels == 1:
        arr = flat.reshape(1, height, width)
    else:
        arr = flat.reshape(height, width, 3).transpose(2, 0, 1)
    return arr.astype(np.float32) / np.float32(255.0)


def write_image(path, image: np.ndarray) -> None:
    """Write float [C,H,W] values in [0,1] as binary PGM (C=1) or PPM (C=3)."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise ImageFormatError(f"image must be [1|3,H,W], got shape {arr.shape}")
    q = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    c, h, w = q.shape
    magic = b"P5" if c == 1 else b"P6"
    payload = q[0] if c == 1 else q.transpose(1, 2, 0)
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(payload.tobytes())


# ----------------------------------------------------------------- manifests


@dataclass(frozen=True)
class Record:
    path: str
    subject_id: str
    video_id: str | None
    frame_idx: int | None
    stream: str
    role: str | None

    def with_path(self, path: str) -> "Record":
        return replace(self, path=path)


def _null(v) -> str:
    return "-" if v is None else str(v)


def write_manifest(path, records: list[Record]) -> None:
    lines = []
    for r in records:
        if r.stream not in STREAMS:
            raise ManifestError(f"bad stream {r.stream!r} for {r.path}")
        if r.role is not None and r.role not in ROLES:
            raise ManifestError(f"bad role {r.role!r} for {r.path}")
        lines.append(
            "\t".join(
                (r.path, r.subject_id, _null(r.video_id), _null(r.frame_idx), r.stream, _null(r.role))
            )
        )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines))
        if lines:
            fh.write("\n")


def read_manifest(path) -> list[Record]:
    records: list[Record] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 6:
                raise ManifestError(f"{path}:{lineno}: expected 6 fields, got {len(parts)}")
            p, subject, video, frame, stream, role = parts
            if stream not in STREAMS:
                raise ManifestError(f"{path}:{lineno}: unknown stream {stream!r}")
            if role != "-" and role not in ROLES:
                raise ManifestError(f"{path}:{lineno}: unknown role {role!r}")
            try:
                frame_idx = None if frame == "-" else int(frame)
            except ValueError:
                raise ManifestError(f"{path}:{lineno}: bad frame_idx {frame!r}") from None
            records.append(
                Record(
                    path=p,
                    subject_id=subject,
                    video_id=None if video == "-" else video,
                    frame_idx=frame_idx,
                    stream=stream,
                    role=None if role == "-" else role,
                )
            )
    return records


def record_abspath(manifest_path, record: Record) -> str:
    """Resolve a record's relative path against its manifest's directory."""
    base = os.path.dirname(os.path.abspath(manifest_path))
    return os.path.normpath(os.path.join(base, record.path))


def load_record_image(manifest_path, record: Record) -> np.ndarray:
    return read_image(record_abspath(manifest_path, record))
