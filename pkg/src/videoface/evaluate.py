"""Video matching protocols, ROC sweeps, and report serialization.

A still or a video is reduced to one vector: the mean embedding over its
frames and their horizontal mirrors (frames ordered by frame index). Vectors
are compared by cosine similarity. Four protocols are exposed:

  v2v  verification over all pairs of probe videos (V2V-verify),
  s2v  still gallery (one averaged entry per subject) against video probes
       (S2V-id); this also yields the genuine/impostor scores used for
       verification rates,
  v2s  the transposed matching: video gallery entries, one still probe per
       subject (V2S-id),
  id   video gallery built from each subject's first video, remaining videos
       as probes (V2V-id).

The ROC sweeps thresholds over the unique scores with the accept rule
score >= threshold, so the lowest threshold always lands at (FAR, VR) = (1, 1).
VR at a target FAR is read off the sweep without interpolation.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import corpus, imageio
from .errors import MetricError, ParameterError, SimilarityError
from .rng import STREAM_OCCLUDE, substream

PROTOCOLS = {
    "v2v": "V2V-verify",
    "s2v": "S2V-id",
    "v2s": "V2S-id",
    "id": "V2V-id",
}
DEFAULT_TARGET_FARS = (0.01,)


def cosine_similarity(a, b) -> float:
    av = np.asarray(a, dtype=np.float64).ravel()
    bv = np.asarray(b, dtype=np.float64).ravel()
    if av.shape != bv.shape:
        raise SimilarityError(f"vector shapes differ: {av.shape} vs {bv.shape}")
    na, nb = np.linalg.norm(av), np.linalg.norm(bv)
    if na < 1e-12 or nb < 1e-12:
        raise SimilarityError("cosine similarity is undefined for near-zero vectors")
    return float(av @ bv / (na * nb))


@dataclass(frozen=True)
class VideoRep:
    """One matchable entity: a subject's still set or a single video."""

    rep_id: str
    subject_id: str
    vector: np.ndarray  # float64 mean embedding (not normalized)


def mirror_frames(frames: np.ndarray) -> np.ndarray:
    """Horizontal flips of [F,C,H,W] (or [C,H,W]) pixel arrays."""
    return np.ascontiguousarray(frames[..., ::-1])


def sequence_embedding(net, frames: np.ndarray) -> np.ndarray:
    """Mean embedding of the frames and their mirrors."""
    if frames.ndim == 3:
        frames = frames[None]
    both = np.concatenate([frames, mirror_frames(frames)], axis=0)
    return net.embed_images(both).astype(np.float64).mean(axis=0)


def _score_matrix(probes: list[VideoRep], gallery: list[VideoRep]) -> np.ndarray:
    p = np.stack([r.vector for r in probes])
    g = np.stack([r.vector for r in gallery])
    pn = np.linalg.norm(p, axis=1)
    gn = np.linalg.norm(g, axis=1)
    if np.any(pn < 1e-12) or np.any(gn < 1e-12):
        raise SimilarityError("cosine similarity is undefined for near-zero vectors")
    return (p / pn[:, None]) @ (g / gn[:, None]).T


def rank1_identify(gallery: list[VideoRep], probes: list[VideoRep]) -> float:
    """Fraction of probes whose best-scoring gallery entry shares their subject.

    Ties go to the lowest gallery index.
    """
    if not gallery or not probes:
        raise MetricError("rank-1 identification needs a gallery and probes")
    scores = _score_matrix(probes, gallery)
    best = scores.argmax(axis=1)  # first index on ties
    hits = sum(1 for i, j in enumerate(best) if probes[i].subject_id == gallery[j].subject_id)
    return hits / len(probes)


def roc_and_vr(
    scores, labels, target_fars=DEFAULT_TARGET_FARS
) -> tuple[list[tuple[float, float]], dict[float, float]]:
    """Threshold sweep over the unique scores (accept when score >= threshold).

    Returns the ROC as (FAR, VR) points in sweep order (descending threshold)
    and, per target, the highest VR whose FAR stays at or below the target
    (0.0 when no threshold qualifies). No interpolation between points.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    if s.shape != y.shape or s.ndim != 1:
        raise MetricError(f"scores {s.shape} and labels {y.shape} must be equal-length 1-D")
    n_gen = int(y.sum())
    n_imp = int(y.size - n_gen)
    if n_gen == 0 or n_imp == 0:
        raise MetricError(
            f"ROC needs both genuine and impostor pairs (got {n_gen} genuine, {n_imp} impostor)"
        )
    order = np.argsort(s)[::-1]
    s_sorted = s[order]
    gen_cum = np.cumsum(y[order])
    roc: list[tuple[float, float]] = []
    for t_neg in np.unique(-s_sorted):  # ascending -score = descending threshold
        # last row whose score still clears this threshold
        li = int(np.searchsorted(-s_sorted, t_neg, side="right")) - 1
        accepted = li + 1
        tp = int(gen_cum[li])
        fp = accepted - tp
        roc.append((fp / n_imp, tp / n_gen))
    vr_at_far: dict[float, float] = {}
    for target in target_fars:
        ok = [vr for far, vr in roc if far <= target + 1e-15]
        vr_at_far[float(target)] = max(ok) if ok else 0.0
    return roc, vr_at_far


# -------------------------------------------------------------- protocol runs


def _collect_reps(
    net,
    manifest_path: str,
    *,
    occlude_fraction: float = 0.0,
    seed: int | None = None,
) -> tuple[list[VideoRep], list[VideoRep]]:
    """(gallery still reps per subject, probe video reps) from manifest roles."""
    records = imageio.read_manifest(manifest_path)
    galleries: dict[str, list] = {}
    videos: dict[tuple[str, str], list] = {}
    for r in records:
        if r.role == "gallery":
            galleries.setdefault(r.subject_id, []).append(r)
        elif r.role == "probe":
            if r.video_id is None:
                raise MetricError(f"probe record {r.path} has no video id")
            videos.setdefault((r.subject_id, r.video_id), []).append(r)
    if occlude_fraction and seed is None:
        raise ParameterError("occlusion needs a seed")

    still_reps = []
    for subject in sorted(galleries):
        frames = np.stack(
            [imageio.load_record_image(manifest_path, r) for r in sorted(galleries[subject], key=lambda r: r.path)]
        )
        still_reps.append(
            VideoRep(rep_id=f"still:{subject}", subject_id=subject, vector=sequence_embedding(net, frames))
        )
    video_reps = []
    for vi, key in enumerate(sorted(videos)):
        subject, video_id = key
        recs = sorted(videos[key], key=lambda r: (r.frame_idx if r.frame_idx is not None else 0))
        frames = np.stack([imageio.load_record_image(manifest_path, r) for r in recs])
        if occlude_fraction:
            rng = substream(seed, STREAM_OCCLUDE, vi)
            frames = corpus.occlude_frames(frames, occlude_fraction, rng)
        video_reps.append(
            VideoRep(
                rep_id=f"video:{subject}:{video_id}",
                subject_id=subject,
                vector=sequence_embedding(net, frames),
            )
        )
    return still_reps, video_reps


@dataclass
class EvalReport:
    protocol: str
    scores: list[tuple[str, float, bool]]
    roc: list[tuple[float, float]]
    vr_at_far: dict[float, float]
    rank1: float | None

    def to_text(self) -> str:
        lines = [f"protocol\t{self.protocol}"]
        lines.append(f"n_scores\t{len(self.scores)}")
        lines.append(f"rank1\t{'-' if self.rank1 is None else f'{self.rank1:.6f}'}")
        for far in sorted(self.vr_at_far):
            lines.append(f"vr_at_far\t{far:.6f}\t{self.vr_at_far[far]:.6f}")
        for far, vr in self.roc:
            lines.append(f"roc\t{far:.6f}\t{vr:.6f}")
        for pair_id, score, same in self.scores:
            lines.append(f"score\t{pair_id}\t{score:.6f}\t{int(same)}")
        return "\n".join(lines) + "\n"

    def roc_tsv(self) -> str:
        lines = ["far\tvr"]
        for far, vr in self.roc:
            lines.append(f"{far:.6f}\t{vr:.6f}")
        return "\n".join(lines) + "\n"


def _paired_report(
    protocol: str,
    probes: list[VideoRep],
    gallery: list[VideoRep],
    target_fars,
    with_rank1: bool,
) -> EvalReport:
    mat = _score_matrix(probes, gallery)
    scores, labels, entries = [], [], []
    for i, p in enumerate(probes):
        for j, g in enumerate(gallery):
            same = p.subject_id == g.subject_id
            entries.append((f"{p.rep_id}|{g.rep_id}", float(mat[i, j]), same))
            scores.append(mat[i, j])
            labels.append(same)
    roc, vr = roc_and_vr(np.array(scores), np.array(labels), target_fars)
    rank1 = rank1_identify(gallery, probes) if with_rank1 else None
    return EvalReport(protocol=protocol, scores=entries, roc=roc, vr_at_far=vr, rank1=rank1)


def run_protocol(
    net,
    manifest_path: str,
    protocol: str,
    *,
    target_fars=DEFAULT_TARGET_FARS,
    occlude_fraction: float = 0.0,
    seed: int | None = None,
) -> EvalReport:
    if protocol not in PROTOCOLS:
        raise ParameterError(f"unknown protocol {protocol!r}; have {sorted(PROTOCOLS)}")
    stills, vids = _collect_reps(
        net, manifest_path, occlude_fraction=occlude_fraction, seed=seed
    )
    name = PROTOCOLS[protocol]
    if protocol == "v2v":
        if len(vids) < 2:
            raise MetricError("v2v needs at least two probe videos")
        entries, scores, labels = [], [], []
        for i in range(len(vids)):
            for j in range(i + 1, len(vids)):
                sim = cosine_similarity(vids[i].vector, vids[j].vector)
                same = vids[i].subject_id == vids[j].subject_id
                entries.append((f"{vids[i].rep_id}|{vids[j].rep_id}", sim, same))
                scores.append(sim)
                labels.append(same)
        roc, vr = roc_and_vr(np.array(scores), np.array(labels), target_fars)
        return EvalReport(protocol=name, scores=entries, roc=roc, vr_at_far=vr, rank1=None)
    if protocol == "s2v":
        if not stills or not vids:
            raise MetricError("s2v needs gallery stills and probe videos")
        return _paired_report(name, vids, stills, target_fars, with_rank1=True)
    if protocol == "v2s":
        if not stills or not vids:
            raise MetricError("v2s needs probe videos and stills")
        return _paired_report(name, stills, vids, target_fars, with_rank1=True)
    # id: first video of each subject forms the gallery, the rest probe it
    by_subject: dict[str, list[VideoRep]] = {}
    for v in vids:
        by_subject.setdefault(v.subject_id, []).append(v)
    gallery, probes = [], []
    for subject in sorted(by_subject):
        group = sorted(by_subject[subject], key=lambda r: r.rep_id)
        gallery.append(group[0])
        probes.extend(group[1:])
    if not probes:
        raise MetricError("id protocol needs subjects with at least two videos")
    return _paired_report(name, probes, gallery, target_fars, with_rank1=True)


def write_report(report: EvalReport, out_dir: str) -> tuple[str, str]:
    """Write the text report and its ROC table; returns their paths."""
    os.makedirs(out_dir, exist_ok=True)
    report_path = os.path.join(out_dir, "eval_report.txt")
    roc_path = os.path.join(out_dir, "roc.tsv")
    with open(report_path, "w", encoding="utf-8") as fh:
        fh.write(report.to_text())
    with open(roc_path, "w", encoding="utf-8") as fh:
        fh.write(report.roc_tsv())
    return report_path, roc_path
