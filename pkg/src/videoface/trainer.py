"""Stage-wise training over the two-stream corpus.

Stages run in the fixed order A -> B -> C -> D:
  A  trunk alone under softmax (temporary projection + classifier head; a
     branchless graph trains its dense head directly),
  B  branches under softmax with the trunk frozen (temporary 256-d head per
     branch),
  C  joint softmax fine-tune of the whole network through the fused embedding,
  D  metric fine-tune: embeddings are l2-normalized and optimized with the
     margin-regularized triplet loss (or the plain-triplet / pairwise
     baselines).

Softmax-stage epochs cover every training record exactly once per stream
(permutation sampling); two-stream batches take equal halves from the still
and sim_video streams. Metric-stage batches are built subject-first from the
union of both streams: subjects_per_batch subjects x images_per_subject rows.

Every epoch ends with a rolling checkpoint (weights + optimizer velocities in
the binary weight format, cursor in a JSON sidecar), which makes resume
bit-exact: all randomness is keyed by (seed, stream, stage, epoch, batch), so
no generator state needs serializing.
"""

from __future__ import annotations

import json
import os
import shutil
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint, corpus, imageio, losses
from . import tensor as T
from .errors import CompositionError, ConfigError, TrainingDiverged
from .model import Network
from .rng import (
    STAGE_INDEX,
    STREAM_BATCH,
    STREAM_DROPOUT,
    STREAM_JITTER,
    STREAM_MINING,
    substream,
)

STAGE_ORDER = "ABCD"
TRAIN_STREAMS = ("still", "sim_video")
LOSS_D_CHOICES = ("mean_triplet", "triplet", "contrastive")
STREAM_MIXES = ("two_stream", "still_only")

# fixed init salts for temporary heads (stage A/B/C)
HEAD_SALTS = {"trunk.proj": 11, "trunk.cls": 12, "fusion.cls": 30}


@dataclass(frozen=True)
class StagePlan:
    epochs: int
    lr_start: float
    lr_end: float | None = None  # None: constant lr

    def lr_at(self, epoch: int) -> float:
        if self.lr_end is None or self.epochs <= 1:
            return self.lr_start
        frac = epoch / (self.epochs - 1)
        return float(self.lr_start * (self.lr_end / self.lr_start) ** frac)


@dataclass(frozen=True)
class TrainPlan:
    stages: dict[str, StagePlan]
    momentum: float = 0.9
    batch_size: int = 32
    subjects_per_batch: int = 8
    images_per_subject: int = 4
    stream_mix: str = "two_stream"
    mining: str = losses.SEMI_HARD
    alpha: float = 2.0
    beta: float = 0.2
    loss_d: str = "mean_triplet"
    jitter: bool = True
    exact_mean_jacobian: bool = True


def desk_plan(**overrides) -> TrainPlan:
    """Default desk-scale schedule on the synthetic corpus."""
    stages = {
        "A": StagePlan(epochs=20, lr_start=0.01, lr_end=0.001),
        "B": StagePlan(epochs=8, lr_start=0.01),
        "C": StagePlan(epochs=8, lr_start=0.005),
        "D": StagePlan(epochs=5, lr_start=0.005),
    }
    return TrainPlan(stages=stages, **overrides)


def paper_plan() -> TrainPlan:
    """The reference-scale schedule, for documentation; not used by tests."""
    stages = {
        "A": StagePlan(epochs=13, lr_start=0.01, lr_end=0.001),
        "B": StagePlan(epochs=4, lr_start=0.01, lr_end=0.001),
        "C": StagePlan(epochs=4, lr_start=0.001),
        "D": StagePlan(epochs=1, lr_start=0.001),
    }
    return TrainPlan(stages=stages, batch_size=180, subjects_per_batch=30, images_per_subject=6)


def plan_from_dict(cfg: dict) -> TrainPlan:
    allowed = {
        "stages", "momentum", "batch_size", "subjects_per_batch", "images_per_subject",
        "stream_mix", "mining", "alpha", "beta", "loss_d", "jitter", "exact_mean_jacobian",
    }
    unknown = set(cfg) - allowed
    if unknown:
        raise ConfigError(f"plan: unknown keys {sorted(unknown)}")
    base = desk_plan()
    stages = dict(base.stages)
    for name, sd in (cfg.get("stages") or {}).items():
        if name not in STAGE_ORDER:
            raise ConfigError(f"plan.stages: unknown stage {name!r}")
        bad = set(sd) - {"epochs", "lr_start", "lr_end"}
        if bad:
            raise ConfigError(f"plan.stages.{name}: unknown keys {sorted(bad)}")
        prev = stages[name]
        if "lr_end" in sd:
            lr_end = float(sd["lr_end"]) if sd["lr_end"] is not None else None
        else:
            lr_end = prev.lr_end
        stages[name] = StagePlan(
            epochs=int(sd.get("epochs", prev.epochs)),
            lr_start=float(sd.get("lr_start", prev.lr_start)),
            lr_end=lr_end,
        )
    plan = TrainPlan(
        stages=stages,
        momentum=float(cfg.get("momentum", base.momentum)),
        batch_size=int(cfg.get("batch_size", base.batch_size)),
        subjects_per_batch=int(cfg.get("subjects_per_batch", base.subjects_per_batch)),
        images_per_subject=int(cfg.get("images_per_subject", base.images_per_subject)),
        stream_mix=str(cfg.get("stream_mix", base.stream_mix)),
        mining=str(cfg.get("mining", base.mining)),
        alpha=float(cfg.get("alpha", base.alpha)),
        beta=float(cfg.get("beta", base.beta)),
        loss_d=str(cfg.get("loss_d", base.loss_d)),
        jitter=bool(cfg.get("jitter", base.jitter)),
        exact_mean_jacobian=bool(cfg.get("exact_mean_jacobian", base.exact_mean_jacobian)),
    )
    if plan.stream_mix not in STREAM_MIXES:
        raise ConfigError(f"plan.stream_mix must be one of {STREAM_MIXES}")
    if plan.mining not in losses.STRATEGIES:
        raise ConfigError(f"plan.mining must be one of {losses.STRATEGIES}")
    if plan.loss_d not in LOSS_D_CHOICES:
        raise ConfigError(f"plan.loss_d must be one of {LOSS_D_CHOICES}")
    return plan


# ------------------------------------------------------------------ the data


class TrainData:
    """Training records from a manifest, with images preloaded."""

    def __init__(self, manifest_path: str):
        self.manifest_path = manifest_path
        records = [r for r in imageio.read_manifest(manifest_path) if r.stream in TRAIN_STREAMS]
        if not records:
            raise CompositionError(f"{manifest_path}: no still/sim_video training records")
        self.records = records
        self.subjects = sorted({r.subject_id for r in records})
        self.class_of = {s: i for i, s in enumerate(self.subjects)}
        self.labels = np.array([self.class_of[r.subject_id] for r in records], dtype=np.int64)
        self.streams = np.array([r.stream for r in records])
        self.images = np.stack(
            [imageio.load_record_image(manifest_path, r) for r in records]
        ).astype(np.float32)

    @property
    def n_classes(self) -> int:
        return len(self.subjects)


class BatchComposer:
    """Deterministic batch index lists, keyed by (seed, stage, epoch)."""

    def __init__(self, data: TrainData, plan: TrainPlan, seed: int):
        self.data = data
        self.plan = plan
        self.seed = seed

    def softmax_epoch(self, stage: str, epoch: int) -> list[np.ndarray]:
        rng = substream(self.seed, STREAM_BATCH, STAGE_INDEX[stage], epoch)
        if self.plan.stream_mix == "two_stream":
            stills = np.flatnonzero(self.data.streams == "still")
            sims = np.flatnonzero(self.data.streams == "sim_video")
            if stills.size == 0 or sims.size == 0:
                raise CompositionError(
                    f"two_stream mix needs both streams; have {stills.size} still and "
                    f"{sims.size} sim_video records"
                )
            half = max(1, self.plan.batch_size // 2)
            sp = stills[rng.permutation(stills.size)]
            vp = sims[rng.permutation(sims.size)]
            chunks_s = [sp[i : i + half] for i in range(0, sp.size, half)]
            chunks_v = [vp[i : i + half] for i in range(0, vp.size, half)]
            batches = []
            for i in range(max(len(chunks_s), len(chunks_v))):
                parts = []
                if i < len(chunks_s):
                    parts.append(chunks_s[i])
                if i < len(chunks_v):
                    parts.append(chunks_v[i])
                batches.append(np.concatenate(parts))
            return batches
        idx = np.flatnonzero(self.data.streams == "still")
        if idx.size == 0:
            raise CompositionError("still_only mix has no still records")
        perm = idx[rng.permutation(idx.size)]
        bs = self.plan.batch_size
        return [perm[i : i + bs] for i in range(0, perm.size, bs)]

    def metric_epoch(self, stage: str, epoch: int) -> list[np.ndarray]:
        # Subject blocks stay fixed across epochs: the mean-distance term can
        # only satisfy its margin within a batch, so each subject must keep a
        # stable set of co-batch neighbours for those pushes to accumulate.
        # Only the image draw below resamples per epoch.
        group_rng = substream(self.seed, STREAM_BATCH, STAGE_INDEX[stage])
        rng = substream(self.seed, STREAM_BATCH, STAGE_INDEX[stage], epoch)
        k = self.plan.images_per_subject
        if k < 2:
            raise CompositionError("metric batches need images_per_subject >= 2")
        per_subject: dict[int, np.ndarray] = {}
        for ci, subject in enumerate(self.data.subjects):
            rows = np.flatnonzero(self.data.labels == ci)
            if self.plan.stream_mix == "still_only":
                rows = rows[self.data.streams[rows] == "still"]
            if rows.size < k:
                raise CompositionError(
                    f"subject {subject} has {rows.size} training images, need {k}"
                )
            per_subject[ci] = rows
        n_sub = len(per_subject)
        spb = self.plan.subjects_per_batch
        if n_sub < spb:
            raise CompositionError(f"need {spb} subjects per batch, corpus has {n_sub}")
        order = group_rng.permutation(n_sub)
        batches = []
        for g in range(n_sub // spb):
            chosen = order[g * spb : (g + 1) * spb]
            rows = []
            for ci in chosen:
                pool = per_subject[ci]
                take = rng.permutation(pool.size)[:k]
                rows.append(pool[np.sort(take)])
            batches.append(np.concatenate(rows))
        return batches


# ------------------------------------------------------------------- trainer


@dataclass
class EpochStats:
    stage: str
    epoch: int
    mean_loss: float
    lr: float
    mean_n: float | None = None
    mean_p: float | None = None


@dataclass
class TrainResult:
    history: list[EpochStats] = field(default_factory=list)
    final_checkpoint: str | None = None
    log_path: str | None = None


class Trainer:
    def __init__(self, net: Network, plan: TrainPlan, data: TrainData, out_dir: str, seed: int):
        self.net = net
        self.plan = plan
        self.data = data
        self.out_dir = out_dir
        self.seed = seed
        self.composer = BatchComposer(data, plan, seed)
        os.makedirs(out_dir, exist_ok=True)
        self._log_fh = None
        self._step = 0

    # ----------------------------------------------------------- checkpoints

    def _state_path(self, tag: str) -> str:
        return os.path.join(self.out_dir, f"{tag}.json")

    def _ckpt_path(self, tag: str) -> str:
        return os.path.join(self.out_dir, f"{tag}.tbew")

    def save_checkpoint(self, tag: str, state: dict, opt: T.SGD | None) -> None:
        arrays = {name: t.data for name, t in self.net.params.items()}
        if opt is not None:
            for name, v in opt.velocity.items():
                arrays[f"opt.{name}"] = v
        checkpoint.save_arrays(self._ckpt_path(tag), arrays)
        with open(self._state_path(tag), "w", encoding="utf-8") as fh:
            json.dump(state, fh, sort_keys=True, indent=0)
            fh.write("\n")

    def load_checkpoint(self, path: str) -> tuple[dict, dict[str, np.ndarray]]:
        arrays = checkpoint.load_arrays(path)
        velocities = {}
        for name in list(arrays):
            if name.startswith("opt."):
                velocities[name[4:]] = arrays.pop(name)
        # temporary heads live in the checkpoint too; recreate their slots
        for name, arr in arrays.items():
            if name not in self.net.params:
                if not name.startswith("head."):
                    raise ConfigError(f"checkpoint parameter {name!r} does not fit this model")
                self.net.params[name] = T.Tensor(arr, requires_grad=True)
            else:
                if self.net.params[name].data.shape != arr.shape:
                    raise ConfigError(
                        f"checkpoint parameter {name!r} shape {arr.shape} does not match "
                        f"model shape {self.net.params[name].data.shape}"
                    )
                self.net.params[name].data[...] = arr
        state_path = os.path.splitext(path)[0] + ".json"
        state = {}
        if os.path.exists(state_path):
            with open(state_path, "r", encoding="utf-8") as fh:
                state = json.load(fh)
        return state, velocities

    # ------------------------------------------------------------------ log

    def _log(self, *fields) -> None:
        if self._log_fh is not None:
            self._log_fh.write("\t".join(str(f) for f in fields) + "\n")

    # ---------------------------------------------------------------- stages

    def _trainable_names(self, stage: str) -> list[str]:
        has_branches = bool(self.net.graph.branches)
        def keep(name: str) -> bool:
            if stage == "A":
                if name.startswith("trunk."):
                    return True
                if has_branches:
                    return name.startswith("head.trunk.")
                return name.startswith("fusion.") or name.startswith("head.fusion.")
            if stage == "B":
                return name.startswith("branch.") or name.startswith("head.branch_")
            if stage == "C":
                return not name.startswith("head.") or name == "head.fusion.cls.w" or name == "head.fusion.cls.b"
            return not name.startswith("head.")  # D: every real network weight
        return [n for n in self.net.params if keep(n)]

    def _ensure_heads(self, stage: str) -> None:
        n_cls = self.data.n_classes
        g = self.net.graph
        if stage == "A":
            if g.branches:
                self.net.add_head("trunk.proj", self.net.info.trunk_flat, g.embed_dim, self.seed, HEAD_SALTS["trunk.proj"])
                self.net.add_head("trunk.cls", g.embed_dim, n_cls, self.seed, HEAD_SALTS["trunk.cls"])
            else:
                self.net.add_head("fusion.cls", g.embed_dim, n_cls, self.seed, HEAD_SALTS["fusion.cls"])
        elif stage == "B":
            for i, b in enumerate(g.branches):
                shape = self.net.info.shapes[f"branch.{b.name}.{b.layers[-1].name}"]
                flat = shape[0] * shape[1] * shape[2]
                self.net.add_head(f"branch_{b.name}.proj", flat, 256, self.seed, 20 + 2 * i)
                self.net.add_head(f"branch_{b.name}.cls", 256, n_cls, self.seed, 21 + 2 * i)
        elif stage == "C":
            self.net.add_head("fusion.cls", g.embed_dim, n_cls, self.seed, HEAD_SALTS["fusion.cls"])

    def _batch_pixels(self, idx: np.ndarray, stage: str, epoch: int, batch_i: int) -> np.ndarray:
        pix = self.data.images[idx]
        if self.plan.jitter and stage in ("A", "B", "C"):
            rng = substream(self.seed, STREAM_JITTER, STAGE_INDEX[stage], epoch, batch_i)
            out = np.empty_like(pix)
            for i in range(pix.shape[0]):
                tx, ty = rng.uniform(-2, 2, 2)
                scale = rng.uniform(0.95, 1.05)
                out[i] = corpus.warp_affine(pix[i], tx=tx, ty=ty, scale=scale)
            return out
        return pix

    def _loss_softmax(self, stage: str, idx: np.ndarray, epoch: int, batch_i: int) -> float:
        yb = self.data.labels[idx]
        pix = self._batch_pixels(idx, stage, epoch, batch_i)
        x = T.Tensor(pix)
        drop_rng = substream(self.seed, STREAM_DROPOUT, STAGE_INDEX[stage], epoch, batch_i)
        g = self.net.graph
        p = self.net.params
        if stage == "A":
            if g.branches:
                res = self.net.forward(x, train=True, rng=drop_rng, need_embed=False, need_branches=False)
                flat = T.dropout(T.flatten(res.trunk_out), g.dropout, rng=drop_rng, train=True)
                proj = T.dense(flat, p["head.trunk.proj.w"], p["head.trunk.proj.b"])
                logits = T.dense(proj, p["head.trunk.cls.w"], p["head.trunk.cls.b"])
            else:
                res = self.net.forward(x, train=True, rng=drop_rng)
                logits = T.dense(res.embed, p["head.fusion.cls.w"], p["head.fusion.cls.b"])
            loss, dlog = losses.softmax_cross_entropy(logits.data, yb)
            logits.backward(dlog.astype(np.float32))
            return loss
        if stage == "B":
            res = self.net.forward(x, train=True, rng=drop_rng, need_embed=False)
            total = 0.0
            for b in g.branches:
                flat = T.flatten(res.branch_outs[b.name])
                proj = T.dense(flat, p[f"head.branch_{b.name}.proj.w"], p[f"head.branch_{b.name}.proj.b"])
                logits = T.dense(proj, p[f"head.branch_{b.name}.cls.w"], p[f"head.branch_{b.name}.cls.b"])
                loss_b, dlog = losses.softmax_cross_entropy(logits.data, yb)
                logits.backward(dlog.astype(np.float32))
                total += loss_b
            return total
        # stage C: joint fine-tune through the fused embedding
        res = self.net.forward(x, train=True, rng=drop_rng)
        logits = T.dense(res.embed, p["head.fusion.cls.w"], p["head.fusion.cls.b"])
        loss, dlog = losses.softmax_cross_entropy(logits.data, yb)
        logits.backward(dlog.astype(np.float32))
        return loss

    def _loss_metric(self, idx: np.ndarray, epoch: int, batch_i: int) -> tuple[float, int, int]:
        yb = self.data.labels[idx]
        pix = self.data.images[idx]  # no jitter/dropout in the metric stage
        x = T.Tensor(pix)
        res = self.net.forward(x, train=False)
        normed = T.l2_normalize(res.embed)
        emb = normed.data.astype(np.float64)
        mine_rng = substream(self.seed, STREAM_MINING, STAGE_INDEX["D"], epoch, batch_i)
        if self.plan.loss_d == "contrastive":
            pairs = losses.pairs_from_labels(yb)
            loss, grad, _ = losses.pairwise_contrastive(emb, pairs, margin=self.plan.alpha)
            n_v, p_v = 0, 0
        else:
            triples = losses.mine_negatives(emb, yb, self.plan.beta, self.plan.mining, mine_rng)
            if self.plan.loss_d == "mean_triplet":
                r = losses.mdr_tl(
                    emb, yb, triples, self.plan.alpha,
                    exact_mean_jacobian=self.plan.exact_mean_jacobian,
                )
                loss, grad, n_v, p_v = r.loss, r.grad, r.n_violators, r.p_violators
            else:
                r = losses.triplet_loss(emb, triples, labels=yb)
                loss, grad, n_v, p_v = r.loss, r.grad, r.n_violators, 0
        normed.backward(grad.astype(np.float32))
        return loss, n_v, p_v

    def run_stage(self, stage: str, start_epoch: int = 0, velocities: dict | None = None) -> list[EpochStats]:
        plan = self.plan.stages[stage]
        self._ensure_heads(stage)
        names = self._trainable_names(stage)
        self.net.set_trainable(lambda n, keep=frozenset(names): n in keep)
        opt = T.SGD({n: self.net.params[n] for n in names}, lr=plan.lr_at(start_epoch), momentum=self.plan.momentum)
        if velocities:
            for n in names:
                if n in velocities:
                    opt.velocity[n][...] = velocities[n]
        stats: list[EpochStats] = []
        for epoch in range(start_epoch, plan.epochs):
            opt.lr = plan.lr_at(epoch)
            if stage == "D":
                batches = self.composer.metric_epoch(stage, epoch)
            else:
                batches = self.composer.softmax_epoch(stage, epoch)
            losses_seen: list[float] = []
            n_seen: list[int] = []
            p_seen: list[int] = []
            for bi, idx in enumerate(batches):
                opt.zero_grad()
                if stage == "D":
                    loss, n_v, p_v = self._loss_metric(idx, epoch, bi)
                    n_seen.append(n_v)
                    p_seen.append(p_v)
                else:
                    loss = self._loss_softmax(stage, idx, epoch, bi)
                if not np.isfinite(loss):
                    raise TrainingDiverged(
                        f"stage {stage} epoch {epoch} batch {bi}: non-finite loss; "
                        f"last checkpoint kept at {self._ckpt_path('latest')}"
                    )
                opt.step()
                self._step += 1
                if stage == "D":
                    self._log(self._step, stage, epoch, bi, f"{loss:.6f}", f"{opt.lr:.6g}", n_seen[-1], p_seen[-1])
                else:
                    self._log(self._step, stage, epoch, bi, f"{loss:.6f}", f"{opt.lr:.6g}", "-", "-")
                losses_seen.append(loss)
            st = EpochStats(
                stage=stage,
                epoch=epoch,
                mean_loss=float(np.mean(losses_seen)),
                lr=opt.lr,
                mean_n=float(np.mean(n_seen)) if n_seen else None,
                mean_p=float(np.mean(p_seen)) if p_seen else None,
            )
            stats.append(st)
            self._log(
                self._step, stage, epoch, "epoch", f"{st.mean_loss:.6f}", f"{st.lr:.6g}",
                "-" if st.mean_n is None else f"{st.mean_n:.2f}",
                "-" if st.mean_p is None else f"{st.mean_p:.2f}",
            )
            if self._log_fh is not None:
                self._log_fh.flush()
            self.save_checkpoint(
                "latest",
                {"current_stage": stage, "epochs_done": epoch + 1, "seed": self.seed,
                 "n_classes": self.data.n_classes, "step": self._step},
                opt,
            )
        return stats

    def stage_list(self, stages: str) -> list[str]:
        if stages == "all":
            wanted = [s for s in STAGE_ORDER if s in self.plan.stages]
        else:
            if stages not in STAGE_ORDER:
                raise ConfigError(f"unknown stage {stages!r}")
            wanted = [stages]
        if not self.net.graph.branches and "B" in wanted:
            if stages == "B":
                raise ConfigError("this network has no branches; stage B does not apply")
            wanted.remove("B")  # nothing to train without branches
        return wanted

    def train(self, stages: str = "all", resume: str | None = None) -> TrainResult:
        result = TrainResult()
        log_path = os.path.join(self.out_dir, "train_log.tsv")
        start_stage, start_epoch, velocities = None, 0, None
        mode = "w"
        if resume is not None:
            state, velocities = self.load_checkpoint(resume)
            self._step = int(state.get("step", 0))
            if stages == "all":
                start_stage = state.get("current_stage")
                start_epoch = int(state.get("epochs_done", 0))
                mode = "a"
        wanted = self.stage_list(stages)
        if resume is None and stages != "all" and stages != "A":
            raise ConfigError(f"stage {stages} needs --resume with earlier-stage weights")
        if resume is None:
            self.net.init_params(self.seed)
        with open(log_path, mode, encoding="utf-8") as fh:
            self._log_fh = fh
            if mode == "w" or fh.tell() == 0:
                self._log("step", "stage", "epoch", "batch", "loss", "lr", "n_violators", "p_violators")
            try:
                for stage in wanted:
                    first_epoch = 0
                    vel = None
                    if start_stage is not None:
                        if STAGE_ORDER.index(stage) < STAGE_ORDER.index(start_stage):
                            continue  # already completed before the checkpoint
                        if stage == start_stage:
                            if start_epoch >= self.plan.stages[stage].epochs:
                                continue  # stage finished exactly at the checkpoint
                            first_epoch, vel = start_epoch, velocities
                    result.history.extend(self.run_stage(stage, first_epoch, vel))
                    self.save_checkpoint(
                        f"stage_{stage}",
                        {"current_stage": stage, "epochs_done": self.plan.stages[stage].epochs,
                         "seed": self.seed, "n_classes": self.data.n_classes, "step": self._step},
                        None,
                    )
            finally:
                self._log_fh = None
        final = self._ckpt_path("final")
        shutil.copyfile(self._ckpt_path("latest"), final)
        shutil.copyfile(self._state_path("latest"), self._state_path("final"))
        result.final_checkpoint = final
        result.log_path = log_path
        return result

    def stage_d_violations(self, epoch: int | None = None) -> list[tuple[int, int]]:
        """(N, P) for every metric batch of a fresh epoch, without training."""
        probe_epoch = self.plan.stages["D"].epochs if epoch is None else epoch
        counts = []
        for bi, idx in enumerate(self.composer.metric_epoch("D", probe_epoch)):
            yb = self.data.labels[idx]
            emb64 = self.net.embed_images(self.data.images[idx]).astype(np.float64)
            emb = emb64 / np.sqrt((emb64 * emb64).sum(axis=1))[:, None]
            rng = substream(self.seed, STREAM_MINING, STAGE_INDEX["D"], probe_epoch, bi)
            triples = losses.mine_negatives(emb, yb, self.plan.beta, self.plan.mining, rng)
            r = losses.mdr_tl(emb, yb, triples, self.plan.alpha)
            counts.append((r.n_violators, r.p_violators))
        return counts
