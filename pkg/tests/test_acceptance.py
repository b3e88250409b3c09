"""End-to-end acceptance gate: one test per shipping criterion.

Criteria 1-5 are fast property/oracle checks. Criteria 6-8 train full models
on a 50-identity synthetic corpus and take tens of minutes combined on one
CPU core; criterion 9 reruns a reduced pipeline twice and compares bytes.
Session-scoped fixtures share the corpus and the trained runs across tests.
"""

import dataclasses
import os
import time
from dataclasses import dataclass, field

import numpy as np
import pytest

from videoface import blur, cli, corpus, evaluate, gradcheck, losses, trainer
from videoface.model import Network, count_costs, infer_shapes, load_preset

CORPUS_SEED = 42
TRAIN_SEED = 42
OCCLUDE_FRACTION = 0.25
OCCLUDE_SEED = 7


# --------------------------------------------------------------- fixtures


@dataclass
class TrainedRun:
    trainer: trainer.Trainer
    net: Network
    out_dir: str
    train_seconds: float
    reports: dict = field(default_factory=dict)
    eval_seconds: float = 0.0

    def report(self, manifest: str, key: str, **kw) -> evaluate.EvalReport:
        if key not in self.reports:
            t0 = time.perf_counter()
            self.reports[key] = evaluate.run_protocol(self.net, manifest, "s2v", **kw)
            self.eval_seconds += time.perf_counter() - t0
        return self.reports[key]


@pytest.fixture(scope="session")
def corpus50(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus50")
    plain = corpus.generate_corpus(
        str(root), 50, 8, CORPUS_SEED, stills_per_subject=4, videos_per_subject=1
    )
    two_stream = str(root / "manifest_ts.tsv")
    blur.build_two_stream(plain, two_stream, CORPUS_SEED)
    return two_stream


def _train(manifest, out_dir, preset="mini_tbe", stages="all", resume=None, plan=None, **overrides):
    data = trainer.TrainData(manifest)
    net = Network(load_preset(preset))
    if plan is None:
        plan = trainer.desk_plan(**overrides)
    t = trainer.Trainer(net, plan, data, out_dir, TRAIN_SEED)
    t0 = time.perf_counter()
    t.train(stages=stages, resume=resume)
    return TrainedRun(trainer=t, net=net, out_dir=out_dir, train_seconds=time.perf_counter() - t0)


@pytest.fixture(scope="session")
def run_ts(corpus50, tmp_path_factory):
    """mini_tbe on both streams, full schedule A..D."""
    return _train(corpus50, str(tmp_path_factory.mktemp("run_ts")))


@pytest.fixture(scope="session")
def run_si(corpus50, tmp_path_factory):
    """Identical model and schedule, stills only."""
    return _train(corpus50, str(tmp_path_factory.mktemp("run_si")), stream_mix="still_only")


@pytest.fixture(scope="session")
def run_dtl(corpus50, run_ts, tmp_path_factory):
    """Plain-triplet control: same seed and schedule, same stage-C weights."""
    resume = os.path.join(run_ts.out_dir, "stage_C.tbew")
    return _train(
        corpus50, str(tmp_path_factory.mktemp("run_dtl")),
        stages="D", resume=resume, loss_d="triplet",
    )


@pytest.fixture(scope="session")
def run_tr(corpus50, tmp_path_factory):
    """Trunk-only control with the branch-stage epochs folded into stage A."""
    plan = trainer.desk_plan()
    a, b = plan.stages["A"], plan.stages["B"]
    stages = dict(plan.stages)
    stages["A"] = trainer.StagePlan(a.epochs + b.epochs, a.lr_start, a.lr_end)
    return _train(
        corpus50, str(tmp_path_factory.mktemp("run_tr")), preset="mini_trunk", stages_map=stages,
    )


# --------------------------------------------- criterion 1: gradient suite


def test_criterion_1_gradient_suite_within_tolerance_and_budget():
    assert len(gradcheck.DEFAULT_SEEDS) >= 5
    t0 = time.perf_counter()
    results = gradcheck.run_suite()
    elapsed = time.perf_counter() - t0
    names = {r.name for r in results}
    assert {
        "conv2d", "maxpool", "dense", "l2_normalize", "softmax_ce",
        "triplet_loss", "mdr_tl", "pairwise_contrastive",
    } <= names
    worst = {r.name: r.max_rel_err for r in results}
    assert all(err <= 1e-3 for err in worst.values()), worst
    assert elapsed < 120.0


# ----------------------------------------------- criterion 2: kernel suite


def test_criterion_2_all_38_kernels_behave():
    specs = blur.enumerate_specs()
    assert len(specs) == 38
    flat = np.full((24, 24), 0.4375, dtype=np.float32)
    for spec in specs:
        k = blur.make_kernel(spec)
        assert k.min() >= 0.0
        assert abs(k.sum() - 1.0) < 1e-12
        np.testing.assert_array_equal(blur.apply_blur(flat, k), flat)
        size = 2 * k.shape[0] + 1
        impulse = np.zeros((size, size), dtype=np.float64)
        impulse[size // 2, size // 2] = 1.0
        out = blur.apply_blur(impulse, k)
        half = k.shape[0] // 2
        c = size // 2
        np.testing.assert_allclose(
            out[c - half : c + half + 1, c - half : c + half + 1], k, rtol=0, atol=1e-7
        )
    img = np.random.default_rng(2).random((48, 48))
    for spec in specs:
        if spec.kind != "defocus_then_motion":
            continue
        kd = blur.make_defocus_kernel(spec.sigma, spec.R)
        km = blur.make_motion_kernel(spec.L, spec.theta)
        once = blur.apply_blur(img, blur.compose_kernels(kd, km))
        twice = blur.apply_blur(blur.apply_blur(img, kd), km)
        m = (blur.compose_kernels(kd, km).shape[0] // 2) * 2
        np.testing.assert_allclose(once[m:-m, m:-m], twice[m:-m, m:-m], rtol=0, atol=1e-5)


# ------------------------------------------ criterion 3: reference shapes


def test_criterion_3_reference_preset_shapes_match():
    graph = load_preset("paper_googlenet")
    info = infer_shapes(graph)
    expected = {
        "conv1": (64, 96, 96),
        "pool1": (64, 48, 48),
        "conv2": (192, 48, 48),
        "pool2": (192, 24, 24),
        "inception_3a": (256, 24, 24),
        "inception_3b": (480, 24, 24),
        "pool3": (480, 12, 12),
        "inception_4a": (512, 12, 12),
        "inception_4b": (512, 12, 12),
        "inception_4c": (512, 12, 12),
        "inception_4d": (528, 12, 12),
        "inception_4e": (832, 12, 12),
        "pool4": (832, 6, 6),
        "inception_5a": (832, 6, 6),
        "inception_5b": (1024, 6, 6),
        "pool5": (1024, 3, 3),
    }
    for layer, shape in expected.items():
        assert info.shapes[layer] == shape, layer
    assert graph.embed_dim == 512
    assert info.shapes["embed"] == (512, 1, 1)


# ------------------------------------------- criterion 4: mining oracle


class _IndexRng:
    """Deterministic stand-in generator: integers(n) returns a fixed slot."""

    def __init__(self, slot: int):
        self.slot = slot

    def integers(self, n):
        return self.slot % int(n)


def _brute_pools(emb, labels, beta):
    d = losses.pairwise_sq_dists(emb)
    semi, hard, hardest = {}, {}, {}
    for a in range(len(labels)):
        negs = np.flatnonzero(labels != labels[a])
        for p in range(len(labels)):
            if p == a or labels[p] != labels[a]:
                continue
            d_ap, d_an = d[a, p], d[a, negs]
            semi[(a, p)] = set(negs[(d_an > d_ap) & (d_an < d_ap + beta)].tolist())
            hard[(a, p)] = set(negs[d_an < d_ap + beta].tolist())
            hardest[(a, p)] = int(negs[np.argmin(d_an)])
    return semi, hard, hardest


def test_criterion_4_mining_matches_brute_force_on_50_batches():
    rng = np.random.default_rng(4400)
    beta = 0.2
    for _ in range(50):
        emb = rng.normal(size=(24, 16))
        emb /= np.linalg.norm(emb, axis=1, keepdims=True)
        labels = np.repeat(np.arange(4), 6)
        semi, hard, hardest = _brute_pools(emb, labels, beta)
        mined = losses.mine_negatives(emb, labels, beta, "hardest", np.random.default_rng(0))
        got = {(a, p): n for a, p, n in mined.triples}
        assert got == hardest
        for strategy, pools in (("semi_hard", semi), ("hard", hard)):
            observed: dict = {}
            max_pool = max((len(v) for v in pools.values()), default=0)
            for slot in range(max(1, max_pool)):
                mined = losses.mine_negatives(emb, labels, beta, strategy, _IndexRng(slot))
                for a, p, n in mined.triples:
                    observed.setdefault((a, p), set()).add(n)
            nonempty = {pair for pair, pool in pools.items() if pool}
            assert set(observed) == nonempty
            for pair in nonempty:
                assert observed[pair] == pools[pair]


# ---------------------------------------------- criterion 5: ROC oracle


def _counting_roc(scores, labels, targets):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    points = []
    for t in sorted(set(s.tolist()), reverse=True):
        far = sum(1 for v, g in zip(s, y) if v >= t and not g) / (~y).sum()
        vr = sum(1 for v, g in zip(s, y) if v >= t and g) / y.sum()
        points.append((far, vr))
    vr_map = {}
    for target in targets:
        ok = [vr for far, vr in points if far <= target + 1e-15]
        vr_map[float(target)] = max(ok) if ok else 0.0
    return points, vr_map


def test_criterion_5_roc_matches_counting_oracle_on_20_sets():
    targets = (0.001, 0.01, 0.1)
    for trial in range(20):
        rng = np.random.default_rng(5500 + trial)
        labels = rng.random(200) < 0.4
        labels[:2] = [True, False]  # both classes always present
        scores = np.round(rng.random(200) * 25) / 25  # many exact ties
        got_points, got_vr = evaluate.roc_and_vr(scores, labels, targets)
        exp_points, exp_vr = _counting_roc(scores, labels, targets)
        assert got_points == exp_points
        assert got_vr == exp_vr


# -------------------------------- criterion 6: two-stream beats stills-only


def test_criterion_6_two_stream_training_beats_stills_only(corpus50, run_ts, run_si):
    vr_ts = run_ts.report(corpus50, "clean").vr_at_far[0.01]
    vr_si = run_si.report(corpus50, "clean").vr_at_far[0.01]
    assert vr_ts - vr_si >= 0.05 - 1e-12, (vr_ts, vr_si)
    budget = (
        run_ts.train_seconds + run_si.train_seconds
        + run_ts.eval_seconds + run_si.eval_seconds
    )
    assert budget <= 30 * 60


# ------------------------- criterion 7: mean-distance regularizer delivers


def test_criterion_7_regularizer_zeroes_violators_without_vr_loss(corpus50, run_ts, run_dtl):
    d_epochs = run_ts.trainer.plan.stages["D"].epochs
    for epoch in range(d_epochs + 1):
        counts = run_ts.trainer.stage_d_violations(epoch)
        assert all(p == 0 for _, p in counts), (epoch, counts)
    vr_mdr = run_ts.report(corpus50, "clean").vr_at_far[0.01]
    vr_plain = run_dtl.report(corpus50, "clean").vr_at_far[0.01]
    assert vr_mdr >= vr_plain - 0.005 - 1e-12, (vr_mdr, vr_plain)


# ------------------------- criterion 8: branches help under occlusion


def test_criterion_8_branches_beat_trunk_on_occluded_probes(corpus50, run_ts, run_tr):
    tbe_epochs = sum(s.epochs for s in run_ts.trainer.plan.stages.values())
    tr_plan = run_tr.trainer.plan
    tr_epochs = sum(tr_plan.stages[s].epochs for s in run_tr.trainer.stage_list("all"))
    assert tbe_epochs == tr_epochs
    kw = dict(occlude_fraction=OCCLUDE_FRACTION, seed=OCCLUDE_SEED)
    vr_tbe = run_ts.report(corpus50, "occluded", **kw).vr_at_far[0.01]
    vr_tr = run_tr.report(corpus50, "occluded", **kw).vr_at_far[0.01]
    assert vr_tbe - vr_tr >= 0.02 - 1e-12, (vr_tbe, vr_tr)
    costs = count_costs(load_preset("mini_tbe"))
    assert costs.full_mult_adds < costs.nosharing_mult_adds


# ------------------------------------ criterion 9: end-to-end determinism


SMALL_PLAN = """\
plan:
  stages:
    A: {epochs: 2, lr_start: 0.01, lr_end: 0.005}
    B: {epochs: 1, lr_start: 0.005}
    C: {epochs: 1, lr_start: 0.005}
    D: {epochs: 1, lr_start: 0.005}
  batch_size: 8
  subjects_per_batch: 2
  images_per_subject: 2
"""


def _pipeline(root: str, cfg_path: str) -> dict[str, bytes]:
    corpus_dir = os.path.join(root, "corpus")
    run_dir = os.path.join(root, "run")
    eval_dir = os.path.join(root, "eval")
    steps = [
        ["gen-corpus", "--out", corpus_dir, "--seed", "7", "--n-subjects", "8",
         "--stills-per-subject", "2", "--frames", "3"],
        ["simulate", "--manifest", os.path.join(corpus_dir, "manifest.tsv"),
         "--out", os.path.join(corpus_dir, "manifest_ts.tsv"), "--seed", "7"],
        ["train", "--manifest", os.path.join(corpus_dir, "manifest_ts.tsv"),
         "--out", run_dir, "--seed", "7", "--preset", "mini_tbe", "--config", cfg_path],
        ["eval", "--manifest", os.path.join(corpus_dir, "manifest_ts.tsv"),
         "--weights", os.path.join(run_dir, "final.tbew"), "--out", eval_dir,
         "--preset", "mini_tbe", "--protocol", "s2v"],
    ]
    for argv in steps:
        assert cli.main(argv) in (0, None), argv
    artifacts = {}
    for rel in ["corpus/manifest.tsv", "corpus/manifest_ts.tsv",
                "eval/eval_report.txt", "eval/roc.tsv"]:
        with open(os.path.join(root, rel), "rb") as fh:
            artifacts[rel] = fh.read()
    for name in sorted(os.listdir(run_dir)):
        if name.endswith(".tbew"):
            with open(os.path.join(run_dir, name), "rb") as fh:
                artifacts["run/" + name] = fh.read()
    return artifacts


def test_criterion_9_pipeline_reruns_byte_identical(tmp_path):
    cfg = tmp_path / "plan.yaml"
    cfg.write_text(SMALL_PLAN)
    first = _pipeline(str(tmp_path / "a"), str(cfg))
    second = _pipeline(str(tmp_path / "b"), str(cfg))
    assert set(first) == set(second)
    for rel in first:
        assert first[rel] == second[rel], rel
