"""Central finite-difference validation of every differentiable operation.

Each registered check builds a small random problem, computes analytic
gradients through the graph, then re-evaluates a scalar projection of the
output under elementwise +/-h perturbations. The relative error is

    max |analytic - numeric| / max(||analytic||_inf, ||numeric||_inf, tiny)

per input, and a check's score is the worst input over all of its internal
variants. Non-smooth operations (maxpool ties, relu kinks, hinge losses)
resample their inputs until every decision boundary sits farther than a few
steps away, so the difference quotient never straddles a kink.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import losses
from . import tensor as T
from .errors import ParameterError
from .rng import substream

STREAM_GRADCHECK = 99
TINY = 1e-12
DEFAULT_SEEDS = (0, 1, 2, 3, 4)


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), TINY)
    return float(np.abs(a - n).max(initial=0.0) / scale)


def _fd_array(objective, arr: np.ndarray, h: float) -> np.ndarray:
    """Central differences of a scalar objective w.r.t. every element of arr."""
    grad = np.zeros(arr.shape, dtype=np.float64)
    gflat = grad.ravel()
    base = arr.ravel()
    for k in range(base.size):
        orig = base[k]
        hi = arr.dtype.type(float(orig) + h)
        lo = arr.dtype.type(float(orig) - h)
        work = arr.copy()
        work.ravel()[k] = hi
        f_hi = objective(work)
        work.ravel()[k] = lo
        f_lo = objective(work)
        gflat[k] = (f_hi - f_lo) / (float(hi) - float(lo))
    return grad


def fd_tensor_check(build, arrays: list[np.ndarray], h: float, proj_rng) -> float:
    """Compare graph gradients of build(*tensors) against finite differences."""
    tensors = [T.Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(*tensors)
    proj = proj_rng.standard_normal(out.data.shape).astype(out.data.dtype)
    out.backward(proj.copy())
    analytic = [
        t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors
    ]
    proj64 = proj.astype(np.float64)

    worst = 0.0
    for i in range(len(arrays)):
        def objective(perturbed, i=i):
            ts = [T.Tensor(a) for a in arrays]
            ts[i] = T.Tensor(perturbed)
            return float((build(*ts).data.astype(np.float64) * proj64).sum())

        numeric = _fd_array(objective, arrays[i], h)
        worst = max(worst, rel_err(analytic[i], numeric))
    return worst


def fd_loss_check(loss_fn, arr: np.ndarray, h: float) -> float:
    """Compare a (loss, grad) numpy function against finite differences."""
    loss, grad = loss_fn(arr.astype(np.float64))[:2]
    numeric = _fd_array(lambda a: float(loss_fn(a.astype(np.float64))[0]), arr, h)
    return rel_err(grad, numeric)


def fd_normed_loss_check(loss_fn, raw: np.ndarray, h: float) -> float:
    """Check a loss on unit-row embeddings, chained through l2 normalization."""
    t = T.Tensor(raw.copy(), requires_grad=True)
    normed = T.l2_normalize(t)
    loss, grad = loss_fn(normed.data.astype(np.float64))[:2]
    normed.backward(grad.astype(raw.dtype))
    analytic = t.grad.copy()

    def objective(a):
        e = a.astype(np.float64)
        e = e / np.linalg.norm(e, axis=1, keepdims=True)
        return float(loss_fn(e)[0])

    numeric = _fd_array(objective, raw, h)
    return rel_err(analytic, numeric)


# ------------------------------------------------------------ input shaping


def _away_from_zero(a: np.ndarray, eps: float) -> np.ndarray:
    """Push values out of the (-eps, eps) band so relu kinks stay far away."""
    shift = np.where(a >= 0.0, eps, -eps).astype(a.dtype)
    return np.where(np.abs(a) < eps, a + shift, a)


def _maxpool_gaps_ok(x: np.ndarray, k: int, stride: int, gap: float) -> bool:
    n, c, hh, ww = x.shape
    for i in range(0, hh - k + 1, stride):
        for j in range(0, ww - k + 1, stride):
            win = x[:, :, i : i + k, j : j + k].reshape(n, c, -1)
            top2 = np.sort(win, axis=2)[:, :, -2:]
            if np.any(top2[:, :, 1] - top2[:, :, 0] < gap):
                return False
    return True


def _sample_until(rng, draw, ok, tries: int = 500):
    for _ in range(tries):
        cand = draw(rng)
        if ok(cand):
            return cand
    raise ParameterError("could not sample a kink-free input configuration")


def _fixed_triples(labels: np.ndarray, beta: float) -> losses.TripletSet:
    """One deterministic negative per ordered positive pair."""
    triples = []
    n = labels.size
    for a in range(n):
        negs = np.flatnonzero(labels != labels[a])
        for p in range(n):
            if p == a or labels[p] != labels[a]:
                continue
            triples.append((a, p, int(negs[(a + p) % negs.size])))
    return losses.TripletSet(triples=tuple(triples), beta=beta)


def _unit_rows(a: np.ndarray) -> np.ndarray:
    e = a.astype(np.float64)
    return e / np.linalg.norm(e, axis=1, keepdims=True)


def _triplet_margins_ok(raw: np.ndarray, triples, beta: float, guard: float) -> bool:
    e = _unit_rows(raw)
    for a, p, n in triples:
        h = ((e[a] - e[p]) ** 2).sum() - ((e[a] - e[n]) ** 2).sum() + beta
        if abs(h) < guard:
            return False
    return True


def _nearest_mean_sq_dists(raw: np.ndarray, labels: np.ndarray) -> np.ndarray:
    reps = losses.mean_reps(_unit_rows(raw), labels)
    d2 = []
    for c in range(reps.subjects.size):
        diff = reps.mu_hat[c] - reps.mu_hat[reps.nearest[c]]
        d2.append(float((diff * diff).sum()))
    return np.array(d2)


# ----------------------------------------------------------------- the checks


def check_conv2d(seed: int, dtype=np.float32, h: float = 1e-2) -> float:
    rng = substream(seed, STREAM_GRADCHECK, 1)
    worst = 0.0
    for pad, stride in (("valid", 1), ("same", 2), ("replicate", 1), ("valid", 2)):
        x = rng.standard_normal((2, 2, 5, 5)).astype(dtype)
        w = rng.standard_normal((3, 2, 3, 3)).astype(dtype) * 0.5
        b = rng.standard_normal(3).astype(dtype) * 0.1
        worst = max(
            worst,
            fd_tensor_check(
                lambda xx, ww, bb, pad=pad, stride=stride: T.conv2d(
                    xx, ww, bb, stride=stride, pad=pad
                ),
                [x, w, b],
                h,
                rng,
            ),
        )
    return worst


def check_maxpool(seed: int, dtype=np.float32, h: float = 1e-2) -> float:
    rng = substream(seed, STREAM_GRADCHECK, 2)
    gap = 6.0 * h
    worst = 0.0
    for k, stride, size in ((2, 2, 6), (3, 2, 7), (3, 3, 6)):
        x = _sample_until(
            rng,
            lambda r: r.standard_normal((2, 2, size, size)).astype(dtype) * 2.0,
            lambda a: _maxpool_gaps_ok(a, k, stride, gap),
        )
        worst = max(
            worst,
            fd_tensor_check(
                lambda xx, k=k, s=stride: T.maxpool(xx, k, s), [x], h, rng
            ),
        )
    x = _sample_until(
        rng,
        lambda r: r.standard_normal((1, 2, 6, 6)).astype(dtype) * 2.0,
        lambda a: _maxpool_gaps_ok(a, *T.pool_to_params(6, 3), gap),
    )
    worst = max(worst, fd_tensor_check(lambda xx: T.pool_to(xx, 3), [x], h, rng))
    return worst


def check_dense(seed: int, dtype=np.float32, h: float = 1e-2) -> float:
    rng = substream(seed, STREAM_GRADCHECK, 3)
    x = rng.standard_normal((2, 4)).astype(dtype)
    w = rng.standard_normal((4, 3)).astype(dtype) * 0.5
    b = rng.standard_normal(3).astype(dtype) * 0.1
    return fd_tensor_check(lambda xx, ww, bb: T.dense(xx, ww, bb), [x, w, b], h, rng)


def check_relu(seed: int, dtype=np.float32, h: float = 1e-2) -> float:
    rng = substream(seed, STREAM_GRADCHECK, 4)
    x = _away_from_zero(rng.standard_normal((3, 7)).astype(dtype), np.float64(6.0 * h))
    return fd_tensor_check(lambda xx: T.relu(xx), [x], h, rng)


def check_l2_normalize(seed: int, dtype=np.float32, h: float = 1e-2) -> float:
    rng = substream(seed, STREAM_GRADCHECK, 5)
    x = rng.standard_normal((1, 8)).astype(dtype) + 0.5
    return fd_tensor_check(lambda xx: T.l2_normalize(xx), [x], h, rng)


def check_flatten(seed: int, dtype=np.float32, h: float = 1e-2) -> float:
    rng = substream(seed, STREAM_GRADCHECK, 6)
    x = rng.standard_normal((2, 3, 2, 2)).astype(dtype)
    return fd_tensor_check(lambda xx: T.flatten(xx), [x], h, rng)


def check_concat_split(seed: int, dtype=np.float32, h: float = 1e-2) -> float:
    rng = substream(seed, STREAM_GRADCHECK, 7)
    a = rng.standard_normal((2, 3, 4, 4)).astype(dtype)
    b = rng.standard_normal((2, 2, 4, 4)).astype(dtype)

    def build(aa, bb):
        joined = T.concat([aa, bb], axis=1)
        lo, hi = T.split(joined, [2, 3], axis=1)
        return T.add(T.mean_all(lo), T.mean_all(T.mul(hi, hi)))

    return fd_tensor_check(build, [a, b], h, rng)


def check_crop(seed: int, dtype=np.float32, h: float = 1e-2) -> float:
    rng = substream(seed, STREAM_GRADCHECK, 8)
    x = rng.standard_normal((2, 3, 8, 8)).astype(dtype)
    return fd_tensor_check(lambda xx: T.crop_rect(xx, 2, 1, 4, 5), [x], h, rng)


def check_elementwise(seed: int, dtype=np.float32, h: float = 1e-2) -> float:
    rng = substream(seed, STREAM_GRADCHECK, 9)
    a = rng.standard_normal((3, 5)).astype(dtype)
    b = rng.standard_normal((3, 5)).astype(dtype)

    def build(aa, bb):
        return T.mean_all(T.add(T.mul(aa, bb), T.scale(aa, 1.7)))

    return fd_tensor_check(build, [a, b], h, rng)


def check_dropout(seed: int, dtype=np.float32, h: float = 1e-2) -> float:
    rng = substream(seed, STREAM_GRADCHECK, 10)
    x = rng.standard_normal((4, 6)).astype(dtype)

    def build(xx):
        # a fresh generator per call keeps the mask identical across evals
        return T.dropout(xx, 0.4, rng=np.random.default_rng(1234 + seed), train=True)

    return fd_tensor_check(build, [x], h, rng)


def check_softmax_ce(seed: int, dtype=np.float32, h: float = 1e-2) -> float:
    rng = substream(seed, STREAM_GRADCHECK, 11)
    logits = rng.standard_normal((3, 5)).astype(dtype)
    labels = rng.integers(0, 5, size=3)
    return fd_loss_check(lambda a: losses.softmax_cross_entropy(a, labels), logits, h)


def check_triplet(seed: int, dtype=np.float32, h: float = 1e-2) -> float:
    rng = substream(seed, STREAM_GRADCHECK, 12)
    labels = np.array([0, 0, 0, 0, 1, 1, 1, 1])
    beta = 0.2
    guard = 8.0 * h
    triples = _fixed_triples(labels, beta)
    raw = _sample_until(
        rng,
        lambda r: (r.standard_normal((8, 6)) * 0.8).astype(dtype),
        lambda a: _triplet_margins_ok(a, triples.triples, beta, guard),
    )

    def loss_fn(e):
        r = losses.triplet_loss(e, triples)
        return r.loss, r.grad

    return fd_normed_loss_check(loss_fn, raw, h)


def check_mdr_tl(seed: int, dtype=np.float32, h: float = 1e-2) -> float:
    rng = substream(seed, STREAM_GRADCHECK, 13)
    labels = np.array([0, 0, 0, 0, 1, 1, 1, 1])
    alpha, beta = 2.0, 0.2
    guard = 8.0 * h
    triples = _fixed_triples(labels, beta)

    def ok(a):
        if not _triplet_margins_ok(a, triples.triples, beta, guard):
            return False
        d2 = _nearest_mean_sq_dists(a, labels)
        # the mean hinge must be strictly active so its gradient path is hit
        return bool(np.all(alpha - d2 > guard))

    raw = _sample_until(rng, lambda r: (r.standard_normal((8, 6)) * 0.8).astype(dtype), ok)

    def loss_fn(e):
        r = losses.mdr_tl(e, labels, triples, alpha, exact_mean_jacobian=True)
        return r.loss, r.grad

    return fd_normed_loss_check(loss_fn, raw, h)


def check_contrastive(seed: int, dtype=np.float32, h: float = 1e-2) -> float:
    rng = substream(seed, STREAM_GRADCHECK, 14)
    labels = np.array([0, 0, 0, 1, 1, 2, 2, 2])
    margin = 1.0
    guard = 8.0 * h
    pairs = losses.pairs_from_labels(labels)

    def ok(a):
        e = _unit_rows(a)
        active = 0
        for i, j, same in pairs:
            d2 = float(((e[i] - e[j]) ** 2).sum())
            if not same:
                if abs(margin - d2) < guard:
                    return False
                if margin - d2 > 0:
                    active += 1
        return active > 0

    raw = _sample_until(rng, lambda r: (r.standard_normal((8, 6)) * 0.8).astype(dtype), ok)

    def loss_fn(e):
        loss, grad, _ = losses.pairwise_contrastive(e, pairs, margin)
        return loss, grad

    return fd_normed_loss_check(loss_fn, raw, h)


CHECKS = {
    "conv2d": check_conv2d,
    "maxpool": check_maxpool,
    "dense": check_dense,
    "relu": check_relu,
    "l2_normalize": check_l2_normalize,
    "flatten": check_flatten,
    "concat_split": check_concat_split,
    "crop": check_crop,
    "elementwise": check_elementwise,
    "dropout": check_dropout,
    "softmax_ce": check_softmax_ce,
    "triplet_loss": check_triplet,
    "mdr_tl": check_mdr_tl,
    "pairwise_contrastive": check_contrastive,
}


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.max_rel_err <= self.tol


def run_suite(
    names=None,
    seeds=DEFAULT_SEEDS,
    dtype=np.float32,
    h: float = 1e-2,
    tol: float = 1e-3,
) -> list[CheckResult]:
    """Run the registered checks over several seeds; worst error per op."""
    chosen = list(CHECKS) if names is None else list(names)
    results = []
    for name in chosen:
        if name not in CHECKS:
            raise ParameterError(f"unknown gradient check {name!r}; have {sorted(CHECKS)}")
        worst = max(CHECKS[name](seed, dtype=dtype, h=h) for seed in seeds)
        results.append(CheckResult(name=name, max_rel_err=worst, tol=tol))
    return results
