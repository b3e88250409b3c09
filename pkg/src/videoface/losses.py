"""Training objectives over embedding batches, with analytic gradients.

All functions take plain numpy embeddings (rows assumed unit-norm, the
trainer normalizes first) and return (loss, gradient w.r.t. embeddings, ...)
in float64. Distances are squared Euclidean throughout.

The margin-regularized loss couples the usual violating-triplet hinge with a
second hinge that pushes per-subject normalized mean embeddings apart:

    L = L_triplet + (1/2P) sum_c max(0, alpha - ||m_c - m_n(c)||^2)

where m_c is the unit-normalized mean of subject c's rows, n(c) its nearest
other mean, and P the number of violating subjects. The gradient of the mean
term w.r.t. a row of subject c needs dm_c/df; both the exact projected
Jacobian (I - m_c m_c^T)/(N_c ||mu_c||) and the cheaper approximation
I/(N_c ||mu_c||) are provided behind the exact_mean_jacobian flag. A subject
pair that is mutually nearest and violating contributes both of its hinge
terms to the same difference vector, so the pair weight there is 2; finite
differences confirm this multiplicity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import MiningError, NormalizationError, ParameterError

SEMI_HARD = "semi_hard"
HARD = "hard"
HARDEST = "hardest"
STRATEGIES = (SEMI_HARD, HARD, HARDEST)


def _as2d(emb) -> np.ndarray:
    e = np.asarray(emb, dtype=np.float64)
    if e.ndim != 2:
        raise ParameterError(f"embeddings must be [N,D], got shape {e.shape}")
    return e


def check_unit_rows(emb: np.ndarray, tol: float = 1e-5) -> None:
    norms = np.sqrt((emb * emb).sum(axis=1))
    worst = float(np.abs(norms - 1.0).max()) if norms.size else 0.0
    if worst > tol:
        raise ParameterError(f"embedding rows must be unit-norm within {tol}, worst off by {worst:.2e}")


def pairwise_sq_dists(emb: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances, clamped at 0 against rounding."""
    e = _as2d(emb)
    sq = (e * e).sum(axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * (e @ e.T)
    np.maximum(d, 0.0, out=d)
    np.fill_diagonal(d, 0.0)
    return d


# ------------------------------------------------------------------- softmax


def softmax_cross_entropy(logits, labels) -> tuple[float, np.ndarray]:
    """Mean NLL with a stable log-sum-exp; gradient (softmax - onehot)/B."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 2:
        raise ParameterError(f"logits must be [B,K], got shape {z.shape}")
    y = np.asarray(labels)
    b, k = z.shape
    if y.shape != (b,):
        raise ParameterError(f"labels must have shape ({b},), got {y.shape}")
    if y.min() < 0 or y.max() >= k:
        raise ParameterError(f"label out of range [0,{k}) in batch")
    m = z.max(axis=1, keepdims=True)
    zs = z - m
    lse = np.log(np.exp(zs).sum(axis=1))
    loss = float(np.mean(lse - zs[np.arange(b), y]))
    probs = np.exp(zs - lse[:, None])
    probs[np.arange(b), y] -= 1.0
    return loss, probs / b


# -------------------------------------------------------------------- triplet


@dataclass(frozen=True)
class TripletSet:
    triples: tuple[tuple[int, int, int], ...]
    beta: float


@dataclass
class TripletResult:
    loss: float
    grad: np.ndarray
    n_violators: int

    @property
    def no_violators(self) -> bool:
        return self.n_violators == 0


def triplet_loss(emb, triples: TripletSet, labels=None) -> TripletResult:
    """(1/2N) sum of active hinges d_ap - d_an + beta over violating triples."""
    e = _as2d(emb)
    check_unit_rows(e)
    if labels is not None:
        y = np.asarray(labels)
        for a, p, n in triples.triples:
            if y[a] != y[p] or y[a] == y[n]:
                raise ParameterError(f"triple ({a},{p},{n}) inconsistent with labels")
    grad = np.zeros_like(e)
    active: list[tuple[int, int, int]] = []
    total = 0.0
    for a, p, n in triples.triples:
        d_ap = float(((e[a] - e[p]) ** 2).sum())
        d_an = float(((e[a] - e[n]) ** 2).sum())
        h = d_ap - d_an + triples.beta
        if h > 0.0:
            active.append((a, p, n))
            total += h
    n_v = len(active)
    if n_v == 0:
        return TripletResult(loss=0.0, grad=grad, n_violators=0)
    inv = 1.0 / n_v
    for a, p, n in active:
        grad[a] += (e[n] - e[p]) * inv
        grad[p] += (e[p] - e[a]) * inv
        grad[n] += (e[a] - e[n]) * inv
    return TripletResult(loss=total / (2.0 * n_v), grad=grad, n_violators=n_v)


def mine_negatives(emb, labels, beta: float, strategy: str, rng: np.random.Generator) -> TripletSet:
    """Pick one negative per ordered positive pair (a,p).

    semi_hard draws uniformly from {n : d_ap < d_an < d_ap + beta}; hard from
    {n : d_an < d_ap + beta}; hardest takes argmin d_an (first index on ties).
    Pairs whose pool is empty are skipped (hardest never skips). Pairs are
    visited in ascending (a,p) order, so draws are reproducible under a seed.
    """
    if strategy not in STRATEGIES:
        raise ParameterError(f"unknown mining strategy {strategy!r}; have {STRATEGIES}")
    e = _as2d(emb)
    check_unit_rows(e)
    y = np.asarray(labels)
    if y.shape != (e.shape[0],):
        raise ParameterError(f"labels shape {y.shape} does not match {e.shape[0]} embeddings")
    if np.unique(y).size < 2:
        raise MiningError("mining needs at least two subjects in the batch")
    d = pairwise_sq_dists(e)
    n_rows = e.shape[0]
    triples: list[tuple[int, int, int]] = []
    for a in range(n_rows):
        negatives = np.flatnonzero(y != y[a])
        for p in range(n_rows):
            if p == a or y[p] != y[a]:
                continue
            d_ap = d[a, p]
            d_an = d[a, negatives]
            if strategy == HARDEST:
                n = int(negatives[np.argmin(d_an)])
            else:
                if strategy == SEMI_HARD:
                    pool = negatives[(d_an > d_ap) & (d_an < d_ap + beta)]
                else:
                    pool = negatives[d_an < d_ap + beta]
                if pool.size == 0:
                    continue
                n = int(pool[int(rng.integers(pool.size))])
            triples.append((a, p, n))
    return TripletSet(triples=tuple(triples), beta=float(beta))


# ----------------------------------------------------------- mean regularizer


@dataclass
class MeanReps:
    subjects: np.ndarray  # unique labels, sorted; row order of mu_hat
    mu_hat: np.ndarray  # [C,D] unit rows
    mu_norms: np.ndarray  # ||mu_c|| before normalization
    counts: np.ndarray  # N_c
    nearest: np.ndarray  # index of nearest other mean; -1 when C == 1


def mean_reps(emb, labels) -> MeanReps:
    e = _as2d(emb)
    y = np.asarray(labels)
    subjects, inverse, counts = np.unique(y, return_inverse=True, return_counts=True)
    c_n, dim = subjects.size, e.shape[1]
    mu = np.zeros((c_n, dim), dtype=np.float64)
    np.add.at(mu, inverse, e)
    mu /= counts[:, None]
    norms = np.sqrt((mu * mu).sum(axis=1))
    if np.any(norms < 1e-12):
        bad = subjects[int(np.argmin(norms))]
        raise NormalizationError(f"degenerate mean for subject {bad!r}: norm below 1e-12")
    mu_hat = mu / norms[:, None]
    if c_n == 1:
        nearest = np.array([-1])
    else:
        dd = pairwise_sq_dists(mu_hat)
        np.fill_diagonal(dd, np.inf)
        nearest = dd.argmin(axis=1)
    return MeanReps(subjects=subjects, mu_hat=mu_hat, mu_norms=norms, counts=counts, nearest=nearest)


def mean_distance_penalty(
    emb, labels, alpha: float, exact_mean_jacobian: bool = True
) -> tuple[float, np.ndarray, int, MeanReps]:
    """Hinge on nearest-mean distances; returns (loss, grad, P, reps)."""
    e = _as2d(emb)
    y = np.asarray(labels)
    reps = mean_reps(e, y)
    grad = np.zeros_like(e)
    c_n = reps.subjects.size
    if c_n < 2:
        return 0.0, grad, 0, reps
    m = reps.mu_hat
    diffs = m[:, None, :] - m[None, :, :]
    sq = (diffs * diffs).sum(axis=2)
    hinge = np.array([alpha - sq[c, reps.nearest[c]] for c in range(c_n)])
    violating = hinge > 0.0
    p_count = int(violating.sum())
    if p_count == 0:
        return 0.0, grad, 0, reps

    loss = float(hinge[violating].sum()) / (2.0 * p_count)
    # dL/dm_c: each violating subject's hinge pulls on both ends of its
    # nearest-pair difference; mutually-nearest violating pairs stack both
    g_mu = np.zeros_like(m)
    for c in range(c_n):
        if violating[c]:
            j = reps.nearest[c]
            g_mu[c] -= diffs[c, j] / p_count
            g_mu[j] -= diffs[j, c] / p_count
    # chain through normalization into each subject's rows
    inverse = {s: i for i, s in enumerate(reps.subjects.tolist())}
    for i in range(e.shape[0]):
        c = inverse[y[i].item() if hasattr(y[i], "item") else y[i]]
        g = g_mu[c]
        if exact_mean_jacobian:
            g = g - (g @ m[c]) * m[c]
        grad[i] += g / (reps.counts[c] * reps.mu_norms[c])
    return loss, grad, p_count, reps


@dataclass
class MdrResult:
    loss: float
    grad: np.ndarray
    triplet_part: float
    mean_part: float
    n_violators: int
    p_violators: int


def mdr_tl(
    emb,
    labels,
    triples: TripletSet,
    alpha: float,
    exact_mean_jacobian: bool = True,
) -> MdrResult:
    """Combined loss: violating-triplet hinge plus the mean-distance hinge."""
    tri = triplet_loss(emb, triples, labels=labels)
    mean_loss, mean_grad, p_count, _ = mean_distance_penalty(
        emb, labels, alpha, exact_mean_jacobian=exact_mean_jacobian
    )
    return MdrResult(
        loss=tri.loss + mean_loss,
        grad=tri.grad + mean_grad,
        triplet_part=tri.loss,
        mean_part=mean_loss,
        n_violators=tri.n_violators,
        p_violators=p_count,
    )


# ------------------------------------------------------------- pair baseline


def pairs_from_labels(labels) -> tuple[tuple[int, int, bool], ...]:
    y = np.asarray(labels)
    out = []
    for i in range(y.size):
        for j in range(i + 1, y.size):
            out.append((i, j, bool(y[i] == y[j])))
    return tuple(out)


def pairwise_contrastive(emb, pairs, margin: float) -> tuple[float, np.ndarray, int]:
    """Mean over pairs of d^2 (positives) and [margin - d^2]_+ (negatives)."""
    e = _as2d(emb)
    check_unit_rows(e)
    grad = np.zeros_like(e)
    if not pairs:
        return 0.0, grad, 0
    m_pairs = len(pairs)
    total = 0.0
    inv = 1.0 / m_pairs
    for i, j, same in pairs:
        diff = e[i] - e[j]
        d2 = float((diff * diff).sum())
        if same:
            total += d2
            grad[i] += 2.0 * diff * inv
            grad[j] -= 2.0 * diff * inv
        elif margin - d2 > 0.0:
            total += margin - d2
            grad[i] -= 2.0 * diff * inv
            grad[j] += 2.0 * diff * inv
    return total * inv, grad, m_pairs
