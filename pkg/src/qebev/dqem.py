"""Dynamic query evolution: cluster a query's neighborhood, attend, refine.

Each BEV query (a "pillar") repeatedly gathers the feature points within a
radius of its current center, k-means-clusters them in feature space, scores
the cluster centers against the query with a projected dot product, and
rebuilds itself from a softmax-weighted blend of the top-scoring centers.
Decoding the refined query yields updated box geometry, which moves the
pillar for the next round.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .bevscene import (
    POSITION_SCALE,
    BoxAttributes,
    Frame,
    PointSet,
    decode_feature,
    encoding_matrix,
)
from .numerics import draw_seed, make_rng, pairwise_sq_dist, softmax, top_k_indices

__all__ = [
    "DqemParams",
    "Pillar",
    "QuerySet",
    "ClusterSet",
    "ProjectionPair",
    "AttentionResult",
    "EvolutionTrace",
    "FitResult",
    "Detection",
    "DetectionFrame",
    "init_pillars",
    "gather_neighborhood",
    "kmeans",
    "attention_scores",
    "aggregate_top_k",
    "aggregate_over_centers",
    "blend_and_rescale",
    "diversity_loss",
    "diversity_loss_grad",
    "initial_aggregate",
    "evolve_queries",
    "fit_projections",
    "extract_detections",
    "dedup_detections",
    "write_detections",
    "read_detections",
    "save_projections",
    "load_projections",
]

SOFTMAX_DOMAINS = ("selected", "full")


@dataclass
class DqemParams:
    """Evolution hyperparameters; defaults are the tuned operating point."""

    k: int = 6
    top_k: int = 4
    beta: float = 0.6
    radius: float = 8.0
    iterations: int = 3
    kmeans_iters: int = 20
    diversity_weight: float = 0.1
    scale_scores: bool = True
    softmax_domain: str = "selected"
    regather: bool = True
    tau_bg: float = 0.0

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if not 1 <= self.top_k <= self.k:
            raise ValueError("top_k must satisfy 1 <= top_k <= k")
        if self.beta < 0.0:
            raise ValueError("beta must be non-negative")
        if self.radius <= 0.0:
            raise ValueError("radius must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.kmeans_iters < 1:
            raise ValueError("kmeans_iters must be at least 1")
        if self.diversity_weight < 0.0:
            raise ValueError("diversity_weight must be non-negative")
        if self.softmax_domain not in SOFTMAX_DOMAINS:
            raise ValueError(f"softmax_domain must be one of {SOFTMAX_DOMAINS}")
        if self.tau_bg < 0.0:
            raise ValueError("tau_bg must be non-negative")


@dataclass
class Pillar:
    """One query: current box estimate plus its feature-space state.

    ``feat`` is kept at unit norm once populated; ``feat_scale`` restores
    the raw feature magnitude for decoding.  ``flag`` records degenerate
    conditions ("" means healthy).
    """

    attrs: BoxAttributes
    feat: np.ndarray
    feat_scale: float = 0.0
    flag: str = ""

    def decode_input(self) -> np.ndarray:
        return self.feat * self.feat_scale


@dataclass
class QuerySet:
    pillars: list[Pillar]

    def __post_init__(self) -> None:
        if not self.pillars:
            raise ValueError("a query set must hold at least one pillar")

    def __len__(self) -> int:
        return len(self.pillars)


@dataclass
class ClusterSet:
    """k-means output over one neighborhood's feature vectors.

    Only non-empty clusters are kept: ``centers`` is (k_eff, d) and every
    ``assignments`` entry indexes into it.  ``inertia_trace`` holds the
    objective value after every Lloyd update for monotonicity checks.
    """

    assignments: np.ndarray
    centers: np.ndarray
    sizes: np.ndarray
    inertia: float
    inertia_trace: tuple[float, ...]
    requested_k: int

    @property
    def k_eff(self) -> int:
        return self.centers.shape[0]


@dataclass
class ProjectionPair:
    """Query/key projection matrices for attention scoring."""

    w_q: np.ndarray
    w_k: np.ndarray

    def __post_init__(self) -> None:
        self.w_q = np.asarray(self.w_q, dtype=np.float64)
        self.w_k = np.asarray(self.w_k, dtype=np.float64)
        if self.w_q.shape != self.w_k.shape or self.w_q.ndim != 2 or self.w_q.shape[0] != self.w_q.shape[1]:
            raise ValueError("w_q and w_k must be square matrices of the same shape")

    @classmethod
    def identity(cls, d: int) -> "ProjectionPair":
        return cls(np.eye(d), np.eye(d))


@dataclass
class AttentionResult:
    """Scores over all cluster centers plus the top-k aggregation."""

    scores: np.ndarray
    selected: np.ndarray
    weights: np.ndarray
    aggregated: np.ndarray
    diversity: float
    degenerate: bool = False


@dataclass
class EvolutionTrace:
    """Per-query evolution history.

    ``decoded`` has one entry per refinement stage, starting with the plain
    neighborhood mean (stage 0); None marks a background-level decode.
    """

    attention: list[AttentionResult] = field(default_factory=list)
    decoded: list[BoxAttributes | None] = field(default_factory=list)
    flag: str = ""


@dataclass
class FitResult:
    projections: "ProjectionPair"
    objective_log: list[float]
    center_error: float
    attention_entropy: float


def init_pillars(
    grid_nx: int,
    grid_ny: int,
    bounds: float | tuple[float, float, float, float],
    template: BoxAttributes | None = None,
) -> QuerySet:
    """Pillars at the centers of a regular grid over the scene rectangle.

    ``bounds`` is either a half-extent B (square [-B, B]^2) or an explicit
    (xmin, xmax, ymin, ymax) rectangle.
    """
    if grid_nx < 1 or grid_ny < 1:
        raise ValueError("grid dimensions must be at least 1")
    if isinstance(bounds, (int, float)):
        if bounds <= 0:
            raise ValueError("bounds must be positive")
        xmin, xmax, ymin, ymax = -float(bounds), float(bounds), -float(bounds), float(bounds)
    else:
        xmin, xmax, ymin, ymax = (float(v) for v in bounds)
        if xmin >= xmax or ymin >= ymax:
            raise ValueError("degenerate bounds rectangle")
    if template is None:
        # Typical passenger-car prior; refined by the first decode.
        template = BoxAttributes(0.0, 0.0, 0.8, 2.0, 4.5, 1.6, 0.0, 0.0, 0.0)
    pillars = []
    for j in range(grid_ny):
        for i in range(grid_nx):
            cx = xmin + (i + 0.5) * (xmax - xmin) / grid_nx
            cy = ymin + (j + 0.5) * (ymax - ymin) / grid_ny
            attrs = replace(template, x=cx, y=cy)
            pillars.append(Pillar(attrs=attrs, feat=np.zeros(0), feat_scale=0.0))
    return QuerySet(pillars)


def gather_neighborhood(frame: Frame, center_xy: np.ndarray, radius: float) -> PointSet:
    """All frame points within ``radius`` of a BEV position (inclusive)."""
    if radius <= 0.0:
        raise ValueError("radius must be positive")
    c = np.asarray(center_xy, dtype=np.float64).reshape(2)
    if len(frame.points) == 0:
        return PointSet.empty(frame.d)
    delta = frame.points.xy - c
    mask = np.einsum("nd,nd->n", delta, delta) <= radius * radius
    return PointSet(frame.points.xy[mask], frame.points.feat[mask])


def _kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding with greedy local trials (better single-run optima)."""
    n = x.shape[0]
    n_trials = 2 + int(math.log(k)) if k > 1 else 1
    centers = np.empty((k, x.shape[1]))
    first = int(rng.integers(n))
    centers[0] = x[first]
    d2 = pairwise_sq_dist(x, centers[:1])[:, 0]
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # All remaining points coincide with chosen centers.
            return centers[:j]
        probs = d2 / total
        cand = rng.choice(n, size=min(n_trials, n), p=probs)
        # Keep the candidate that lowers the potential the most.
        cand_d2 = pairwise_sq_dist(x, x[cand])
        pot = np.minimum(d2[:, None], cand_d2).sum(axis=0)
        best = cand[int(np.argmin(pot))]
        centers[j] = x[best]
        d2 = np.minimum(d2, cand_d2[:, int(np.argmin(pot))])
    return centers


def kmeans(
    features: np.ndarray,
    k: int,
    iters: int = 20,
    rng: np.random.Generator | None = None,
    n_init: int = 1,
) -> ClusterSet:
    """Lloyd's algorithm over feature vectors with k-means++ seeding.

    Runs at most ``iters`` update rounds, stopping early once assignments
    stabilize.  A cluster emptied during an update is re-seeded at the point
    farthest from its previous center, which keeps the within-cluster
    objective non-increasing.  When the input has fewer than k distinct
    vectors, only that many clusters come back.  ``n_init`` reruns the whole
    procedure with fresh seedings and keeps the lowest-inertia result; the
    default single run is what the per-neighborhood pipeline budgets for.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("kmeans expects a non-empty (n, d) array")
    if k < 1:
        raise ValueError("k must be at least 1")
    if iters < 1:
        raise ValueError("iters must be at least 1")
    if n_init < 1:
        raise ValueError("n_init must be at least 1")
    if rng is None:
        rng = make_rng(0)
    n_distinct = np.unique(x, axis=0).shape[0]
    k_eff = min(k, n_distinct)
    best: ClusterSet | None = None
    for _ in range(n_init):
        run = _kmeans_once(x, k, k_eff, iters, rng)
        if best is None or run.inertia < best.inertia:
            best = run
    return best


def _kmeans_once(
    x: np.ndarray, k: int, k_eff: int, iters: int, rng: np.random.Generator
) -> ClusterSet:
    n = x.shape[0]
    centers = _kmeans_pp_init(x, k_eff, rng)
    k_eff = centers.shape[0]

    trace: list[float] = []
    prev_assign: np.ndarray | None = None
    assign = np.zeros(n, dtype=np.int64)
    for _ in range(iters):
        d2 = pairwise_sq_dist(x, centers)
        assign = d2.argmin(axis=1)
        if prev_assign is not None and np.array_equal(assign, prev_assign):
            break
        counts = np.bincount(assign, minlength=k_eff)
        sums = np.zeros_like(centers)
        np.add.at(sums, assign, x)
        new_centers = centers.copy()
        nonempty = counts > 0
        new_centers[nonempty] = sums[nonempty] / counts[nonempty, None]
        for j in np.flatnonzero(~nonempty):
            far = int(np.argmax(pairwise_sq_dist(x, centers[j : j + 1])[:, 0]))
            new_centers[j] = x[far]
        centers = new_centers
        # Objective after this update: distances to the refreshed centers.
        inertia = float(pairwise_sq_dist(x, centers)[np.arange(n), assign].sum())
        trace.append(inertia)
        prev_assign = assign

    # Compact away clusters left empty by the final assignment.
    counts = np.bincount(assign, minlength=k_eff)
    keep = np.flatnonzero(counts > 0)
    relabel = np.full(k_eff, -1, dtype=np.int64)
    relabel[keep] = np.arange(keep.size)
    assign = relabel[assign]
    centers = centers[keep]
    sizes = counts[keep]
    if not trace:
        trace.append(float(pairwise_sq_dist(x, centers)[np.arange(n), assign].sum()))
    return ClusterSet(
        assignments=assign,
        centers=centers,
        sizes=sizes,
        inertia=trace[-1],
        inertia_trace=tuple(trace),
        requested_k=k,
    )


def attention_scores(
    q: np.ndarray,
    centers: np.ndarray,
    proj: ProjectionPair,
    scale: bool = True,
) -> np.ndarray:
    """Projected dot-product score of a query against each cluster center.

    With ``scale`` the scores are divided by sqrt(d), which keeps softmax
    weights usable as feature width grows.
    """
    qv = np.asarray(q, dtype=np.float64)
    c = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    s = (proj.w_k @ c.T).T @ (proj.w_q @ qv)
    if scale:
        s = s / math.sqrt(qv.shape[0])
    return s


def diversity_loss(scores: np.ndarray) -> float:
    """Entropy of the softmax over all cluster scores, in [0, ln k].

    Maximal when scores are uniform; regularizing toward larger values
    keeps attention from collapsing onto a single cluster.
    """
    p = softmax(scores)
    logp = np.log(np.where(p > 0.0, p, 1.0))
    return float(-(p * logp).sum())


def diversity_loss_grad(scores: np.ndarray) -> np.ndarray:
    """Analytic gradient of :func:`diversity_loss` w.r.t. the scores.

    With p = softmax(s) and m = sum_k p_k s_k the gradient is
    -p_j (s_j - m); entries sum to zero.
    """
    s = np.asarray(scores, dtype=np.float64)
    p = softmax(s)
    m = float(p @ s)
    return -p * (s - m)


def aggregate_over_centers(
    q: np.ndarray,
    centers: np.ndarray,
    proj: ProjectionPair,
    top_k: int,
    scale_scores: bool = True,
    softmax_domain: str = "selected",
) -> AttentionResult:
    """Score arbitrary centers and blend the top-k into a refined query.

    ``softmax_domain`` picks where the softmax normalizes: over the selected
    scores only (weights sum to 1) or over all scores with the selected
    entries kept as-is.  Zero centers leaves the query untouched, flagged.
    """
    if softmax_domain not in SOFTMAX_DOMAINS:
        raise ValueError(f"softmax_domain must be one of {SOFTMAX_DOMAINS}")
    qv = np.asarray(q, dtype=np.float64)
    c = np.asarray(centers, dtype=np.float64).reshape(-1, qv.shape[0])
    if c.shape[0] == 0:
        return AttentionResult(
            scores=np.zeros(0),
            selected=np.zeros(0, dtype=np.int64),
            weights=np.zeros(0),
            aggregated=qv.copy(),
            diversity=0.0,
            degenerate=True,
        )
    scores = attention_scores(qv, c, proj, scale=scale_scores)
    kt = min(top_k, c.shape[0])
    selected = top_k_indices(scores, kt)
    if softmax_domain == "selected":
        weights = softmax(scores[selected])
    else:
        weights = softmax(scores)[selected]
    aggregated = weights @ c[selected]
    return AttentionResult(
        scores=scores,
        selected=selected,
        weights=weights,
        aggregated=aggregated,
        diversity=diversity_loss(scores),
    )


def aggregate_top_k(
    q: np.ndarray,
    clusters: ClusterSet,
    proj: ProjectionPair,
    top_k: int,
    scale_scores: bool = True,
    softmax_domain: str = "selected",
) -> AttentionResult:
    """Top-k attention aggregation over a ClusterSet's centers."""
    return aggregate_over_centers(
        q, clusters.centers, proj, top_k, scale_scores=scale_scores, softmax_domain=softmax_domain
    )


def initial_aggregate(feats: np.ndarray) -> np.ndarray:
    """Plain mean of the neighborhood features; zero vector when empty."""
    f = np.asarray(feats, dtype=np.float64)
    if f.ndim != 2:
        raise ValueError("initial_aggregate expects an (n, d) array")
    if f.shape[0] == 0:
        return np.zeros(f.shape[1])
    return f.mean(axis=0)


def blend_and_rescale(
    q: np.ndarray,
    scale: float,
    result: AttentionResult,
    centers: np.ndarray,
    beta: float,
    sizes: np.ndarray | None = None,
) -> tuple[np.ndarray, float, str]:
    """One query update: blend the aggregate into the query, re-normalize.

    The unit direction carries the query forward; the decode magnitude is
    re-anchored to the selected cluster centers' norms, weighted by cluster
    population when sizes are given.  Center norms track the raw feature
    scale, unlike the softmax-diluted blend norm.
    """
    qp = result.aggregated
    u = qp + beta * q
    nu = float(np.linalg.norm(u))
    if nu == 0.0:
        return q, scale, "degenerate-zero-blend"
    q_new = u / nu
    if result.selected.size:
        norms = np.linalg.norm(centers[result.selected], axis=1)
        if sizes is not None:
            w = np.asarray(sizes, dtype=np.float64)[result.selected]
        else:
            w = np.ones(result.selected.size)
        tot = float(w.sum())
        anchor = float(w @ norms / tot) if tot > 0.0 else 0.0
        if anchor > 0.0:
            return q_new, anchor, ""
    npq = float(np.linalg.norm(qp))
    return q_new, (npq if npq > 0.0 else scale), ""


def _evolve_single(
    pillar: Pillar,
    frame: Frame,
    params: DqemParams,
    proj: ProjectionPair,
    qrng: np.random.Generator,
) -> tuple[Pillar, EvolutionTrace]:
    trace = EvolutionTrace()
    attrs = pillar.attrs
    pts = gather_neighborhood(frame, attrs.center(), params.radius)
    if len(pts) == 0:
        trace.flag = "empty"
        return replace(pillar, flag="empty"), trace

    mean = initial_aggregate(pts.feat)
    norm0 = float(np.linalg.norm(mean))
    if norm0 == 0.0:
        trace.flag = "degenerate-zero-mean"
        return replace(pillar, flag=trace.flag), trace
    q = mean / norm0
    scale = norm0
    dec = decode_feature(q * scale, frame.encoder_seed, params.tau_bg)
    trace.decoded.append(dec)
    if dec is not None:
        attrs = dec

    # One clustering seed per query, reused every round: successive rounds
    # then see consistent partitions and the update converges instead of
    # chasing re-randomized cluster boundaries.
    kseed = draw_seed(qrng)
    for it in range(params.iterations):
        if params.regather and it > 0:
            pts = gather_neighborhood(frame, attrs.center(), params.radius)
            if len(pts) == 0:
                trace.flag = "empty-regather"
                break
        clusters = kmeans(pts.feat, params.k, params.kmeans_iters, make_rng(kseed))
        result = aggregate_top_k(
            q, clusters, proj, params.top_k,
            scale_scores=params.scale_scores,
            softmax_domain=params.softmax_domain,
        )
        trace.attention.append(result)
        q, scale, flag = blend_and_rescale(
            q, scale, result, clusters.centers, params.beta, sizes=clusters.sizes
        )
        if flag:
            trace.flag = flag
        dec = decode_feature(q * scale, frame.encoder_seed, params.tau_bg)
        trace.decoded.append(dec)
        if dec is not None:
            attrs = dec
    if not trace.flag and trace.decoded and trace.decoded[-1] is None:
        trace.flag = "background"
    return Pillar(attrs=attrs, feat=q, feat_scale=scale, flag=trace.flag), trace


def evolve_queries(
    queries: QuerySet,
    frame: Frame,
    params: DqemParams,
    proj: ProjectionPair,
    rng: np.random.Generator,
) -> tuple[QuerySet, list[EvolutionTrace]]:
    """Refine every query against one frame.

    Inputs are left untouched.  Each query gets its own generator seeded
    from a single draw XOR the query index, so results do not depend on
    processing order.
    """
    base_seed = draw_seed(rng)
    out: list[Pillar] = []
    traces: list[EvolutionTrace] = []
    for qi, pillar in enumerate(queries.pillars):
        qrng = make_rng(base_seed ^ qi)
        new_pillar, trace = _evolve_single(pillar, frame, params, proj, qrng)
        out.append(new_pillar)
        traces.append(trace)
    return QuerySet(out), traces


# ---------------------------------------------------------------------------
# Projection calibration
# ---------------------------------------------------------------------------


@dataclass
class _Snapshots:
    """Frozen per-query quantities the calibration objective reuses.

    Clustering and neighborhood gathering do not depend on the projections,
    so they are done once; only scoring, aggregation and decoding are
    re-evaluated per candidate (w_q, w_k).
    """

    q0: np.ndarray        # (s, d) unit initial queries
    centers: np.ndarray   # (s, k, d) cluster centers
    sizes: np.ndarray     # (s, k) cluster populations
    decode_t: np.ndarray  # (s, 9, d) transposed encoding matrices
    gt_xy: np.ndarray     # (s, 2)
    k: int
    top_k: int
    beta: float
    scale_scores: bool


def _build_snapshots(
    frames: list[Frame],
    params: DqemParams,
    rng: np.random.Generator,
) -> _Snapshots:
    q0_l, cen_l, size_l, dec_l, gt_l = [], [], [], [], []
    for frame in frames:
        e_t = encoding_matrix(frame.encoder_seed, frame.d).T
        for box in frame.boxes:
            offset = rng.uniform(-2.0, 2.0, size=2)
            pts = gather_neighborhood(frame, box.center() + offset, params.radius)
            if len(pts) == 0:
                continue
            mean = initial_aggregate(pts.feat)
            n0 = float(np.linalg.norm(mean))
            if n0 == 0.0:
                continue
            clusters = kmeans(pts.feat, params.k, params.kmeans_iters, rng)
            if clusters.k_eff != params.k:
                # Uniform cluster count keeps the objective vectorizable.
                continue
            q0_l.append(mean / n0)
            cen_l.append(clusters.centers)
            size_l.append(clusters.sizes)
            dec_l.append(e_t)
            gt_l.append(box.center())
    if not q0_l:
        raise ValueError("calibration suite produced no usable neighborhoods")
    return _Snapshots(
        q0=np.stack(q0_l),
        centers=np.stack(cen_l),
        sizes=np.stack(size_l),
        decode_t=np.stack(dec_l),
        gt_xy=np.stack(gt_l),
        k=params.k,
        top_k=params.top_k,
        beta=params.beta,
        scale_scores=params.scale_scores,
    )


def _snapshot_metrics(snap: _Snapshots, w_q: np.ndarray, w_k: np.ndarray) -> tuple[float, float]:
    """(mean decoded-center error, mean attention entropy) over snapshots."""
    s, k, d = snap.centers.shape
    qw = snap.q0 @ w_q.T                                   # (s, d)
    cw = snap.centers @ w_k.T                              # (s, k, d)
    scores = np.einsum("skd,sd->sk", cw, qw)
    if snap.scale_scores:
        scores = scores / math.sqrt(d)

    # Entropy over all k scores per snapshot.
    z = scores - scores.max(axis=1, keepdims=True)
    ez = np.exp(z)
    p = ez / ez.sum(axis=1, keepdims=True)
    logp = np.log(np.where(p > 0.0, p, 1.0))
    entropy = float(-(p * logp).sum(axis=1).mean())

    order = np.argsort(-scores, axis=1, kind="stable")[:, : snap.top_k]
    sel_scores = np.take_along_axis(scores, order, axis=1)
    zz = sel_scores - sel_scores.max(axis=1, keepdims=True)
    ezz = np.exp(zz)
    w = ezz / ezz.sum(axis=1, keepdims=True)
    sel_centers = np.take_along_axis(
        snap.centers, order[:, :, None], axis=1
    )                                                      # (s, top_k, d)
    qp = np.einsum("st,std->sd", w, sel_centers)
    u = qp + snap.beta * snap.q0
    nu = np.linalg.norm(u, axis=1, keepdims=True)
    nu = np.where(nu > 0.0, nu, 1.0)
    q1 = u / nu
    sel_sizes = np.take_along_axis(snap.sizes, order, axis=1).astype(np.float64)
    sel_norms = np.linalg.norm(sel_centers, axis=2)
    anchor = ((sel_sizes * sel_norms).sum(axis=1) / sel_sizes.sum(axis=1))[:, None]
    channels = np.einsum("snd,sd->sn", snap.decode_t, q1 * anchor)
    xy = channels[:, :2] * POSITION_SCALE
    err = float(np.linalg.norm(xy - snap.gt_xy, axis=1).mean())
    return err, entropy


def fit_projections(
    frames: list[Frame],
    params: DqemParams,
    steps: int = 25,
    lr: float = 0.05,
    rng: np.random.Generator | None = None,
) -> FitResult:
    """Calibrate (w_q, w_k) by finite-difference descent on a frozen suite.

    The objective is the mean decoded-center error plus diversity_weight
    times the attention-entropy deficit (ln k minus mean entropy), so a
    positive weight pushes toward balanced attention.  Gradients come from
    central differences over every matrix entry; steps that fail to improve
    the objective are retried with a halved rate, so the accepted-objective
    log is non-increasing.  steps=0 returns the initialization.
    """
    if rng is None:
        rng = make_rng(0)
    if steps < 0:
        raise ValueError("steps must be non-negative")
    if lr <= 0.0:
        raise ValueError("lr must be positive")
    snap = _build_snapshots(frames, params, rng)
    d = snap.q0.shape[1]
    lam = params.diversity_weight
    ln_k = math.log(snap.k)

    w_q = np.eye(d) + 0.01 * rng.standard_normal((d, d))
    w_k = np.eye(d) + 0.01 * rng.standard_normal((d, d))

    def objective(wq: np.ndarray, wk: np.ndarray) -> float:
        err, ent = _snapshot_metrics(snap, wq, wk)
        val = err + lam * (ln_k - ent)
        if not math.isfinite(val):
            raise RuntimeError(
                f"non-finite calibration objective (err={err!r}, entropy={ent!r})"
            )
        return val

    obj = objective(w_q, w_k)
    log = [obj]
    best = (obj, w_q.copy(), w_k.copy())
    h = 1e-5

    for _ in range(steps):
        grads = []
        for w in (w_q, w_k):
            g = np.zeros_like(w)
            for i in range(d):
                for j in range(d):
                    orig = w[i, j]
                    w[i, j] = orig + h
                    hi = objective(w_q, w_k)
                    w[i, j] = orig - h
                    lo = objective(w_q, w_k)
                    w[i, j] = orig
                    g[i, j] = (hi - lo) / (2.0 * h)
            grads.append(g)
        step_lr = lr
        accepted = False
        for _try in range(12):
            wq_new = w_q - step_lr * grads[0]
            wk_new = w_k - step_lr * grads[1]
            obj_new = objective(wq_new, wk_new)
            if obj_new <= obj:
                w_q, w_k, obj = wq_new, wk_new, obj_new
                accepted = True
                break
            step_lr /= 2.0
        if not accepted:
            break
        log.append(obj)
        if obj < best[0]:
            best = (obj, w_q.copy(), w_k.copy())

    _, bq, bk = best
    err, ent = _snapshot_metrics(snap, bq, bk)
    return FitResult(
        projections=ProjectionPair(bq, bk),
        objective_log=log,
        center_error=err,
        attention_entropy=ent,
    )


def save_projections(proj: ProjectionPair, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(
            {"d": proj.w_q.shape[0], "w_q": proj.w_q.tolist(), "w_k": proj.w_k.tolist()},
            fh,
            sort_keys=True,
        )


def load_projections(path: str) -> ProjectionPair:
    with open(path, "r", encoding="utf-8") as fh:
        rec = json.load(fh)
    try:
        pair = ProjectionPair(np.array(rec["w_q"]), np.array(rec["w_k"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"{path}: malformed projection file ({exc})") from exc
    if pair.w_q.shape[0] != int(rec.get("d", pair.w_q.shape[0])):
        raise ValueError(f"{path}: projection width disagrees with declared d")
    return pair


# ---------------------------------------------------------------------------
# Detection records
# ---------------------------------------------------------------------------


@dataclass
class Detection:
    """One detected box; ``velocity`` is the fused estimate when temporal
    fusion produced one, otherwise None (consumers fall back to the box's
    velocity channels)."""

    frame: int
    box: np.ndarray
    score: float
    query_id: int
    velocity: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.box = np.asarray(self.box, dtype=np.float64).reshape(9)
        if self.velocity is not None:
            self.velocity = np.asarray(self.velocity, dtype=np.float64).reshape(2)


@dataclass
class DetectionFrame:
    timestamp: float
    detections: list[Detection]
    fused: bool | None = None


def extract_detections(
    queries: QuerySet,
    traces: list[EvolutionTrace],
    frame_index: int = 0,
) -> list[Detection]:
    """Detections from evolved queries: healthy pillars become boxes.

    The confidence is the attention concentration of the final round (the
    largest selected weight); queries flagged empty, degenerate, or
    background are dropped.
    """
    out: list[Detection] = []
    for qi, (pillar, trace) in enumerate(zip(queries.pillars, traces)):
        if pillar.flag:
            continue
        score = 0.0
        if trace.attention:
            final = trace.attention[-1]
            if final.weights.size:
                score = float(final.weights.max())
        out.append(
            Detection(
                frame=frame_index,
                box=pillar.attrs.as_array(),
                score=score,
                query_id=qi,
            )
        )
    return out


def dedup_detections(dets: list[Detection], radius: float) -> list[Detection]:
    """Greedy score-ordered suppression of detections within ``radius`` (BEV).

    Radius 0 disables suppression.  Ordering ties break on query id, so the
    result is deterministic.
    """
    if radius <= 0.0 or len(dets) <= 1:
        return list(dets)
    order = sorted(dets, key=lambda d: (-d.score, d.query_id))
    kept: list[Detection] = []
    for det in order:
        c = det.box[:2]
        if all(float(np.hypot(*(c - k.box[:2]))) > radius for k in kept):
            kept.append(det)
    kept.sort(key=lambda d: d.query_id)
    return kept


def write_detections(path: str, frames: list[DetectionFrame], params_echo: dict) -> None:
    """Detection JSONL: one frame per line with the run parameters echoed."""
    iterations = int(params_echo.get("iterations", 0))
    with open(path, "w", encoding="utf-8") as fh:
        for frame in frames:
            rec: dict = {
                "timestamp": frame.timestamp,
                "detections": [
                    {
                        "box": [float(v) for v in det.box],
                        "score": det.score,
                        "query_id": det.query_id,
                        **(
                            {"velocity": [float(det.velocity[0]), float(det.velocity[1])]}
                            if det.velocity is not None
                            else {}
                        ),
                    }
                    for det in frame.detections
                ],
                "iterations": iterations,
                "params": params_echo,
            }
            if frame.fused is not None:
                rec["fused"] = frame.fused
            fh.write(json.dumps(rec, sort_keys=True))
            fh.write("\n")


def read_detections(path: str) -> list[DetectionFrame]:
    frames: list[DetectionFrame] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                dets = [
                    Detection(
                        frame=len(frames),
                        box=np.array(d["box"], dtype=np.float64),
                        score=float(d["score"]),
                        query_id=int(d["query_id"]),
                        velocity=(
                            np.array(d["velocity"], dtype=np.float64)
                            if "velocity" in d
                            else None
                        ),
                    )
                    for d in rec["detections"]
                ]
                frames.append(
                    DetectionFrame(
                        timestamp=float(rec["timestamp"]),
                        detections=dets,
                        fused=rec.get("fused"),
                    )
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{line_no}: malformed detection record ({exc})") from exc
    return frames
