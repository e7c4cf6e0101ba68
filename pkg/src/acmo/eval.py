"""Evaluation metrics against a deterministic stub feature extractor."""
from __future__ import annotations

import csv
import io
import json
import logging
import warnings
from dataclasses import asdict, dataclass, fields

import numpy as np

from .diffusion import TextEmbedding
from .errors import DataError, NumericError, ShapeError

log = logging.getLogger(__name__)

FEATURE_DIM = 64
REPORT_SCHEMA = "acmo.metrics/1"
CLAMP_TOL = 1e-10


@dataclass
class FeatureSet:
    matrix: np.ndarray  # (n, d)
    source: str = "motion"

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2:
            raise ShapeError("feature set must be a 2-D matrix")
        if not np.isfinite(self.matrix).all():
            raise NumericError("non-finite features")
        if self.source not in ("motion", "text"):
            raise DataError(f"unknown feature source {self.source!r}")

    def __len__(self) -> int:
        return self.matrix.shape[0]


def _as_matrix(x) -> np.ndarray:
    return x.matrix if isinstance(x, FeatureSet) else np.asarray(x, dtype=np.float64)


def _projection(rows: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.standard_normal((rows, FEATURE_DIM)) / np.sqrt(rows)


def extract_features(x, seed: int = 0) -> np.ndarray:
    """64-dim stub feature of a motion ``(L, H)`` or a :class:`TextEmbedding`.

    Motions are pooled to per-channel temporal mean and std; text to the
    masked token mean.  Both are then multiplied by a seeded Gaussian matrix.
    """
    if isinstance(x, TextEmbedding):
        mask = np.asarray(x.mask, dtype=bool)
        tokens = np.asarray(x.features, dtype=np.float64)
        pooled = tokens[mask].mean(axis=0) if mask.any() else np.zeros(tokens.shape[1])
        return pooled @ _projection(pooled.shape[0], seed + 1)
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1:
        raise ShapeError(f"motion must be (L, H), got {m.shape}")
    pooled = np.concatenate([m.mean(axis=0), m.std(axis=0)])
    return pooled @ _projection(pooled.shape[0], seed)


def feature_set(items, seed: int = 0) -> FeatureSet:
    items = list(items)
    source = "text" if items and isinstance(items[0], TextEmbedding) else "motion"
    return FeatureSet(np.stack([extract_features(i, seed) for i in items]), source)


# ---------------------------------------------------------------------------
# FID
# ---------------------------------------------------------------------------


def _psd_sqrt(a: np.ndarray, tol: float = CLAMP_TOL) -> np.ndarray:
    a = 0.5 * (a + a.T)
    vals, vecs = np.linalg.eigh(a)
    scale = max(1.0, float(np.abs(vals).max(initial=0.0)))
    if vals.min(initial=0.0) < -tol * scale:
        raise NumericError(f"covariance not positive semidefinite (eigenvalue {vals.min():.3e})")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(mu1, sigma1, mu2, sigma2) -> float:
    """Frechet distance between two Gaussians, via the symmetric product s1^1/2 s2 s1^1/2."""
    r1 = _psd_sqrt(sigma1)
    cross = _psd_sqrt(r1 @ sigma2 @ r1)
    d = mu1 - mu2
    val = float(d @ d + np.trace(sigma1) + np.trace(sigma2) - 2.0 * np.trace(cross))
    return max(val, 0.0)


def fid(real, gen) -> float:
    a, b = _as_matrix(real), _as_matrix(gen)
    if len(a) < 2 or len(b) < 2:
        raise DataError("fid needs at least two samples per set")
    if a.shape[1] != b.shape[1]:
        raise ShapeError("feature dims differ")
    return frechet_distance(a.mean(0), np.cov(a, rowvar=False), b.mean(0), np.cov(b, rowvar=False))


# ---------------------------------------------------------------------------
# R-precision / MM-Dist
# ---------------------------------------------------------------------------


def retrieval_metrics(text_feats, motion_feats, batch: int = 32, seed: int = 0, top_k: int = 3) -> dict:
    """Batch-of-32 retrieval protocol; the trailing partial batch is dropped."""
    t, m = _as_matrix(text_feats), _as_matrix(motion_feats)
    if t.shape != m.shape:
        raise ShapeError("text and motion features must be aligned pairs")
    n = len(t)
    if n < batch:
        raise DataError(f"retrieval needs at least {batch} pairs, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    hits = np.zeros(top_k)
    dists = []
    count = 0
    for s in range(0, n - batch + 1, batch):
        idx = order[s : s + batch]
        tb, mb = t[idx], m[idx]
        d = np.sqrt(((tb[:, None, :] - mb[None, :, :]) ** 2).sum(-1))
        for i in range(batch):
            true = d[i, i]
            # rank = 1 + strictly closer + equally close with a smaller index
            rank = 1 + int((d[i] < true).sum()) + int((d[i, :i] == true).sum())
            hits += rank <= np.arange(1, top_k + 1)
            dists.append(true)
        count += batch
    out = {f"r_precision@{k + 1}": float(hits[k] / count) for k in range(top_k)}
    out["mm_dist"] = float(np.mean(dists))
    return out


# ---------------------------------------------------------------------------
# Diversity / MModality
# ---------------------------------------------------------------------------


def diversity(feats, pairs: int = 300, seed: int = 0) -> float:
    x = _as_matrix(feats)
    n = len(x)
    if n < 2:
        raise DataError("diversity needs at least two samples")
    if n < 2 * pairs:
        warnings.warn(f"diversity: {n} samples support only {n // 2} disjoint pairs", stacklevel=2)
        pairs = n // 2
    perm = np.random.default_rng(seed).permutation(n)
    a, b = x[perm[:pairs]], x[perm[pairs : 2 * pairs]]
    return float(np.linalg.norm(a - b, axis=1).mean())


def mmodality(groups, pairs: int = 10, seed: int = 0) -> float:
    """Mean within-group distance over seeded index pairs ``(i, j)``, ``i != j``."""
    groups = [_as_matrix(g) for g in groups]
    if not groups:
        raise DataError("no groups")
    rng = np.random.default_rng(seed)
    scores = []
    for g in groups:
        n = len(g)
        if n < 2:
            raise DataError("every mmodality group needs at least two generations")
        i = rng.integers(0, n, pairs)
        j = (i + rng.integers(1, n, pairs)) % n  # uniform over the other members
        scores.append(np.linalg.norm(g[i] - g[j], axis=1).mean())
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# MPJPE / PAMPJPE
# ---------------------------------------------------------------------------


def _procrustes_aligned(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Similarity-align each frame of ``pred`` (J x 3) onto ``gt``."""
    mp, mg = pred.mean(1, keepdims=True), gt.mean(1, keepdims=True)
    p, g = pred - mp, gt - mg
    cov = np.einsum("fji,fjk->fik", p, g)  # (F, 3, 3)
    u, s, vt = np.linalg.svd(cov)
    det = np.sign(np.linalg.det(np.einsum("fij,fjk->fik", u, vt)))
    flip = np.ones_like(s)
    flip[:, -1] = det
    rot = np.einsum("fij,fj,fjk->fik", u, flip, vt)  # p @ rot ~ g
    var = (p**2).sum((1, 2))
    scale = np.where(var > 0, (s * flip).sum(1) / np.where(var > 0, var, 1.0), 1.0)
    aligned = scale[:, None, None] * np.einsum("fji,fik->fjk", p, rot) + mg
    # identical frames need the identity; the SVD would add roundoff
    same = (pred == gt).all(axis=(1, 2))
    aligned[same] = gt[same]
    return aligned


def reconstruction_errors(pred, gt, root: int = 0) -> tuple[float, float]:
    """(mpjpe, pampjpe) in millimetres for joint tracks in metres, shape ``(L, J, 3)``."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 3 or pred.shape[-1] != 3:
        raise ShapeError(f"joint tracks must share shape (L, J, 3): {pred.shape} vs {gt.shape}")
    rp = pred - pred[:, root : root + 1]
    rg = gt - gt[:, root : root + 1]
    mpjpe = np.linalg.norm(rp - rg, axis=-1).mean() * 1000.0
    pampjpe = np.linalg.norm(_procrustes_aligned(pred, gt) - gt, axis=-1).mean() * 1000.0
    return float(mpjpe), float(pampjpe)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class MetricReport:
    fid: float | None = None
    r_precision_1: float | None = None
    r_precision_2: float | None = None
    r_precision_3: float | None = None
    mm_dist: float | None = None
    diversity: float | None = None
    mmodality: float | None = None
    mpjpe: float | None = None
    pampjpe: float | None = None

    def __post_init__(self):
        if self.fid is not None and self.fid < 0:
            raise NumericError("fid must be non-negative")
        for k in (1, 2, 3):
            v = getattr(self, f"r_precision_{k}")
            if v is not None and not 0.0 <= v <= 1.0:
                raise NumericError("r-precision outside [0, 1]")

    def update_retrieval(self, r: dict) -> "MetricReport":
        for k in (1, 2, 3):
            setattr(self, f"r_precision_{k}", r.get(f"r_precision@{k}"))
        self.mm_dist = r.get("mm_dist")
        self.__post_init__()
        return self

    def to_dict(self) -> dict:
        return {"schema": REPORT_SCHEMA, **asdict(self)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        d = json.loads(text)
        if d.pop("schema", None) != REPORT_SCHEMA:
            raise DataError("metric report schema mismatch")
        return cls(**d)

    @staticmethod
    def csv_header() -> list[str]:
        return ["schema"] + [f.name for f in fields(MetricReport)]

    def to_csv_row(self) -> str:
        buf = io.StringIO()
        d = self.to_dict()
        csv.writer(buf, lineterminator="\n").writerow(["" if d[k] is None else d[k] for k in self.csv_header()])
        return buf.getvalue()


def repeat_mean(fn, repeats: int = 20, seed: int = 0) -> tuple[float, float]:
    """Mean and std of ``fn(seed + r)`` over ``repeats`` runs."""
    vals = np.array([fn(seed + r) for r in range(repeats)], dtype=np.float64)
    return float(vals.mean()), float(vals.std())


def evaluate(real_motions, gen_motions, texts=None, seed: int = 0, batch: int = 32) -> MetricReport:
    """Full report for matched lists of raw motions (and optional text embeddings)."""
    real = feature_set(real_motions, seed)
    gen = feature_set(gen_motions, seed)
    report = MetricReport(fid=fid(real, gen))
    report.diversity = diversity(gen, pairs=min(300, len(gen) // 2), seed=seed)
    if texts is not None and len(texts) >= batch:
        tf = feature_set(texts, seed)
        report.update_retrieval(retrieval_metrics(tf, gen, batch=batch, seed=seed))
    return report
