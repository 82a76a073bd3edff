"""Quality and novelty scores over embedding sets."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.special import logsumexp
from scipy.stats import rankdata

SQRT_TOL = 1e-10


class FIDError(ArithmeticError):
    pass


class CTScoreError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class GaussianSummary:
    mean: np.ndarray
    covariance: np.ndarray
    n: int

    @classmethod
    def fit(cls, emb: np.ndarray) -> "GaussianSummary":
        emb = np.asarray(emb, dtype=np.float64)
        if len(emb) < 2:
            raise ValueError("need at least 2 samples for a covariance")
        cov = np.cov(emb, rowvar=False)
        return cls(emb.mean(axis=0), 0.5 * (cov + cov.T), len(emb))


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(m)
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def frechet_distance(a: GaussianSummary, b: GaussianSummary) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    The trace of the cross term is taken from the eigenvalues of the
    symmetric matrix S_a^(1/2) S_b S_a^(1/2), clamped at zero.
    """
    root_a = _psd_sqrt(a.covariance)
    middle = root_a @ b.covariance @ root_a
    middle = 0.5 * (middle + middle.T)
    vals, vecs = np.linalg.eigh(middle)
    neg = vals.min(initial=0.0)
    scale = max(np.abs(vals).max(initial=0.0), 1.0)
    if neg < -1e-6 * scale:
        raise FIDError(f"cross-covariance has eigenvalue {neg:.3e}; inputs are not PSD")
    root = np.sqrt(np.clip(vals, 0, None))
    resid = np.linalg.norm((vecs * vals) @ vecs.T - middle) / max(np.linalg.norm(middle), 1.0)
    if resid > SQRT_TOL:
        raise FIDError(f"matrix square root did not converge: relative residual {resid:.3e} > {SQRT_TOL:g}")
    diff = a.mean - b.mean
    value = float(diff @ diff + np.trace(a.covariance) + np.trace(b.covariance) - 2 * root.sum())
    return max(value, 0.0)


def fid(set_a: np.ndarray, set_b: np.ndarray) -> float:
    return frechet_distance(GaussianSummary.fit(set_a), GaussianSummary.fit(set_b))


def qn_score(fid: float, v_c: float, v_a: float, r_c: float) -> float:
    return (fid + v_c * v_a * r_c * 1000.0) / 2.0


def novelty_term(v_c: float, v_a: float, r_c: float) -> float:
    return v_c * v_a * r_c * 1000.0


def blended_fld_fid(fid: float, fld: float) -> float:
    return (fid + fld * 100.0) / 2.0


def sq_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances via the Gram expansion (BLAS), clamped at 0."""
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * (a @ b.T)
    return np.maximum(d, 0.0)


def distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sqrt(sq_distances(a, b))


def _nn_within(x: np.ndarray) -> np.ndarray:
    d = distances(x, x)
    np.fill_diagonal(d, np.inf)
    return d.min(axis=1)


def authpct(train: np.ndarray, generated: np.ndarray, train_nn: np.ndarray | None = None) -> float:
    """Percentage of generated samples that are authentic.

    A sample is inauthentic when its distance to the nearest training point
    is smaller than that training point's own nearest-neighbour distance.
    Equidistant nearest training points are all checked. ``train_nn`` may
    carry precomputed within-train nearest-neighbour distances.
    """
    train = np.asarray(train, dtype=np.float64)
    generated = np.asarray(generated, dtype=np.float64)
    if len(train) < 2 or len(generated) < 1:
        raise ValueError("authpct needs >= 2 train and >= 1 generated samples")
    if train_nn is None:
        train_nn = _nn_within(train)
    d = distances(generated, train)
    dmin = d.min(axis=1, keepdims=True)
    inauthentic = np.any((d == dmin) & (dmin < train_nn[None, :]), axis=1)
    return 100.0 * (1.0 - float(inauthentic.mean()))


def mann_whitney_z(x: np.ndarray, y: np.ndarray) -> float:
    """Standardised U statistic of ``x`` vs ``y`` (normal approximation, tie-corrected).

    Negative when ``x`` tends to be smaller than ``y``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n1, n2 = len(x), len(y)
    ranks = rankdata(np.concatenate([x, y]))
    u = ranks[:n1].sum() - n1 * (n1 + 1) / 2.0
    n = n1 + n2
    _, counts = np.unique(np.concatenate([x, y]), return_counts=True)
    tie = (counts ** 3 - counts).sum() / (n * (n - 1)) if n > 1 else 0.0
    var = n1 * n2 / 12.0 * ((n + 1) - tie)
    if var <= 0:
        return 0.0
    return float((u - n1 * n2 / 2.0) / np.sqrt(var))


def _canonical_order(x: np.ndarray) -> np.ndarray:
    return np.lexsort(x.T[::-1])


def default_k_cells(n_train: int) -> int:
    return max(1, int(np.floor(np.sqrt(n_train) / 2)))


@dataclass(frozen=True)
class CTReference:
    """The generated-independent half of a C_T computation."""
    train: np.ndarray     # canonically ordered
    labels: np.ndarray    # k-means cell per training row
    to_test: np.ndarray   # train -> nearest test distance

    @classmethod
    def build(cls, train: np.ndarray, test: np.ndarray, k_cells: int | None = None, seed: int = 0) -> "CTReference":
        train = np.asarray(train, dtype=np.float64)
        test = np.asarray(test, dtype=np.float64)
        if min(len(train), len(test)) < 1:
            raise ValueError("ct_score needs non-empty train, test and generated sets")
        if k_cells is None:
            k_cells = default_k_cells(len(train))
        if k_cells < 1:
            raise ValueError("k_cells must be >= 1")
        train = train[_canonical_order(train)]
        if k_cells == 1:
            labels = np.zeros(len(train), dtype=int)
        else:
            _, labels = kmeans2(train, min(k_cells, len(train)), minit="++", seed=seed)
        return cls(train, labels, distances(train, test).min(axis=1))

    def score(self, generated: np.ndarray) -> float:
        generated = np.asarray(generated, dtype=np.float64)
        if len(generated) < 1:
            raise ValueError("ct_score needs non-empty train, test and generated sets")
        to_gen = distances(self.train, generated).min(axis=1)
        zs = []
        for cell in np.unique(self.labels):
            idx = self.labels == cell
            if idx.sum() < 2:
                continue
            zs.append(mann_whitney_z(to_gen[idx], self.to_test[idx]))
        if not zs:
            raise CTScoreError("every cell has fewer than 2 training samples")
        return float(np.mean(zs))


def ct_score(train: np.ndarray, test: np.ndarray, generated: np.ndarray,
             k_cells: int | None = None, seed: int = 0) -> float:
    """Cell-averaged Mann-Whitney z of train->generated vs train->test distances.

    Training points are clustered with k-means (on a canonical ordering,
    so the result ignores input order). Higher means less copying.
    """
    if len(generated) < 1:
        raise ValueError("ct_score needs non-empty train, test and generated sets")
    return CTReference.build(train, test, k_cells, seed).score(generated)


def scott_bandwidth(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    return float(x.std(axis=0, ddof=1).mean() * n ** (-1.0 / (d + 4)))


def kde_log_likelihood(points: np.ndarray, data: np.ndarray, bandwidth: float) -> np.ndarray:
    d = data.shape[1]
    sq = sq_distances(points, data)
    return logsumexp(-sq / (2 * bandwidth ** 2), axis=1) - np.log(len(data)) - 0.5 * d * np.log(2 * np.pi * bandwidth ** 2)


def fld_lite(train: np.ndarray, test: np.ndarray, generated: np.ndarray, bandwidth: float | None = None) -> float:
    """Percentage of generated samples likelier under a train-set KDE than a test-set KDE.

    Isotropic Gaussian kernels with one shared bandwidth (Scott's rule on the
    train set by default). Equal likelihoods do not count as higher.
    """
    train = np.asarray(train, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    generated = np.asarray(generated, dtype=np.float64)
    if min(len(train), len(test), len(generated)) < 1:
        raise ValueError("fld_lite needs non-empty sets")
    if bandwidth is None:
        bandwidth = scott_bandwidth(train)
    if not bandwidth > 0:
        raise ValueError(f"bandwidth must be positive, got {bandwidth}")
    ll_train = kde_log_likelihood(generated, train, bandwidth)
    ll_test = kde_log_likelihood(generated, test, bandwidth)
    return 100.0 * float(np.mean(ll_train > ll_test))


@dataclass
class ScoreBundle:
    qn: float
    fid: float
    fld: float
    authpct: float
    ct: float
    v_a: float
    v_c: float
    r_c: float

    @property
    def novelty(self) -> float:
        return novelty_term(self.v_c, self.v_a, self.r_c)

    @property
    def fld_fid(self) -> float:
        return blended_fld_fid(self.fid, self.fld)

    def objective(self, name: str) -> float:
        if name == "fld_fid":
            return self.fld_fid
        if name in ("qn", "qn_dedup"):
            return self.qn
        raise ValueError(f"unknown objective {name!r}")

    def to_dict(self) -> dict:
        return asdict(self)


SCORE_FIELDS = [f.name for f in fields(ScoreBundle)]
