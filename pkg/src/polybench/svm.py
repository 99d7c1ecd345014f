"""Polynomial-kernel SVM on flattened pixels, one-vs-one, solved with SMO.

The binary solver works on the dual

    min_a  1/2 a'Qa - sum(a)   s.t.  0 <= a_i <= C,  y'a = 0,   Q_ij = y_i y_j K_ij

and picks working pairs with the second-order rule of Fan, Chen & Lin
(maximal violating ``i`` plus the ``j`` giving the largest objective drop).
The kernel matrix is computed once per fit; training sets here are a few
hundred rows, so it fits in memory comfortably even at 150k features.
"""

from __future__ import annotations

import base64
import itertools
import json
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ._util import atomic_write_text
from .errors import TrainingError
from .phantom_synth import CLASSES, IMAGE_SIZE, PolypClass, TexturalImage

N_FEATURES = IMAGE_SIZE * IMAGE_SIZE * 3
DEFAULT_C_GRID = (0.01, 0.1, 1.0, 10.0, 100.0, 1000.0)
KKT_TOL = 1e-3
MAX_ITER = 100_000
# dual coefficients at or below this are not support vectors
SV_EPS = 1e-10


class SVMConvergenceError(TrainingError):
    pass


@dataclass(frozen=True)
class KernelConfig:
    """Polynomial kernel ``(gamma * <x, y> + coef0) ** degree``.

    ``gamma=None`` means "resolve at fit time" as ``1 / (n_features * var(X))``.
    """

    kind: str = "polynomial"
    degree: int = 3
    gamma: float | None = None
    coef0: float = 0.0

    def __post_init__(self):
        if self.kind != "polynomial":
            raise ValueError(f"unsupported kernel {self.kind!r}")
        if int(self.degree) != self.degree or self.degree < 1:
            raise ValueError("degree must be an integer >= 1")
        if self.gamma is not None and not self.gamma > 0:
            raise ValueError("gamma must be > 0")

    def resolved(self, X: np.ndarray) -> "KernelConfig":
        if self.gamma is not None:
            return self
        var = float(np.var(X))
        return replace(self, gamma=1.0 / (X.shape[1] * var) if var > 0 else 1.0)


def flatten_features(img) -> np.ndarray:
    """Row-major flatten of a 224x224x3 image, scaled to [0, 1]."""
    px = img.pixels if isinstance(img, TexturalImage) else np.asarray(img)
    if px.shape != (IMAGE_SIZE, IMAGE_SIZE, 3):
        raise ValueError(f"expected a {IMAGE_SIZE}x{IMAGE_SIZE}x3 image, got {px.shape}")
    return px.reshape(-1).astype(np.float64) / 255.0


def poly_kernel(x, y, cfg: KernelConfig) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.shape} vs {y.shape}")
    if cfg.gamma is None:
        raise ValueError("kernel gamma is unresolved")
    return float((cfg.gamma * np.dot(x, y) + cfg.coef0) ** cfg.degree)


def gram(X, Y, cfg: KernelConfig) -> np.ndarray:
    if cfg.gamma is None:
        raise ValueError("kernel gamma is unresolved")
    return (cfg.gamma * (np.asarray(X) @ np.asarray(Y).T) + cfg.coef0) ** cfg.degree


@dataclass
class BinarySolution:
    alpha: np.ndarray
    bias: float
    iterations: int


def smo_solve(K: np.ndarray, y: np.ndarray, C: float, tol: float = KKT_TOL,
              max_iter: int = MAX_ITER) -> BinarySolution:
    """Solve the soft-margin dual for labels ``y`` in {-1, +1}."""
    n = len(y)
    y = y.astype(np.float64)
    alpha = np.zeros(n)
    G = -np.ones(n)  # gradient of the dual objective
    diag = np.diag(K).copy()
    for it in range(max_iter + 1):
        up = ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
        low = ((y > 0) & (alpha > 0)) | ((y < 0) & (alpha < C))
        score = -y * G
        if not up.any() or not low.any():
            break
        i = int(np.argmax(np.where(up, score, -np.inf)))
        m_up = score[i]
        m_low = np.min(np.where(low, score, np.inf))
        if m_up - m_low < tol:
            break
        if it == max_iter:
            raise SVMConvergenceError(
                f"SMO did not reach KKT tolerance {tol} in {max_iter} iterations (gap {m_up - m_low:.3g})")
        b = m_up - score
        a = diag[i] + diag - 2.0 * K[i]
        a = np.where(a > 0, a, 1e-12)
        cand = low & (b > 0)
        j = int(np.argmax(np.where(cand, b * b / a, -np.inf)))
        t = b[j] / a[j]
        t = min(t, C - alpha[i] if y[i] > 0 else alpha[i])
        t = min(t, alpha[j] if y[j] > 0 else C - alpha[j])
        alpha[i] += y[i] * t
        alpha[j] -= y[j] * t
        alpha[i] = min(max(alpha[i], 0.0), C)
        alpha[j] = min(max(alpha[j], 0.0), C)
        G += t * y * (K[:, i] - K[:, j])
    score = -y * G
    free = (alpha > SV_EPS) & (alpha < C - SV_EPS)
    if free.any():
        bias = float(np.mean(score[free]))
    else:
        up = ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
        low = ((y > 0) & (alpha > 0)) | ((y < 0) & (alpha < C))
        hi = np.max(score[up]) if up.any() else np.min(score[low])
        lo = np.min(score[low]) if low.any() else hi
        bias = float((hi + lo) / 2.0)
    return BinarySolution(alpha, bias, it)


@dataclass
class PairClassifier:
    positive: PolypClass
    negative: PolypClass
    sv_indices: np.ndarray  # rows of SVMModel.support_vectors
    dual_coef: np.ndarray  # alpha_i * y_i
    bias: float


@dataclass
class SVMModel:
    kernel: KernelConfig
    C: float
    classes: list[PolypClass]
    pairs: list[PairClassifier]
    support_vectors: np.ndarray
    train_indices: np.ndarray  # training-set row of each support vector
    feature_norm: dict = field(default_factory=dict)

    def decision_values(self, X: np.ndarray) -> np.ndarray:
        """Pairwise decision functions, shape (n_samples, n_pairs)."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.support_vectors.shape[1]:
            raise ValueError(f"expected features of length {self.support_vectors.shape[1]}, got {X.shape}")
        Ks = gram(self.support_vectors, X, self.kernel)
        out = np.empty((X.shape[0], len(self.pairs)))
        for k, p in enumerate(self.pairs):
            out[:, k] = p.dual_coef @ Ks[p.sv_indices] + p.bias
        return out


def _labels_to_index(labels) -> np.ndarray:
    out = []
    for lab in labels:
        if isinstance(lab, PolypClass):
            out.append(lab.index)
        elif isinstance(lab, (int, np.integer)):
            out.append(int(lab))
        else:
            out.append(PolypClass.parse(lab).index)
    return np.asarray(out, dtype=np.int64)


def svm_fit(features, labels, C: float = 1.0, cfg: KernelConfig | None = None,
            K: np.ndarray | None = None, tol: float = KKT_TOL, max_iter: int = MAX_ITER) -> SVMModel:
    """Fit one binary SMO problem per class pair.

    ``K`` may carry a precomputed training kernel matrix (it must match the
    resolved ``cfg``); grid search uses this to avoid recomputing it.
    """
    X = np.asarray(features, dtype=np.float64)
    y = _labels_to_index(labels)
    if X.ndim != 2 or len(X) != len(y):
        raise ValueError("features must be 2-D with one row per label")
    if not C > 0:
        raise ValueError("C must be > 0")
    present = sorted(set(y.tolist()))
    if len(present) < 2:
        raise ValueError("svm_fit needs at least two distinct classes")
    cfg = (cfg or KernelConfig()).resolved(X)
    if K is None:
        K = gram(X, X, cfg)

    raw = []
    for a, b in itertools.combinations(present, 2):
        idx = np.flatnonzero((y == a) | (y == b))
        yy = np.where(y[idx] == a, 1.0, -1.0)
        sol = smo_solve(K[np.ix_(idx, idx)], yy, C, tol, max_iter)
        keep = sol.alpha > SV_EPS
        raw.append((a, b, idx[keep], sol.alpha[keep] * yy[keep], sol.bias))

    used = np.unique(np.concatenate([r[2] for r in raw])) if raw else np.zeros(0, dtype=np.int64)
    row_of = {int(t): k for k, t in enumerate(used)}
    pairs = [
        PairClassifier(CLASSES[a], CLASSES[b], np.array([row_of[int(t)] for t in tr], dtype=np.int64), coef, bias)
        for a, b, tr, coef, bias in raw
    ]
    return SVMModel(
        kernel=cfg,
        C=float(C),
        classes=[CLASSES[c] for c in present],
        pairs=pairs,
        support_vectors=X[used].copy(),
        train_indices=used.astype(np.int64),
        feature_norm={"scale": "pixel/255", "gamma_rule": "1/(n_features*var)", "train_variance": float(np.var(X))},
    )


def svm_predict(model: SVMModel, features) -> list[PolypClass]:
    """Pairwise vote; ties go to the class with the larger summed decision value."""
    X = np.asarray(features, dtype=np.float64)
    if X.size == 0:
        return []
    if X.ndim == 1:
        X = X[None, :]
    dv = model.decision_values(X)
    votes = np.zeros((len(X), len(CLASSES)))
    conf = np.zeros((len(X), len(CLASSES)))
    for k, p in enumerate(model.pairs):
        f = dv[:, k]
        pos, neg = p.positive.index, p.negative.index
        votes[:, pos] += f > 0
        votes[:, neg] += f <= 0
        conf[:, pos] += f
        conf[:, neg] -= f
    present = np.zeros(len(CLASSES), dtype=bool)
    present[[c.index for c in model.classes]] = True
    votes[:, ~present] = -1
    out = []
    for v, c in zip(votes, conf):
        tied = np.flatnonzero(v == v.max())
        out.append(CLASSES[int(tied[np.argmax(c[tied])])])
    return out


def stratified_kfold_indices(labels, n_splits: int, seed: int, groups=None) -> list[np.ndarray]:
    """Test-index arrays for ``n_splits`` stratified folds.

    With ``groups``, whole groups are dealt out so no group straddles folds.
    """
    from .dataset import stratified_partition

    y = _labels_to_index(labels)
    rng = np.random.default_rng(seed)
    if groups is None:
        parts = stratified_partition(list(range(len(y))), y.tolist(), n_splits, rng)
        return [np.asarray(p, dtype=np.int64) for p in parts]
    groups = np.asarray(groups)
    label_of = {}
    for g, lab in zip(groups.tolist(), y.tolist()):
        label_of.setdefault(g, lab)
    units = sorted(label_of)
    parts = stratified_partition(units, [label_of[u] for u in units], n_splits, rng)
    return [np.flatnonzero(np.isin(groups, p)) for p in parts]


def grid_search_C(features, labels, grid=DEFAULT_C_GRID, folds_inner: int = 3, seed: int = 0,
                  cfg: KernelConfig | None = None, groups=None) -> tuple[float, dict[float, float]]:
    """Pick C by mean inner-CV accuracy on the given (training) data; ties go to the smaller C."""
    grid = sorted(float(c) for c in grid)
    if not grid:
        raise ValueError("empty C grid")
    X = np.asarray(features, dtype=np.float64)
    y = _labels_to_index(labels)
    cfg = (cfg or KernelConfig()).resolved(X)
    K = gram(X, X, cfg)
    splits = stratified_kfold_indices(y, folds_inner, seed, groups)
    scores = {}
    for C in grid:
        accs = []
        for test_idx in splits:
            train_idx = np.setdiff1d(np.arange(len(y)), test_idx)
            m = svm_fit(X[train_idx], y[train_idx], C, cfg, K=K[np.ix_(train_idx, train_idx)])
            pred = _labels_to_index(svm_predict(m, X[test_idx]))
            accs.append(float(np.mean(pred == y[test_idx])))
        scores[C] = float(np.mean(accs))
    best = grid[0]
    for C in grid[1:]:
        if scores[C] > scores[best]:
            best = C
    return best, scores


# --------------------------------------------------------------------------
# serialisation

def _encode_array(a: np.ndarray) -> dict:
    a = np.asarray(a, dtype=np.float64)
    scaled = a * 255.0
    q = np.rint(scaled)
    if a.size and np.array_equal(q, scaled) and q.min() >= 0 and q.max() <= 255 \
            and np.array_equal(q.astype(np.uint8) / 255.0, a):
        enc, raw = "u8/255", q.astype(np.uint8).tobytes()
    else:
        enc, raw = "f8", a.astype("<f8").tobytes()
    return {"encoding": enc, "shape": list(a.shape), "data": base64.b64encode(zlib.compress(raw, 6)).decode("ascii")}


def _decode_array(d: dict) -> np.ndarray:
    raw = zlib.decompress(base64.b64decode(d["data"]))
    if d["encoding"] == "u8/255":
        a = np.frombuffer(raw, dtype=np.uint8).astype(np.float64) / 255.0
    elif d["encoding"] == "f8":
        a = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    else:
        raise ValueError(f"unknown array encoding {d['encoding']!r}")
    return a.reshape(d["shape"])


def model_to_dict(model: SVMModel) -> dict:
    k = model.kernel
    return {
        "format": "polybench-svm/1",
        "kernel": {"kind": k.kind, "degree": k.degree, "gamma": k.gamma, "coef0": k.coef0},
        "C": model.C,
        "classes": [c.name for c in model.classes],
        "support_vectors": _encode_array(model.support_vectors),
        "support_vector_train_indices": [int(i) for i in model.train_indices],
        "pairs": [
            {"classes": [p.positive.name, p.negative.name],
             "support_vectors": [int(i) for i in p.sv_indices],
             "dual_coef": [float(v) for v in p.dual_coef],
             "bias": p.bias}
            for p in model.pairs
        ],
        "feature_norm": model.feature_norm,
    }


def model_from_dict(d: dict) -> SVMModel:
    k = d["kernel"]
    return SVMModel(
        kernel=KernelConfig(k["kind"], int(k["degree"]), float(k["gamma"]), float(k["coef0"])),
        C=float(d["C"]),
        classes=[PolypClass[c] for c in d["classes"]],
        pairs=[PairClassifier(PolypClass[p["classes"][0]], PolypClass[p["classes"][1]],
                              np.asarray(p["support_vectors"], dtype=np.int64),
                              np.asarray(p["dual_coef"], dtype=np.float64), float(p["bias"]))
               for p in d["pairs"]],
        support_vectors=_decode_array(d["support_vectors"]),
        train_indices=np.asarray(d["support_vector_train_indices"], dtype=np.int64),
        feature_norm=dict(d.get("feature_norm", {})),
    )


def save_model(model: SVMModel, path) -> None:
    atomic_write_text(path, json.dumps(model_to_dict(model), sort_keys=True) + "\n")


def load_model(path) -> SVMModel:
    return model_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
