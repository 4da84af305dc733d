"""Feature-space diagnostics: penultimate-layer embeddings, an exact
(all-pairs) t-SNE with per-row perplexity calibration, nearest-neighbor
queries, and a misclassification report built on them."""

from __future__ import annotations

import csv
import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from . import dataset, network
from .dataset import CLASS_ORDER, PatchClass

PERPLEXITY_TOL = 1e-3
EXAGGERATION = 4.0
EXAGGERATION_ITERS = 100
STEP_SIZE = 200.0
MOMENTUM_EARLY = 0.5
MOMENTUM_LATE = 0.8
MOMENTUM_SWITCH_ITER = 250
Q_FLOOR = 1e-12


@dataclass
class EmbeddingSet:
    """Rows of 64-unit features with their labels and provenance."""

    target: str
    features: np.ndarray        # (n, 64) float64
    classes: list               # PatchClass per row
    true_labels: np.ndarray     # (n,) 0/1
    predicted_labels: np.ndarray
    positive_probs: np.ndarray  # (n,) model probability of the positive class
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.features)


def _fair_quotas(available: dict, cap: int) -> dict:
    """Split cap across classes as evenly as their record counts allow."""
    total = min(cap, sum(available.values()))
    quotas = {cls: 0 for cls in available}
    remaining = total
    for i, cls in enumerate(sorted(available, key=lambda c: available[c])):
        left = len(available) - i
        take = min(available[cls], remaining // left if left else 0)
        quotas[cls] = take
        remaining -= take
    # hand leftovers to classes with spare records, largest first
    for cls in sorted(available, key=lambda c: available[c] - quotas[c],
                      reverse=True):
        if remaining <= 0:
            break
        extra = min(available[cls] - quotas[cls], remaining)
        quotas[cls] += extra
        remaining -= extra
    return quotas


def collect_embeddings(weights: network.NetworkWeights,
                       index: dataset.PatchIndex, target: str,
                       cap: int = 2000, seed: int = 0,
                       chunk: int = 512) -> EmbeddingSet:
    """Samples up to `cap` records (evenly across the four classes, refilled
    from larger classes when one runs short) and runs them through the
    network once, keeping the 64-unit features and the full prediction."""
    dataset._check_target(target)
    if cap < 1:
        raise ValueError(f"cap must be >= 1, got {cap}")
    available = {cls: len(index.records_by_class[cls]) for cls in CLASS_ORDER}
    if sum(available.values()) == 0:
        raise ValueError("index holds no records")
    quotas = _fair_quotas(available, cap)
    chosen = []
    for ci, cls in enumerate(CLASS_ORDER):
        records = index.records_by_class[cls]
        q = quotas[cls]
        if not q:
            continue
        rng = np.random.default_rng([seed, 4, ci])
        picks = rng.choice(len(records), q, replace=False)
        chosen.extend(records[int(i)] for i in picks)
    feats = np.empty((len(chosen), network.HIDDEN_UNITS))
    probs = np.empty((len(chosen), weights.spec.class_count))
    for i in range(0, len(chosen), chunk):
        x = dataset.patches_for_records(index, chosen[i:i + chunk])
        p, f = network.predict_with_features(weights, x)
        feats[i:i + len(x)] = f
        probs[i:i + len(x)] = p
    classes = [rec.patch_class for rec in chosen]
    true = np.array([dataset.target_label(c, target) for c in classes])
    return EmbeddingSet(
        target=target, features=feats.astype(np.float64), classes=classes,
        true_labels=true, predicted_labels=probs.argmax(1),
        positive_probs=probs[:, 1].astype(np.float64), records=chosen)


# --------------------------------------------------------------- t-SNE

@dataclass
class ProjectedPoints:
    coords: np.ndarray  # (n, 2)
    initial_kl: float
    final_kl: float
    perplexity: float
    iterations: int
    realized_perplexities: np.ndarray  # (n,) from the calibration


def _squared_distances(x: np.ndarray) -> np.ndarray:
    sq = (x * x).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, 0.0)
    return d2


def _calibrate_row(d_row: np.ndarray, perplexity: float,
                   tol: float = PERPLEXITY_TOL, max_iter: int = 200):
    """Binary search for the Gaussian precision whose conditional
    distribution over d_row hits the target perplexity within tol.
    Returns (probabilities over the row, realized perplexity)."""
    shifted = d_row - d_row.min()
    beta, lo, hi = 1.0, 0.0, np.inf
    for _ in range(max_iter):
        e = np.exp(-beta * shifted)
        sum_e = e.sum()
        h = np.log(sum_e) + beta * (shifted * e).sum() / sum_e
        perp = float(np.exp(h))
        if abs(perp - perplexity) <= tol:
            return e / sum_e, perp
        if perp > perplexity:
            lo = beta
            beta = beta * 2.0 if np.isinf(hi) else (beta + hi) / 2.0
        else:
            hi = beta
            beta = (lo + beta) / 2.0
    raise RuntimeError(
        f"perplexity calibration failed (target {perplexity}, reached {perp})")


def conditional_probabilities(features: np.ndarray, perplexity: float):
    """Row-conditional Gaussian affinities (each row sums to one, zero
    diagonal) and the realized per-row perplexities."""
    features = np.asarray(features, dtype=np.float64)
    n = len(features)
    if n < 3 * perplexity:
        raise ValueError(
            f"need at least 3*perplexity = {3 * perplexity:.0f} points, got {n}")
    d2 = _squared_distances(features)
    cond = np.zeros((n, n))
    realized = np.zeros(n)
    idx = np.arange(n)
    for i in range(n):
        others = idx != i
        cond[i, others], realized[i] = _calibrate_row(d2[i, others], perplexity)
    return cond, realized


def joint_probabilities(features: np.ndarray, perplexity: float):
    """Symmetrized joint distribution P (sums to one) and the realized
    per-row perplexities."""
    cond, realized = conditional_probabilities(features, perplexity)
    p = (cond + cond.T) / (2.0 * len(cond))
    return p, realized


def _q_matrix(y: np.ndarray):
    d2 = _squared_distances(y)
    w = 1.0 / (1.0 + d2)
    np.fill_diagonal(w, 0.0)
    return w / w.sum(), w


def _kl(p: np.ndarray, q: np.ndarray) -> float:
    q = np.maximum(q, Q_FLOOR)
    terms = np.where(p > 0, p * np.log(np.maximum(p, Q_FLOOR) / q), 0.0)
    return float(terms.sum())


def _content_init(features: np.ndarray, seed: int) -> np.ndarray:
    """Initial coordinates keyed to each row's bytes, not its position, so
    permuting the input permutes the whole trajectory."""
    tag = struct.pack("<q", int(seed))
    y = np.empty((len(features), 2))
    for i, row in enumerate(features):
        digest = hashlib.blake2b(row.tobytes() + tag, digest_size=8).digest()
        rng = np.random.default_rng(int.from_bytes(digest, "little"))
        y[i] = rng.normal(0.0, 1e-4, 2)
    return y


def tsne_project(embeddings, perplexity: float = 30.0, iterations: int = 1000,
                 seed: int = 0) -> ProjectedPoints:
    """Exact t-SNE of the embedding features into two dimensions.

    All-pairs affinities, per-row perplexity calibration, early
    exaggeration, and momentum gradient descent with adaptive per-
    coordinate gains. Deterministic given the seed.
    """
    features = np.asarray(embeddings.features if hasattr(embeddings, "features")
                          else embeddings, dtype=np.float64)
    if features.ndim != 2:
        raise ValueError(f"features must be 2-d, got shape {features.shape}")
    if iterations < 1:
        raise ValueError(f"iterations must be >= 1, got {iterations}")
    p, realized = joint_probabilities(features, perplexity)
    y = _content_init(features, seed)
    initial_kl = _kl(p, _q_matrix(y)[0])
    inc = np.zeros_like(y)
    gains = np.ones_like(y)
    for it in range(iterations):
        pe = p * EXAGGERATION if it < EXAGGERATION_ITERS else p
        q, w = _q_matrix(y)
        m = (pe - q) * w
        grad = 4.0 * (m.sum(axis=1)[:, None] * y - m @ y)
        flip = np.sign(grad) != np.sign(inc)
        gains = np.where(flip, gains + 0.2, gains * 0.8)
        np.maximum(gains, 0.01, out=gains)
        momentum = MOMENTUM_EARLY if it < MOMENTUM_SWITCH_ITER else MOMENTUM_LATE
        inc = momentum * inc - STEP_SIZE * (gains * grad)
        y += inc
        y -= y.mean(axis=0)
    final_kl = _kl(p, _q_matrix(y)[0])
    return ProjectedPoints(coords=y, initial_kl=initial_kl, final_kl=final_kl,
                           perplexity=perplexity, iterations=iterations,
                           realized_perplexities=realized)


def write_projection_tsv(points: ProjectedPoints, embeddings: EmbeddingSet,
                         path):
    """Delimited rows: x, y, patch class, true label, predicted label."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(["x", "y", "class", "true", "predicted"])
        for (x, y), cls, t, g in zip(points.coords, embeddings.classes,
                                     embeddings.true_labels,
                                     embeddings.predicted_labels):
            writer.writerow([f"{x:.6f}", f"{y:.6f}", cls.value, int(t), int(g)])


# --------------------------------------------------------------- neighbors

def feature_neighbors(embeddings: EmbeddingSet, query_row: int,
                      restrict_class: PatchClass | None = None,
                      k: int | None = None):
    """Rows nearest to query_row in 64-d feature space, ascending Euclidean
    distance (ties by row index), optionally restricted to one patch class
    and truncated to k. Returns (indices, distances)."""
    n = len(embeddings)
    if not 0 <= query_row < n:
        raise ValueError(f"query_row {query_row} outside 0..{n - 1}")
    candidates = np.ones(n, dtype=bool)
    candidates[query_row] = False
    if restrict_class is not None:
        candidates &= np.array([c == restrict_class for c in embeddings.classes])
    idx = np.flatnonzero(candidates)
    if len(idx) == 0:
        return np.zeros(0, dtype=np.intp), np.zeros(0)
    diffs = embeddings.features[idx] - embeddings.features[query_row]
    dists = np.sqrt((diffs * diffs).sum(axis=1))
    order = np.lexsort((idx, dists))
    if k is not None:
        order = order[:k]
    return idx[order], dists[order]


def _cross_label_neighbors(embeddings: EmbeddingSet, row: int, k: int):
    """Nearest well-classified rows whose true label is the opposite one."""
    opposite = 1 - embeddings.true_labels[row]
    ok = ((embeddings.true_labels == opposite)
          & (embeddings.predicted_labels == embeddings.true_labels))
    idx = np.flatnonzero(ok)
    if len(idx) == 0:
        return np.zeros(0, dtype=np.intp), np.zeros(0)
    diffs = embeddings.features[idx] - embeddings.features[row]
    dists = np.sqrt((diffs * diffs).sum(axis=1))
    order = np.lexsort((idx, dists))[:k]
    return idx[order], dists[order]


@dataclass
class MisclassifiedEntry:
    row: int
    patch_class: PatchClass
    true_label: int
    predicted_label: int
    error: float  # |true indicator - positive probability|, in [0, 1]
    neighbor_rows: np.ndarray
    neighbor_distances: np.ndarray


@dataclass
class MisclassificationReport:
    target: str
    entries: dict  # PatchClass -> list[MisclassifiedEntry], worst first

    def render_text(self, embeddings: EmbeddingSet | None = None) -> str:
        lines = [f"misclassification report ({self.target})"]
        for cls in CLASS_ORDER:
            entries = self.entries.get(cls, [])
            lines.append(f"[{cls.value}] misclassified shown: {len(entries)}")
            for e in entries:
                src = ""
                if embeddings is not None and embeddings.records:
                    rec = embeddings.records[e.row]
                    src = f"  {rec.image_path}:({rec.cx},{rec.cy})"
                nb = ", ".join(f"{int(r)}@{d:.3f}" for r, d in
                               zip(e.neighbor_rows, e.neighbor_distances))
                lines.append(
                    f"  row {e.row}  true {e.true_label} -> predicted "
                    f"{e.predicted_label}  error {e.error:.3f}{src}")
                lines.append(f"    nearest opposite, well-classified: {nb or '(none)'}")
        return "\n".join(lines) + "\n"


def misclassification_error(embeddings: EmbeddingSet) -> np.ndarray:
    """Per-row |true positive indicator - predicted positive probability|;
    bounded by 1, and above 0.5 exactly for the misclassified rows."""
    return np.abs(embeddings.true_labels - embeddings.positive_probs)


def misclassification_report(embeddings: EmbeddingSet, top_k: int = 5,
                             neighbor_k: int = 3) -> MisclassificationReport:
    """Worst misclassified rows per patch class with their nearest
    well-classified neighbors from the opposite label."""
    errors = misclassification_error(embeddings)
    wrong = embeddings.predicted_labels != embeddings.true_labels
    entries: dict = {}
    class_arr = np.array([CLASS_ORDER.index(c) for c in embeddings.classes])
    for ci, cls in enumerate(CLASS_ORDER):
        rows = np.flatnonzero(wrong & (class_arr == ci))
        rows = rows[np.lexsort((rows, -errors[rows]))][:top_k]
        listed = []
        for row in rows:
            nb_idx, nb_d = _cross_label_neighbors(embeddings, int(row), neighbor_k)
            listed.append(MisclassifiedEntry(
                row=int(row), patch_class=cls,
                true_label=int(embeddings.true_labels[row]),
                predicted_label=int(embeddings.predicted_labels[row]),
                error=float(errors[row]),
                neighbor_rows=nb_idx, neighbor_distances=nb_d))
        entries[cls] = listed
    return MisclassificationReport(target=embeddings.target, entries=entries)
