"""Post-hoc gate analysis: binarization, overlap statistics, principal
components, and the angle-similarity correlation for rotation streams.

All functions are pure over immutable inputs; gate collection runs the
deterministic eval-mode gate path only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ParameterError
from .network import GatedNetParams, gate_outputs_only
from .tasks import TaskStream

BINARIZE_THRESHOLD = 0.1


@dataclass
class GateMatrix:
    """Per layer, rows = tasks: mean gate output over a test sample of each task."""

    layers: list[np.ndarray]  # each [T, N_hidd]

    @property
    def n_tasks(self) -> int:
        return self.layers[0].shape[0]


@dataclass
class BinaryGateMatrix:
    layers: list[np.ndarray]  # bool [T, N_hidd]
    threshold: float

    def active_fraction(self, layer: int) -> np.ndarray:
        return self.layers[layer].mean(axis=1)


def collect_gate_matrix(
    params: GatedNetParams,
    stream: TaskStream,
    sample_size: int = 256,
    seed: int = 0,
) -> GateMatrix:
    """Mean eval-mode gate outputs over ``sample_size`` test inputs per task."""
    if sample_size < 1:
        raise ParameterError("sample_size must be >= 1")
    rng = np.random.default_rng(seed)
    rows: list[list[np.ndarray]] = [[], []]
    for task_id in range(len(stream)):
        test = stream.test(task_id)
        take = min(sample_size, len(test))
        picks = rng.choice(len(test), size=take, replace=False)
        gates = gate_outputs_only(params, test.images[picks])
        for layer, node in enumerate(gates):
            rows[layer].append(node.values.mean(axis=0))
    return GateMatrix([np.stack(r) for r in rows])


def binarize(gates: GateMatrix, threshold: float = BINARIZE_THRESHOLD) -> BinaryGateMatrix:
    """Active iff mean output strictly exceeds the threshold."""
    if not 0.0 < threshold < 1.0:
        raise ParameterError(f"threshold must lie in (0, 1), got {threshold}")
    return BinaryGateMatrix([layer > threshold for layer in gates.layers], threshold)


def overlap(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """(dot/N, jaccard) of two binary rows; jaccard of two empty sets is 0."""
    if a.shape != b.shape:
        raise ContractError(f"overlap rows differ in length: {a.shape} vs {b.shape}")
    a = a.astype(bool)
    b = b.astype(bool)
    inter = int((a & b).sum())
    union = int((a | b).sum())
    dot_over_n = inter / a.size
    jaccard = inter / union if union else 0.0
    return dot_over_n, jaccard


def pairwise_overlap_matrix(binary_layer: np.ndarray) -> np.ndarray:
    """dot/N between every pair of task rows of one binarized layer."""
    m = binary_layer.astype(np.float64)
    return (m @ m.T) / m.shape[1]


def pca_project(rows: np.ndarray, k: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Top-k principal components of task rows (0/1 vectors treated as reals).

    Mean-centers, eigendecomposes the covariance (ddof 1), projects onto the
    leading eigenvectors. Sign convention: the largest-magnitude coordinate of
    each component is positive. Returns (coords [T, k], explained-variance
    fractions [k])."""
    rows = np.asarray(rows, dtype=np.float64)
    t = rows.shape[0]
    if t < k:
        raise ParameterError(f"need at least {k} rows for {k} components, got {t}")
    centered = rows - rows.mean(axis=0)
    # SVD of the centered data: eigenvalues of the covariance are s^2/(T-1)
    u, s, vt = np.linalg.svd(centered, full_matrices=False)
    eigvals = (s * s) / max(t - 1, 1)
    total_var = float(centered.var(axis=0, ddof=1).sum()) if t > 1 else 0.0
    for i in range(min(k, vt.shape[0])):
        pivot = np.argmax(np.abs(vt[i]))
        if vt[i, pivot] < 0:
            vt[i] = -vt[i]
            u[:, i] = -u[:, i]
    coords = u[:, :k] * s[:k]
    fractions = eigvals[:k] / total_var if total_var > 0 else np.zeros(k)
    return coords, fractions


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """Ranks 1..n with ties sharing their average rank."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size, dtype=np.float64)
    sorted_x = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sorted_x[j + 1] == sorted_x[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(x: np.ndarray, y: np.ndarray) -> float:
    """Rank correlation with average ranks for ties; 0 if either side is constant."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ContractError(f"spearman needs matching 1-D inputs, got {x.shape} and {y.shape}")
    if np.all(x == x[0]) or np.all(y == y[0]):
        return 0.0
    rx = _average_ranks(x)
    ry = _average_ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    return float((rx @ ry) / np.sqrt((rx @ rx) * (ry @ ry)))


def circular_angle_distance(a: float, b: float, period: float = np.pi) -> float:
    d = abs(a - b) % period
    return min(d, period - d)


def angle_structure_stat(
    overlaps: np.ndarray,
    angles: np.ndarray,
) -> float:
    """Spearman correlation between circular angle distance and gate overlap
    over all unordered task pairs. Strongly negative when similar rotations
    recruit similar gates."""
    t = angles.shape[0]
    if t < 3:
        raise ParameterError(f"need at least 3 tasks, got {t}")
    if overlaps.shape != (t, t):
        raise ContractError(f"overlap matrix {overlaps.shape} does not match {t} tasks")
    dists, joint = [], []
    for i in range(t):
        for j in range(i + 1, t):
            dists.append(circular_angle_distance(angles[i], angles[j]))
            joint.append(overlaps[i, j])
    return spearman(np.array(dists), np.array(joint))
