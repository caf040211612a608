"""Measurement suite: flip-rate dynamics, retrieval quality, method comparison.

Flip statistics track how often units switch between active and inactive
for fixed examples across training epochs. Retrieval quality is reported as
average precision (normalized by the relevant count in the cutoff; the raw
unnormalized sum is available via normalize=False) and precision-recall
points. compare_methods reproduces the four-way comparison of softmax
classification against kNN on activations, pre-activations, and submasks.
"""

from __future__ import annotations

import csv
import io as _io
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .codestore import CodeStore, build, vote
from .errors import ConfigurationError, DimensionError
from .io import atomic_write_text
from .model import NetworkParams, layer_signals, resolve_layer, test_error
from .submask import masks_from_signals, unpack_rows

_QUERY_CHUNK = 512


@dataclass
class FlipLedger:
    """Per-epoch mask snapshots for a fixed, ordered set of tracked examples."""

    ids: np.ndarray
    length_bits: int
    epochs: list[int] = field(default_factory=list)
    snapshots: list[np.ndarray] = field(default_factory=list)

    def append(self, epoch: int, codes: np.ndarray) -> None:
        if self.epochs and epoch <= self.epochs[-1]:
            raise DimensionError(
                f"epochs must be strictly increasing, got {epoch} after "
                f"{self.epochs[-1]}"
            )
        codes = np.ascontiguousarray(codes, dtype=np.uint64)
        if codes.shape[0] != self.ids.shape[0]:
            raise DimensionError("snapshot row count does not match tracked ids")
        if self.snapshots and codes.shape != self.snapshots[0].shape:
            raise DimensionError("snapshot shape changed between epochs")
        self.epochs.append(epoch)
        self.snapshots.append(codes)


class FlipTracker:
    """Training hook that snapshots masks of tracked examples every epoch."""

    def __init__(self, features, ids, layer_index: int = -1, theta: float | None = None):
        self.features = np.atleast_2d(np.asarray(features, dtype=np.float64))
        self.ids = np.asarray(ids, dtype=np.int64)
        self.layer_index = layer_index
        self.theta = theta
        self.ledger: FlipLedger | None = None

    def __call__(self, epoch: int, net: NetworkParams) -> None:
        idx = resolve_layer(net, self.layer_index)
        postact, presyn = layer_signals(net, self.features, idx)
        codes, bits = masks_from_signals(
            net.specs[idx].activation, presyn, postact, self.theta
        )
        if self.ledger is None:
            self.ledger = FlipLedger(self.ids, bits)
        self.ledger.append(epoch, codes)


def flip_fraction(
    prev: np.ndarray, curr: np.ndarray, length_bits: int
) -> tuple[np.ndarray, float]:
    """Per-unit fraction of examples whose bit flipped, plus the unit mean."""
    prev = np.ascontiguousarray(prev, dtype=np.uint64)
    curr = np.ascontiguousarray(curr, dtype=np.uint64)
    if prev.shape != curr.shape:
        raise DimensionError(f"snapshot shapes differ: {prev.shape} vs {curr.shape}")
    if prev.shape[0] == 0:
        raise DimensionError("flip fraction needs at least one example")
    flips = unpack_rows(prev ^ curr, length_bits)
    per_unit = flips.mean(axis=0)
    return per_unit, float(per_unit.mean())


def flip_series(ledger: FlipLedger) -> np.ndarray:
    """Mean flip fraction between consecutive epochs; length = epochs - 1."""
    if len(ledger.snapshots) < 2:
        raise ValueError("flip series needs at least 2 recorded epochs")
    return np.array(
        [
            flip_fraction(a, b, ledger.length_bits)[1]
            for a, b in zip(ledger.snapshots, ledger.snapshots[1:])
        ]
    )


def average_precision_at(
    ranked_labels, query_label, k: int, normalize: bool = True
) -> float:
    """AP over the top k of a ranking; relevance is exact label match.

    Sums precision-at-r over relevant ranks r <= k, divided by the number
    of relevant items in the top k (0.0 when none are relevant).
    """
    ranked = np.asarray(ranked_labels)
    if ranked.size == 0:
        raise ValueError("empty ranking")
    if k < 1:
        raise ValueError("k must be positive")
    top = ranked[:k]
    rel = top == query_label
    hits = int(rel.sum())
    if hits == 0:
        return 0.0
    precision = np.cumsum(rel) / np.arange(1, top.size + 1)
    total = float(precision[rel].sum())
    return total / hits if normalize else total


def _ranked_label_matrix(
    store: CodeStore,
    query_codes: np.ndarray,
    max_k: int,
    query_ids: np.ndarray | None,
) -> np.ndarray:
    """Top-max_k neighbor labels per query row, store tie rule applied.

    Queries whose id exists in the store have that row excluded. Rows with
    fewer than max_k rankable neighbors are padded with label -1.
    """
    query_codes = np.ascontiguousarray(query_codes, dtype=np.uint64)
    n_q = query_codes.shape[0]
    row_of_id = {int(v): r for r, v in enumerate(store.ids)}
    sentinel = store.length_bits + 1
    ranked = np.full((n_q, max_k), -1, dtype=np.int32)
    for start in range(0, n_q, _QUERY_CHUNK):
        stop = min(start + _QUERY_CHUNK, n_q)
        dists = kernels.hamming_many(query_codes[start:stop], store.codes)
        for i in range(stop - start):
            d = dists[i]
            valid = len(store)
            if query_ids is not None:
                row = row_of_id.get(int(query_ids[start + i]))
                if row is not None:
                    d[row] = sentinel
                    valid -= 1
            kk = min(max_k, valid)
            rows = kernels.smallest_k(d, kk)
            ranked[start + i, :kk] = store.labels[rows]
    return ranked


def mean_average_precision(
    store: CodeStore,
    query_codes: np.ndarray,
    query_labels: np.ndarray,
    k: int,
    query_ids: np.ndarray | None = None,
    normalize: bool = True,
) -> float:
    """Mean AP@k over a labeled query set ranked against the store."""
    query_labels = np.asarray(query_labels)
    if query_labels.size == 0:
        raise ValueError("mean_average_precision needs at least one query")
    ranked = _ranked_label_matrix(store, query_codes, k, query_ids)
    return float(
        np.mean(
            [
                average_precision_at(ranked[i], query_labels[i], k, normalize)
                for i in range(query_labels.size)
            ]
        )
    )


def precision_recall_curve(
    store: CodeStore,
    query_codes: np.ndarray,
    query_labels: np.ndarray,
    max_k: int,
    query_ids: np.ndarray | None = None,
) -> tuple[list[tuple[float, float]], int]:
    """Mean (recall, precision) per cutoff r = 1..max_k over the query set.

    Recall divides by the store's relevant total for the query's class
    (minus the query itself when excluded). Queries whose class is absent
    contribute zero recall; their count is returned as a warning tally.
    """
    query_labels = np.asarray(query_labels)
    if query_labels.size == 0:
        raise ValueError("precision_recall_curve needs at least one query")
    if max_k < 1 or max_k > len(store):
        raise ValueError(f"max_k must lie in [1, {len(store)}]")
    class_totals = np.bincount(store.labels, minlength=store.class_count)
    row_of_id = {int(v): r for r, v in enumerate(store.ids)}

    ranked = _ranked_label_matrix(store, query_codes, max_k, query_ids)
    rel_cum = np.cumsum(ranked == query_labels[:, None], axis=1)
    precision = rel_cum / np.arange(1, max_k + 1)

    totals = np.empty(query_labels.size)
    missing = 0
    for i, label in enumerate(query_labels):
        total = int(class_totals[label]) if 0 <= label < store.class_count else 0
        if query_ids is not None:
            row = row_of_id.get(int(query_ids[i]))
            if row is not None and store.labels[row] == label:
                total -= 1
        if total <= 0:
            totals[i] = np.inf  # recall contribution pinned to zero
            missing += 1
        else:
            totals[i] = total
    recall = rel_cum / totals[:, None]
    points = list(zip(recall.mean(axis=0).tolist(), precision.mean(axis=0).tolist()))
    return points, missing


def knn_predict_masks_multi(
    store: CodeStore,
    query_codes: np.ndarray,
    ks,
    weighting: str,
    query_ids: np.ndarray | None = None,
) -> dict[int, np.ndarray]:
    """kNN-vote predictions over codes for several k from one ranking pass."""
    ks = sorted(set(int(k) for k in ks))
    if not ks or ks[0] < 1:
        raise ValueError("k values must be positive")
    query_codes = np.ascontiguousarray(query_codes, dtype=np.uint64)
    n_q = query_codes.shape[0]
    row_of_id = {int(v): r for r, v in enumerate(store.ids)}
    sentinel = store.length_bits + 1
    preds = {k: np.empty(n_q, dtype=np.int64) for k in ks}
    max_k = ks[-1]
    for start in range(0, n_q, _QUERY_CHUNK):
        stop = min(start + _QUERY_CHUNK, n_q)
        dists = kernels.hamming_many(query_codes[start:stop], store.codes)
        for i in range(stop - start):
            d = dists[i]
            valid = len(store)
            if query_ids is not None:
                row = row_of_id.get(int(query_ids[start + i]))
                if row is not None:
                    d[row] = sentinel
                    valid -= 1
            rows = kernels.smallest_k(d, min(max_k, valid))
            for k in ks:
                head = rows[: min(k, rows.size)]
                scores = vote(store.labels[head], d[head], weighting, store.class_count)
                preds[k][start + i] = int(np.argmax(scores))
    return preds


def knn_predict_masks(
    store: CodeStore,
    query_codes: np.ndarray,
    k: int,
    weighting: str,
    query_ids: np.ndarray | None = None,
) -> np.ndarray:
    return knn_predict_masks_multi(store, query_codes, [k], weighting, query_ids)[k]


def euclidean_knn_predict(
    ref_features: np.ndarray,
    ref_labels: np.ndarray,
    class_count: int,
    query_features: np.ndarray,
    k: int,
    weighting: str,
    ref_ids: np.ndarray | None = None,
    query_ids: np.ndarray | None = None,
    chunk: int = 256,
) -> np.ndarray:
    """kNN votes under Euclidean distance, same tie and weighting rules."""
    ref = np.asarray(ref_features, dtype=np.float64)
    queries = np.atleast_2d(np.asarray(query_features, dtype=np.float64))
    if ref.shape[1] != queries.shape[1]:
        raise DimensionError(
            f"query dim {queries.shape[1]} does not match reference dim {ref.shape[1]}"
        )
    labels = np.asarray(ref_labels)
    ref_sq = np.einsum("ij,ij->i", ref, ref)
    row_of_id = (
        {int(v): r for r, v in enumerate(ref_ids)}
        if ref_ids is not None and query_ids is not None
        else {}
    )
    preds = np.empty(queries.shape[0], dtype=np.int64)
    for start in range(0, queries.shape[0], chunk):
        stop = min(start + chunk, queries.shape[0])
        q = queries[start:stop]
        d2 = np.einsum("ij,ij->i", q, q)[:, None] + ref_sq[None, :] - 2.0 * (q @ ref.T)
        np.maximum(d2, 0.0, out=d2)
        for i in range(stop - start):
            d = d2[i]
            valid = ref.shape[0]
            if row_of_id:
                row = row_of_id.get(int(query_ids[start + i]))
                if row is not None:
                    d[row] = np.inf
                    valid -= 1
            rows = kernels.smallest_k(d, min(k, valid))
            scores = vote(labels[rows], np.sqrt(d[rows]), weighting, class_count)
            preds[start + i] = int(np.argmax(scores))
    return preds


@dataclass
class EvalReport:
    """Error counts per method, mAP values per k, and PR points."""

    error_counts: dict[str, tuple[int, float]] = field(default_factory=dict)
    map_at: dict[int, float] = field(default_factory=dict)
    pr_points: list[tuple[float, float]] = field(default_factory=list)


METHODS = ("softmax", "knn_activations", "knn_preactivations", "knn_submasks")


def compare_methods(
    net: NetworkParams,
    reference,
    queries,
    layer_index: int = -1,
    k: int = 5,
    weighting: str = "inverse_distance",
    theta: float | None = None,
    store: CodeStore | None = None,
) -> EvalReport:
    """Error counts of softmax vs kNN on activations, pre-activations, masks.

    The reference dataset supplies the real-valued neighbor sets; the mask
    store is built from it at the given layer unless one is passed in.
    Queries whose ids occur in the reference are self-excluded.
    """
    if reference.features.shape[1] != queries.features.shape[1]:
        raise DimensionError("reference and query feature dims differ")
    n_q = len(queries)
    kind = net.specs[resolve_layer(net, layer_index)].activation

    softmax_errors, softmax_rate = test_error(net, queries)
    ref_post, ref_pre = layer_signals(net, reference.features, layer_index)
    q_post, q_pre = layer_signals(net, queries.features, layer_index)

    if store is None:
        codes, bits = masks_from_signals(kind, ref_pre, ref_post, theta)
        store = build(codes, reference.labels, reference.ids, bits, reference.class_count)
    q_codes, q_bits = masks_from_signals(kind, q_pre, q_post, theta)
    if q_bits != store.length_bits:
        raise DimensionError(
            f"query mask width {q_bits} does not match store width "
            f"{store.length_bits}"
        )

    report = EvalReport()
    report.error_counts["softmax"] = (softmax_errors, softmax_rate)
    for name, ref_x, q_x in (
        ("knn_activations", ref_post, q_post),
        ("knn_preactivations", ref_pre, q_pre),
    ):
        preds = euclidean_knn_predict(
            ref_x,
            reference.labels,
            reference.class_count,
            q_x,
            k,
            weighting,
            ref_ids=reference.ids,
            query_ids=queries.ids,
        )
        errors = int(np.count_nonzero(preds != queries.labels))
        report.error_counts[name] = (errors, errors / n_q)
    preds = knn_predict_masks(store, q_codes, k, weighting, query_ids=queries.ids)
    errors = int(np.count_nonzero(preds != queries.labels))
    report.error_counts["knn_submasks"] = (errors, errors / n_q)
    return report


def report_text(report: EvalReport) -> str:
    """Flat key = value rendering of a report."""
    lines = []
    for name, (count, rate) in report.error_counts.items():
        lines.append(f"{name}_errors = {count}")
        lines.append(f"{name}_error_rate = {rate:.6f}")
    for k in sorted(report.map_at):
        lines.append(f"map_at_{k} = {report.map_at[k]:.6f}")
    lines.append(f"pr_point_count = {len(report.pr_points)}")
    return "\n".join(lines) + "\n"


def write_report(report: EvalReport, path) -> None:
    atomic_write_text(path, report_text(report))


def write_pr_csv(points, path) -> None:
    """PR points as CSV rows (cutoff, recall, precision) for external plotting."""
    buf = _io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["cutoff", "recall", "precision"])
    for r, (recall, precision) in enumerate(points, start=1):
        writer.writerow([r, f"{recall:.6f}", f"{precision:.6f}"])
    atomic_write_text(path, buf.getvalue())
