"""Retrieval evaluation: query/gallery split, mAP@k and recall-precision curves.

Labels are read only here, never during training. Relevance of a gallery
item to a query is label equality. The PR curve sweeps Hamming radii
0..M and micro-averages counts across queries; when no query retrieves
anything at a radius, precision defaults to 1.0 and the row is flagged.
"""

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .retrieval import knn_search

DEFAULT_QUERY_COUNT = 1000
DEFAULT_TOP_K = 1000


@dataclass(frozen=True)
class EvalConfig:
    query_count: int = DEFAULT_QUERY_COUNT
    top_k: int = DEFAULT_TOP_K
    seed: int = 0

    def __post_init__(self):
        if self.query_count < 1:
            raise ConfigError("query_count must be >= 1")
        if self.top_k < 1:
            raise ConfigError("top_k must be >= 1")


@dataclass(frozen=True)
class PRPoint:
    radius: int
    precision: float
    recall: float
    retrieved_empty: bool


@dataclass(frozen=True)
class EvalReport:
    map: float
    per_query_ap: list
    pr_curve: list
    config: EvalConfig
    bit_width: int


def split_query_gallery(db, config):
    """Disjoint query/gallery partition, queries drawn uniformly without replacement."""
    if db.labels is None:
        raise ConfigError("evaluation requires labels in the code database")
    n = len(db)
    if n <= config.query_count:
        raise ConfigError(
            f"database of {n} codes cannot supply {config.query_count} queries plus a gallery"
        )
    rng = np.random.default_rng(config.seed)
    query_rows = np.sort(rng.choice(n, size=config.query_count, replace=False))
    mask = np.zeros(n, dtype=bool)
    mask[query_rows] = True
    return db.subset(np.flatnonzero(mask)), db.subset(np.flatnonzero(~mask))


def average_precision(relevance, k):
    """AP over the first k ranks: mean of precision@i at relevant positions.

    Normalized by the number of relevant entries found within top k;
    0 when none are.
    """
    if k < 1:
        raise ConfigError("k must be >= 1")
    hits = 0
    acc = 0.0
    for i, rel in enumerate(relevance[:k], start=1):
        if rel:
            hits += 1
            acc += hits / i
    return acc / hits if hits else 0.0


def mean_ap(queries, gallery, k):
    """mAP@k over label-equality relevance, ranking the gallery per query."""
    if queries.labels is None or gallery.labels is None:
        raise ConfigError("mean_ap requires labels on both sides")
    gallery_label = dict(zip(gallery.ids.tolist(), gallery.labels.tolist()))
    per_query = []
    for row in range(len(queries)):
        neighbors = knn_search(gallery, queries.code(row), k)
        label = queries.labels[row]
        relevance = [gallery_label[nb.id] == label for nb in neighbors]
        per_query.append(average_precision(relevance, k))
    return float(np.mean(per_query)), per_query


def pr_curve(queries, gallery):
    """Micro-averaged precision/recall at every Hamming radius 0..M."""
    if queries.labels is None or gallery.labels is None:
        raise ConfigError("pr_curve requires labels on both sides")
    m = gallery.bit_width
    # distance and relevance matrices: queries x gallery
    dist = np.bitwise_count(
        queries.words[:, None, :] ^ gallery.words[None, :, :]
    ).sum(axis=2)
    relevant = queries.labels[:, None] == gallery.labels[None, :]
    total_relevant = int(relevant.sum())

    points = []
    for r in range(m + 1):
        retrieved = dist <= r
        n_retrieved = int(retrieved.sum())
        n_rel_retrieved = int((retrieved & relevant).sum())
        empty = n_retrieved == 0
        precision = 1.0 if empty else n_rel_retrieved / n_retrieved
        recall = 0.0 if total_relevant == 0 else n_rel_retrieved / total_relevant
        points.append(PRPoint(r, precision, recall, empty))
    return points


def evaluate(db, config):
    """Full protocol: split, rank, mAP@top_k and the radius PR curve."""
    queries, gallery = split_query_gallery(db, config)
    map_value, per_query = mean_ap(queries, gallery, config.top_k)
    curve = pr_curve(queries, gallery)
    return EvalReport(map_value, per_query, curve, config, db.bit_width)


def export_report(report, csv_path, json_path):
    """Write the PR curve as CSV and the headline numbers as JSON."""
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["radius", "precision", "recall", "retrieved_empty"])
        for p in report.pr_curve:
            writer.writerow(
                [p.radius, f"{p.precision:.12g}", f"{p.recall:.12g}",
                 int(p.retrieved_empty)]
            )
    with open(json_path, "w") as f:
        json.dump(
            {
                "map": report.map,
                "top_k": report.config.top_k,
                "query_count": report.config.query_count,
                "bit_width": report.bit_width,
                "seed": report.config.seed,
            },
            f,
            indent=2,
        )
        f.write("\n")
