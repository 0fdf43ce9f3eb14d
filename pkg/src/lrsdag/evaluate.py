"""Accuracy and confusion-matrix evaluation, embedding export, report tables.

Every model is scored in four cells: source/target test set crossed with
encoder bypassed/included.  For models without an encoder the bypassed
network is the model, so the with-encoder cells mirror the bypassed ones
and the row stays four columns wide in the report.
"""

import os
from dataclasses import dataclass, field

import numpy as np

from . import data

N_CLASSES = 10

CELLS = ("source_without", "source_with", "target_without", "target_with")


def predictions(net, ds, use_encoder=False, batch_size=512):
    """Predicted class per example; argmax ties go to the lowest index."""
    out = []
    for images, _ in data.batches(ds, batch_size):
        _, logits = net.forward(images, use_encoder=use_encoder)
        out.append(np.argmax(logits, axis=1))
    if not out:
        return np.zeros(0, dtype=np.int64)
    return np.concatenate(out)


def accuracy(net, ds, use_encoder=False):
    """Top-1 accuracy as a percentage."""
    preds = predictions(net, ds, use_encoder)
    return float(np.mean(preds == ds.labels) * 100.0)


def confusion_matrix(net, ds, use_encoder=False):
    """Counts indexed (true class, predicted class)."""
    preds = predictions(net, ds, use_encoder)
    matrix = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    np.add.at(matrix, (ds.labels, preds), 1)
    return matrix


def feature_matrix(net, ds, through_encoder=False, batch_size=512):
    """Split features over a dataset, flattened to N x k."""
    chunks = []
    for images, labels in data.batches(ds, batch_size):
        feats = net.forward_features(images)
        if through_encoder:
            for layer in net.encoder:
                feats = layer.forward(feats)
        chunks.append(feats.reshape(len(labels), -1))
    return np.concatenate(chunks)


@dataclass
class EvalReport:
    """Per-cell accuracy, confusion counts, and example counts."""

    accuracy: dict
    confusion: dict
    n_examples: dict
    metadata: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "accuracy": dict(self.accuracy),
            "confusion": {k: v.tolist() for k, v in self.confusion.items()},
            "n_examples": dict(self.n_examples),
            "metadata": dict(self.metadata),
        }

    @classmethod
    def from_dict(cls, payload):
        return cls(
            accuracy=dict(payload["accuracy"]),
            confusion={k: np.asarray(v, dtype=np.int64)
                       for k, v in payload["confusion"].items()},
            n_examples=dict(payload["n_examples"]),
            metadata=dict(payload.get("metadata", {})),
        )


def evaluate_pair(net, source_test, target_test, metadata=None):
    """Score both domains with the encoder bypassed and included."""
    has_encoder = net.encoder is not None
    acc, conf, counts = {}, {}, {}
    for domain, ds in (("source", source_test), ("target", target_test)):
        for tag in ("without", "with"):
            key = f"{domain}_{tag}"
            if tag == "with" and not has_encoder:
                acc[key] = acc[f"{domain}_without"]
                conf[key] = conf[f"{domain}_without"].copy()
                counts[key] = counts[f"{domain}_without"]
                continue
            preds = predictions(net, ds, use_encoder=tag == "with")
            matrix = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
            np.add.at(matrix, (ds.labels, preds), 1)
            conf[key] = matrix
            counts[key] = len(ds)
            acc[key] = float(np.trace(matrix) / len(ds) * 100.0)
    return EvalReport(accuracy=acc, confusion=conf, n_examples=counts,
                      metadata=dict(metadata or {}))


def _write_feature_csv(path, features, labels):
    lines = []
    for label, row in zip(labels, features):
        lines.append(",".join([str(int(label))] + [f"{v:.12g}" for v in row]))
    data.atomic_write_text(path, "\n".join(lines) + "\n")


def export_embeddings(net, source_ds, target_ds, out_dir, cap=None, seed=0):
    """Write fS/fT (and hfT when an encoder is attached) feature CSVs.

    Each row is the label followed by the flattened split features at 12
    significant digits.  With a cap, rows are a stratified subset.
    """
    os.makedirs(out_dir, exist_ok=True)

    def clip(ds):
        if cap is None or cap >= len(ds):
            return ds
        return data.subsample_labeled(ds, cap / len(ds), seed)

    source = clip(source_ds)
    target = clip(target_ds)
    paths = {}
    fs_path = os.path.join(out_dir, "fS.csv")
    _write_feature_csv(fs_path, feature_matrix(net, source), source.labels)
    paths["fS"] = fs_path
    ft_path = os.path.join(out_dir, "fT.csv")
    _write_feature_csv(ft_path, feature_matrix(net, target), target.labels)
    paths["fT"] = ft_path
    if net.encoder is not None:
        hft_path = os.path.join(out_dir, "hfT.csv")
        _write_feature_csv(hft_path, feature_matrix(net, target, through_encoder=True),
                           target.labels)
        paths["hfT"] = hft_path
    return paths


def render_report(records):
    """Render accuracy rows as (csv_text, aligned_text), 2-decimal values."""
    header = ("method", "sampling", "source_without_e", "target_without_e",
              "source_with_e", "target_with_e")
    rows = []
    for rec in records:
        acc = rec.report.accuracy
        rows.append((
            rec.method, rec.strategy,
            f"{acc['source_without']:.2f}", f"{acc['target_without']:.2f}",
            f"{acc['source_with']:.2f}", f"{acc['target_with']:.2f}",
        ))
    csv_text = "\n".join([",".join(header)] + [",".join(r) for r in rows]) + "\n"

    labels = ("Method", "Sampling", "Source w/o E", "Target w/o E",
              "Source w/ E", "Target w/ E")
    widths = [max(len(labels[i]), *(len(r[i]) for r in rows)) if rows
              else len(labels[i]) for i in range(len(labels))]

    def fmt(values):
        cells = [v.ljust(widths[i]) if i < 2 else v.rjust(widths[i])
                 for i, v in enumerate(values)]
        return "  ".join(cells).rstrip()

    txt = "\n".join([fmt(labels)] + [fmt(r) for r in rows]) + "\n"
    return csv_text, txt


def write_report(records, out_dir):
    """Write report.csv and report.txt into out_dir atomically."""
    csv_text, txt = render_report(records)
    csv_path = os.path.join(out_dir, "report.csv")
    txt_path = os.path.join(out_dir, "report.txt")
    data.atomic_write_text(csv_path, csv_text)
    data.atomic_write_text(txt_path, txt)
    return csv_path, txt_path
