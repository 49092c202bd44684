"""Evaluation metrics and report assembly.

Emotion: per-class precision/recall/F1 (percent) from a confusion matrix,
with zero metrics for empty denominators and macro averages over classes
that have support.  Personality: per-trait MAE in the original label space
plus binary classification metrics with the evaluated split's ground-truth
trait mean as the class boundary (ties count as "high").
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from . import model as mdl
from .corpus import EMOTIONS, TRAITS, CorpusManifest
from .training import Checkpoint


@dataclass
class ClassificationReport:
    confusion: np.ndarray  # (classes, classes), rows = truth
    precision: np.ndarray  # percent; 0.0 whenever a denominator is empty
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray

    @property
    def macro_precision(self) -> float:
        return float(np.mean(self.precision[self.support > 0]))

    @property
    def macro_recall(self) -> float:
        return float(np.mean(self.recall[self.support > 0]))

    @property
    def macro_f1(self) -> float:
        return float(np.mean(self.f1[self.support > 0]))


def prf1(predictions, truths, num_classes: int) -> ClassificationReport:
    """Precision/recall/F1 per class, as percentages in [0, 100]."""
    predictions = np.asarray(predictions, dtype=np.intp)
    truths = np.asarray(truths, dtype=np.intp)
    if predictions.shape != truths.shape:
        raise ValueError("predictions and truths differ in length")
    confusion = np.zeros((num_classes, num_classes), dtype=np.intp)
    for t, p in zip(truths, predictions):
        confusion[t, p] += 1
    support = confusion.sum(axis=1)
    predicted = confusion.sum(axis=0)
    tp = np.diag(confusion).astype(np.float64)
    precision = np.divide(
        tp, predicted, out=np.zeros(num_classes), where=predicted > 0
    )
    recall = np.divide(tp, support, out=np.zeros(num_classes), where=support > 0)
    denom = precision + recall
    f1 = np.divide(
        2.0 * precision * recall, denom, out=np.zeros(num_classes), where=denom > 0
    )
    for arr in (precision, recall, f1):
        arr *= 100.0
    return ClassificationReport(
        confusion=confusion,
        precision=precision,
        recall=recall,
        f1=f1,
        support=support,
    )


def mae(pred: np.ndarray, truth: np.ndarray) -> float:
    """Mean absolute error over one vector pair."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError("pred and truth differ in shape")
    return float(np.mean(np.abs(pred - truth)))


def binarize_by_mean(scores, trait_mean: float) -> np.ndarray:
    """score >= mean -> high (1), else low (0)."""
    return (np.asarray(scores, dtype=np.float64) >= trait_mean).astype(np.intp)


@dataclass
class RegressionReport:
    mae: np.ndarray  # per trait
    accuracy: np.ndarray  # percent, per trait
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    thresholds: np.ndarray  # ground-truth trait means used as boundaries

    @property
    def mean_mae(self) -> float:
        return float(np.mean(self.mae))

    @property
    def mean_f1(self) -> float:
        return float(np.mean(self.f1))


def regression_report(pred: np.ndarray, truth: np.ndarray) -> RegressionReport:
    """Per-trait MAE plus binary metrics at the truth-mean boundary."""
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    truth = np.atleast_2d(np.asarray(truth, dtype=np.float64))
    n_traits = truth.shape[1]
    maes = np.abs(pred - truth).mean(axis=0)
    thresholds = truth.mean(axis=0)
    acc = np.zeros(n_traits)
    prec = np.zeros(n_traits)
    rec = np.zeros(n_traits)
    f1 = np.zeros(n_traits)
    for t in range(n_traits):
        p_bin = binarize_by_mean(pred[:, t], thresholds[t])
        g_bin = binarize_by_mean(truth[:, t], thresholds[t])
        tp = int(np.sum((p_bin == 1) & (g_bin == 1)))
        fp = int(np.sum((p_bin == 1) & (g_bin == 0)))
        fn = int(np.sum((p_bin == 0) & (g_bin == 1)))
        acc[t] = 100.0 * np.mean(p_bin == g_bin)
        prec[t] = 100.0 * tp / (tp + fp) if tp + fp else 0.0
        rec[t] = 100.0 * tp / (tp + fn) if tp + fn else 0.0
        f1[t] = (
            2.0 * prec[t] * rec[t] / (prec[t] + rec[t]) if prec[t] + rec[t] else 0.0
        )
    return RegressionReport(
        mae=maes, accuracy=acc, precision=prec, recall=rec, f1=f1,
        thresholds=thresholds,
    )


@dataclass
class EvaluationResult:
    task: str
    method: str
    per_language: dict
    overall: object  # ClassificationReport | RegressionReport

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out)
        sections = [*sorted(self.per_language.items()), ("all", self.overall)]
        if self.task == "emotion":
            writer.writerow(["method", "language", "class", "precision", "recall", "f1"])
            for lang, rep in sections:
                for c, name in enumerate(EMOTIONS):
                    if rep.support[c] == 0 and rep.confusion[:, c].sum() == 0:
                        writer.writerow([self.method, lang, name, "", "", ""])
                    else:
                        writer.writerow(
                            [self.method, lang, name]
                            + [f"{v:.1f}" for v in (rep.precision[c], rep.recall[c], rep.f1[c])]
                        )
                writer.writerow(
                    [self.method, lang, "average"]
                    + [
                        f"{v:.1f}"
                        for v in (rep.macro_precision, rep.macro_recall, rep.macro_f1)
                    ]
                )
        else:
            writer.writerow(
                ["method", "language", "trait", "mae", "accuracy", "precision", "recall", "f1"]
            )
            for lang, rep in sections:
                for t, name in enumerate(TRAITS):
                    writer.writerow(
                        [self.method, lang, name, f"{rep.mae[t]:.4f}"]
                        + [
                            f"{v:.1f}"
                            for v in (
                                rep.accuracy[t],
                                rep.precision[t],
                                rep.recall[t],
                                rep.f1[t],
                            )
                        ]
                    )
                writer.writerow(
                    [self.method, lang, "average", f"{rep.mean_mae:.4f}"]
                    + [
                        f"{v:.1f}"
                        for v in (
                            float(np.mean(rep.accuracy)),
                            float(np.mean(rep.precision)),
                            float(np.mean(rep.recall)),
                            rep.mean_f1,
                        )
                    ]
                )
        return out.getvalue()

    def to_text(self) -> str:
        lines = [f"task: {self.task}  method: {self.method}"]
        sections = [*sorted(self.per_language.items()), ("all", self.overall)]
        if self.task == "emotion":
            for lang, rep in sections:
                lines.append(f"\n[{lang}]  (n={int(rep.support.sum())})")
                lines.append(f"  {'class':<12} {'P':>6} {'R':>6} {'F1':>6}")
                for c, name in enumerate(EMOTIONS):
                    if rep.support[c] == 0 and np.isnan(rep.f1[c]):
                        lines.append(f"  {name:<12} {'-':>6} {'-':>6} {'-':>6}")
                    else:
                        lines.append(
                            f"  {name:<12} {rep.precision[c]:>6.1f} "
                            f"{rep.recall[c]:>6.1f} {rep.f1[c]:>6.1f}"
                        )
                lines.append(
                    f"  {'average':<12} {rep.macro_precision:>6.1f} "
                    f"{rep.macro_recall:>6.1f} {rep.macro_f1:>6.1f}"
                )
        else:
            for lang, rep in sections:
                lines.append(f"\n[{lang}]")
                lines.append(
                    f"  {'trait':<6} {'MAE':>8} {'A':>6} {'P':>6} {'R':>6} {'F1':>6}"
                )
                for t, name in enumerate(TRAITS):
                    lines.append(
                        f"  {name:<6} {rep.mae[t]:>8.4f} {rep.accuracy[t]:>6.1f} "
                        f"{rep.precision[t]:>6.1f} {rep.recall[t]:>6.1f} {rep.f1[t]:>6.1f}"
                    )
                lines.append(
                    f"  {'avg':<6} {rep.mean_mae:>8.4f} "
                    f"{float(np.mean(rep.accuracy)):>6.1f} "
                    f"{float(np.mean(rep.precision)):>6.1f} "
                    f"{float(np.mean(rep.recall)):>6.1f} {rep.mean_f1:>6.1f}"
                )
        return "\n".join(lines)


def collect_predictions(
    checkpoint: Checkpoint, manifest: CorpusManifest, split: str = "test", threads: int = 1
):
    """Model outputs for every row of the split, in manifest order.

    Personality scores are inverse-transformed to the original label space
    per language when the checkpoint carries a label transform.
    """
    if checkpoint.config.task != manifest.task:
        raise ValueError(
            f"task mismatch: checkpoint is '{checkpoint.config.task}', "
            f"manifest is '{manifest.task}'"
        )
    rows = [r for r in manifest.rows if r.split == split]

    def run_one(row):
        sample = manifest.load_sample(row)
        out = mdl.predict(checkpoint.params, checkpoint.config, sample)
        if manifest.task == "personality" and checkpoint.label_transform is not None:
            out = checkpoint.label_transform.invert(out, row.language)
        return out

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            outputs = list(pool.map(run_one, rows))
    else:
        outputs = [run_one(r) for r in rows]
    return rows, outputs


def evaluate(
    checkpoint: Checkpoint,
    manifest: CorpusManifest,
    split: str = "test",
    method: str = "",
    threads: int = 1,
) -> EvaluationResult:
    """Run the model over a manifest split and assemble per-language reports."""
    rows, outputs = collect_predictions(checkpoint, manifest, split, threads)
    if not rows:
        raise ValueError(f"no rows in split '{split}'")
    method = method or checkpoint.config.front_end
    langs = sorted({r.language for r in rows})
    if manifest.task == "emotion":
        truths = np.array([EMOTIONS.index(r.emotion) for r in rows])
        preds = np.array([int(np.argmax(o)) for o in outputs])
        per_language = {
            lang: prf1(
                preds[[i for i, r in enumerate(rows) if r.language == lang]],
                truths[[i for i, r in enumerate(rows) if r.language == lang]],
                len(EMOTIONS),
            )
            for lang in langs
        }
        overall = prf1(preds, truths, len(EMOTIONS))
    else:
        truths = np.array([r.traits for r in rows])
        preds = np.array(outputs)
        per_language = {}
        for lang in langs:
            idx = [i for i, r in enumerate(rows) if r.language == lang]
            per_language[lang] = regression_report(preds[idx], truths[idx])
        overall = regression_report(preds, truths)
    return EvaluationResult(
        task=manifest.task, method=method, per_language=per_language, overall=overall
    )
