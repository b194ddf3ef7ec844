"""Run-number predictions, windowed estimates, RUL fractions and error reports."""

from __future__ import annotations

import csv
import hashlib
import io
from collections import defaultdict
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .nn.model import ModelParams, predict
from .spectrogram import EmptyInputError, Spectrogram

# A predictor maps a stack of spectrogram values (K, B, N) to K run numbers.
Predictor = Callable[[np.ndarray], np.ndarray]


def model_predictor(model: ModelParams, batch_size: int = 64) -> Predictor:
    def run(values):
        return predict(model, values, batch_size) * model.arch.n_total
    return run


def _as_predictor(model) -> Predictor:
    return model_predictor(model) if isinstance(model, ModelParams) else model


def predict_run(model, sg: Spectrogram) -> float:
    """Eval-mode run-number estimate, unclamped."""
    return float(np.asarray(_as_predictor(model)(sg.values[None]))[0])


def window_runs(run_id: int, w: int, n_total: int) -> list[int]:
    """Runs in the length-``w`` window centred on ``run_id``, clamped to [1, n_total]."""
    if w < 1 or w % 2 == 0:
        raise ValueError(f"window must be an odd positive integer, got {w}")
    if not 1 <= run_id <= n_total:
        raise ValueError(f"run {run_id} outside 1..{n_total}")
    h = w // 2
    return list(range(max(1, run_id - h), min(n_total, run_id + h) + 1))


def windowed_from_predictions(preds: Mapping[int, float], run_id: int, w: int, n_total: int,
                              center: float | None = None) -> float:
    """Mean of the per-run predictions in the window around ``run_id``.

    Runs missing from ``preds`` are skipped. ``center`` replaces the entry for
    ``run_id`` itself (used when the centre is an augmented variant).
    """
    vals = []
    for r in window_runs(run_id, w, n_total):
        if r == run_id and center is not None:
            vals.append(center)
        elif r in preds:
            vals.append(preds[r])
    if not vals:
        raise KeyError(f"no predictions available around run {run_id}")
    return float(np.mean(vals))


def windowed_predict(model, runs_dataset: Sequence[Spectrogram], run_id: int, w: int = 5,
                     n_total: int | None = None) -> float:
    by_run = {s.run_label: s for s in runs_dataset}
    if run_id not in by_run:
        raise KeyError(f"run {run_id} not in dataset")
    n_total = n_total or max(by_run)
    runs = [r for r in window_runs(run_id, w, n_total) if r in by_run]
    preds = _as_predictor(model)(np.stack([by_run[r].values for r in runs]))
    return float(np.mean(np.asarray(preds, dtype=np.float64)))


def error_pct(pred, true_run, n_total: int):
    if n_total < 1:
        raise ValueError("n_total must be >= 1")
    return (np.asarray(pred, dtype=np.float64) - true_run) / n_total * 100.0


def rul_fraction(pred, n_total: int):
    """Remaining life fraction; raw, may leave [0, 1] when the prediction overshoots."""
    if n_total < 1:
        raise ValueError("n_total must be >= 1")
    return (n_total - np.asarray(pred, dtype=np.float64)) / n_total


def clamp_fraction(f):
    return np.clip(f, 0.0, 1.0)


@dataclass
class RunStats:
    run: int
    count: int
    mean_pred_single: float
    mean_pred_win: float
    mean_err_single: float
    std_err_single: float
    mean_err_win: float
    std_err_win: float


@dataclass
class EvalReport:
    n_total: int
    window: int
    runs: list[RunStats]
    errors_single: np.ndarray  # every test item, % of tool life, canonical order
    errors_win: np.ndarray

    @property
    def max_abs_error_pct_single(self) -> float:
        return max(abs(r.mean_err_single) for r in self.runs)

    @property
    def max_abs_error_pct_win(self) -> float:
        return max(abs(r.mean_err_win) for r in self.runs)

    @property
    def max_abs_item_error_pct_single(self) -> float:
        return float(np.max(np.abs(self.errors_single)))

    @property
    def max_abs_item_error_pct_win(self) -> float:
        return float(np.max(np.abs(self.errors_win)))

    @property
    def mean_abs_error_pct_single(self) -> float:
        return float(np.mean(np.abs(self.errors_single)))

    @property
    def mean_abs_error_pct_win(self) -> float:
        return float(np.mean(np.abs(self.errors_win)))

    @property
    def var_single(self) -> float:
        return float(np.var(self.errors_single))

    @property
    def var_win(self) -> float:
        return float(np.var(self.errors_win))

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        tag = f"win{self.window}"
        wr.writerow(["run", "mean_err_pct_single", "std_err_pct_single",
                     f"mean_err_pct_{tag}", f"std_err_pct_{tag}"])
        for r in self.runs:
            wr.writerow([r.run, _fmt(r.mean_err_single), _fmt(r.std_err_single),
                         _fmt(r.mean_err_win), _fmt(r.std_err_win)])
        wr.writerow(["max", _fmt(self.max_abs_error_pct_single),
                     _fmt(max(r.std_err_single for r in self.runs)),
                     _fmt(self.max_abs_error_pct_win),
                     _fmt(max(r.std_err_win for r in self.runs))])
        return buf.getvalue()

    def plot_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["run", "true", "pred_single", f"pred_win{self.window}"])
        for r in self.runs:
            wr.writerow([r.run, r.run, _fmt(r.mean_pred_single), _fmt(r.mean_pred_win)])
        return buf.getvalue()


def _fmt(x: float) -> str:
    # fixed precision keeps reports stable; rounding first avoids "-0.000000"
    return f"{round(float(x), 6) + 0.0:.6f}"


def _canonical(items: Sequence[Spectrogram]) -> list[Spectrogram]:
    return sorted(items, key=lambda s: (s.run_label, hashlib.sha256(s.values.tobytes()).digest()))


def _per_run_mean(items, preds) -> dict[int, float]:
    groups = defaultdict(list)
    for s, p in zip(items, preds):
        groups[s.run_label].append(p)
    return {r: float(np.mean(np.sort(v))) for r, v in groups.items()}


def evaluate(model, test_set: Sequence[Spectrogram], n_total: int, w: int = 5,
             context: Sequence[Spectrogram] | None = None) -> EvalReport:
    """Per-run error statistics for the single and windowed predictors.

    ``context`` supplies the neighbouring runs for the window (typically the
    full un-augmented dataset); by default the test set itself is used. The
    centre of every window is the test item's own prediction.
    """
    if len(test_set) == 0:
        raise EmptyInputError("empty test set")
    pred_fn = _as_predictor(model)
    items = _canonical(test_set)
    preds = np.asarray(pred_fn(np.stack([s.values for s in items])), dtype=np.float64)
    if context is None:
        ctx = _per_run_mean(items, preds)
    else:
        ctx_items = _canonical(context)
        ctx = _per_run_mean(ctx_items, np.asarray(pred_fn(np.stack([s.values for s in ctx_items])),
                                                  dtype=np.float64))
    win = np.array([windowed_from_predictions(ctx, s.run_label, w, n_total, center=p)
                    for s, p in zip(items, preds)])
    labels = np.array([s.run_label for s in items])
    err_s = error_pct(preds, labels, n_total)
    err_w = error_pct(win, labels, n_total)
    runs = []
    for r in sorted(set(labels.tolist())):
        m = labels == r
        runs.append(RunStats(r, int(m.sum()), float(np.mean(preds[m])), float(np.mean(win[m])),
                             float(np.mean(err_s[m])), float(np.std(err_s[m])),
                             float(np.mean(err_w[m])), float(np.std(err_w[m]))))
    return EvalReport(n_total, w, runs, err_s, err_w)
