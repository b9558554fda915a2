"""Objective measures: mel-cepstral distortion (dB) and F0 RMSE, plus report rows."""

import csv
import math
from collections import defaultdict
from dataclasses import astuple, dataclass, fields

import numpy as np

from .data import LOG_F0_CHANNEL, NUM_CEPSTRAL, VOICING_CHANNEL
from .numerics import ShapeError

MCD_CONST = 10.0 / math.log(10.0) * math.sqrt(2.0)
# 0th coefficient (energy) is excluded by convention
DEFAULT_CEPSTRAL_DIMS = tuple(range(1, NUM_CEPSTRAL))


class EmptySupport(ValueError):
    """No frame is voiced in both sequences."""


def mcd_frames(ref, pred, dims=DEFAULT_CEPSTRAL_DIMS):
    if ref.shape != pred.shape:
        raise ShapeError(f"reference {ref.shape} vs prediction {pred.shape}")
    dims = list(dims)
    if not dims:
        raise ValueError("empty cepstral dimension set")
    if min(dims) < 0 or max(dims) >= ref.shape[1]:
        raise ValueError(f"cepstral dims {dims} outside {ref.shape[1]} columns")
    diff = ref[:, dims] - pred[:, dims]
    return MCD_CONST * np.sqrt(np.sum(diff * diff, axis=1))


def mcd_db(ref, pred, dims=DEFAULT_CEPSTRAL_DIMS):
    return float(np.mean(mcd_frames(ref, pred, dims)))


def _f0_errors(ref, pred, f0_channel, vuv_channel, log_scale):
    if ref.shape != pred.shape:
        raise ShapeError(f"reference {ref.shape} vs prediction {pred.shape}")
    mask = (ref[:, vuv_channel] > 0.5) & (pred[:, vuv_channel] > 0.5)
    if log_scale:
        err = ref[mask, f0_channel] - pred[mask, f0_channel]
    else:
        err = np.exp(ref[mask, f0_channel]) - np.exp(pred[mask, f0_channel])
    return err


def f0_rmse(ref, pred, f0_channel=LOG_F0_CHANNEL, vuv_channel=VOICING_CHANNEL, log_scale=False):
    """RMSE of F0 in Hz over frames voiced in both sequences.

    The F0 channel holds log-F0; ``log_scale=True`` reports the error of the
    log values instead of Hz.
    """
    err = _f0_errors(ref, pred, f0_channel, vuv_channel, log_scale)
    if err.size == 0:
        raise EmptySupport("no frames are voiced in both reference and prediction")
    return float(np.sqrt(np.mean(err * err)))


@dataclass
class EvalRow:
    model: str
    strategy: str
    speaker: str
    mode: str
    n_adapt: int
    mcd_db: float
    f0_rmse: float
    frames: int

    def __post_init__(self):
        if self.mcd_db < 0 or not (self.f0_rmse >= 0 or math.isnan(self.f0_rmse)):
            raise ValueError("metrics must be non-negative")


REPORT_COLUMNS = tuple(f.name for f in fields(EvalRow))


def evaluate(predict, utterances, model_tag="", strategy="", mode="baseline", n_adapt=0,
             dims=DEFAULT_CEPSTRAL_DIMS):
    """Score ``predict(utt) -> acoustic matrix`` per speaker.

    Aggregates are frame-weighted: MCD is the mean over all frames of the
    speaker, F0 RMSE pools all mutually voiced frames. Utterances are scored
    in id order, so the result does not depend on the input order. A speaker
    with no mutually voiced frame gets ``nan`` F0 RMSE.
    """
    if not utterances:
        raise ValueError("no test utterances")
    per = defaultdict(lambda: [0.0, 0, 0.0, 0])
    for u in sorted(utterances, key=lambda u: u.id):
        pred = predict(u)
        acc = per[u.speaker]
        acc[0] += float(np.sum(mcd_frames(u.acoustic, pred, dims)))
        acc[1] += u.frames
        err = _f0_errors(u.acoustic, pred, LOG_F0_CHANNEL, VOICING_CHANNEL, False)
        acc[2] += float(np.sum(err * err))
        acc[3] += err.size
    rows = []
    for spk in sorted(per):
        mcd_sum, frames, f0_sq, voiced = per[spk]
        f0 = math.sqrt(f0_sq / voiced) if voiced else math.nan
        rows.append(EvalRow(model_tag, strategy, spk, mode, int(n_adapt), mcd_sum / frames, f0, frames))
    return rows


def write_report_csv(rows, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in astuple(r)])


def read_report_csv(path):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    out = []
    for r in rows:
        out.append(EvalRow(r["model"], r["strategy"], r["speaker"], r["mode"], int(r["n_adapt"]),
                           float(r["mcd_db"]), float(r["f0_rmse"]), int(r["frames"])))
    return out


def summarize(rows):
    """Text table grouped by (model, mode, n_adapt) with frame-weighted means."""
    groups = defaultdict(list)
    for r in rows:
        groups[(r.model, r.strategy, r.mode, r.n_adapt)].append(r)
    lines = [f"{'model':<12} {'strategy':<8} {'mode':<13} {'#adapt':>6} {'MCD [dB]':>9} {'F0 RMSE':>8}"]
    for key in sorted(groups):
        rs = groups[key]
        frames = sum(r.frames for r in rs)
        mcd = sum(r.mcd_db * r.frames for r in rs) / frames
        f0s = [r for r in rs if not math.isnan(r.f0_rmse)]
        f0 = sum(r.f0_rmse * r.frames for r in f0s) / max(sum(r.frames for r in f0s), 1)
        m, s, mode, n = key
        lines.append(f"{m:<12} {s:<8} {mode:<13} {n:>6} {mcd:>9.3f} {f0:>8.2f}")
    return "\n".join(lines) + "\n"
