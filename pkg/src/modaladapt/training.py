"""Training strategies for the multimodal model.

Strategies
----------
VL      text path only (vanilla multi-speaker model)
SS      text path first, then the speech encoder alone with everything else frozen
STOCH   each utterance randomly uses one modality
JG      both paths, ``loss_main + alpha * loss_sub``
TL      both paths, ``loss_main + beta * sum_l distance(h_main^l, h_sub^l)``
JG_TL   both of the above

One optimizer step is taken per utterance.
"""

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .model import CapabilityError, ParamScope, backward_path, forward_speech, forward_text, select_params, sum_grads
from .numerics import AdamState, ShapeError, adam_step, mse_loss

log = logging.getLogger(__name__)

STRATEGIES = ("VL", "SS", "STOCH", "JG", "TL", "JG_TL")
SPEECH_STRATEGIES = ("SS", "STOCH", "JG", "TL", "JG_TL")
DISTANCES = ("squared_euclidean_mean", "squared_euclidean_sum", "cosine")

# Loss weights used for each strategy in the reference experiments.
DEFAULT_WEIGHTS = {
    "VL": (0.0, 0.0),
    "SS": (0.0, 0.0),
    "STOCH": (1.0, 0.0),
    "JG": (0.5, 0.0),
    "TL": (0.0, 1.0),
    "JG_TL": (0.2, 0.2),
}


class PlanError(ValueError):
    pass


def normalize_strategy(name):
    key = name.upper().replace("+", "_").replace("-", "_")
    if key not in STRATEGIES:
        raise PlanError(f"unknown strategy {name!r}; choose from {', '.join(STRATEGIES)}")
    return key


@dataclass
class LossWeights:
    alpha: float = 0.0
    beta: float = 0.0

    def __post_init__(self):
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise PlanError(f"{name} must be finite and >= 0, got {v}")


@dataclass
class EarlyStopping:
    patience: int = 5
    max_epochs: int = 128


class EarlyStopper:
    """Patience-based stopping on a validation loss that must strictly decrease."""

    def __init__(self, policy):
        self.policy = policy
        self.best = np.inf
        self.best_epoch = 0
        self.epoch = 0
        self.stale = 0
        self.reason = None

    def update(self, loss):
        """Record one epoch's loss; return True when training should stop."""
        self.epoch += 1
        improved = loss < self.best
        if improved:
            self.best = loss
            self.best_epoch = self.epoch
            self.stale = 0
        else:
            self.stale += 1
        if self.stale >= self.policy.patience:
            self.reason = "patience"
        elif self.epoch >= self.policy.max_epochs:
            self.reason = "max_epochs"
        return self.reason is not None

    @property
    def improved(self):
        return self.best_epoch == self.epoch


@dataclass
class TrainingPlan:
    strategy: str = "JG"
    weights: LossWeights = None
    tied_distance: str = "squared_euclidean_mean"
    early_stop: EarlyStopping = field(default_factory=EarlyStopping)
    lr: float = 0.001
    seed: int = 0
    stoch_p_speech: float = 0.5

    def __post_init__(self):
        self.strategy = normalize_strategy(self.strategy)
        if self.weights is None:
            self.weights = LossWeights(*DEFAULT_WEIGHTS[self.strategy])
        self.validate()

    def validate(self):
        s, w = self.strategy, self.weights
        if self.tied_distance not in DISTANCES:
            raise PlanError(f"unknown tied distance {self.tied_distance!r}")
        if s in ("JG", "JG_TL") and not w.alpha > 0:
            raise PlanError(f"{s} needs alpha > 0")
        if s in ("TL", "JG_TL") and not w.beta > 0:
            raise PlanError(f"{s} needs beta > 0")
        if s == "JG" and w.beta != 0:
            raise PlanError("JG takes no beta; use JG_TL")
        if s == "TL" and w.alpha != 0:
            raise PlanError("TL takes no alpha; use JG_TL")
        if s in ("VL", "SS") and (w.alpha or w.beta):
            raise PlanError(f"{s} takes no loss weights")
        if self.early_stop.patience < 1 or self.early_stop.max_epochs < 1:
            raise PlanError("early-stop patience and max_epochs must be >= 1")

    @property
    def uses_speech(self):
        return self.strategy in SPEECH_STRATEGIES


@dataclass
class LossBreakdown:
    loss_main: float
    loss_sub: float
    tied_penalty: float
    alpha: float = 0.0
    beta: float = 0.0
    total: float = None

    def __post_init__(self):
        if self.total is None:
            self.total = self.loss_main + self.alpha * self.loss_sub + self.beta * self.tied_penalty

    def recomposition_error(self):
        expect = self.loss_main + self.alpha * self.loss_sub + self.beta * self.tied_penalty
        return abs(self.total - expect) / max(abs(expect), 1e-300)

    @staticmethod
    def mean(items):
        items = list(items)
        n = len(items)
        return LossBreakdown(
            sum(b.loss_main for b in items) / n,
            sum(b.loss_sub for b in items) / n,
            sum(b.tied_penalty for b in items) / n,
            items[0].alpha, items[0].beta,
        )


@dataclass
class TrainingHistory:
    rows: list = field(default_factory=list)  # (epoch, split, LossBreakdown)
    stopped_epoch: int = 0
    stop_reason: str = ""
    best_epoch: int = 0

    def add(self, epoch, split, breakdown):
        self.rows.append((epoch, split, breakdown))

    def series(self, split, attr="total"):
        return [getattr(b, attr) for _, s, b in self.rows if s == split]

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["epoch", "split", "loss_main", "loss_sub", "tied_penalty", "total"])
            for epoch, split, b in self.rows:
                w.writerow([epoch, split, repr(b.loss_main), repr(b.loss_sub),
                            repr(b.tied_penalty), repr(b.total)])


# -- losses ------------------------------------------------------------------

def _layer_distance(a, b, distance):
    n = a.shape[0]
    if distance.startswith("squared_euclidean"):
        # "mean" averages over units as well as frames, so beta does not
        # scale with the layer width; "sum" sums units within a frame
        d = a - b
        denom = d.size if distance == "squared_euclidean_mean" else n
        value = float(np.sum(d * d)) / denom
        ga = 2.0 * d / denom
        return value, ga, -ga
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    na = np.maximum(na, 1e-300)
    nb = np.maximum(nb, 1e-300)
    dot = np.sum(a * b, axis=1, keepdims=True)
    cos = dot / (na * nb)
    value = float(np.sum(1.0 - cos)) / n
    ga = -(b / (na * nb) - cos * a / (na * na)) / n
    gb = -(a / (na * nb) - cos * b / (nb * nb)) / n
    return value, ga, gb


def tied_penalty(trace_main, trace_sub, tied_layers, distance="squared_euclidean_mean"):
    """Sum over tied common layers of the distance between the two paths' outputs.

    Returns ``(value, dH_main, dH_sub)`` with the gradient dicts keyed by
    1-based common-layer index.
    """
    if distance not in DISTANCES:
        raise ValueError(f"unknown distance {distance!r}")
    if trace_main.frames != trace_sub.frames:
        raise ShapeError(f"text path has {trace_main.frames} frames, speech path "
                         f"{trace_sub.frames}; paths must be frame-aligned")
    value = 0.0
    dm, ds = {}, {}
    for l in tied_layers:
        v, ga, gb = _layer_distance(trace_main.common_output(l), trace_sub.common_output(l), distance)
        value += v
        dm[l] = ga
        ds[l] = gb
    return value, dm, ds


@dataclass
class GradientSeeds:
    d_main: np.ndarray = None
    d_sub: np.ndarray = None
    extra_main: dict = field(default_factory=dict)
    extra_sub: dict = field(default_factory=dict)


def composite_loss(pred_main, pred_sub, target, traces, weights, tied_layers,
                   distance="squared_euclidean_mean"):
    """``loss_main + alpha*loss_sub + beta*tied`` with gradient seeds for both heads.

    ``traces`` is ``(trace_main, trace_sub)``; the sub entries may be None only
    when both weights are zero.
    """
    alpha, beta = weights.alpha, weights.beta
    trace_main, trace_sub = traces
    if pred_sub is None and (alpha > 0 or beta > 0):
        raise ValueError("loss weights need a speech-path forward pass")
    l_main, d_main = mse_loss(pred_main, target)
    seeds = GradientSeeds(d_main=d_main)
    l_sub = 0.0
    tied = 0.0
    if pred_sub is not None:
        if pred_sub.shape != target.shape:
            raise ShapeError(f"speech path predicted {pred_sub.shape}, target {target.shape}")
        l_sub, d_sub = mse_loss(pred_sub, target)
        seeds.d_sub = alpha * d_sub
        if beta > 0:
            tied, dm, ds = tied_penalty(trace_main, trace_sub, tied_layers, distance)
            seeds.extra_main = {l: beta * g for l, g in dm.items()}
            seeds.extra_sub = {l: beta * g for l, g in ds.items()}
    return LossBreakdown(l_main, l_sub, tied, alpha, beta), seeds


# -- steps ---------------------------------------------------------------------

def _need_speech(model, utt):
    if not model.has_speech_encoder:
        raise CapabilityError("strategy needs a speech encoder but the model has none")
    if utt.wave is None:
        raise ValueError(f"utterance {utt.id} has no waveform")


def _joint_step(model, utt, plan, need=None):
    _need_speech(model, utt)
    pred_m, tr_m = forward_text(model, utt.ling, utt.speaker)
    pred_s, tr_s = forward_speech(model, utt.wave, utt.speaker)
    tied_layers = model.config.tied_layer_indices
    bd, seeds = composite_loss(pred_m, pred_s, utt.acoustic, (tr_m, tr_s), plan.weights,
                               tied_layers, plan.tied_distance)
    g_m = backward_path(model, tr_m, seeds.d_main, seeds.extra_main, need)
    g_s = backward_path(model, tr_s, seeds.d_sub, seeds.extra_sub, need)
    return bd, sum_grads(g_m, g_s)


def _single_path_step(model, utt, modality, need=None):
    if modality == "text":
        pred, tr = forward_text(model, utt.ling, utt.speaker)
    else:
        _need_speech(model, utt)
        pred, tr = forward_speech(model, utt.wave, utt.speaker)
    loss, d = mse_loss(pred, utt.acoustic)
    grads = backward_path(model, tr, d, None, need)
    if modality == "text":
        return LossBreakdown(loss, 0.0, 0.0), grads
    return LossBreakdown(0.0, loss, 0.0, alpha=1.0), grads


def utterance_loss(model, utt, plan, phase=None):
    """Loss breakdown of one utterance without touching parameters."""
    mode = phase or plan.strategy
    if mode in ("VL", "SS1"):
        pred, _ = forward_text(model, utt.ling, utt.speaker)
        return LossBreakdown(mse_loss(pred, utt.acoustic)[0], 0.0, 0.0)
    _need_speech(model, utt)
    if mode == "SS2":
        pred, _ = forward_speech(model, utt.wave, utt.speaker)
        return LossBreakdown(0.0, mse_loss(pred, utt.acoustic)[0], 0.0, alpha=1.0)
    pred_m, tr_m = forward_text(model, utt.ling, utt.speaker)
    pred_s, tr_s = forward_speech(model, utt.wave, utt.speaker)
    if mode == "STOCH":
        return LossBreakdown(mse_loss(pred_m, utt.acoustic)[0], mse_loss(pred_s, utt.acoustic)[0],
                             0.0, alpha=1.0)
    weights = plan.weights
    tied = 0.0
    if weights.beta > 0:
        tied = tied_penalty(tr_m, tr_s, model.config.tied_layer_indices, plan.tied_distance)[0]
    return LossBreakdown(mse_loss(pred_m, utt.acoustic)[0], mse_loss(pred_s, utt.acoustic)[0],
                         tied, weights.alpha, weights.beta)


def validation_loss(model, utterances, plan, phase=None):
    return LossBreakdown.mean(utterance_loss(model, u, plan, phase) for u in utterances)


class _Runner:
    """Holds the optimizer and RNG streams across epochs of one training phase."""

    def __init__(self, model, plan, phase, need=None):
        self.model = model
        self.plan = plan
        self.phase = phase
        self.need = need
        self.optimizer = AdamState(lr=plan.lr)
        self.order_rng = np.random.default_rng([plan.seed, 1])
        self.modality_rng = np.random.default_rng([plan.seed, 2])
        self.modality_log = []

    def step(self, utt):
        p = self.phase
        if p in ("VL", "SS1"):
            bd, grads = _single_path_step(self.model, utt, "text", self.need)
        elif p == "SS2":
            bd, grads = _single_path_step(self.model, utt, "speech", self.need)
        elif p == "STOCH":
            modality = "speech" if self.modality_rng.random() < self.plan.stoch_p_speech else "text"
            self.modality_log.append(modality)
            bd, grads = _single_path_step(self.model, utt, modality, self.need)
        else:
            bd, grads = _joint_step(self.model, utt, self.plan, self.need)
        adam_step(self.optimizer, self.model.param_views(grads), grads)
        return bd, grads

    def epoch(self, utterances, on_step=None):
        order = self.order_rng.permutation(len(utterances))
        steps = []
        for i in order:
            bd, grads = self.step(utterances[i])
            if on_step is not None:
                on_step(bd, grads)
            steps.append(bd)
        return LossBreakdown.mean(steps)


def train_epoch(model, corpus, plan, runner=None, on_step=None):
    """One shuffled pass over the training split. Returns the mean breakdown."""
    if runner is None:
        runner = _Runner(model, plan, plan.strategy)
    return runner.epoch(corpus.train, on_step)


def _check_splits(corpus, plan):
    if not corpus.train or not corpus.valid:
        raise ValueError("corpus needs non-empty train and valid splits")
    if plan.uses_speech:
        for u in corpus.train + corpus.valid:
            if u.wave is None:
                raise ValueError(f"strategy {plan.strategy} needs waveforms; {u.id} has none")


def _run_phase(model, corpus, plan, phase, history, epoch_offset=0, need=None, on_step=None):
    runner = _Runner(model, plan, phase, need)
    stopper = EarlyStopper(plan.early_stop)
    best = model.snapshot()
    while True:
        tr = runner.epoch(corpus.train, on_step)
        va = validation_loss(model, corpus.valid, plan, phase)
        history.add(epoch_offset + stopper.epoch + 1, "train", tr)
        history.add(epoch_offset + stopper.epoch + 1, "valid", va)
        stop = stopper.update(va.total)
        if stopper.improved:
            best = model.snapshot()
        log.info("%s epoch %d train %.5f valid %.5f", phase, stopper.epoch, tr.total, va.total)
        if stop:
            break
    model.restore(best)
    history.stopped_epoch = epoch_offset + stopper.epoch
    history.stop_reason = stopper.reason
    history.best_epoch = epoch_offset + stopper.best_epoch
    return runner


def fit(model, corpus, plan, on_step=None):
    """Train with early stopping on validation total loss; keeps the best parameters."""
    if plan.strategy == "SS":
        return train_step_by_step(model, corpus, plan, on_step)
    _check_splits(corpus, plan)
    if plan.uses_speech and not model.has_speech_encoder:
        raise CapabilityError(f"strategy {plan.strategy} needs a model with a speech encoder")
    history = TrainingHistory()
    _run_phase(model, corpus, plan, plan.strategy, history, on_step=on_step)
    model.meta["strategy"] = plan.strategy
    model.meta["speech_encoder_trained"] = plan.uses_speech
    return history


def train_step_by_step(model, corpus, plan, on_step=None):
    """Text stack first, then the speech encoder alone against the same targets."""
    _check_splits(corpus, plan)
    if not model.has_speech_encoder:
        raise CapabilityError("step-by-step training needs a speech encoder")
    history = TrainingHistory()
    text_ids = select_params(model, ParamScope("all")) - select_params(model, ParamScope("speech_encoder_only"))
    _run_phase(model, corpus, plan, "SS1", history, need=text_ids, on_step=on_step)
    offset = history.stopped_epoch
    speech_ids = select_params(model, ParamScope("speech_encoder_only"))
    _run_phase(model, corpus, plan, "SS2", history, epoch_offset=offset, need=speech_ids,
               on_step=on_step)
    model.meta["strategy"] = "SS"
    model.meta["speech_encoder_trained"] = True
    return history


def train(model, corpus, plan, on_step=None):
    return fit(model, corpus, plan, on_step)
