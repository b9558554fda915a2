"""Experiment configuration and the multi-speaker / adaptation-sweep pipelines."""

import json
import logging
import os
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .adaptation import AdaptationJob, adapt, init_new_speaker, synthesize_features
from .data import SyntheticTaskSpec, split_adaptation_subsets
from .metrics import EvalRow, evaluate
from .model import ConfigError, ModelConfig, build_model, forward_text
from .training import (
    DEFAULT_WEIGHTS,
    EarlyStopping,
    LossWeights,
    PlanError,
    TrainingPlan,
    fit,
    normalize_strategy,
)

log = logging.getLogger(__name__)

TABLE_STRATEGIES = ("VL", "SS", "JG", "TL", "JG_TL")
DEFAULT_SIZES = (10, 40, 160)
MODES = ("supervised", "unsupervised")

_MODEL_KEYS = {"hidden_width", "embedding_dim", "num_common_ff", "num_text_ff", "conv_width",
               "conv_stride", "conv_filters", "speaker_aware_layers", "tied_layer_indices"}
_TRAIN_KEYS = {"strategy", "alpha", "beta", "tied_distance", "patience", "max_epochs", "lr",
               "stoch_p_speech"}
_ADAPT_KEYS = {"sizes", "modes", "init_policy", "lr", "patience", "max_epochs", "valid_fraction"}


@dataclass
class ExperimentConfig:
    task: SyntheticTaskSpec = field(default_factory=SyntheticTaskSpec)
    model: dict = field(default_factory=dict)
    training: dict = field(default_factory=lambda: {"strategy": "JG", "alpha": 0.5})
    adaptation: dict = field(default_factory=lambda: {"sizes": list(DEFAULT_SIZES)})
    output_dir: str = "experiment"
    seed: int = 0
    corpus: str = None  # external manifest; synthetic corpus when None
    workers: int = 1
    full_dims: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name, keys, d in (("model", _MODEL_KEYS, self.model),
                              ("training", _TRAIN_KEYS, self.training),
                              ("adaptation", _ADAPT_KEYS, self.adaptation)):
            extra = set(d) - keys
            if extra:
                raise ConfigError(f"unknown {name} keys: {sorted(extra)}")
        self.plan()  # raises PlanError on Table-2 inconsistencies
        sizes = list(self.adaptation.get("sizes", DEFAULT_SIZES))
        if sizes != sorted(sizes) or not sizes or sizes[0] < 2:
            raise ConfigError(f"adaptation sizes must be ascending and >= 2: {sizes}")
        for m in self.adaptation.get("modes", MODES):
            if m not in MODES:
                raise ConfigError(f"unknown adaptation mode {m!r}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    def plan(self, strategy=None, seed=None):
        t = self.training
        strategy = normalize_strategy(strategy or t.get("strategy", "JG"))
        alpha, beta = t.get("alpha"), t.get("beta")
        if strategy in ("JG", "JG_TL") and alpha is None:
            raise PlanError(f"strategy {strategy} needs training.alpha")
        if strategy in ("TL", "JG_TL") and beta is None:
            raise PlanError(f"strategy {strategy} needs training.beta")
        if strategy == "STOCH" and alpha is None:
            alpha = 1.0
        return TrainingPlan(
            strategy,
            LossWeights(alpha or 0.0, beta or 0.0),
            t.get("tied_distance", "squared_euclidean_mean"),
            EarlyStopping(t.get("patience", 5), t.get("max_epochs", 128)),
            lr=t.get("lr", 0.001),
            seed=self.seed if seed is None else seed,
            stoch_p_speech=t.get("stoch_p_speech", 0.5),
        )

    def adapt_opts(self):
        """Keyword arguments for ``AdaptationJob`` from the adaptation section."""
        a = self.adaptation
        opts = {k: a[k] for k in ("init_policy", "lr", "valid_fraction") if k in a}
        opts["early_stop"] = EarlyStopping(a.get("patience", 5), a.get("max_epochs", 128))
        return opts

    def model_config(self, strategy, linguistic_dim, acoustic_dim):
        kw = dict(self.model)
        if self.full_dims:
            kw.update(hidden_width=1024, embedding_dim=128)
        if normalize_strategy(strategy) == "VL":
            kw.pop("speaker_aware_layers", None)
            return ModelConfig.vanilla(linguistic_dim, acoustic_dim, **kw)
        return ModelConfig(linguistic_dim, acoustic_dim, **kw)

    def to_dict(self):
        return {
            "task": self.task.to_dict(),
            "model": self.model,
            "training": self.training,
            "adaptation": self.adaptation,
            "output_dir": self.output_dir,
            "seed": self.seed,
            "corpus": self.corpus,
            "workers": self.workers,
            "full_dims": self.full_dims,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = {"task", "model", "training", "adaptation", "output_dir", "seed", "corpus",
                 "workers", "full_dims"}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        d["task"] = SyntheticTaskSpec(**d.get("task", {}))
        return cls(**d)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=1, sort_keys=True)
            f.write("\n")


def table_plan(strategy, seed=0, **kw):
    """Training plan with the loss weights of the reference experiment grid."""
    strategy = normalize_strategy(strategy)
    return TrainingPlan(strategy, LossWeights(*DEFAULT_WEIGHTS[strategy]), seed=seed, **kw)


def text_predictor(model, embeddings=None):
    """``utt -> prediction`` through the text path; ``embeddings`` overrides per speaker."""
    def predict(u):
        if embeddings and u.speaker in embeddings:
            return synthesize_features(model, u.ling, embeddings[u.speaker])
        return forward_text(model, u.ling, u.speaker)[0]
    return predict


def speaker_mean_rows(corpus, tag="speaker-mean"):
    """Constant predictor: each training speaker's mean training-set acoustic frame."""
    means = {}
    for s in corpus.train_speakers:
        frames = np.concatenate([u.acoustic for u in corpus.select("train", speakers=[s])])
        means[s] = frames.mean(axis=0)
    return evaluate(lambda u: np.tile(means[u.speaker], (u.frames, 1)), corpus.test, tag, "const")


def frame_weighted(rows, attr="mcd_db"):
    frames = sum(r.frames for r in rows)
    return sum(getattr(r, attr) * r.frames for r in rows) / frames


def train_strategy(corpus, strategy, seed, config=None, on_step=None):
    """Build and train one model; returns ``(model, history)``."""
    config = config or ExperimentConfig()
    u = corpus.utterances[0]
    mcfg = config.model_config(strategy, u.ling.shape[1], u.acoustic.shape[1])
    model = build_model(mcfg, len(corpus.train_speakers), seed, corpus.train_speakers)
    if normalize_strategy(strategy) == config.plan().strategy:
        plan = config.plan(seed=seed)
    else:
        plan = table_plan(strategy, seed, early_stop=config.plan().early_stop)
    history = fit(model, corpus, plan, on_step)
    return model, history


def _adapt_job(args):
    model, spk, mode, utts, seed, opts = args
    job = AdaptationJob(mode, spk, utts, seed=seed, **opts)
    return adapt(model, job)


def adaptation_sweep(model, corpus, sizes=DEFAULT_SIZES, modes=MODES, seed=0, tag="",
                     workers=1, adapt_opts=None):
    """Adapt every held-out speaker at every size/mode on nested subsets.

    Returns ``(rows, adapted)`` where ``rows`` holds a ``baseline`` row per
    speaker (mean-embedding init) plus one row per (speaker, mode, size), and
    ``adapted`` maps ``(speaker, mode, size)`` to the ``AdaptedSpeaker``.
    """
    adapt_opts = dict(adapt_opts or {})
    strategy = model.meta.get("strategy", "")
    rows = []
    jobs = []
    base = init_new_speaker(model, adapt_opts.get("init_policy", "mean_of_trained"), seed)
    for spk in corpus.adapt_speakers:
        test = corpus.select("test", speakers=[spk])
        rows += evaluate(text_predictor(model, {spk: base}), test, tag, strategy, "baseline", 0)
        subsets = split_adaptation_subsets(corpus.select("train", speakers=[spk]), sizes, seed)
        for mode in modes:
            for n in sizes:
                jobs.append((model, spk, mode, subsets[n], seed, adapt_opts))
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_adapt_job, jobs))
    else:
        results = [_adapt_job(j) for j in jobs]
    adapted = {}
    for (_, spk, mode, utts, _, _), res in zip(jobs, results):
        adapted[(spk, mode, len(utts))] = res
        test = corpus.select("test", speakers=[spk])
        rows += evaluate(text_predictor(model, {spk: res.embedding}), test, tag, strategy,
                         mode, len(utts))
    return rows, adapted


def median_by(rows_per_seed, key):
    """Median over seeds of the frame-weighted MCD within each ``key(row)`` group."""
    per_seed = []
    for rows in rows_per_seed:
        groups = {}
        for r in rows:
            groups.setdefault(key(r), []).append(r)
        per_seed.append({k: frame_weighted(v) for k, v in groups.items()})
    keys = sorted(set().union(*per_seed))
    return {k: statistics.median(d[k] for d in per_seed if k in d) for k in keys}


def median_rows(rows_per_seed):
    """Collapse per-seed report rows into median-over-seeds rows."""
    def key(r):
        return (r.model, r.strategy, r.mode, r.n_adapt)
    mcd = median_by(rows_per_seed, key)
    f0 = {}
    for k in mcd:
        vals = []
        for rows in rows_per_seed:
            rs = [r for r in rows if key(r) == k and not np.isnan(r.f0_rmse)]
            if rs:
                vals.append(frame_weighted(rs, "f0_rmse"))
        f0[k] = statistics.median(vals) if vals else float("nan")
    out = []
    for k in sorted(mcd):
        frames = sum(r.frames for r in rows_per_seed[0] if key(r) == k)
        out.append(EvalRow(k[0], k[1], "median", k[2], k[3], mcd[k], f0[k], frames))
    return out


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path
