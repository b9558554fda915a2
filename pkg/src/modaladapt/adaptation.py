"""Speaker adaptation by learning only a new embedding vector.

Supervised adaptation runs the text path (linguistic features in), the
unsupervised variant runs the speech path (waveform in). Both fit the same
acoustic targets with the same optimizer and stopping rule; only the forward
path differs. The model itself is never written to.
"""

from dataclasses import dataclass, field

import numpy as np

from .model import (
    RAW_EMBEDDING,
    CapabilityError,
    CorruptFile,
    _pack_header,
    _read_header,
    backward_path,
    forward_from,
    forward_text,
    frozen_prefix,
)
from .numerics import AdamState, ShapeError, adam_step, mse_loss
from .training import EarlyStopper, EarlyStopping

EMBEDDING_MAGIC = b"MMEV1"
MODES = ("supervised", "unsupervised")
INIT_POLICIES = ("mean_of_trained", "zeros", "random")


@dataclass
class AdaptationJob:
    mode: str
    speaker: str
    utterances: list
    init_policy: str = "mean_of_trained"
    seed: int = 0
    lr: float = 0.001
    early_stop: EarlyStopping = field(default_factory=EarlyStopping)
    valid_fraction: float = 0.1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.init_policy not in INIT_POLICIES:
            raise ValueError(f"unknown init policy {self.init_policy!r}")
        if len(self.utterances) < 2:
            raise ValueError("adaptation needs at least 2 utterances (one is held out)")
        for u in self.utterances:
            if self.mode == "supervised" and u.ling is None:
                raise ValueError(f"supervised adaptation needs linguistic features; {u.id} has none")
            if self.mode == "unsupervised" and u.wave is None:
                raise ValueError(f"unsupervised adaptation needs waveforms; {u.id} has none")

    @property
    def modality(self):
        return "text" if self.mode == "supervised" else "speech"


@dataclass
class AdaptedSpeaker:
    speaker: str
    embedding: np.ndarray
    mode: str
    n_utterances: int
    init: np.ndarray = None
    history: list = field(default_factory=list)  # (epoch, train loss, valid loss)
    stopped_epoch: int = 0
    gradient_keys: frozenset = frozenset()


def init_new_speaker(model, policy="mean_of_trained", seed=0):
    E = model.config.embedding_dim
    if policy == "zeros":
        return np.zeros(E)
    if policy == "random":
        return np.random.default_rng(seed).normal(0.0, 0.1, size=E)
    if policy == "mean_of_trained":
        table = model.embeddings
        if table.shape[0] == 0:
            raise ValueError("no trained embeddings to average")
        return table.mean(axis=0)
    raise ValueError(f"unknown init policy {policy!r}")


def _holdout(n, fraction, seed):
    n_valid = max(1, int(round(fraction * n)))
    order = np.random.default_rng([seed, 7]).permutation(n)
    return sorted(order[n_valid:]), sorted(order[:n_valid])


def adapt(model, job):
    """Fit a new speaker embedding; every model parameter stays untouched."""
    if job.mode == "unsupervised":
        if not model.has_speech_encoder:
            raise CapabilityError("unsupervised adaptation needs a model with a speech encoder")
        if not model.meta.get("speech_encoder_trained", False):
            raise CapabilityError("the speech encoder of this model has not been trained")
    modality = job.modality
    cached = []
    for u in sorted(job.utterances, key=lambda u: u.id):
        x = u.ling if modality == "text" else u.wave
        start, X = frozen_prefix(model, modality, x)
        if X.shape[0] != u.frames:
            raise ShapeError(f"utterance {u.id}: path produced {X.shape[0]} frames, "
                             f"target has {u.frames}")
        cached.append((start, X, u.acoustic))
    train_idx, valid_idx = _holdout(len(cached), job.valid_fraction, job.seed)

    emb = init_new_speaker(model, job.init_policy, job.seed).copy()
    result = AdaptedSpeaker(job.speaker, emb, job.mode, len(job.utterances), init=emb.copy())
    if job.early_stop.max_epochs <= 0:
        return result

    need = frozenset([RAW_EMBEDDING])
    opt = AdamState(lr=job.lr)
    rng = np.random.default_rng([job.seed, 11])
    stopper = EarlyStopper(job.early_stop)
    best = emb.copy()
    keys = set()

    def loss_of(i):
        start, X, target = cached[i]
        pred, _ = forward_from(model, modality, start, X, emb)
        return mse_loss(pred, target)[0]

    while True:
        total = 0.0
        for j in rng.permutation(len(train_idx)):
            start, X, target = cached[train_idx[j]]
            pred, trace = forward_from(model, modality, start, X, emb)
            loss, d = mse_loss(pred, target)
            grads = backward_path(model, trace, d, None, need)
            keys.update(grads)
            adam_step(opt, {RAW_EMBEDDING: emb}, grads)
            total += loss
        valid = sum(loss_of(i) for i in valid_idx) / len(valid_idx)
        stop = stopper.update(valid)
        result.history.append((stopper.epoch, total / len(train_idx), valid))
        if stopper.improved:
            best = emb.copy()
        if stop:
            break
    result.embedding = best
    result.stopped_epoch = stopper.epoch
    result.gradient_keys = frozenset(keys)
    return result


def synthesize_features(model, ling, embedding):
    """Text-path prediction with a raw embedding vector."""
    embedding = np.asarray(embedding, dtype=np.float64)
    if embedding.shape != (model.config.embedding_dim,):
        raise ShapeError(f"embedding shape {embedding.shape}, expected ({model.config.embedding_dim},)")
    return forward_text(model, ling, embedding)[0]


def save_embedding(path, adapted_or_vec, speaker="", mode="", config_hash="", extra=None):
    if isinstance(adapted_or_vec, AdaptedSpeaker):
        a = adapted_or_vec
        vec, speaker, mode = a.embedding, a.speaker, a.mode
        extra = {"n_utterances": a.n_utterances, **(extra or {})}
    else:
        vec = adapted_or_vec
    vec = np.ascontiguousarray(vec, dtype="<f8")
    header = {"speaker": speaker, "mode": mode, "config_hash": config_hash, "dim": int(vec.size)}
    header.update(extra or {})
    with open(path, "wb") as f:
        f.write(EMBEDDING_MAGIC + _pack_header(header) + vec.tobytes())


def load_embedding(path):
    """Return ``(header, vector)`` from an MMEV1 file."""
    with open(path, "rb") as f:
        buf = f.read()
    header, pos = _read_header(buf, EMBEDDING_MAGIC)
    n = int(header["dim"])
    if len(buf) != pos + 8 * n:
        raise CorruptFile(f"{path}: expected {n} values")
    return header, np.frombuffer(buf, dtype="<f8", offset=pos).astype(np.float64)
