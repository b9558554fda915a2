"""Multimodal acoustic model: text and speech encoders feeding shared common layers.

Parameters live in one flat ``dict`` keyed by string ids such as
``"common.2.weight"``. Layer objects hold references to the same arrays, so an
in-place optimizer update through ``model.params`` is seen by both paths.
Speaker embeddings are rows of the ``"embedding"`` table and are addressed
individually as ``"embedding:<row>"``.
"""

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .numerics import (
    Conv1DLayer,
    DenseLayer,
    ShapeError,
    conv1d_backward,
    conv1d_forward,
    dense_backward,
    dense_forward,
)

CHECKPOINT_MAGIC = b"MMCK1"
RAW_EMBEDDING = "embedding:raw"


class ConfigError(ValueError):
    pass


class UnknownSpeaker(KeyError):
    pass


class CapabilityError(RuntimeError):
    """The model lacks a component the requested operation needs."""


class CorruptFile(ValueError):
    pass


@dataclass
class ModelConfig:
    linguistic_dim: int
    acoustic_dim: int
    hidden_width: int = 64
    embedding_dim: int = 16
    num_common_ff: int = 3
    num_text_ff: int = 2
    conv_width: int = 400
    conv_stride: int = 80
    conv_filters: int = 64
    # 1-based indices into the common feedforward stack
    speaker_aware_layers: tuple = (2, 3)
    tied_layer_indices: tuple = (1,)
    speaker_aware_text: bool = False
    speech_encoder: bool = True

    def __post_init__(self):
        self.speaker_aware_layers = tuple(sorted(int(i) for i in self.speaker_aware_layers))
        self.tied_layer_indices = tuple(sorted(int(i) for i in self.tied_layer_indices))
        self.validate()

    def validate(self):
        dims = (self.linguistic_dim, self.acoustic_dim, self.hidden_width,
                self.embedding_dim, self.num_common_ff, self.num_text_ff,
                self.conv_width, self.conv_stride, self.conv_filters)
        if min(dims) < 1:
            raise ConfigError(f"all dimensions must be >= 1: {dims}")
        valid = set(range(1, self.num_common_ff + 1))
        if not set(self.speaker_aware_layers) <= valid:
            raise ConfigError(f"speaker_aware_layers {self.speaker_aware_layers} outside {sorted(valid)}")
        if not set(self.tied_layer_indices) <= valid:
            raise ConfigError(f"tied_layer_indices {self.tied_layer_indices} outside {sorted(valid)}")
        if self.conv_width < self.conv_stride:
            raise ConfigError("conv width must be >= stride")
        if (self.conv_width - self.conv_stride) % 2:
            raise ConfigError("conv width - stride must be even for symmetric padding")

    @classmethod
    def vanilla(cls, linguistic_dim, acoustic_dim, **kw):
        """VL: every sigmoid layer is speaker-aware and there is no speech encoder."""
        kw.setdefault("num_common_ff", 3)
        return cls(linguistic_dim, acoustic_dim,
                   speaker_aware_layers=tuple(range(1, kw["num_common_ff"] + 1)),
                   speaker_aware_text=True, speech_encoder=False, **kw)

    @classmethod
    def full_dims(cls, linguistic_dim, acoustic_dim, **kw):
        return cls(linguistic_dim, acoustic_dim, hidden_width=1024, embedding_dim=128, **kw)

    @property
    def conv_pad(self):
        return (self.conv_width - self.conv_stride) // 2

    def to_dict(self):
        d = asdict(self)
        d["speaker_aware_layers"] = list(self.speaker_aware_layers)
        d["tied_layer_indices"] = list(self.tied_layer_indices)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class HiddenTrace:
    """Cached activations of one forward pass.

    ``layers`` lists the dense layer names that ran, ``inputs`` their (possibly
    embedding-augmented) inputs and ``outputs`` their outputs. ``start`` is the
    index of the first dense layer of the path that actually ran; layers below
    it were treated as a frozen prefix.
    """

    modality: str
    speaker: object
    embedding: np.ndarray
    layers: list
    inputs: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    wave: np.ndarray = None
    start: int = 0

    @property
    def frames(self):
        return self.outputs[-1].shape[0]

    @property
    def prediction(self):
        return self.outputs[-1]

    def common_output(self, index):
        """Output ``h^index`` of common feedforward layer ``index`` (1-based)."""
        return self.outputs[self.layers.index(f"common.{index}")]

    @property
    def hidden(self):
        return [self.outputs[i] for i, n in enumerate(self.layers)
                if n.startswith("common.") and n != "common.out"]

    @property
    def encoder_output(self):
        i = self.layers.index("common.1")
        return self.outputs[i - 1] if i > 0 else None


@dataclass(frozen=True)
class ParamScope:
    kind: str
    speaker: object = None

    KINDS = ("all", "shared_no_embedding", "speech_encoder_only",
             "embedding_only", "common_only", "text_encoder_only")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown scope {self.kind!r}")
        if self.kind == "embedding_only" and self.speaker is None:
            raise ValueError("embedding_only needs a speaker")

    @classmethod
    def embedding_only(cls, speaker):
        return cls("embedding_only", speaker)


class MultimodalModel:
    def __init__(self, config, speakers, params, meta=None):
        self.config = config
        self.speakers = list(speakers)
        self.params = params
        # training provenance, e.g. {"speech_encoder_trained": True}
        self.meta = dict(meta or {})
        c = config
        self.text_layers = [f"text.{i}" for i in range(1, c.num_text_ff + 1)]
        self.common_layers = [f"common.{i}" for i in range(1, c.num_common_ff + 1)] + ["common.out"]
        self.speech_layers = ["speech.ff"] if c.speech_encoder else []
        self.aware = {n: False for n in self.text_layers + self.common_layers + self.speech_layers}
        if c.speaker_aware_text:
            for n in self.text_layers:
                self.aware[n] = True
        for i in c.speaker_aware_layers:
            self.aware[f"common.{i}"] = True
        self.dense = {}
        for name in self.aware:
            act = "linear" if name == "common.out" else "sigmoid"
            self.dense[name] = DenseLayer(params[f"{name}.weight"], params[f"{name}.bias"], act)
        self.conv = None
        if c.speech_encoder:
            self.conv = Conv1DLayer(params["speech.conv.kernels"], params["speech.conv.bias"],
                                    c.conv_stride, c.conv_pad, c.conv_pad)

    @property
    def embeddings(self):
        return self.params["embedding"]

    @property
    def num_speakers(self):
        return len(self.speakers)

    @property
    def has_speech_encoder(self):
        return self.conv is not None

    def path(self, modality):
        if modality == "text":
            return self.text_layers + self.common_layers
        if modality == "speech":
            if not self.has_speech_encoder:
                raise CapabilityError("model was built without a speech encoder")
            return self.speech_layers + self.common_layers
        raise ValueError(f"unknown modality {modality!r}")

    def speaker_index(self, speaker):
        if isinstance(speaker, (int, np.integer)):
            if not 0 <= speaker < self.num_speakers:
                raise UnknownSpeaker(f"speaker index {speaker} not in table of {self.num_speakers}")
            return int(speaker)
        try:
            return self.speakers.index(speaker)
        except ValueError:
            raise UnknownSpeaker(f"unknown speaker {speaker!r}") from None

    def resolve_embedding(self, speaker):
        """Return ``(key, vector)`` where ``key`` is the gradient id of the row."""
        if isinstance(speaker, np.ndarray):
            if speaker.shape != (self.config.embedding_dim,):
                raise ShapeError(f"embedding has shape {speaker.shape}, "
                                 f"expected ({self.config.embedding_dim},)")
            return RAW_EMBEDDING, speaker
        s = self.speaker_index(speaker)
        return f"embedding:{s}", self.embeddings[s]

    def param(self, pid):
        if pid.startswith("embedding:"):
            return self.embeddings[int(pid.split(":", 1)[1])]
        return self.params[pid]

    def param_views(self, ids):
        return {pid: self.param(pid) for pid in ids}

    def snapshot(self):
        return {k: v.copy() for k, v in self.params.items()}

    def restore(self, snap):
        for k, v in snap.items():
            self.params[k][...] = v

    def copy(self):
        return MultimodalModel(self.config, self.speakers, self.snapshot(), self.meta)

    def num_parameters(self):
        return sum(v.size for v in self.params.values())


# Glorot's range is scaled by 4 for sigmoid layers (the sigmoid's slope at
# 0 is 1/4); with the unscaled range five stacked sigmoids sit on a long
# plateau where every path predicts the speaker mean.
SIGMOID_INIT_GAIN = 4.0


def _glorot(rng, fan_in, fan_out, shape, gain=1.0):
    r = gain * np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-r, r, size=shape)


def build_model(config, num_speakers, seed=0, speakers=None):
    """Initialise a model deterministically from ``seed``."""
    if num_speakers < 1:
        raise ConfigError("need at least one speaker")
    if speakers is None:
        speakers = [f"spk{i:02d}" for i in range(num_speakers)]
    if len(speakers) != num_speakers or len(set(speakers)) != num_speakers:
        raise ConfigError("speaker names must be unique and match num_speakers")
    c = config
    rng = np.random.default_rng(seed)
    H, E = c.hidden_width, c.embedding_dim
    params = {}

    def dense(name, n_in, n_out, aware, gain=SIGMOID_INIT_GAIN):
        if aware:
            n_in += E
        params[f"{name}.weight"] = _glorot(rng, n_in, n_out, (n_in, n_out), gain)
        params[f"{name}.bias"] = np.zeros(n_out)

    n_in = c.linguistic_dim
    for i in range(1, c.num_text_ff + 1):
        dense(f"text.{i}", n_in, H, c.speaker_aware_text)
        n_in = H
    if c.speech_encoder:
        params["speech.conv.kernels"] = _glorot(rng, c.conv_width, c.conv_filters,
                                                (c.conv_filters, c.conv_width))
        params["speech.conv.bias"] = np.zeros(c.conv_filters)
        dense("speech.ff", c.conv_filters, H, False)
    for i in range(1, c.num_common_ff + 1):
        dense(f"common.{i}", H, H, i in c.speaker_aware_layers)
    dense("common.out", H, c.acoustic_dim, False, gain=1.0)
    params["embedding"] = rng.normal(0.0, 0.1, size=(num_speakers, E))
    return MultimodalModel(config, speakers, params)


def _run_dense(model, trace, names, X, emb):
    for name in names:
        if model.aware[name]:
            X = np.concatenate([X, np.broadcast_to(emb, (X.shape[0], emb.size))], axis=1)
        Y = dense_forward(model.dense[name], X)
        trace.layers.append(name)
        trace.inputs.append(X)
        trace.outputs.append(Y)
        X = Y
    return X


def forward_text(model, ling, speaker):
    if ling.ndim != 2 or ling.shape[1] != model.config.linguistic_dim:
        raise ShapeError(f"linguistic input {ling.shape} needs {model.config.linguistic_dim} columns")
    key, emb = model.resolve_embedding(speaker)
    trace = HiddenTrace("text", key, emb, [])
    pred = _run_dense(model, trace, model.path("text"), ling, emb)
    return pred, trace


def encode_speech(model, wave):
    """Conv output of the speech encoder (frames x filters)."""
    if not model.has_speech_encoder:
        raise CapabilityError("model was built without a speech encoder")
    wave = np.asarray(wave, dtype=np.float64)
    if wave.ndim != 1 or wave.size == 0:
        raise ShapeError("waveform must be a non-empty 1-D sample vector")
    return conv1d_forward(model.conv, wave)


def forward_speech(model, wave, speaker):
    key, emb = model.resolve_embedding(speaker)
    conv_out = encode_speech(model, wave)
    trace = HiddenTrace("speech", key, emb, [], wave=np.asarray(wave, dtype=np.float64))
    pred = _run_dense(model, trace, model.path("speech"), conv_out, emb)
    return pred, trace


def frozen_prefix(model, modality, x):
    """Run the part of a path that does not depend on the speaker embedding.

    Returns ``(start, X)`` where ``X`` is the input to dense layer ``start`` of
    ``model.path(modality)``. Used when only the embedding is being learned.
    """
    names = model.path(modality)
    start = next(i for i, n in enumerate(names) if model.aware[n])
    X = encode_speech(model, x) if modality == "speech" else x
    for name in names[:start]:
        X = dense_forward(model.dense[name], X)
    return start, X


def forward_from(model, modality, start, X, speaker):
    key, emb = model.resolve_embedding(speaker)
    trace = HiddenTrace(modality, key, emb, [], start=start)
    pred = _run_dense(model, trace, model.path(modality)[start:], X, emb)
    return pred, trace


def backward_path(model, trace, d_pred, extra_dH=None, need=None):
    """Backpropagate through the path recorded in ``trace``.

    ``extra_dH`` maps 1-based common-layer indices to gradients added at that
    layer's output (used by the tied-layer penalty). ``need`` restricts which
    parameter ids get gradients; backprop stops once nothing below is needed.
    Returns a dict of parameter id -> gradient.
    """
    extra_dH = extra_dH or {}
    if d_pred.shape != trace.prediction.shape:
        raise ShapeError(f"prediction gradient {d_pred.shape} vs prediction {trace.prediction.shape}")
    full_path = model.path(trace.modality)
    if full_path[trace.start:] != trace.layers:
        raise ValueError("trace was not produced by this model")
    extra = {}
    for idx, g in extra_dH.items():
        name = f"common.{idx}"
        if name not in trace.layers:
            raise ValueError(f"trace has no layer {name}")
        if g.shape != trace.common_output(idx).shape:
            raise ShapeError(f"extra gradient for {name}: {g.shape} vs {trace.common_output(idx).shape}")
        extra[name] = g

    def wanted(pid):
        return need is None or pid in need

    # lowest layer index whose params (or embedding input) are still needed
    lowest = 0
    if need is not None:
        lowest = len(trace.layers)
        for i, name in enumerate(trace.layers):
            if (wanted(f"{name}.weight") or wanted(f"{name}.bias")
                    or (model.aware[name] and wanted(trace.speaker))):
                lowest = min(lowest, i)
    if trace.modality == "speech" and trace.start == 0 and (
            wanted("speech.conv.kernels") or wanted("speech.conv.bias")):
        lowest = -1

    grads = {}
    d_emb = None
    dY = d_pred
    for i in range(len(trace.layers) - 1, max(lowest, 0) - 1, -1):
        name = trace.layers[i]
        if name in extra:
            dY = dY + extra[name]
        dX, dW, db = dense_backward(model.dense[name], trace.inputs[i], dY, trace.outputs[i])
        if wanted(f"{name}.weight"):
            grads[f"{name}.weight"] = dW
        if wanted(f"{name}.bias"):
            grads[f"{name}.bias"] = db
        if model.aware[name]:
            n_in = dX.shape[1] - trace.embedding.size
            g = dX[:, n_in:].sum(axis=0)
            d_emb = g if d_emb is None else d_emb + g
            dX = dX[:, :n_in]
        dY = dX
    if lowest < 0:
        dK, dB = conv1d_backward(model.conv, trace.wave, dY)
        if wanted("speech.conv.kernels"):
            grads["speech.conv.kernels"] = dK
        if wanted("speech.conv.bias"):
            grads["speech.conv.bias"] = dB
    if d_emb is not None and wanted(trace.speaker):
        grads[trace.speaker] = d_emb
    return grads


def select_params(model, scope):
    text = [f"{n}.{p}" for n in model.text_layers for p in ("weight", "bias")]
    speech = []
    if model.has_speech_encoder:
        speech = ["speech.conv.kernels", "speech.conv.bias", "speech.ff.weight", "speech.ff.bias"]
    common = [f"{n}.{p}" for n in model.common_layers for p in ("weight", "bias")]
    rows = [f"embedding:{s}" for s in range(model.num_speakers)]
    kind = scope.kind
    if kind == "all":
        ids = text + speech + common + rows
    elif kind == "shared_no_embedding":
        ids = text + speech + common
    elif kind == "speech_encoder_only":
        if not speech:
            raise CapabilityError("model was built without a speech encoder")
        ids = speech
    elif kind == "common_only":
        ids = common
    elif kind == "text_encoder_only":
        ids = text
    else:
        ids = [f"embedding:{model.speaker_index(scope.speaker)}"]
    return frozenset(ids)


def sum_grads(*sets):
    out = {}
    for gs in sets:
        for k, g in gs.items():
            out[k] = out[k] + g if k in out else g
    return out


# -- checkpoint IO -----------------------------------------------------------

def _pack_header(header):
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return struct.pack("<I", len(blob)) + blob


def _read_header(buf, magic):
    if buf[:len(magic)] != magic:
        raise CorruptFile(f"bad magic {buf[:len(magic)]!r}, expected {magic!r}")
    pos = len(magic)
    if len(buf) < pos + 4:
        raise CorruptFile("truncated header length")
    (n,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if len(buf) < pos + n:
        raise CorruptFile("truncated header")
    try:
        header = json.loads(buf[pos:pos + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptFile(f"unreadable header: {e}") from None
    return header, pos + n


def checkpoint_bytes(model):
    manifest = []
    chunks = []
    offset = 0
    for name, arr in model.params.items():
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(data)
        offset += len(data)
    header = {"config": model.config.to_dict(), "speakers": model.speakers,
              "manifest": manifest, "meta": model.meta}
    return CHECKPOINT_MAGIC + _pack_header(header) + b"".join(chunks)


def save_checkpoint(model, path):
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(model))


def read_checkpoint_header(path):
    with open(path, "rb") as f:
        header, _ = _read_header(f.read(), CHECKPOINT_MAGIC)
    return header


def load_checkpoint(path):
    with open(path, "rb") as f:
        buf = f.read()
    header, base = _read_header(buf, CHECKPOINT_MAGIC)
    config = ModelConfig.from_dict(header["config"])
    params = {}
    for entry in header["manifest"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = base + entry["offset"]
        if start + 8 * count > len(buf):
            raise CorruptFile(f"tensor {entry['name']} runs past end of file")
        params[entry["name"]] = np.frombuffer(buf, dtype="<f8", count=count,
                                              offset=start).reshape(shape).astype(np.float64)
    model = MultimodalModel(config, header["speakers"], params, header.get("meta"))
    ref = build_model(config, len(header["speakers"]), 0, header["speakers"])
    for k, v in ref.params.items():
        if k not in params or params[k].shape != v.shape:
            raise CorruptFile(f"checkpoint tensor {k} missing or misshapen")
    return model
