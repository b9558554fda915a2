"""Synthetic multi-speaker corpus and the corpus file formats.

File formats (all little-endian):

* feature file: ``b"MMAF1"``, u32 frames, u32 dim, float64 row-major values
* waveform file: ``b"MMWV1"``, u32 samples, float64 values in [-1, 1]
* manifest: UTF-8 JSON, schema documented in ``docs/manifest.md``

The synthetic task stands in for vocoder features of a real corpus. Each
speaker is a point in a small latent space that sets an affine map from a
shared nonlinear text projection to 24 cepstral-like channels plus a
log-F0 level. Speaker offsets live in the cepstral subspace orthogonal to
the content directions, and ``speaker_coupling`` controls how much the
speaker also bends the content map itself. Channel 24 is log-F0 and channel
25 the voicing flag. The waveform is a per-frame affine "vocoder": frame
``t`` occupies samples ``[80t, 80t+80)`` and equals
``(y_t - reference) @ decode`` plus noise.
"""

import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import CorruptFile

FEATURE_MAGIC = b"MMAF1"
WAVE_MAGIC = b"MMWV1"
MANIFEST_FORMAT = "modaladapt-manifest"
MANIFEST_VERSION = 1

LOG_F0_CHANNEL = 24
VOICING_CHANNEL = 25
NUM_CEPSTRAL = 24


class AlignmentError(ValueError):
    pass


class ManifestError(ValueError):
    pass


# -- binary IO -----------------------------------------------------------------

def write_features(path, mat):
    mat = np.ascontiguousarray(mat, dtype="<f8")
    if mat.ndim != 2:
        raise ValueError("feature matrix must be 2-D")
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC + struct.pack("<II", *mat.shape) + mat.tobytes())


def read_features(path):
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:5] != FEATURE_MAGIC:
        raise CorruptFile(f"{path}: bad magic {buf[:5]!r}")
    if len(buf) < 13:
        raise CorruptFile(f"{path}: truncated header")
    frames, dim = struct.unpack_from("<II", buf, 5)
    need = 13 + 8 * frames * dim
    if len(buf) != need:
        raise CorruptFile(f"{path}: expected {need} bytes for {frames}x{dim}, found {len(buf)}")
    return np.frombuffer(buf, dtype="<f8", offset=13).reshape(frames, dim).astype(np.float64)


def write_waveform(path, wave):
    wave = np.ascontiguousarray(wave, dtype="<f8")
    if wave.ndim != 1:
        raise ValueError("waveform must be 1-D")
    if wave.size and np.max(np.abs(wave)) > 1.0:
        raise ValueError("waveform samples must lie in [-1, 1]")
    with open(path, "wb") as f:
        f.write(WAVE_MAGIC + struct.pack("<I", wave.size) + wave.tobytes())


def read_waveform(path):
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:5] != WAVE_MAGIC:
        raise CorruptFile(f"{path}: bad magic {buf[:5]!r}")
    if len(buf) < 9:
        raise CorruptFile(f"{path}: truncated header")
    (n,) = struct.unpack_from("<I", buf, 5)
    if len(buf) != 9 + 8 * n:
        raise CorruptFile(f"{path}: expected {n} samples, found {(len(buf) - 9) / 8}")
    return np.frombuffer(buf, dtype="<f8", offset=9).astype(np.float64)


# -- in-memory corpus --------------------------------------------------------------

@dataclass
class Utterance:
    id: str
    speaker: str
    split: str
    ling: np.ndarray
    acoustic: np.ndarray
    wave: np.ndarray = None

    @property
    def frames(self):
        return self.acoustic.shape[0]


@dataclass
class Corpus:
    utterances: list
    roster: dict  # speaker id -> role ("train" or "adapt")
    samples_per_frame: int = 80
    task: dict = field(default_factory=dict)

    def select(self, split=None, role=None, speakers=None):
        out = []
        for u in self.utterances:
            if split is not None and u.split != split:
                continue
            if role is not None and self.roster[u.speaker] != role:
                continue
            if speakers is not None and u.speaker not in speakers:
                continue
            out.append(u)
        return out

    @property
    def train_speakers(self):
        return sorted(s for s, r in self.roster.items() if r == "train")

    @property
    def adapt_speakers(self):
        return sorted(s for s, r in self.roster.items() if r == "adapt")

    @property
    def train(self):
        return self.select("train", "train")

    @property
    def valid(self):
        return self.select("valid", "train")

    @property
    def test(self):
        return self.select("test", "train")


def check_alignment(utt, samples_per_frame):
    if utt.ling.shape[0] != utt.acoustic.shape[0]:
        raise AlignmentError(f"utterance {utt.id}: {utt.ling.shape[0]} linguistic frames vs "
                             f"{utt.acoustic.shape[0]} acoustic frames")
    if utt.wave is not None and utt.wave.size != utt.frames * samples_per_frame:
        raise AlignmentError(f"utterance {utt.id}: waveform has {utt.wave.size} samples, "
                             f"expected {utt.frames} x {samples_per_frame}")


# -- synthetic generator ---------------------------------------------------------

@dataclass
class SyntheticTaskSpec:
    num_train_speakers: int = 8
    num_adapt_speakers: int = 2
    utterances_per_speaker: int = 24  # train split of each training speaker
    valid_per_speaker: int = 4
    test_per_speaker: int = 4
    adapt_pool_size: int = 160  # adaptation utterances per held-out speaker
    min_frames: int = 20
    max_frames: int = 40
    linguistic_dim: int = 30
    acoustic_dim: int = 26
    samples_per_frame: int = 80
    noise_std: float = 0.02
    seed: int = 0
    latent_dim: int = 3
    text_factors: int = 12
    speaker_coupling: float = 0.04
    decode_gain: float = 0.15

    def __post_init__(self):
        if self.linguistic_dim < 2 or self.acoustic_dim != NUM_CEPSTRAL + 2:
            raise ValueError(f"acoustic_dim must be {NUM_CEPSTRAL + 2} and linguistic_dim >= 2")
        if self.samples_per_frame < self.acoustic_dim:
            raise ValueError("samples_per_frame must be >= acoustic_dim for an invertible vocoder")
        if not 1 <= self.min_frames <= self.max_frames:
            raise ValueError("bad frame range")
        if self.valid_per_speaker < 1 or self.test_per_speaker < 1:
            raise ValueError("every speaker needs validation and test utterances")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")

    def to_dict(self):
        return asdict(self)


def _seed_for(master, label):
    digest = hashlib.sha256(f"{master}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass
class SpeakerTransform:
    A: np.ndarray  # (24, text_factors)
    c: np.ndarray  # (24,)
    log_f0_base: float


class SyntheticTask:
    """Global generative parameters shared by every speaker and utterance."""

    def __init__(self, spec):
        self.spec = spec
        s = spec
        rng = np.random.default_rng(_seed_for(s.seed, "global"))
        K, L, Z = s.text_factors, s.linguistic_dim, s.latent_dim
        self.B = rng.normal(0.0, 1.5 / np.sqrt(L), size=(K, L))
        self.A0 = rng.normal(0.0, 0.35, size=(NUM_CEPSTRAL, K))
        self.A_lat = rng.normal(0.0, s.speaker_coupling, size=(Z, NUM_CEPSTRAL, K))
        self.c0 = rng.normal(0.0, 0.5, size=NUM_CEPSTRAL)
        # speaker offsets orthogonal to the content directions span(A0)
        qa, _ = np.linalg.qr(self.A0)
        self.c_lat = rng.normal(0.0, 0.4, size=(Z, NUM_CEPSTRAL)) @ (np.eye(NUM_CEPSTRAL) - qa @ qa.T)
        q, _ = np.linalg.qr(rng.normal(size=(s.samples_per_frame, s.acoustic_dim)))
        self.decode = s.decode_gain * q.T  # (acoustic_dim, samples_per_frame)
        self.reference = np.concatenate([self.c0, [np.log(150.0), 0.5]])
        self._check_invertible()

    def _check_invertible(self):
        rng = np.random.default_rng(_seed_for(self.spec.seed, "invertibility"))
        y = rng.normal(size=(16, self.spec.acoustic_dim))
        blocks = y @ self.decode
        y_hat, *_ = np.linalg.lstsq(self.decode.T, blocks.T, rcond=None)
        resid = np.max(np.abs(y_hat.T - y))
        if resid >= 1e-8:
            raise RuntimeError(f"decode matrix is not invertible (residual {resid:.3g})")

    def speaker(self, name):
        rng = np.random.default_rng(_seed_for(self.spec.seed, f"speaker:{name}"))
        z = rng.normal(size=self.spec.latent_dim)
        A = self.A0 + np.tensordot(z, self.A_lat, axes=1)
        c = self.c0 + z @ self.c_lat
        return SpeakerTransform(A, c, float(np.log(150.0) + 0.2 * z[0]))

    def linguistic(self, rng, frames):
        L = self.spec.linguistic_dim
        x = np.zeros((frames, L))
        # channel 0: voiced/unvoiced phone class as a duty-cycle pattern
        voiced = np.zeros(frames)
        t, state = 0, rng.integers(0, 2)
        while t < frames:
            run = int(rng.integers(3, 9))
            voiced[t:t + run] = state
            state = 1 - state
            t += run
        x[:, 0] = voiced
        # remaining channels: smoothed random walk (stationary AR(1))
        rho = 0.9
        walk = rng.normal(size=L - 1)
        for i in range(frames):
            if i:
                walk = rho * walk + np.sqrt(1 - rho * rho) * rng.normal(size=L - 1)
            x[i, 1:] = walk
        return x

    def acoustic(self, x, spk, noise=None):
        """Noise-free features for linguistic ``x`` and speaker transform ``spk``."""
        u = np.tanh(x @ self.B.T)
        y = np.zeros((x.shape[0], self.spec.acoustic_dim))
        y[:, :NUM_CEPSTRAL] = u @ spk.A.T + spk.c
        y[:, LOG_F0_CHANNEL] = spk.log_f0_base + 0.08 * x[:, 1] + 0.05 * u[:, 0]
        y[:, VOICING_CHANNEL] = x[:, 0]
        if noise is not None:
            y[:, :VOICING_CHANNEL] += noise
        return y

    def waveform(self, y, noise=None):
        w = ((y - self.reference) @ self.decode).reshape(-1)
        if noise is not None:
            w = w + noise
        if np.max(np.abs(w)) > 1.0:
            raise RuntimeError("synthetic waveform left [-1, 1]; lower decode_gain")
        return w

    def utterance(self, uid, speaker, split, spk=None):
        s = self.spec
        rng = np.random.default_rng(_seed_for(s.seed, f"utt:{uid}"))
        frames = int(rng.integers(s.min_frames, s.max_frames + 1))
        x = self.linguistic(rng, frames)
        if spk is None:
            spk = self.speaker(speaker)
        noise = rng.normal(0.0, s.noise_std, size=(frames, s.acoustic_dim - 1)) if s.noise_std else None
        y = self.acoustic(x, spk, noise)
        wnoise = None
        if s.noise_std:
            wnoise = rng.normal(0.0, s.noise_std * s.decode_gain, size=frames * s.samples_per_frame)
        return Utterance(uid, speaker, split, x, y, self.waveform(y, wnoise))


def speaker_names(spec):
    train = [f"spk{i:02d}" for i in range(spec.num_train_speakers)]
    adapt = [f"new{i:02d}" for i in range(spec.num_adapt_speakers)]
    return train, adapt


def synthesize(spec):
    """Build the synthetic corpus in memory."""
    task = SyntheticTask(spec)
    train, adapt = speaker_names(spec)
    transforms = {name: task.speaker(name) for name in train + adapt}
    names = list(transforms)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            gap = np.max(np.abs(transforms[a].c - transforms[b].c))
            if gap < 1e-6:
                raise RuntimeError(f"speakers {a} and {b} are not separable")
    utts = []
    for name in train + adapt:
        counts = {
            "train": spec.utterances_per_speaker if name in train else spec.adapt_pool_size,
            "valid": spec.valid_per_speaker,
            "test": spec.test_per_speaker,
        }
        for split, n in counts.items():
            for j in range(n):
                uid = f"{name}_{split}_{j:04d}"
                utts.append(task.utterance(uid, name, split, transforms[name]))
    roster = {n: "train" for n in train} | {n: "adapt" for n in adapt}
    return Corpus(utts, roster, spec.samples_per_frame, spec.to_dict())


def save_corpus(corpus, out_dir):
    """Write feature/waveform files and ``manifest.json``; returns the manifest dict."""
    for sub in ("linguistic", "acoustic", "wave"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    records = []
    for u in corpus.utterances:
        rec = {
            "id": u.id,
            "speaker": u.speaker,
            "split": u.split,
            "linguistic": f"linguistic/{u.id}.mmaf",
            "acoustic": f"acoustic/{u.id}.mmaf",
            "waveform": f"wave/{u.id}.mmwv" if u.wave is not None else None,
        }
        write_features(os.path.join(out_dir, rec["linguistic"]), u.ling)
        write_features(os.path.join(out_dir, rec["acoustic"]), u.acoustic)
        if u.wave is not None:
            write_waveform(os.path.join(out_dir, rec["waveform"]), u.wave)
        records.append(rec)
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "samples_per_frame": corpus.samples_per_frame,
        "task": corpus.task,
        "speakers": [{"id": s, "role": r} for s, r in sorted(corpus.roster.items())],
        "utterances": records,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")
    return manifest


def generate_corpus(spec, out_dir):
    corpus = synthesize(spec)
    save_corpus(corpus, out_dir)
    return corpus


def load_corpus(manifest_path):
    """Eagerly load a corpus and validate every shape invariant."""
    base = os.path.dirname(os.path.abspath(manifest_path))
    with open(manifest_path, encoding="utf-8") as f:
        try:
            man = json.load(f)
        except json.JSONDecodeError as e:
            raise ManifestError(f"{manifest_path}: {e}") from None
    if man.get("format") != MANIFEST_FORMAT:
        raise ManifestError(f"{manifest_path}: not a {MANIFEST_FORMAT} document")
    if man.get("version") != MANIFEST_VERSION:
        raise ManifestError(f"{manifest_path}: unsupported version {man.get('version')}")
    spf = int(man["samples_per_frame"])
    roster = {s["id"]: s["role"] for s in man["speakers"]}
    utts = []
    for rec in man["utterances"]:
        if rec["speaker"] not in roster:
            raise ManifestError(f"utterance {rec['id']} names unknown speaker {rec['speaker']}")
        if rec["split"] not in ("train", "valid", "test"):
            raise ManifestError(f"utterance {rec['id']} has bad split {rec['split']!r}")
        ling = read_features(os.path.join(base, rec["linguistic"]))
        ac = read_features(os.path.join(base, rec["acoustic"]))
        wave = None
        if rec.get("waveform"):
            wave = read_waveform(os.path.join(base, rec["waveform"]))
        u = Utterance(rec["id"], rec["speaker"], rec["split"], ling, ac, wave)
        check_alignment(u, spf)
        utts.append(u)
    for spk in roster:
        for split in ("valid", "test"):
            if not any(u.speaker == spk and u.split == split for u in utts):
                raise ManifestError(f"speaker {spk} has no {split} utterances")
    return Corpus(utts, roster, spf, man.get("task", {}))


def split_adaptation_subsets(utterances, sizes, seed=0):
    """Nested random subsets: the size-10 subset is contained in the size-40 one, etc."""
    sizes = list(sizes)
    if sizes != sorted(sizes) or any(s < 1 for s in sizes):
        raise ValueError(f"sizes must be positive and ascending: {sizes}")
    pool = sorted(utterances, key=lambda u: u.id)
    if sizes and sizes[-1] > len(pool):
        raise ValueError(f"requested {sizes[-1]} utterances but only {len(pool)} available")
    order = np.random.default_rng(seed).permutation(len(pool))
    return {n: [pool[i] for i in order[:n]] for n in sizes}
