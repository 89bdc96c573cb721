"""The white-box victim stack.

Deterministic utterance synthesis, a log-magnitude spectral front end, a
two-layer affine network with a CTC head, CTC loss with gradients all the way
back to the raw samples, greedy decoding, forced alignment, and SGD training.

Character tokens: blank = 0, space = 1, 'a'..'z' = 2..27 (V = 28). CTC
arithmetic is done in log space throughout; linear-space probabilities
underflow for real utterance lengths.
"""
from __future__ import annotations

import re
import struct
import zlib
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .audio import AudioClip

BLANK_ID = 0
ALPHABET = " abcdefghijklmnopqrstuvwxyz"  # ids 1..27; blank is 0
VOCAB_SIZE = 1 + len(ALPHABET)  # 28

FRAME_MS = 25
HOP_MS = 10
NUM_BINS = 64
HIDDEN_SIZE = 128
LOG_FLOOR = 1e-6

CHAR_SECONDS = 0.12
CHAR_AMPLITUDE = 0.3
NOISE_FLOOR_DB = -40.0
BASE_HZ = 200.0
STEP_HZ = 55.0

NEG_INF = -np.inf

_TEXT_RE = re.compile(r"^[a-z ]+$")

# 60-word reference vocabulary for the synthetic corpus.
WORD_LIST = (
    "meeting party dinner budget report secret launch friday monday office "
    "garden window music coffee doctor lawyer market ticket flight hotel "
    "river mountain signal number account password project deadline contract "
    "invoice salary bonus client vendor summer winter spring autumn morning "
    "evening night travel camera phone letter package street bridge castle "
    "forest island harbor engine rocket planet silver golden purple orange "
    "yellow"
).split()

REFERENCE_SAMPLE_RATE = 16000
REFERENCE_CORPUS_SIZE = 200
REFERENCE_EPOCHS = 30
REFERENCE_LR = 0.05
REFERENCE_SEED = 0


class AsrError(Exception):
    """Base class for victim-model failures."""


class InfeasibleTargetError(AsrError):
    """The blank-augmented target cannot fit in the available frames."""


class TrainingDivergedError(AsrError):
    """Training loss went non-finite; carries the offending epoch index."""

    def __init__(self, epoch: int):
        super().__init__(f"training diverged at epoch {epoch}")
        self.epoch = epoch


class CheckpointError(AsrError):
    """Model checkpoint file is malformed or carries the wrong magic/version."""


def text_to_tokens(text: str) -> np.ndarray:
    if not text or not _TEXT_RE.match(text):
        raise ValueError(f"text must match [a-z ]+ and be nonempty: {text!r}")
    return np.array([ALPHABET.index(c) + 1 for c in text], dtype=np.int64)


def tokens_to_text(tokens) -> str:
    out = []
    for t in np.asarray(tokens, dtype=np.int64):
        if t == BLANK_ID:
            continue
        if not 1 <= t < VOCAB_SIZE:
            raise ValueError(f"token id {t} outside [0, {VOCAB_SIZE})")
        out.append(ALPHABET[t - 1])
    return "".join(out)


# ---------------------------------------------------------------------------
# Synthesis
# ---------------------------------------------------------------------------

def synth_utterance(text: str, sample_rate: int = REFERENCE_SAMPLE_RATE) -> AudioClip:
    """Deterministic toy speech: one fixed two-sine chord per character.

    Character c maps to 120 ms of BASE + STEP*(ord(c)-ord('a')+1) Hz plus a
    weaker 1.5x partial, total amplitude 0.3 with the fundamental dominant;
    space maps to 120 ms of near-silence. A low noise floor at -40 dB (seeded
    from the text, so identical text gives identical samples) keeps spectra
    nonzero everywhere.
    """
    if not text or not _TEXT_RE.match(text):
        raise ValueError(f"text must match [a-z ]+ and be nonempty: {text!r}")
    n_char = int(round(CHAR_SECONDS * sample_rate))
    t = np.arange(n_char) / sample_rate
    pieces = []
    for c in text:
        if c == " ":
            pieces.append(np.zeros(n_char))
            continue
        freq = BASE_HZ + STEP_HZ * (ord(c) - ord("a") + 1)
        chord = CHAR_AMPLITUDE * (
            (2.0 / 3.0) * np.sin(2 * np.pi * freq * t)
            + (1.0 / 3.0) * np.sin(2 * np.pi * 1.5 * freq * t)
        )
        pieces.append(chord)
    signal = np.concatenate(pieces)
    seed = zlib.crc32(f"{sample_rate}:{text}".encode())
    rng = np.random.default_rng(seed)
    noise_amp = CHAR_AMPLITUDE * 10.0 ** (NOISE_FLOOR_DB / 20.0)
    signal = signal + rng.normal(0.0, noise_amp, signal.size)
    return AudioClip(np.clip(signal, -1.0, 1.0), sample_rate)


def make_utterance_texts(count: int, seed: int, min_words: int = 3,
                         max_words: int = 6) -> list[str]:
    """Seeded utterance transcripts over WORD_LIST, distinct words per line."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    texts = []
    for _ in range(count):
        k = int(rng.integers(min_words, max_words + 1))
        words = rng.choice(WORD_LIST, size=k, replace=False)
        texts.append(" ".join(words))
    return texts


# ---------------------------------------------------------------------------
# Feature extraction (differentiable)
# ---------------------------------------------------------------------------

def frame_geometry(sample_rate: int) -> tuple[int, int]:
    """(window, hop) in samples for the 25 ms / 10 ms frame grid."""
    return sample_rate * FRAME_MS // 1000, sample_rate * HOP_MS // 1000


@lru_cache(maxsize=8)
def _dft_basis(window: int) -> tuple[np.ndarray, np.ndarray]:
    """First NUM_BINS rows of the window-point DFT matrix, plus the Hann window."""
    n = np.arange(window)
    f = np.arange(NUM_BINS)[:, None]
    basis = np.exp(-2j * np.pi * f * n[None, :] / window)
    return basis, np.hanning(window)


def num_frames(n_samples: int, sample_rate: int) -> int:
    window, hop = frame_geometry(sample_rate)
    if n_samples < window:
        raise ValueError(f"clip of {n_samples} samples shorter than one "
                         f"{window}-sample analysis window")
    return 1 + (n_samples - window) // hop


def _frames(samples: np.ndarray, sample_rate: int) -> np.ndarray:
    window, hop = frame_geometry(sample_rate)
    num_frames(samples.size, sample_rate)  # length check
    return np.lib.stride_tricks.sliding_window_view(samples, window)[::hop]


def _features_fwd(samples: np.ndarray, sample_rate: int):
    """Features plus the intermediates needed for the backward pass."""
    window, _hop = frame_geometry(sample_rate)
    basis, hann = _dft_basis(window)
    windowed = _frames(samples, sample_rate) * hann
    spectrum = windowed @ basis.T  # (T, NUM_BINS) complex
    mag = np.abs(spectrum)
    feats = np.log(mag + LOG_FLOOR)
    return feats, spectrum, mag


def _features_bwd(dfeats: np.ndarray, spectrum: np.ndarray, mag: np.ndarray,
                  n_samples: int, sample_rate: int) -> np.ndarray:
    """Chain rule through log, magnitude, and the linear DFT back to samples."""
    window, hop = frame_geometry(sample_rate)
    basis, hann = _dft_basis(window)
    dmag = dfeats / (mag + LOG_FLOOR)
    safe = np.where(mag > 0.0, mag, 1.0)
    dspec = dmag * spectrum / safe  # d|z|/dz as a complex cotangent
    dwindowed = np.real(dspec @ np.conj(basis)) * hann
    grad = np.zeros(n_samples)
    t_count = dwindowed.shape[0]
    idx = hop * np.arange(t_count)[:, None] + np.arange(window)[None, :]
    np.add.at(grad, idx.ravel(), dwindowed.ravel())
    return grad


def extract_features(clip: AudioClip) -> np.ndarray:
    """Log-magnitude spectrogram: T x NUM_BINS, 25 ms Hann frames, 10 ms hop."""
    feats, _, _ = _features_fwd(clip.samples, clip.sample_rate)
    return feats


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

@dataclass
class ToyAsrModel:
    """Two-layer affine network: relu(feat @ w1 + b1) @ w2 + b2 -> logits."""

    w1: np.ndarray  # (NUM_BINS, H)
    b1: np.ndarray  # (H,)
    w2: np.ndarray  # (H, VOCAB_SIZE)
    b2: np.ndarray  # (VOCAB_SIZE,)
    loss_log: list = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        for name in ("w1", "b1", "w2", "b2"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite values in {name}")
            setattr(self, name, arr)
        f, h = self.w1.shape
        if self.b1.shape != (h,) or self.w2.shape[0] != h:
            raise ValueError("layer shapes disagree")
        if self.b2.shape != (self.w2.shape[1],):
            raise ValueError("output shapes disagree")


def init_model(seed: int, num_bins: int = NUM_BINS, hidden: int = HIDDEN_SIZE,
               vocab: int = VOCAB_SIZE) -> ToyAsrModel:
    rng = np.random.default_rng(seed)
    w1 = rng.normal(0.0, np.sqrt(2.0 / num_bins), (num_bins, hidden))
    w2 = rng.normal(0.0, np.sqrt(2.0 / hidden), (hidden, vocab))
    return ToyAsrModel(w1, np.zeros(hidden), w2, np.zeros(vocab))


def forward_logits(model: ToyAsrModel, features: np.ndarray) -> np.ndarray:
    """Per-frame logits for a T x NUM_BINS feature matrix."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != model.w1.shape[0]:
        raise ValueError(
            f"features shape {features.shape} does not match w1 {model.w1.shape}"
        )
    hidden = np.maximum(features @ model.w1 + model.b1, 0.0)
    return hidden @ model.w2 + model.b2


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


# ---------------------------------------------------------------------------
# CTC
# ---------------------------------------------------------------------------

def _extend_labels(labels: np.ndarray) -> np.ndarray:
    ext = np.zeros(2 * labels.size + 1, dtype=np.int64)
    ext[1::2] = labels
    return ext


def min_frames_for(labels) -> int:
    """Fewest frames a CTC path needs: one per label plus blanks at repeats."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        return 0
    return int(labels.size + np.sum(labels[1:] == labels[:-1]))


def _check_feasible(t_frames: int, labels: np.ndarray):
    need = min_frames_for(labels)
    if t_frames < need:
        raise InfeasibleTargetError(
            f"target needs {need} frames, clip provides {t_frames}"
        )


def _skip_mask(ext: np.ndarray) -> np.ndarray:
    ok = np.zeros(ext.size, dtype=bool)
    if ext.size > 2:
        ok[2:] = (ext[2:] != BLANK_ID) & (ext[2:] != ext[:-2])
    return ok


def _ctc_alpha(log_probs: np.ndarray, ext: np.ndarray) -> np.ndarray:
    t_frames, s_states = log_probs.shape[0], ext.size
    skip_ok = _skip_mask(ext)
    alpha = np.full((t_frames, s_states), NEG_INF)
    alpha[0, 0] = log_probs[0, ext[0]]
    if s_states > 1:
        alpha[0, 1] = log_probs[0, ext[1]]
    for t in range(1, t_frames):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.logaddexp(acc[2:], np.where(skip_ok[2:], prev[:-2], NEG_INF))
        alpha[t] = acc + log_probs[t, ext]
    return alpha


def _ctc_beta(log_probs: np.ndarray, ext: np.ndarray) -> np.ndarray:
    """Backward lattice probabilities, excluding the emission at frame t."""
    t_frames, s_states = log_probs.shape[0], ext.size
    skip_ok = _skip_mask(ext)
    beta = np.full((t_frames, s_states), NEG_INF)
    beta[t_frames - 1, s_states - 1] = 0.0
    if s_states > 1:
        beta[t_frames - 1, s_states - 2] = 0.0
    for t in range(t_frames - 2, -1, -1):
        nxt = beta[t + 1] + log_probs[t + 1, ext]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.logaddexp(acc[:-2], np.where(skip_ok[2:], nxt[2:], NEG_INF))
        beta[t] = acc
    return beta


def _ctc_loss_from_logits(logits: np.ndarray, labels: np.ndarray,
                          want_grad: bool):
    """(-log p(labels), d loss / d logits or None), all in log space."""
    _check_feasible(logits.shape[0], labels)
    log_probs = _log_softmax(logits)
    ext = _extend_labels(labels)
    alpha = _ctc_alpha(log_probs, ext)
    tail = alpha[-1, -1]
    if ext.size > 1:
        tail = np.logaddexp(tail, alpha[-1, -2])
    log_p = float(tail)
    if log_p == NEG_INF:
        return np.inf, (np.zeros_like(logits) if want_grad else None)
    if not want_grad:
        return -log_p, None
    beta = _ctc_beta(log_probs, ext)
    log_gamma = alpha + beta
    t_frames = logits.shape[0]
    log_q = np.full((t_frames, VOCAB_SIZE), NEG_INF)
    rows = np.repeat(np.arange(t_frames), ext.size)
    cols = np.tile(ext, t_frames)
    np.logaddexp.at(log_q, (rows, cols), log_gamma.ravel())
    grad = np.exp(log_probs) - np.exp(log_q - log_p)
    return -log_p, grad


def _as_labels(target) -> np.ndarray:
    if isinstance(target, str):
        return text_to_tokens(target)
    return np.asarray(target, dtype=np.int64)


def _loss_from_samples(model: ToyAsrModel, samples: np.ndarray, sample_rate: int,
                       labels: np.ndarray, want_grad: bool):
    feats, spectrum, mag = _features_fwd(samples, sample_rate)
    hidden_pre = feats @ model.w1 + model.b1
    hidden = np.maximum(hidden_pre, 0.0)
    logits = hidden @ model.w2 + model.b2
    loss, dlogits = _ctc_loss_from_logits(logits, labels, want_grad)
    if not want_grad:
        return loss, None
    if not np.isfinite(loss):
        return loss, np.zeros_like(samples)
    dhidden = (dlogits @ model.w2.T) * (hidden_pre > 0.0)
    dfeats = dhidden @ model.w1.T
    grad = _features_bwd(dfeats, spectrum, mag, samples.size, sample_rate)
    return loss, grad


def ctc_loss(model: ToyAsrModel, clip: AudioClip, target) -> float:
    """-log p(target | clip) under the model's CTC head."""
    loss, _ = _loss_from_samples(
        model, clip.samples, clip.sample_rate, _as_labels(target), False
    )
    return loss


def ctc_loss_and_input_grad(model: ToyAsrModel, clip: AudioClip,
                            target) -> tuple[float, np.ndarray]:
    """CTC loss plus its gradient with respect to every raw sample.

    Backpropagates through softmax, the CTC lattice, the network, and the
    spectral front end. Returns (inf, zeros) when the path probability
    underflows; raises InfeasibleTargetError when the target cannot fit.
    """
    return _loss_from_samples(
        model, clip.samples, clip.sample_rate, _as_labels(target), True
    )


# ---------------------------------------------------------------------------
# Decoding and alignment
# ---------------------------------------------------------------------------

def _decode_ids(ids: np.ndarray) -> str:
    keep = np.ones(ids.size, dtype=bool)
    keep[1:] = ids[1:] != ids[:-1]
    collapsed = ids[keep]
    return tokens_to_text(collapsed[collapsed != BLANK_ID])


def _decode_samples(model: ToyAsrModel, samples: np.ndarray,
                    sample_rate: int) -> str:
    feats, _, _ = _features_fwd(samples, sample_rate)
    logits = forward_logits(model, feats)
    return _decode_ids(np.argmax(logits, axis=1))


def greedy_decode(model: ToyAsrModel, clip: AudioClip) -> str:
    """Per-frame argmax, collapse repeats, drop blanks, map to characters."""
    return _decode_samples(model, clip.samples, clip.sample_rate)


@dataclass(frozen=True)
class AlignmentSpan:
    """Sample range [start_sample, end_sample) attributed to one word."""

    word: str
    start_sample: int
    end_sample: int


def _viterbi_states(log_probs: np.ndarray, ext: np.ndarray) -> np.ndarray:
    t_frames, s_states = log_probs.shape[0], ext.size
    skip_ok = _skip_mask(ext)
    score = np.full((t_frames, s_states), NEG_INF)
    back = np.zeros((t_frames, s_states), dtype=np.int64)
    score[0, 0] = log_probs[0, ext[0]]
    if s_states > 1:
        score[0, 1] = log_probs[0, ext[1]]
    for t in range(1, t_frames):
        prev = score[t - 1]
        cand = np.full((3, s_states), NEG_INF)
        cand[0] = prev
        cand[1, 1:] = prev[:-1]
        cand[2, 2:] = np.where(skip_ok[2:], prev[:-2], NEG_INF)
        choice = np.argmax(cand, axis=0)
        score[t] = cand[choice, np.arange(s_states)] + log_probs[t, ext]
        back[t] = choice
    end = s_states - 1
    if s_states > 1 and score[-1, s_states - 2] > score[-1, end]:
        end = s_states - 2
    if score[-1, end] == NEG_INF:
        raise InfeasibleTargetError("no lattice path reaches the final state")
    states = np.zeros(t_frames, dtype=np.int64)
    states[-1] = end
    for t in range(t_frames - 1, 0, -1):
        states[t - 1] = states[t] - back[t, states[t]]
    return states


def forced_align(model: ToyAsrModel, clip: AudioClip,
                 transcript: str) -> list[AlignmentSpan]:
    """Best CTC path constrained to the transcript, reduced to word spans.

    Each span runs from the first frame emitting the word's first character
    to the last frame emitting its last character, mapped to sample indices
    through the frame geometry. Spans are clamped so consecutive words never
    overlap.
    """
    labels = text_to_tokens(transcript)
    _check_feasible(num_frames(clip.n, clip.sample_rate), labels)
    feats, _, _ = _features_fwd(clip.samples, clip.sample_rate)
    log_probs = _log_softmax(forward_logits(model, feats))
    ext = _extend_labels(labels)
    states = _viterbi_states(log_probs, ext)

    window, hop = frame_geometry(clip.sample_rate)
    words = transcript.split()
    spans: list[AlignmentSpan] = []
    token_pos = 0
    for word in words:
        first_label = token_pos
        last_label = token_pos + len(word) - 1
        first_frames = np.flatnonzero(states == 2 * first_label + 1)
        last_frames = np.flatnonzero(states == 2 * last_label + 1)
        start = int(first_frames[0]) * hop
        end = min(clip.n, int(last_frames[-1]) * hop + window)
        spans.append(AlignmentSpan(word, start, end))
        token_pos += len(word) + 1  # skip the separating space token
    for i in range(len(spans) - 1):
        if spans[i].end_sample > spans[i + 1].start_sample:
            spans[i] = AlignmentSpan(
                spans[i].word, spans[i].start_sample, spans[i + 1].start_sample
            )
    return spans


# ---------------------------------------------------------------------------
# Training and checkpoints
# ---------------------------------------------------------------------------

def train_toy_model(corpus, epochs: int, lr: float, seed: int,
                    grad_clip: float = 5.0) -> ToyAsrModel:
    """Seeded SGD on the mean CTC loss over (text, AudioClip) pairs.

    Per-utterance updates in a seeded shuffle order; gradients are norm-clipped
    at grad_clip. Epoch mean losses land in model.loss_log. Deterministic for
    a fixed seed.
    """
    corpus = list(corpus)
    if not corpus:
        raise ValueError("corpus must be nonempty")
    prepared = []
    for text, clip in corpus:
        labels = text_to_tokens(text)
        _check_feasible(num_frames(clip.n, clip.sample_rate), labels)
        feats, _, _ = _features_fwd(clip.samples, clip.sample_rate)
        prepared.append((feats, labels))

    rng = np.random.default_rng(seed)
    model = init_model(seed)
    for epoch in range(epochs):
        order = rng.permutation(len(prepared))
        total = 0.0
        for i in order:
            feats, labels = prepared[i]
            hidden_pre = feats @ model.w1 + model.b1
            hidden = np.maximum(hidden_pre, 0.0)
            logits = hidden @ model.w2 + model.b2
            loss, dlogits = _ctc_loss_from_logits(logits, labels, True)
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch)
            total += loss
            dhidden = (dlogits @ model.w2.T) * (hidden_pre > 0.0)
            grads = (
                feats.T @ dhidden,
                dhidden.sum(axis=0),
                hidden.T @ dlogits,
                dlogits.sum(axis=0),
            )
            norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
            scale = lr * (grad_clip / norm if norm > grad_clip else 1.0)
            model.w1 -= scale * grads[0]
            model.b1 -= scale * grads[1]
            model.w2 -= scale * grads[2]
            model.b2 -= scale * grads[3]
        model.loss_log.append(total / len(prepared))
    return model


CHECKPOINT_MAGIC = b"IORA"
CHECKPOINT_VERSION = 1


def save_model(model: ToyAsrModel, path) -> None:
    """Versioned binary checkpoint: magic, version, dims, float64 LE blocks."""
    f, h = model.w1.shape
    v = model.w2.shape[1]
    blob = CHECKPOINT_MAGIC + bytes([CHECKPOINT_VERSION])
    blob += struct.pack("<III", f, h, v)
    for arr in (model.w1, model.b1, model.w2, model.b2):
        blob += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    Path(path).write_bytes(blob)


def load_model(path) -> ToyAsrModel:
    data = Path(path).read_bytes()
    if len(data) < 17 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad checkpoint magic")
    if data[4] != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {data[4]}")
    f, h, v = struct.unpack_from("<III", data, 5)
    sizes = (f * h, h, h * v, v)
    need = 17 + 8 * sum(sizes)
    if len(data) < need:
        raise CheckpointError(f"{path}: truncated checkpoint")
    offset = 17
    blocks = []
    for count in sizes:
        blocks.append(np.frombuffer(data, dtype="<f8", count=count, offset=offset))
        offset += 8 * count
    return ToyAsrModel(
        blocks[0].reshape(f, h).copy(),
        blocks[1].copy(),
        blocks[2].reshape(h, v).copy(),
        blocks[3].copy(),
    )
