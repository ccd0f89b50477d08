"""Verification scoring: segment averaging, adaptive s-norm and EER.

Utterances are cut into 4 s windows with 1 s overlap (400 frames, hop 300
at 100 frames/s). A trial score is the mean cosine over every enrollment
by test segment pair. Utterances shorter than one window are scored as a
single segment.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from ._io import write_text
from .exceptions import NonFiniteError, SigmaFloorWarning, UsageError
from .training import embed

FRAMES_PER_SECOND = 100
WINDOW_FRAMES = 4 * FRAMES_PER_SECOND
HOP_FRAMES = 3 * FRAMES_PER_SECOND
STD_FLOOR = 1e-8


def segment_bounds(n_frames, window=WINDOW_FRAMES, hop=HOP_FRAMES):
    """``(start, stop)`` of every full window; one whole-utterance segment if too short."""
    if n_frames <= 0:
        raise ValueError("cannot segment an empty utterance")
    if n_frames < window:
        return [(0, n_frames)]
    return [(s, s + window) for s in range(0, n_frames - window + 1, hop)]


def segment_embed(frames, model, window=WINDOW_FRAMES, hop=HOP_FRAMES):
    """Embeddings ``(n_segments, dim)`` of one utterance ``(T, F)``."""
    frames = np.asarray(frames, dtype=np.float32)
    segs = np.stack([frames[a:b] for a, b in segment_bounds(len(frames), window, hop)])
    return embed(model, segs)


def embed_utterances(model, x, ids, window=WINDOW_FRAMES, hop=HOP_FRAMES):
    """Segment embeddings for a batch of equal-length utterances, keyed by id."""
    x = np.asarray(x, dtype=np.float32)
    bounds = segment_bounds(x.shape[1], window, hop)
    segs = np.concatenate([x[:, a:b] for a, b in bounds], axis=0)
    emb = embed(model, segs).reshape(len(bounds), len(x), -1)
    return {uid: emb[:, i] for i, uid in enumerate(ids)}


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise NonFiniteError("zero-norm embedding")
    return v / norms


def trial_score(enroll_segs, test_segs):
    """Mean cosine similarity over all enrollment x test segment pairs."""
    e = _unit(np.atleast_2d(enroll_segs))
    t = _unit(np.atleast_2d(test_segs))
    if not len(e) or not len(t):
        raise ValueError("trial_score needs at least one segment on each side")
    return float((e @ t.T).mean())


def utterance_vector(segs):
    """Single unit vector of an utterance: mean of its unit segment embeddings."""
    return _unit(_unit(np.atleast_2d(segs)).mean(axis=0))


@dataclass
class ScoreSet:
    enroll: list
    test: list
    labels: np.ndarray
    raw: np.ndarray
    norm: np.ndarray = field(default=None)

    def __len__(self):
        return len(self.raw)


def score_trials(trials, segments):
    """Raw scores for ``trials`` given a mapping id -> segment embeddings."""
    raw = np.array([trial_score(segments[t.enroll], segments[t.test]) for t in trials])
    return ScoreSet([t.enroll for t in trials], [t.test for t in trials], np.array([t.label for t in trials]), raw)


def as_norm_score(s, mu_e, sd_e, mu_t, sd_t):
    return 0.5 * ((s - mu_e) / sd_e + (s - mu_t) / sd_t)


def _cohort_stats(vec, cohort, top_k):
    sims = cohort @ vec
    top = np.sort(sims)[-top_k:]
    sd = top.std()
    if sd < STD_FLOOR:
        warnings.warn("cohort scores have zero variance; std floored", SigmaFloorWarning, stacklevel=3)
        sd = STD_FLOOR
    return top.mean(), sd


def as_norm(scores, vectors, cohort, top_k=50):
    """Adaptive s-norm with the ``top_k`` closest cohort entries on each side.

    ``vectors`` maps utterance ids to embeddings (unit-normalized here);
    ``cohort`` is an ``(M, dim)`` array.
    """
    cohort = _unit(cohort)
    if not 2 <= top_k <= len(cohort):
        raise ValueError(f"need 2 <= top_k <= cohort size ({len(cohort)}), got {top_k}")
    cache = {}

    def stats(uid):
        if uid not in cache:
            cache[uid] = _cohort_stats(_unit(vectors[uid]), cohort, top_k)
        return cache[uid]

    norm = np.empty_like(scores.raw)
    for i, (e, t, s) in enumerate(zip(scores.enroll, scores.test, scores.raw)):
        norm[i] = as_norm_score(s, *stats(e), *stats(t))
    return ScoreSet(scores.enroll, scores.test, scores.labels, scores.raw, norm)


def operating_points(scores, labels):
    """Thresholds (every distinct score, then +inf) with their FAR and FRR.

    FAR(t) is the share of non-targets scoring ``>= t``; FRR(t) the share of
    targets scoring ``< t``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    tgt, non = np.sort(scores[labels]), np.sort(scores[~labels])
    if not len(tgt) or not len(non):
        raise UsageError("EER needs at least one target and one non-target trial")
    thr = np.append(np.unique(scores), np.inf)
    far = (len(non) - np.searchsorted(non, thr, side="left")) / len(non)
    frr = np.searchsorted(tgt, thr, side="left") / len(tgt)
    return thr, far, frr


def compute_eer(scores, labels):
    """Equal error rate and its threshold.

    Linear interpolation between the two operating points bracketing
    FAR = FRR; exact when some operating point already has FAR = FRR.
    """
    thr, far, frr = operating_points(scores, labels)
    d = far - frr
    i = int(np.argmax(d <= 0))
    if d[i] == 0:
        return float(far[i]), float(thr[i])
    lam = d[i - 1] / (d[i - 1] - d[i])
    eer = far[i - 1] + lam * (far[i] - far[i - 1])
    threshold = thr[i - 1] if np.isinf(thr[i]) else thr[i - 1] + lam * (thr[i] - thr[i - 1])
    return float(eer), float(threshold)


def write_scores(scores, path):
    norm = scores.norm if scores.norm is not None else np.full(len(scores), np.nan)
    lines = [f"{e} {t} {r:.8f} {n:.8f}\n" for e, t, r, n in zip(scores.enroll, scores.test, scores.raw, norm)]
    write_text(path, "".join(lines))


def evaluate(model, split, trials, cohort_x=None, cohort_labels=None, top_k=50, window=WINDOW_FRAMES, hop=HOP_FRAMES):
    """Score ``trials`` on ``split`` and report raw and AS-normed EER.

    The cohort is the mean unit embedding of each cohort speaker, computed
    from whole training utterances ``cohort_x``. ``top_k`` is capped at
    the cohort size.
    """
    segments = embed_utterances(model, split.x, split.ids, window, hop)
    scores = score_trials(trials, segments)
    eer_raw, thr_raw = compute_eer(scores.raw, scores.labels)
    result = {"trials": len(scores), "eer_raw": eer_raw, "threshold_raw": thr_raw}
    if cohort_x is not None:
        emb = _unit(embed(model, cohort_x))
        labels = np.asarray(cohort_labels)
        cohort = np.stack([emb[labels == s].mean(axis=0) for s in np.unique(labels)])
        k = min(top_k, len(cohort))
        vectors = {uid: utterance_vector(seg) for uid, seg in segments.items()}
        scores = as_norm(scores, vectors, cohort, k)
        eer, thr = compute_eer(scores.norm, scores.labels)
        result.update(eer=eer, threshold=thr, top_k=k)
    else:
        result.update(eer=eer_raw, threshold=thr_raw)
    return result, scores
