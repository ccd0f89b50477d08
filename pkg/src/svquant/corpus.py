"""Deterministic synthetic speaker corpus with FBank-like frames.

Each speaker owns a unit latent direction, shifted towards one of two
poles by a binary "gender" factor. An utterance renders that direction
(plus a small session offset) through a fixed spectral mixing matrix,
modulates it with a style-dependent energy envelope, adds smoothed
speaker-independent "content", and finally adds coloured noise from one of
four scene types at a fixed SNR.

Every utterance is a pure function of ``(seed, speaker, utterance index)``.
Training and trial speakers are disjoint index ranges.
"""

from dataclasses import asdict, dataclass

import numpy as np

from ._io import write_text
from ._random import rng_for

N_SCENES = 4
N_STYLES = 4
STYLE_RATES = (0.5, 1.5, 3.0, 6.0)  # envelope cycles per second at 100 frames/s
STYLE_SMOOTHING = (0.95, 0.85, 0.6, 0.2)


@dataclass
class CorpusConfig:
    n_train_speakers: int = 20
    n_test_speakers: int = 10
    utts_per_speaker: int = 50
    frames: int = 200
    test_frames: int = 700
    n_mels: int = 64
    latent_dim: int = 16
    content_dim: int = 8
    session_std: float = 0.35
    content_gain: float = 0.8
    gender_strength: float = 0.6
    snr_db: float = 10.0
    trials_per_utterance: int = 10
    seed: int = 0

    def to_dict(self):
        return asdict(self)


@dataclass
class Split:
    """Utterances of one speaker range with every generator label."""

    x: np.ndarray
    speaker: np.ndarray
    gender: np.ndarray
    scene: np.ndarray
    style: np.ndarray
    ids: list

    def __len__(self):
        return len(self.ids)


@dataclass
class Trial:
    label: int
    enroll: str
    test: str


class SyntheticCorpus:
    def __init__(self, config=None):
        self.config = config or CorpusConfig()
        c = self.config
        rng = rng_for(c.seed, "corpus/global")
        self.mixing = rng.normal(size=(c.n_mels, c.latent_dim)) / np.sqrt(c.latent_dim)
        self.content = rng.normal(size=(c.n_mels, c.content_dim)) / np.sqrt(c.content_dim)
        pole = rng.normal(size=c.latent_dim)
        self.gender_axis = pole / np.linalg.norm(pole)
        f = np.linspace(0.0, 1.0, c.n_mels)
        tilts = np.stack([
            (1.0 - f) ** 2 + 0.05,  # low-frequency rumble
            f**2 + 0.05,  # hiss
            np.exp(-((f - 0.5) ** 2) / 0.02) + 0.05,  # band noise
            np.ones_like(f),  # white
        ])
        self.scene_tilts = tilts / np.sqrt((tilts**2).mean(axis=1, keepdims=True))

    @property
    def n_speakers(self):
        return self.config.n_train_speakers + self.config.n_test_speakers

    def speaker(self, s):
        """``(latent direction, gender)`` of global speaker index ``s``."""
        rng = rng_for(self.config.seed, f"corpus/speaker/{s}")
        z = rng.normal(size=self.config.latent_dim)
        z /= np.linalg.norm(z)
        gender = s % 2
        z = z + self.config.gender_strength * (2 * gender - 1) * self.gender_axis
        return z / np.linalg.norm(z), gender

    def utterance(self, s, u, frames=None):
        """Frames ``(T, n_mels)`` plus ``(scene, style)`` of utterance ``u`` of speaker ``s``."""
        c = self.config
        frames = c.frames if frames is None else frames
        rng = rng_for(c.seed, f"corpus/utt/{s}/{u}")
        z, _ = self.speaker(s)
        scene = int(rng.integers(N_SCENES))
        style = int(rng.integers(N_STYLES))
        voice = self.mixing @ (z + c.session_std * rng.normal(size=c.latent_dim) / np.sqrt(c.latent_dim))
        voice *= np.sqrt(c.n_mels) / np.linalg.norm(voice)
        t = np.arange(frames)
        envelope = 1.0 + 0.5 * np.sin(2 * np.pi * STYLE_RATES[style] * t / 100.0 + rng.uniform(0, 2 * np.pi))
        innov = rng.normal(size=(frames, c.content_dim))
        rho = STYLE_SMOOTHING[style]
        content = np.empty_like(innov)
        content[0] = innov[0]
        for i in range(1, frames):
            content[i] = rho * content[i - 1] + np.sqrt(1 - rho**2) * innov[i]
        clean = envelope[:, None] * voice[None, :] + c.content_gain * content @ self.content.T
        noise = rng.normal(size=(frames, c.n_mels)) * self.scene_tilts[scene]
        gain = np.sqrt((clean**2).mean() / ((noise**2).mean() * 10 ** (c.snr_db / 10)))
        return (clean + gain * noise).astype(np.float32), scene, style

    def split(self, name):
        """``"train"`` or ``"test"`` speakers; test utterances use ``test_frames``."""
        c = self.config
        if name == "train":
            speakers, frames = range(c.n_train_speakers), c.frames
        elif name == "test":
            speakers, frames = range(c.n_train_speakers, self.n_speakers), c.test_frames
        else:
            raise ValueError(f"unknown split {name!r}")
        xs, spk, gen, scn, sty, ids = [], [], [], [], [], []
        for s in speakers:
            _, g = self.speaker(s)
            for u in range(c.utts_per_speaker):
                x, scene, style = self.utterance(s, u, frames)
                xs.append(x)
                spk.append(s)
                gen.append(g)
                scn.append(scene)
                sty.append(style)
                ids.append(utt_id(s, u))
        return Split(np.stack(xs), np.array(spk), np.array(gen), np.array(scn), np.array(sty), ids)

    def trials(self, per_utterance=None):
        """Target and non-target trials among the test speakers.

        Every test utterance enrolls against ``per_utterance`` random other
        utterances of the same speaker and as many of other speakers
        (default ``config.trials_per_utterance``, capped at the number of
        other utterances per speaker).
        """
        c = self.config
        if per_utterance is None:
            per_utterance = c.trials_per_utterance
        per_utterance = min(int(per_utterance), c.utts_per_speaker - 1)
        if per_utterance < 1:
            raise ValueError("trials need at least two utterances per speaker")
        rng = rng_for(c.seed, "corpus/trials")
        test = list(range(c.n_train_speakers, self.n_speakers))
        out = []
        for s in test:
            for u in range(c.utts_per_speaker):
                others = [v for v in range(c.utts_per_speaker) if v != u]
                for v in rng.choice(others, size=per_utterance, replace=False):
                    out.append(Trial(1, utt_id(s, u), utt_id(s, int(v))))
                impostors = [t for t in test if t != s]
                for _ in range(per_utterance):
                    t = int(rng.choice(impostors))
                    out.append(Trial(0, utt_id(s, u), utt_id(t, int(rng.integers(c.utts_per_speaker)))))
        return out


def utt_id(s, u):
    return f"spk{s:03d}/utt{u:03d}"


def write_trials(trials, path):
    write_text(path, "".join(f"{t.label} {t.enroll} {t.test}\n" for t in trials))


def read_trials(path):
    labels = {"1": 1, "0": 0, "target": 1, "nontarget": 0}
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3 or parts[0] not in labels:
                raise ValueError(f"{path}:{lineno}: expected 'label enroll_id test_id'")
            out.append(Trial(labels[parts[0]], parts[1], parts[2]))
    return out
