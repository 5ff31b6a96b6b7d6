"""Write a small LibriSpeech-shaped corpus rendered by the toy backend."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .audio import write_wav
from .synthesis.backends import Backends, toy_backends
from .synthesis.pipeline import render_voice
from .synthesis.toy import ToyVoice, random_text, random_voice

SUBSET = "train-clean-100"


def toy_voices(n_female: int, n_male: int, seed: int) -> list[ToyVoice]:
    rng = np.random.default_rng(seed)
    voices = []
    for k in range(n_female + n_male):
        gender = "female" if k < n_female else "male"
        voices.append(random_voice(str(1000 + k), gender, rng))
    return voices


def write_toy_corpus(
    root: str | Path,
    n_female: int = 3,
    n_male: int = 3,
    clips_per_speaker: int = 2,
    clip_seconds: float = 6.0,
    seed: int = 0,
    backends: Backends | None = None,
) -> list[ToyVoice]:
    """Render toy speakers into ``root`` and return their ground truth.

    ``voices.json`` next to ``SPEAKERS.TXT`` records each speaker's true
    timbre and prosody statistics.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    backends = backends or toy_backends()
    voices = toy_voices(n_female, n_male, seed)
    rng = np.random.default_rng([seed, 1])
    rows = [";ID  |SEX| SUBSET           |MINUTES| NAME"]
    truth = {}
    for v in voices:
        chapter = "1"
        d = root / SUBSET / v.speaker_id / chapter
        d.mkdir(parents=True, exist_ok=True)
        lines = []
        total = 0.0
        for u in range(clips_per_speaker):
            clip_id = f"{v.speaker_id}-{chapter}-{u:04d}"
            text = random_text(rng, clip_seconds)
            wav = render_voice(v, text, backends, seed=int(rng.integers(2**31)))
            write_wav(wav, d / f"{clip_id}.wav")
            lines.append(f"{clip_id} {text.upper()}")
            total += wav.duration
        (d / f"{v.speaker_id}-{chapter}.trans.txt").write_text("\n".join(lines) + "\n",
                                                               encoding="utf-8")
        sex = "F" if v.gender == "female" else "M"
        rows.append(f"{v.speaker_id:<5}| {sex} | {SUBSET:<16} | {total / 60:5.2f} | Toy {v.speaker_id}")
        truth[v.speaker_id] = {"gender": v.gender, "timbre": v.timbre.tolist(),
                               "prosody_stats": list(v.prosody_stats)}
    (root / "SPEAKERS.TXT").write_text("\n".join(rows) + "\n", encoding="utf-8")
    (root / "voices.json").write_text(json.dumps(truth, indent=1, sort_keys=True) + "\n",
                                      encoding="utf-8")
    return voices
