"""The toy backend behind the external-executable contract.

Run as ``python -m voicemorph.synthesis.toy_exec <verb> ...``; see
:class:`voicemorph.synthesis.backends.ExecAdapter` for the verbs. Useful for
testing manifests with ``entry = exec:...`` without any real model.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from ..audio import read_wav, write_wav
from ..embedding import load_matrix, load_vector, save_matrix, save_vector
from . import toy
from .pipeline import generate_tokens, integrate_flow

_ENCODERS = {"prosody": toy.ToyProsodyEncoder, "timbre": toy.ToyTimbreEncoder,
             "asv": toy.ToyASVEncoder}


def _tokens(path: str) -> list[int]:
    return [int(x) for x in Path(path).read_text(encoding="utf-8").split()]


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="toy_exec")
    ap.add_argument("verb", choices=["encode", "generate", "decode", "vocode", "embed",
                                     "transcribe"])
    for flag in ("--kind", "--input", "--output", "--text-tokens", "--prosody", "--tokens",
                 "--timbre", "--mel"):
        ap.add_argument(flag)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps", type=int, default=32)
    ap.add_argument("--guidance", type=float, default=1.0)
    a = ap.parse_args(argv)

    if a.verb == "encode":
        enc = _ENCODERS[a.kind]()
        save_vector(a.output, enc.encode(read_wav(a.input)), kind=a.kind,
                    encoder_name=enc.name, encoder_version=enc.version)
    elif a.verb == "generate":
        prosody, _ = load_vector(a.prosody)
        prosody = prosody / np.linalg.norm(prosody)
        seq = generate_tokens(_tokens(a.text_tokens), prosody, toy.ToyTokenLM(), a.seed,
                              a.guidance)
        Path(a.output).write_text(" ".join(map(str, seq.tokens)), encoding="utf-8")
    elif a.verb == "decode":
        tokens = _tokens(a.tokens)
        timbre, _ = load_vector(a.timbre)
        dec = toy.ToyFlowDecoder()
        x0 = np.random.default_rng(a.seed).standard_normal((dec.frames_for(tokens), dec.n_mels))
        mel = integrate_flow(x0, lambda x, t, c: dec.velocity(x, t, tokens, c), timbre,
                             a.steps, a.guidance)
        save_matrix(a.output, mel)
    elif a.verb == "vocode":
        write_wav(toy.ToyVocoder().vocode(load_matrix(a.mel)), a.output)
    elif a.verb == "embed":
        save_matrix(a.output, toy.ToyFADEmbedder().embed(read_wav(a.input)), kind="fad")
    else:
        print("toy backend has no speech recogniser", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
