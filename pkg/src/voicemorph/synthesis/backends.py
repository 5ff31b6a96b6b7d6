"""Backend registry: in-process adapters, external executables and the manifest.

A backend manifest is an INI-style text file with one section per stage::

    [timbre_encoder]
    name = campplus
    version = 0.3
    entry = exec:/opt/models/campplus-encode
    dims = 192
    reentrant = false

``entry`` is ``inproc:toy`` for the built-in toy stage, ``inproc:pkg.mod:factory``
for any importable factory, or ``exec:<command line>`` for an external program
called once per request (see :class:`ExecAdapter` for the argument contract).
"""

from __future__ import annotations

import configparser
import importlib
import shlex
import subprocess
import tempfile
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from ..audio import Waveform, read_wav, write_wav
from ..embedding import load_matrix, load_vector, save_matrix, save_vector
from ..errors import BackendError, FormatError
from . import toy

STAGES = (
    "prosody_encoder",
    "timbre_encoder",
    "lm",
    "decoder",
    "vocoder",
    "asv_encoder",
    "fad_embedder",
    "asr",
)
OPTIONAL_STAGES = ("asr",)

_TOY_FACTORIES = {
    "prosody_encoder": toy.ToyProsodyEncoder,
    "timbre_encoder": toy.ToyTimbreEncoder,
    "lm": toy.ToyTokenLM,
    "decoder": toy.ToyFlowDecoder,
    "vocoder": toy.ToyVocoder,
    "asv_encoder": toy.ToyASVEncoder,
    "fad_embedder": toy.ToyFADEmbedder,
}


@dataclass
class Backends:
    prosody_encoder: Any
    timbre_encoder: Any
    lm: Any
    decoder: Any
    vocoder: Any
    asv_encoder: Any
    fad_embedder: Any
    asr: Any = None
    _locks: dict = field(default_factory=dict, repr=False, compare=False)
    _locks_guard: threading.Lock = field(default_factory=threading.Lock, repr=False,
                                         compare=False)

    def stages(self) -> dict[str, Any]:
        return {s: getattr(self, s) for s in STAGES if getattr(self, s) is not None}

    def describe(self) -> dict[str, dict]:
        out = {}
        for stage, b in self.stages().items():
            info = {"name": getattr(b, "name", type(b).__name__),
                    "version": str(getattr(b, "version", ""))}
            if hasattr(b, "decoding"):
                info["decoding"] = b.decoding()
            out[stage] = info
        return out

    @contextmanager
    def guard(self, backend):
        """Serialize calls into ``backend`` unless it declares itself reentrant."""
        if getattr(backend, "reentrant", False):
            yield
            return
        with self._locks_guard:
            lock = self._locks.setdefault(id(backend), threading.Lock())
        with lock:
            yield


def toy_backends(**overrides) -> Backends:
    stages = {name: factory() for name, factory in _TOY_FACTORIES.items()}
    stages.update(overrides)
    return Backends(**stages)


# ---------------------------------------------------------------------------
# External executables


class ExecAdapter:
    """Spawn-per-call wrapper around an external program.

    The program is invoked as ``<command> <verb> [--flag value ...]`` and
    exchanges files in a private temporary directory:

    ========  ===========================================================
    verb      arguments and output
    ========  ===========================================================
    encode    ``--kind K --input in.wav --output out.f32`` (+ ``out.meta``)
    generate  ``--text-tokens t.txt --prosody p.f32 --seed N --guidance W
              --output out.txt`` (whitespace-separated token ids)
    decode    ``--tokens t.txt --timbre e.f32 --seed N --steps S --guidance W
              --output mel.f32`` (shape-headed matrix)
    vocode    ``--mel mel.f32 --output out.wav``
    embed     ``--input in.wav --output emb.f32`` (shape-headed matrix)
    transcribe ``--input in.wav --output out.txt``
    ========  ===========================================================

    A non-zero exit status raises :class:`BackendError` carrying stderr.
    """

    def __init__(self, command: str, name: str, version: str, *, reentrant: bool = False,
                 timeout: float = 600.0, **extra):
        self.argv = shlex.split(command)
        self.name = name
        self.version = version
        self.reentrant = reentrant
        self.timeout = timeout
        for k, v in extra.items():
            setattr(self, k, v)

    def _run(self, verb: str, args: list[str]) -> None:
        cmd = self.argv + [verb] + args
        try:
            proc = subprocess.run(cmd, capture_output=True, text=True, timeout=self.timeout)
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise BackendError(f"{self.name}: could not run {verb}: {exc}", str(exc)) from exc
        if proc.returncode != 0:
            raise BackendError(
                f"{self.name}: {verb} exited with status {proc.returncode}",
                proc.stderr[-4000:],
            )


class ExecEncoder(ExecAdapter):
    def encode(self, waveform: Waveform) -> np.ndarray:
        with tempfile.TemporaryDirectory() as d:
            inp, out = Path(d) / "in.wav", Path(d) / "out.f32"
            write_wav(waveform, inp)
            self._run("encode", ["--kind", self.kind, "--input", str(inp), "--output", str(out)])
            try:
                v, _ = load_vector(out)
            except (OSError, FormatError) as exc:
                raise BackendError(f"{self.name}: unreadable output: {exc}") from exc
            return v


class ExecLM(ExecAdapter):
    def decoding(self) -> dict:
        return {"strategy": "backend-defined"}

    def generate(self, text_tokens, prosody, seed: int, guidance_scale: float) -> list[int]:
        with tempfile.TemporaryDirectory() as d:
            tt, pp, out = Path(d) / "text.txt", Path(d) / "prosody.f32", Path(d) / "tokens.txt"
            tt.write_text(" ".join(map(str, text_tokens)), encoding="utf-8")
            save_vector(pp, prosody, kind="prosody")
            self._run("generate", ["--text-tokens", str(tt), "--prosody", str(pp),
                                   "--seed", str(seed), "--guidance", repr(guidance_scale),
                                   "--output", str(out)])
            try:
                return [int(x) for x in out.read_text(encoding="utf-8").split()]
            except (OSError, ValueError) as exc:
                raise BackendError(f"{self.name}: unreadable token output: {exc}") from exc


class ExecDecoder(ExecAdapter):
    def decode(self, tokens, timbre, seed: int, steps: int, guidance_scale: float) -> np.ndarray:
        with tempfile.TemporaryDirectory() as d:
            tt, ee, out = Path(d) / "tokens.txt", Path(d) / "timbre.f32", Path(d) / "mel.f32"
            tt.write_text(" ".join(map(str, tokens)), encoding="utf-8")
            save_vector(ee, timbre, kind="timbre")
            self._run("decode", ["--tokens", str(tt), "--timbre", str(ee), "--seed", str(seed),
                                 "--steps", str(steps), "--guidance", repr(guidance_scale),
                                 "--output", str(out)])
            try:
                return load_matrix(out)
            except (OSError, FormatError) as exc:
                raise BackendError(f"{self.name}: unreadable mel output: {exc}") from exc


class ExecVocoder(ExecAdapter):
    def vocode(self, mel) -> Waveform:
        with tempfile.TemporaryDirectory() as d:
            mm, out = Path(d) / "mel.f32", Path(d) / "out.wav"
            save_matrix(mm, mel)
            self._run("vocode", ["--mel", str(mm), "--output", str(out)])
            try:
                return read_wav(out)
            except (OSError, FormatError) as exc:
                raise BackendError(f"{self.name}: unreadable audio output: {exc}") from exc


class ExecEmbedder(ExecAdapter):
    def embed(self, waveform: Waveform) -> np.ndarray:
        with tempfile.TemporaryDirectory() as d:
            inp, out = Path(d) / "in.wav", Path(d) / "emb.f32"
            write_wav(waveform, inp)
            self._run("embed", ["--input", str(inp), "--output", str(out)])
            try:
                return load_matrix(out)
            except (OSError, FormatError) as exc:
                raise BackendError(f"{self.name}: unreadable embedding output: {exc}") from exc


class ExecASR(ExecAdapter):
    def transcribe(self, waveform: Waveform) -> str:
        with tempfile.TemporaryDirectory() as d:
            inp, out = Path(d) / "in.wav", Path(d) / "out.txt"
            write_wav(waveform, inp)
            self._run("transcribe", ["--input", str(inp), "--output", str(out)])
            return out.read_text(encoding="utf-8").strip()


_EXEC_CLASSES = {
    "prosody_encoder": ExecEncoder,
    "timbre_encoder": ExecEncoder,
    "asv_encoder": ExecEncoder,
    "lm": ExecLM,
    "decoder": ExecDecoder,
    "vocoder": ExecVocoder,
    "fad_embedder": ExecEmbedder,
    "asr": ExecASR,
}
_EXEC_KIND = {"prosody_encoder": "prosody", "timbre_encoder": "timbre", "asv_encoder": "asv"}


def _truthy(value: str) -> bool:
    return value.strip().lower() in ("1", "true", "yes", "on")


def _build_stage(stage: str, sec: configparser.SectionProxy):
    entry = sec.get("entry", "inproc:toy").strip()
    name = sec.get("name", stage)
    version = sec.get("version", "")
    reentrant = _truthy(sec.get("reentrant", "false"))
    if entry == "inproc:toy":
        if stage not in _TOY_FACTORIES:
            raise FormatError(f"no toy backend for stage {stage!r}")
        return _TOY_FACTORIES[stage]()
    if entry.startswith("inproc:"):
        target = entry[len("inproc:"):]
        mod_name, _, attr = target.partition(":")
        try:
            factory = getattr(importlib.import_module(mod_name), attr)
        except (ImportError, AttributeError) as exc:
            raise FormatError(f"[{stage}] cannot import {target!r}: {exc}") from exc
        return factory()
    if entry.startswith("exec:"):
        extra: dict[str, Any] = {}
        if stage in _EXEC_KIND:
            extra["kind"] = _EXEC_KIND[stage]
            extra["dim"] = int(sec.get("dims", "0"))
            extra["min_duration"] = float(sec.get("min_duration", "5.0"))
        if stage == "lm":
            if "vocab_size" not in sec:
                raise FormatError("[lm] exec backends must declare vocab_size")
            extra["vocab_size"] = int(sec["vocab_size"])
        if stage == "decoder":
            extra["n_mels"] = int(sec.get("dims", "80"))
        return _EXEC_CLASSES[stage](entry[len("exec:"):], name, version,
                                    reentrant=reentrant, **extra)
    raise FormatError(f"[{stage}] unsupported entry {entry!r}")


def load_manifest(path: str | Path) -> Backends:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise FormatError(f"cannot read backend manifest {path}: {exc}") from exc
    unknown = set(parser.sections()) - set(STAGES)
    if unknown:
        raise FormatError(f"unknown stages in manifest: {sorted(unknown)}")
    stages = {}
    for stage in STAGES:
        if parser.has_section(stage):
            stages[stage] = _build_stage(stage, parser[stage])
        elif stage in OPTIONAL_STAGES:
            stages[stage] = None
        else:
            raise FormatError(f"backend manifest lacks required stage [{stage}]")
    return Backends(**stages)


def write_toy_manifest(path: str | Path) -> None:
    """Write a manifest that selects the built-in toy stage everywhere."""
    lines = []
    for stage, factory in _TOY_FACTORIES.items():
        b = factory()
        lines += [f"[{stage}]", f"name = {b.name}", f"version = {b.version}",
                  "entry = inproc:toy"]
        if hasattr(b, "dim"):
            lines.append(f"dims = {b.dim}")
        if hasattr(b, "vocab_size"):
            lines.append(f"vocab_size = {b.vocab_size}")
        lines += [f"reentrant = {str(b.reentrant).lower()}", ""]
    Path(path).write_text("\n".join(lines), encoding="utf-8")
