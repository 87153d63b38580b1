"""Synthetic speech/noise corpus and mixing manifests.

Clean "speech" is a train of voiced syllables: harmonic series on a
drifting pitch contour, shaped by three formant resonances and a
syllabic envelope, separated by short pauses. Noise comes in four
families (white, coloured, babble-like, machine-like) with disjoint seen
and unseen kinds.

A manifest line is ``clean_path \\t noise_path \\t offset \\t snr_db \\t split``;
mixtures are regenerated from it on demand, never stored.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .dsp import SAMPLE_RATE, mix_at_snr, read_wav, write_wav
from .errors import DataError

log = logging.getLogger(__name__)

TRAIN_SNRS = tuple(float(s) for s in range(-5, 11))
TEST_SNRS = (-5.0, 0.0, 5.0, 10.0)
DESK_SPLITS = {"train": 200, "val": 40, "test": 20}
DURATION_RANGE = (0.3, 0.6)
NOISE_SECONDS = 12.0


def _seed(*parts) -> np.random.Generator:
    return np.random.default_rng([int(p) for p in parts])


def _formant_gain(freq: np.ndarray, formants: Sequence[tuple[float, float]]) -> np.ndarray:
    g = np.zeros_like(freq)
    for centre, bw in formants:
        g += 1.0 / (1.0 + ((freq - centre) / (bw / 2)) ** 2)
    return g


def synth_syllable(rng: np.random.Generator, n: int, f0_range=(80.0, 300.0), sr: int = SAMPLE_RATE) -> np.ndarray:
    t = np.arange(n) / sr
    f_start = rng.uniform(*f0_range)
    f_end = np.clip(f_start * rng.uniform(0.75, 1.3), *f0_range)
    vib = 1.0 + 0.02 * np.sin(2 * np.pi * rng.uniform(3, 7) * t + rng.uniform(0, 2 * np.pi))
    f0 = (f_start + (f_end - f_start) * t / max(t[-1], 1e-9)) * vib
    phase = 2 * np.pi * np.cumsum(f0) / sr
    formants = [(rng.uniform(300, 900), rng.uniform(60, 120)),
                (rng.uniform(900, 2400), rng.uniform(80, 160)),
                (rng.uniform(2400, 3500), rng.uniform(120, 250))]
    out = np.zeros(n)
    k_max = int(4000 // f0_range[0])
    for k in range(1, k_max + 1):
        fk = k * f0
        amp = _formant_gain(fk, formants) * (fk < 4000) / np.sqrt(k)
        out += amp * np.sin(k * phase)
    attack = min(n // 4, int(0.03 * sr))
    env = np.ones(n)
    ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(attack) / max(attack, 1))
    env[:attack] = ramp
    env[n - attack:] = ramp[::-1]
    am = 1.0 + 0.3 * np.sin(2 * np.pi * rng.uniform(2, 5) * t)
    return out * env * am


def synth_speech(rng: np.random.Generator, n: int, sr: int = SAMPLE_RATE, f0_range=(80.0, 300.0)) -> np.ndarray:
    """One utterance: syllables of 80-250 ms separated by 20-120 ms pauses."""
    out = np.zeros(n)
    pos = int(rng.uniform(0.0, 0.08) * sr)
    while pos < n:
        length = int(rng.uniform(0.08, 0.25) * sr)
        length = min(length, n - pos)
        if length < int(0.03 * sr):
            break
        out[pos:pos + length] += synth_syllable(rng, length, f0_range, sr) * rng.uniform(0.4, 1.0)
        pos += length + int(rng.uniform(0.02, 0.12) * sr)
    return out


def _normalize_peak(x: np.ndarray, peak: float) -> np.ndarray:
    m = np.max(np.abs(x))
    return x if m == 0 else x * (peak / m)


def synth_clean(seed: int, count: int, out_dir, duration_range=DURATION_RANGE, prefix: str = "utt",
                sr: int = SAMPLE_RATE) -> list[Path]:
    """Write ``count`` speech-like WAVs; byte-identical for a given seed."""
    if count < 1:
        raise DataError("need at least one utterance")
    out_dir = Path(out_dir)
    paths = []
    for i in range(count):
        rng = _seed(seed, 1, i)
        n = int(rng.uniform(*duration_range) * sr)
        x = synth_speech(rng, n, sr)
        if not np.any(x):
            x[n // 2] = 1e-3
        x = _normalize_peak(x, rng.uniform(0.3, 0.9))
        paths.append(write_wav(out_dir / f"{prefix}_{i:04d}.wav", x))
    return paths


def _coloured(rng, n, exponent: float) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.arange(len(spec), dtype=np.float64)
    f[0] = 1.0
    return np.fft.irfft(spec / f ** (exponent / 2), n)


def _babble(rng, n, talkers: int, sr=SAMPLE_RATE) -> np.ndarray:
    """Crowd-like texture: per talker a few tones in the voice band, each with syllabic AM."""
    t = np.arange(n) / sr
    out = np.zeros(n)
    for _ in range(talkers):
        rate = rng.uniform(2.0, 6.0)
        for _ in range(4):
            f = rng.uniform(150.0, 3500.0)
            env = np.clip(np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi)), 0.0, None)
            out += env * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi)) * rng.uniform(0.3, 1.0)
    return out


def _hum(rng, n, f0: float, sr=SAMPLE_RATE, impulses_per_s: float = 0.0) -> np.ndarray:
    t = np.arange(n) / sr
    x = sum(np.sin(2 * np.pi * k * f0 * t + rng.uniform(0, 2 * np.pi)) / k for k in range(1, 9))
    x = x + 0.05 * rng.standard_normal(n)
    if impulses_per_s:
        period = int(sr / impulses_per_s)
        decay = np.exp(-np.arange(int(0.004 * sr)) / (0.001 * sr))
        for start in range(int(rng.integers(period)), n - len(decay), period):
            x[start:start + len(decay)] += 3.0 * decay * rng.choice([-1.0, 1.0])
    return x


def _am(rng, x, rate: float, depth: float, sr=SAMPLE_RATE) -> np.ndarray:
    t = np.arange(len(x)) / sr
    return x * (1.0 + depth * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi)))


NOISE_KINDS: dict[str, Callable[[np.random.Generator, int], np.ndarray]] = {
    # seen
    "white": lambda rng, n: rng.standard_normal(n),
    "pink": lambda rng, n: _coloured(rng, n, 1.0),
    "brown": lambda rng, n: _coloured(rng, n, 2.0),
    "babble3": lambda rng, n: _babble(rng, n, 3),
    "babble5": lambda rng, n: _babble(rng, n, 5),
    "hum50": lambda rng, n: _hum(rng, n, 50.0),
    "engine": lambda rng, n: _hum(rng, n, 95.0, impulses_per_s=12.0),
    "pink_am": lambda rng, n: _am(rng, _coloured(rng, n, 1.0), 4.0, 0.8),
    # unseen
    "white_am": lambda rng, n: _am(rng, rng.standard_normal(n), 2.5, 0.9),
    "blue": lambda rng, n: _coloured(rng, n, -1.0),
    "babble8": lambda rng, n: _babble(rng, n, 8),
    "factory": lambda rng, n: _hum(rng, n, 140.0, impulses_per_s=30.0) + 0.5 * _coloured(rng, n, 1.0),
}
SEEN_NOISES = ("white", "pink", "brown", "babble3", "babble5", "hum50", "engine", "pink_am")
UNSEEN_NOISES = ("white_am", "blue", "babble8", "factory")


def synth_noise(seed: int, kinds: Iterable[str], out_dir, seconds: float = NOISE_SECONDS,
                sr: int = SAMPLE_RATE) -> list[Path]:
    """One long WAV per noise kind, named ``<kind>.wav``."""
    out_dir = Path(out_dir)
    paths = []
    for kind in kinds:
        try:
            gen = NOISE_KINDS[kind]
        except KeyError:
            raise DataError(f"unknown noise kind {kind!r}") from None
        rng = _seed(seed, 2, sorted(NOISE_KINDS).index(kind))
        x = _normalize_peak(gen(rng, int(seconds * sr)), 0.9)
        paths.append(write_wav(out_dir / f"{kind}.wav", x))
    return paths


def concatenate_noises(noises: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """All noises head to tail, plus the start offset of each."""
    starts = np.cumsum([0] + [len(n) for n in noises[:-1]])
    return np.concatenate(noises), starts


def random_cut(lengths: Sequence[int], need: int, rng: np.random.Generator) -> tuple[int, int]:
    """Random cutting point in the concatenated noise vector.

    Returns (source index, local offset) of a segment of ``need`` samples
    that lies inside a single source, so every mixture keeps one noise
    label. Cut points are uniform over all admissible positions.
    """
    room = np.array([max(n - need + 1, 0) for n in lengths])
    if room.sum() == 0:
        raise DataError(f"no noise source is long enough for {need} samples")
    pos = int(rng.integers(room.sum()))
    idx = int(np.searchsorted(np.cumsum(room), pos, side="right"))
    return idx, pos - int(np.cumsum(room)[idx] - room[idx])


@dataclass(frozen=True)
class Record:
    clean: str
    noise: str
    offset: int
    snr_db: float
    split: str

    @property
    def noise_kind(self) -> str:
        return Path(self.noise).stem

    def line(self) -> str:
        return f"{self.clean}\t{self.noise}\t{self.offset}\t{self.snr_db:g}\t{self.split}"


class Manifest(list):
    """List of :class:`Record` with text (de)serialization."""

    def dumps(self) -> str:
        return "".join(r.line() + "\n" for r in self)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.dumps().encode("utf-8"))
        return path

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise DataError(f"cannot read manifest {path}: {exc}") from exc
        out = cls()
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise DataError(f"{path}:{lineno}: expected 5 tab-separated fields, got {len(parts)}")
            try:
                out.append(Record(parts[0], parts[1], int(parts[2]), float(parts[3]), parts[4]))
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
        return out


def _wavs(d) -> list[Path]:
    d = Path(d)
    files = sorted(d.glob("*.wav")) if d.is_dir() else []
    if not files:
        raise DataError(f"no WAV files in {d}")
    return files


def _num_samples(path: Path) -> int:
    import wave

    with wave.open(str(path), "rb") as f:
        return f.getnframes()


def build_manifest(clean_dir, noise_dirs, snr_grid: Sequence[float], seed: int, split: str,
                   exhaustive: bool = False) -> Manifest:
    """Pair clean utterances with noise cuts and SNRs.

    By default each utterance gets one mixture with noise kind/offset drawn
    from the concatenated noise bank and an SNR drawn uniformly from
    ``snr_grid``. ``exhaustive`` instead emits every (noise kind, SNR)
    combination per utterance, with random offsets.
    """
    if isinstance(noise_dirs, (str, Path)):
        noise_dirs = [noise_dirs]
    cleans = _wavs(clean_dir)
    noises = [p for d in noise_dirs for p in _wavs(d)]
    noise_len = [_num_samples(p) for p in noises]
    rng = _seed(seed, 3, sum(map(ord, split)))
    grid = [float(s) for s in snr_grid]
    out = Manifest()
    for c in cleans:
        need = _num_samples(c)
        if exhaustive:
            for ni, noise in enumerate(noises):
                for snr in grid:
                    if noise_len[ni] < need:
                        raise DataError(f"{noise} is shorter than {c}")
                    off = int(rng.integers(noise_len[ni] - need + 1))
                    out.append(Record(str(c), str(noise), off, snr, split))
        else:
            ni, off = random_cut(noise_len, need, rng)
            snr = grid[int(rng.integers(len(grid)))]
            out.append(Record(str(c), str(noises[ni]), off, snr, split))
    return out


def mix_record(rec: Record) -> tuple[np.ndarray, np.ndarray]:
    """(noisy, clean) waveforms regenerated from a manifest record."""
    s = read_wav(rec.clean).samples
    d = read_wav(rec.noise).samples
    seg = d[rec.offset:rec.offset + len(s)]
    if len(seg) < len(s):
        raise DataError(f"noise cut at {rec.offset} in {rec.noise} is too short for {rec.clean}")
    x, _ = mix_at_snr(s, seg, rec.snr_db)
    return x, s


def build_corpus(root, seed: int = 0, splits: dict[str, int] | None = None,
                 duration_range=DURATION_RANGE) -> dict[str, Path]:
    """Generate clean splits, seen/unseen noise banks and the three manifests."""
    root = Path(root)
    splits = dict(DESK_SPLITS if splits is None else splits)
    for i, (name, count) in enumerate(sorted(splits.items())):
        synth_clean(seed * 100 + i, count, root / "clean" / name, duration_range, prefix=name)
    synth_noise(seed, SEEN_NOISES, root / "noise" / "seen")
    synth_noise(seed, UNSEEN_NOISES, root / "noise" / "unseen")
    manifests = {}
    for name in splits:
        if name == "test":
            m = build_manifest(root / "clean" / name, [root / "noise" / "seen", root / "noise" / "unseen"],
                               TEST_SNRS, seed, name, exhaustive=True)
        else:
            m = build_manifest(root / "clean" / name, root / "noise" / "seen", TRAIN_SNRS, seed, name)
        manifests[name] = m.save(root / f"{name}.tsv")
    log.info("corpus written to %s", root)
    return manifests
