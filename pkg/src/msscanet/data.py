"""Image files, dataset manifests and the synthetic distortion corpus."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .exceptions import DataError

SPLITS = ("train", "test")
MANIFEST_HEADER = ["path", "mos", "dataset", "split"]
DISTORTIONS = ("gaussian-blur", "additive-noise", "block-artifact")


# ---------------------------------------------------------------------------
# binary PPM (P6)


def write_ppm(path, image: np.ndarray):
    """Write a ``[3, H, W]`` array with values in [0, 1] as 8-bit binary PPM."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise DataError(f"expected a [3,H,W] image, got {image.shape}")
    _, h, w = image.shape
    pixels = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.transpose(1, 2, 0).tobytes())


def _ppm_tokens(buf: bytes, count: int) -> tuple[list[int], int]:
    tokens, pos = [], 2
    while len(tokens) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise DataError("malformed PPM header")
        tokens.append(int(buf[start:pos]))
    return tokens, pos + 1  # a single whitespace byte ends the header


def read_ppm(path) -> np.ndarray:
    """Read an 8-bit binary PPM into a float ``[3, H, W]`` array in [0, 1]."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    if buf[:2] != b"P6":
        raise DataError(f"{path}: not a binary PPM (P6) file")
    (w, h, maxval), start = _ppm_tokens(buf, 3)
    if maxval != 255:
        raise DataError(f"{path}: only 8-bit PPM is supported (maxval {maxval})")
    body = buf[start:start + 3 * w * h]
    if len(body) != 3 * w * h:
        raise DataError(f"{path}: truncated pixel data")
    pixels = np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)
    return pixels.transpose(2, 0, 1).astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class Record:
    path: str
    mos: float
    dataset: str
    split: str


@dataclass
class DatasetManifest:
    """Image/MOS records plus the score range used for normalisation.

    Relative paths are resolved against ``root`` (the manifest's directory).
    """

    records: list[Record]
    mos_scale: tuple[float, float]
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        if not self.records:
            raise DataError("no records")
        seen = set()
        lo, hi = self.mos_scale
        if not hi > lo:
            raise DataError(f"invalid MOS scale {self.mos_scale}")
        for r in self.records:
            if r.path in seen:
                raise DataError(f"duplicate image path {r.path!r}")
            seen.add(r.path)
            if r.split not in SPLITS:
                raise DataError(f"unknown split {r.split!r} for {r.path!r}")
            if not lo <= r.mos <= hi:
                raise DataError(f"MOS {r.mos} of {r.path!r} lies outside the scale {self.mos_scale}")

    def __len__(self):
        return len(self.records)

    @property
    def tags(self) -> set[str]:
        return {r.dataset for r in self.records}

    def split(self, name: str) -> list[Record]:
        return [r for r in self.records if r.split == name]

    def resolve(self, record: Record) -> Path:
        p = Path(record.path)
        return p if p.is_absolute() else self.root / p

    def normalize(self, mos):
        lo, hi = self.mos_scale
        return (np.asarray(mos, dtype=np.float64) - lo) / (hi - lo)

    def load_images(self, records) -> np.ndarray:
        return np.stack([read_ppm(self.resolve(r)) for r in records])

    def subset(self, records) -> "DatasetManifest":
        return DatasetManifest(list(records), self.mos_scale, self.root)

    def save(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(f"# mos_scale={self.mos_scale[0]!r},{self.mos_scale[1]!r}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(MANIFEST_HEADER)
            for r in self.records:
                w.writerow([r.path, repr(r.mos), r.dataset, r.split])


def load_manifest(path) -> DatasetManifest:
    """Parse a ``path,mos,dataset,split`` CSV.

    An optional leading ``# mos_scale=lo,hi`` line declares the score range;
    otherwise the observed minimum and maximum are used.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    scale = None
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    body_start = 0
    while body_start < len(lines) and lines[body_start].lstrip().startswith("#"):
        text = lines[body_start].lstrip()[1:].strip()
        if text.startswith("mos_scale="):
            try:
                lo, hi = (float(v) for v in text.split("=", 1)[1].split(","))
            except ValueError as exc:
                raise DataError(f"{path}: malformed mos_scale line") from exc
            scale = (lo, hi)
        body_start += 1
    rows = list(csv.reader(lines[body_start:]))
    if not rows or [c.strip() for c in rows[0]] != MANIFEST_HEADER:
        raise DataError(f"{path}: header must be {','.join(MANIFEST_HEADER)}")
    records = []
    for lineno, row in enumerate(rows[1:], start=body_start + 2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 4:
            raise DataError(f"{path}: row {lineno}: expected 4 fields, got {len(row)}")
        try:
            mos = float(row[1])
        except ValueError as exc:
            raise DataError(f"{path}: row {lineno}: MOS {row[1]!r} is not a number") from exc
        if not math.isfinite(mos):
            raise DataError(f"{path}: row {lineno}: MOS must be finite")
        records.append(Record(row[0].strip(), mos, row[2].strip(), row[3].strip()))
    if not records:
        raise DataError("no records")
    if scale is None:
        values = [r.mos for r in records]
        scale = (min(values), max(values))
        if scale[0] == scale[1]:
            scale = (scale[0] - 0.5, scale[1] + 0.5)
    return DatasetManifest(records, scale, path.parent)


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for a procedurally generated, severity-labelled corpus.

    Every base texture is degraded by each distortion at each severity until
    ``count`` images exist.  MOS falls linearly from ``mos_scale[1]`` at severity
    zero to ``mos_scale[0]`` at the largest severity.
    """

    count: int = 200
    image_size: int = 64
    kinds: tuple[str, ...] = DISTORTIONS
    severities: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0)
    seed: int = 0
    mos_scale: tuple[float, float] = (1.0, 5.0)
    test_fraction: float = 0.2
    dataset: str = "synthetic"

    def __post_init__(self):
        if self.count < 1 or self.image_size < 8:
            raise DataError("count must be >= 1 and image_size >= 8")
        unknown = set(self.kinds) - set(DISTORTIONS)
        if unknown or not self.kinds:
            raise DataError(f"unknown distortion kinds {sorted(unknown)}; choose from {DISTORTIONS}")
        sev = self.severities
        if not sev or any(b <= a for a, b in zip(sev, sev[1:])) or sev[0] < 0 or sev[-1] <= 0:
            raise DataError("severities must be non-negative, strictly increasing and not all zero")
        if not 0.0 <= self.test_fraction < 1.0:
            raise DataError("test_fraction must lie in [0, 1)")

    def mos(self, severity: float) -> float:
        lo, hi = self.mos_scale
        return lo + (1.0 - severity / self.severities[-1]) * (hi - lo)


def base_texture(rng: np.random.Generator, size: int) -> np.ndarray:
    """Smooth colour gradient plus oriented gratings, values in [0.2, 0.8]."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.empty((3, size, size))
    for c in range(3):
        field_ = rng.uniform(-1, 1) * xx + rng.uniform(-1, 1) * yy
        for _ in range(4):
            theta = rng.uniform(0, np.pi)
            freq = rng.uniform(4, 12)
            phase = rng.uniform(0, 2 * np.pi)
            field_ = field_ + 0.5 * np.sin(2 * np.pi * freq * (np.cos(theta) * xx
                                                               + np.sin(theta) * yy) + phase)
        field_ -= field_.min()
        img[c] = 0.2 + 0.6 * field_ / max(field_.max(), 1e-12)
    return img


def _blockify(image: np.ndarray, block: int) -> np.ndarray:
    c, h, w = image.shape
    hb, wb = h // block, w // block
    core = image[:, :hb * block, :wb * block].reshape(c, hb, block, wb, block)
    means = core.mean(axis=(2, 4), keepdims=True)
    out = image.copy()
    out[:, :hb * block, :wb * block] = np.broadcast_to(means, core.shape).reshape(
        c, hb * block, wb * block)
    return out


def distort(image: np.ndarray, kind: str, level: float, noise: np.ndarray | None = None
            ) -> np.ndarray:
    """Apply ``kind`` at ``level`` in [0, 1]; level 0 returns the input unchanged.

    * gaussian-blur: sigma = 2.5 * level pixels; mean squared gradient decreases.
    * additive-noise: + 0.15 * level * noise (unit Gaussian field), clipped to
      [0, 1]; pixel variance increases.
    * block-artifact: blend towards 8x8 block means with weight ``level``;
      within-block variance shrinks by ``(1 - level)^2``.
    """
    if level == 0:
        return image.copy()
    if kind == "gaussian-blur":
        return np.stack([gaussian_filter(ch, sigma=2.5 * level, mode="reflect") for ch in image])
    if kind == "additive-noise":
        if noise is None:
            raise ValueError("additive-noise needs a noise field")
        return np.clip(image + 0.15 * level * noise, 0.0, 1.0)
    if kind == "block-artifact":
        return (1.0 - level) * image + level * _blockify(image, 8)
    raise ValueError(f"unknown distortion {kind!r}")


def degradation_statistic(image: np.ndarray, kind: str) -> float:
    """Per-distortion statistic that is monotone in severity (see :func:`distort`)."""
    if kind == "gaussian-blur":
        return float(np.mean(np.diff(image, axis=1) ** 2) + np.mean(np.diff(image, axis=2) ** 2))
    if kind == "additive-noise":
        return float(image.var())
    if kind == "block-artifact":
        return float(np.mean((image - _blockify(image, 8)) ** 2))
    raise ValueError(f"unknown distortion {kind!r}")


def generate_synthetic(spec: SynthSpec, out_dir) -> DatasetManifest:
    """Render the corpus as PPM files plus ``manifest.csv`` inside ``out_dir``."""
    out_dir = Path(out_dir)
    try:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out_dir}: {exc}") from exc
    if not os.access(out_dir, os.W_OK):
        raise DataError(f"output directory {out_dir} is not writable")
    rng = np.random.default_rng(spec.seed)
    per_base = len(spec.kinds) * len(spec.severities)
    n_base = math.ceil(spec.count / per_base)
    top = spec.severities[-1]
    records = []
    for b in range(n_base):
        base = base_texture(rng, spec.image_size)
        noise = rng.standard_normal(base.shape)
        for kind in spec.kinds:
            for sev in spec.severities:
                if len(records) == spec.count:
                    break
                img = distort(base, kind, sev / top, noise)
                rel = f"images/{spec.dataset}_{b:04d}_{kind}_{sev:g}.ppm"
                write_ppm(out_dir / rel, img)
                records.append([rel, spec.mos(sev)])
    split_rng = np.random.default_rng(spec.seed + 1)
    n_test = int(round(spec.test_fraction * len(records)))
    test = set(split_rng.permutation(len(records))[:n_test].tolist())
    manifest = DatasetManifest(
        [Record(p, m, spec.dataset, "test" if i in test else "train")
         for i, (p, m) in enumerate(records)],
        spec.mos_scale, out_dir)
    manifest.save(out_dir / "manifest.csv")
    return manifest
