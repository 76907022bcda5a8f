"""Paired blurred/sharp dataset loading, PPM image I/O, and patch sampling.

The mandatory on-disk format is binary PPM (P6, 8-bit), which keeps the core
dependency-free; convert other formats with e.g. ImageMagick
(`magick in.png out.ppm`). Two dataset layouts are supported:

    parallel-dirs: <root>/blur/<name>.ppm paired with <root>/sharp/<name>.ppm
    manifest:      UTF-8 lines "id<TAB>blur_path<TAB>sharp_path"

Scanning is deterministic (lexicographic by pair id) and validates that both
images of a pair exist and have equal dimensions.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAX_PIXELS = 1 << 28  # dimension-overflow guard for headers


class ImageFormatError(IOError):
    """Unsupported, malformed or truncated image file."""


class DatasetError(IOError):
    """Empty or inconsistent dataset."""


@dataclass
class Image:
    """Decoded image: (3, H, W) float values in [0, 1]."""

    data: np.ndarray
    bit_depth: int = 8
    color_space: str = "sRGB"

    @property
    def shape(self):
        return self.data.shape


def _read_ppm_tokens(fh, count):
    """Read `count` whitespace-separated header tokens, skipping # comments."""
    tokens = []
    while len(tokens) < count:
        ch = fh.read(1)
        if not ch:
            raise ImageFormatError("truncated PPM header")
        if ch in b" \t\r\n":
            continue
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = fh.read(1)
            continue
        tok = ch
        while True:
            ch = fh.read(1)
            if not ch or ch in b" \t\r\n":
                break
            tok += ch
        tokens.append(tok)
    return tokens


def read_ppm_header(path):
    """(width, height, maxval) of a P6 file, validating the payload length
    without decoding it."""
    with open(path, "rb") as fh:
        magic = fh.read(2)
        if magic != b"P6":
            raise ImageFormatError(f"{path}: not a binary PPM (P6) file")
        w, h, maxval = (int(t) for t in _read_ppm_tokens(fh, 3))
        data_offset = fh.tell()
    if w <= 0 or h <= 0:
        raise ImageFormatError(f"{path}: non-positive dimensions {w}x{h}")
    if w * h > MAX_PIXELS:
        raise ImageFormatError(f"{path}: dimensions {w}x{h} exceed the {MAX_PIXELS}-pixel limit")
    if not 0 < maxval < 256:
        raise ImageFormatError(f"{path}: only 8-bit PPM supported, maxval={maxval}")
    if Path(path).stat().st_size - data_offset < w * h * 3:
        raise ImageFormatError(f"{path}: truncated payload for {w}x{h} image")
    return w, h, maxval


def load_image(path):
    """Decode a binary PPM into an Image; exact roundtrip with save_image."""
    path = Path(path)
    if path.suffix.lower() not in (".ppm", ""):
        raise ImageFormatError(
            f"{path}: unsupported format {path.suffix!r}; convert to binary PPM (P6) first"
        )
    with open(path, "rb") as fh:
        magic = fh.read(2)
        if magic != b"P6":
            raise ImageFormatError(f"{path}: not a binary PPM (P6) file")
        w, h, maxval = (int(t) for t in _read_ppm_tokens(fh, 3))
        if w <= 0 or h <= 0:
            raise ImageFormatError(f"{path}: non-positive dimensions {w}x{h}")
        if w * h > MAX_PIXELS:
            raise ImageFormatError(f"{path}: dimensions {w}x{h} exceed the pixel limit")
        if not 0 < maxval < 256:
            raise ImageFormatError(f"{path}: only 8-bit PPM supported, maxval={maxval}")
        payload = fh.read(w * h * 3)
        if len(payload) != w * h * 3:
            raise ImageFormatError(
                f"{path}: truncated payload, expected {w * h * 3} bytes, got {len(payload)}"
            )
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    data = arr.astype(np.float32).transpose(2, 0, 1) / np.float32(maxval)
    return Image(data=data, bit_depth=8, color_space="sRGB")


def save_image(img, path):
    """Write a (3, H, W) [0, 1] array or Image as an 8-bit binary PPM."""
    data = img.data if isinstance(img, Image) else np.asarray(img)
    if data.ndim != 3 or data.shape[0] != 3:
        raise ImageFormatError(f"expected (3, H, W) image, got {data.shape}")
    q = np.round(np.clip(data, 0.0, 1.0) * 255.0).astype(np.uint8)
    _, h, w = q.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(q.transpose(1, 2, 0).tobytes())
    return path


@dataclass(frozen=True)
class PairRecord:
    id: str
    blur_path: Path
    sharp_path: Path


@dataclass
class PairedDataset:
    root: Path
    pairs: list = field(default_factory=list)
    manifest_checksum: str = ""

    def __len__(self):
        return len(self.pairs)

    def __getitem__(self, idx):
        return self.pairs[idx]

    def load_pair(self, idx):
        rec = self.pairs[idx]
        return load_image(rec.blur_path).data, load_image(rec.sharp_path).data


def _checksum(pairs):
    digest = hashlib.sha256()
    for rec in pairs:
        digest.update(f"{rec.id}\t{rec.blur_path}\t{rec.sharp_path}\n".encode())
    return digest.hexdigest()


def scan_pairs(root, layout="parallel-dirs"):
    """Build a PairedDataset. Unmatched files are reported with a warning;
    an empty result or a dimension mismatch within a pair is an error."""
    root = Path(root)
    if layout == "parallel-dirs":
        blur_dir, sharp_dir = root / "blur", root / "sharp"
        if not blur_dir.is_dir() or not sharp_dir.is_dir():
            raise DatasetError(f"{root}: expected blur/ and sharp/ subdirectories")
        blur = {p.stem: p for p in blur_dir.iterdir() if p.is_file()}
        sharp = {p.stem: p for p in sharp_dir.iterdir() if p.is_file()}
        matched = sorted(blur.keys() & sharp.keys())
        for orphan in sorted(blur.keys() ^ sharp.keys()):
            warnings.warn(f"unpaired file id {orphan!r} skipped", stacklevel=2)
        pairs = [PairRecord(i, blur[i], sharp[i]) for i in matched]
    elif layout == "manifest":
        manifest = root if root.is_file() else root / "manifest.tsv"
        if not manifest.is_file():
            raise DatasetError(f"manifest file {manifest} not found")
        pairs = []
        base = manifest.parent
        for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DatasetError(f"{manifest}:{lineno}: expected id<TAB>blur<TAB>sharp")
            pid, bp, sp = parts
            bpath = Path(bp) if Path(bp).is_absolute() else base / bp
            spath = Path(sp) if Path(sp).is_absolute() else base / sp
            pairs.append(PairRecord(pid, bpath, spath))
        pairs.sort(key=lambda r: r.id)
    else:
        raise DatasetError(f"unknown layout {layout!r}")

    if not pairs:
        raise DatasetError(f"{root}: no image pairs found")
    for rec in pairs:
        bw, bh, _ = read_ppm_header(rec.blur_path)
        sw, sh, _ = read_ppm_header(rec.sharp_path)
        if (bw, bh) != (sw, sh):
            raise DatasetError(
                f"pair {rec.id!r}: dimensions differ ({bw}x{bh} vs {sw}x{sh})"
            )
    return PairedDataset(root=root, pairs=pairs, manifest_checksum=_checksum(pairs))


def _reflect_pad_axis(img, axis, before, after):
    # np.pad reflect caps at dim - 1 per call; iterate for larger pads
    out = img
    while before or after:
        n = out.shape[axis]
        if n == 1:
            b, a, mode = before, after, "edge"
        else:
            b, a, mode = min(before, n - 1), min(after, n - 1), "reflect"
        width = [(0, 0)] * out.ndim
        width[axis] = (b, a)
        out = np.pad(out, width, mode=mode)
        before -= b
        after -= a
    return out


def _reflect_pad_to(img, size):
    c, h, w = img.shape
    ph, pw = max(0, size - h), max(0, size - w)
    if not ph and not pw:
        return img
    out = _reflect_pad_axis(img, 1, ph // 2, ph - ph // 2)
    return _reflect_pad_axis(out, 2, pw // 2, pw - pw // 2)


def sample_patch(pair, size, rng):
    """Crop one aligned size x size patch pair at a uniform random offset.

    Images smaller than `size` are center-padded by reflection first.
    rng: np.random.Generator or int seed.
    """
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    blur_img, sharp_img = pair
    blur_img = _reflect_pad_to(blur_img, size)
    sharp_img = _reflect_pad_to(sharp_img, size)
    _, h, w = blur_img.shape
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    window = (slice(None), slice(top, top + size), slice(left, left + size))
    return (
        np.ascontiguousarray(blur_img[window]),
        np.ascontiguousarray(sharp_img[window]),
    )
