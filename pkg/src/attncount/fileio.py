"""Binary PGM images, DMAP density files and the corpus manifest."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .synthdata import (
    CorpusConfig,
    DensityMap,
    SceneSample,
    eval_indices,
    synth_scene,
    train_indices,
)
from .tensor import Tensor

DMAP_MAGIC = b"DMAP"
MANIFEST_NAME = "manifest.txt"


class FormatError(ValueError):
    """Malformed file contents; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def write_pgm(image) -> bytes:
    """Encode a [H,W] (or [1,1,H,W]) array in [0,1] as binary P5 with maxval 255."""
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    arr = arr.reshape(arr.shape[-2:])
    h, w = arr.shape
    pix = np.clip(np.rint(np.clip(arr, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes()


def _pgm_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        if buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif buf[pos:pos + 1].isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise FormatError("unexpected end of PGM header", start)
    return buf[start:pos], pos


def read_pgm(buf: bytes) -> Tensor:
    """Decode binary P5 into a [1,1,H,W] float32 tensor scaled to [0,1]."""
    if buf[:2] != b"P5":
        raise FormatError("not a binary PGM: expected magic 'P5'", 0)
    pos = 2
    fields = []
    for what in ("width", "height", "maxval"):
        tok, end = _pgm_token(buf, pos)
        if not tok.isdigit():
            raise FormatError(f"PGM {what} is not a positive integer: {tok[:16]!r}", end - len(tok))
        fields.append((int(tok), end - len(tok)))
        pos = end
    (w, w_at), (h, h_at), (maxval, m_at) = fields
    if w < 1:
        raise FormatError("PGM width must be >= 1", w_at)
    if h < 1:
        raise FormatError("PGM height must be >= 1", h_at)
    if not 1 <= maxval <= 255:
        raise FormatError(f"PGM maxval {maxval} outside 1..255", m_at)
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise FormatError("missing whitespace after PGM maxval", pos)
    pos += 1
    if len(buf) - pos < w * h:
        raise FormatError(f"PGM pixel data truncated: need {w * h} bytes, have {len(buf) - pos}", len(buf))
    pix = np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w)
    return Tensor((pix.astype(np.float32) / np.float32(maxval))[None, None])


def write_dmap(dmap: DensityMap) -> bytes:
    grid = dmap.array()
    h, w = grid.shape
    return DMAP_MAGIC + struct.pack("<III", h, w, dmap.scale) + np.ascontiguousarray(grid, dtype="<f4").tobytes()


def read_dmap(buf: bytes) -> DensityMap:
    if len(buf) < 4 or buf[:4] != DMAP_MAGIC:
        raise FormatError("bad DMAP magic", 0)
    if len(buf) < 16:
        raise FormatError("DMAP header truncated", len(buf))
    h, w, scale = struct.unpack("<III", buf[4:16])
    if h < 1 or w < 1:
        raise FormatError(f"DMAP dims {h}x{w} must be positive", 4 if h < 1 else 8)
    if scale < 1:
        raise FormatError("DMAP scale must be >= 1", 12)
    need = 16 + 4 * h * w
    if len(buf) < need:
        raise FormatError(f"DMAP payload truncated: need {need} bytes, have {len(buf)}", len(buf))
    if len(buf) > need:
        raise FormatError("trailing bytes after DMAP payload", need)
    grid = np.frombuffer(buf, dtype="<f4", count=h * w, offset=16).astype(np.float32).reshape(h, w)
    return DensityMap(Tensor(grid[None, None].copy()), scale)


@dataclass
class ManifestEntry:
    index: int
    label: str
    path_image: str
    path_dmap: str

    @property
    def split(self) -> str:
        return self.path_image.split("/", 1)[0]


def write_corpus(config: CorpusConfig, out_dir: str | Path) -> list[ManifestEntry]:
    """Render the train and test splits to ``out_dir`` as PGM + DMAP with a manifest."""
    out = Path(out_dir)
    entries = []
    jobs = [("train", i, lab, 1.0) for i, lab in train_indices(config)]
    jobs += [("test", i, lab, config.test_distractor_scale) for i, lab in eval_indices(config)]
    for split in ("train", "test"):
        (out / split).mkdir(parents=True, exist_ok=True)
    for split, index, label, scale in jobs:
        sample = synth_scene(config, index, label, scale)
        img_rel = f"{split}/{index:05d}.pgm"
        dmap_rel = f"{split}/{index:05d}.dmap"
        (out / img_rel).write_bytes(write_pgm(sample.image))
        (out / dmap_rel).write_bytes(write_dmap(sample.gt_density))
        entries.append(ManifestEntry(index, label, img_rel, dmap_rel))
    lines = [f"{e.index},{e.label},{e.path_image},{e.path_dmap}" for e in entries]
    (out / MANIFEST_NAME).write_text("\n".join(lines) + "\n")
    return entries


def read_manifest(corpus_dir: str | Path) -> list[ManifestEntry]:
    path = Path(corpus_dir) / MANIFEST_NAME
    entries = []
    offset = 0
    for line in path.read_text().splitlines(keepends=True):
        stripped = line.strip()
        if stripped:
            parts = stripped.split(",")
            if len(parts) != 4 or not parts[0].isdigit():
                raise FormatError(f"bad manifest line {stripped!r}", offset)
            entries.append(ManifestEntry(int(parts[0]), parts[1], parts[2], parts[3]))
        offset += len(line.encode())
    return entries


def load_split(corpus_dir: str | Path, split: str) -> list[SceneSample]:
    """Load one split from disk.  Head coordinates are not stored, so ``heads`` is None."""
    root = Path(corpus_dir)
    samples = []
    for e in read_manifest(root):
        if e.split != split:
            continue
        image = read_pgm((root / e.path_image).read_bytes())
        dmap = read_dmap((root / e.path_dmap).read_bytes())
        samples.append(SceneSample(image, None, dmap, e.label, key=e.index, index=e.index))
    return samples
