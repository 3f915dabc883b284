"""Image-text pair records: tokenisation, patchification, synthetic data, dedup, file IO."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator, Optional, Sequence

import numpy as np

PAD, BOS, EOS, MASK = 0, 1, 2, 3
N_SPECIAL = 4
DATASET_MAGIC = b"ITP1"


class DatasetFormatError(ValueError):
    """A dataset file is malformed or truncated."""


# -- vocabularies ---------------------------------------------------------------------------


class ByteVocab:
    """Byte-level vocabulary: byte ``b`` maps to id ``b + 4``; ids 0-3 are reserved."""

    size = 256 + N_SPECIAL

    def encode(self, text: str) -> list[int]:
        return [b + N_SPECIAL for b in text.encode("utf-8")]

    def decode_bytes(self, ids: Iterable[int]) -> bytes:
        return bytes(i - N_SPECIAL for i in ids if i >= N_SPECIAL)

    def decode(self, ids: Iterable[int]) -> str:
        return self.decode_bytes(ids).decode("utf-8")


class BPEVocab:
    """Byte-level BPE loaded from a merges file.

    Each non-comment line holds two space-separated hex strings naming the
    byte sequences merged at that rank. Ids are the 4 reserved ids, then the
    256 single bytes, then one id per merge in file order.
    """

    def __init__(self, merges: Sequence[tuple[bytes, bytes]]):
        self.pieces: list[bytes] = [bytes([b]) for b in range(256)]
        self.ranks: dict[tuple[bytes, bytes], int] = {}
        for rank, (a, b) in enumerate(merges):
            self.ranks[(a, b)] = rank
            self.pieces.append(a + b)
        self.index = {piece: i + N_SPECIAL for i, piece in enumerate(self.pieces)}
        self.size = len(self.pieces) + N_SPECIAL

    @classmethod
    def from_file(cls, path) -> "BPEVocab":
        merges = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            a, b = line.split()
            merges.append((bytes.fromhex(a), bytes.fromhex(b)))
        return cls(merges)

    def encode(self, text: str) -> list[int]:
        parts = [bytes([b]) for b in text.encode("utf-8")]
        while len(parts) > 1:
            best, best_rank = -1, None
            for i in range(len(parts) - 1):
                r = self.ranks.get((parts[i], parts[i + 1]))
                if r is not None and (best_rank is None or r < best_rank):
                    best, best_rank = i, r
            if best < 0:
                break
            parts[best:best + 2] = [parts[best] + parts[best + 1]]
        return [self.index[p] for p in parts]

    def decode_bytes(self, ids: Iterable[int]) -> bytes:
        return b"".join(self.pieces[i - N_SPECIAL] for i in ids if i >= N_SPECIAL)

    def decode(self, ids: Iterable[int]) -> str:
        return self.decode_bytes(ids).decode("utf-8")


def tokenize(text: str, vocab=None) -> np.ndarray:
    vocab = vocab or ByteVocab()
    return np.array([BOS] + vocab.encode(text) + [EOS], dtype=np.int64)


def detokenize(ids: Iterable[int], vocab=None) -> str:
    vocab = vocab or ByteVocab()
    return vocab.decode(int(i) for i in ids)


# -- records --------------------------------------------------------------------------------


def image_digest(image: np.ndarray) -> bytes:
    return hashlib.sha256(np.ascontiguousarray(image, dtype="<f4").tobytes()).digest()


@dataclass
class PairRecord:
    image: np.ndarray
    tokens: np.ndarray
    caption_bytes: bytes
    image_digest: bytes = b""

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if not self.image_digest:
            self.image_digest = image_digest(self.image)

    @property
    def caption(self) -> str:
        return self.caption_bytes.decode("utf-8")


def make_record(image: np.ndarray, caption: str, vocab=None) -> PairRecord:
    return PairRecord(image, tokenize(caption, vocab), caption.encode("utf-8"))


# -- patches --------------------------------------------------------------------------------


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """``[..., H, W, C]`` to ``[..., n_patches, patch_size**2 * C]`` in row-major patch order."""
    *lead, H, W, C = image.shape
    p = patch_size
    if H % p or W % p:
        raise ValueError(f"image {H}x{W} is not divisible by patch size {p}")
    gh, gw = H // p, W // p
    x = image.reshape(*lead, gh, p, gw, p, C)
    x = np.moveaxis(x, -4, -3)  # [..., gh, gw, p, p, C]
    return x.reshape(*lead, gh * gw, p * p * C)


def unpatchify(patches: np.ndarray, patch_size: int, grid_h: int, grid_w: int, channels: int) -> np.ndarray:
    *lead, n, _ = patches.shape
    p = patch_size
    x = patches.reshape(*lead, grid_h, grid_w, p, p, channels)
    x = np.moveaxis(x, -3, -4)
    return x.reshape(*lead, grid_h * p, grid_w * p, channels)


# -- synthetic corpus -------------------------------------------------------------------------

PALETTE = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "magenta": (1.0, 0.0, 1.0),
    "cyan": (0.0, 1.0, 1.0),
    "white": (1.0, 1.0, 1.0),
}

POSITIONS = {
    "top left": (0.25, 0.25),
    "top right": (0.25, 0.75),
    "bottom left": (0.75, 0.25),
    "bottom right": (0.75, 0.75),
    "center": (0.5, 0.5),
}


@dataclass
class SynthSpec:
    shapes: tuple = ("circle", "square", "triangle", "cross")
    colors: tuple = ("red", "green", "blue", "yellow")
    positions: tuple = tuple(POSITIONS)
    image_size: int = 32
    caption_template: str = "a {color} {shape} at the {position}"

    @classmethod
    def from_text(cls, text: str) -> "SynthSpec":
        """Parse ``key = value`` lines (lists comma-separated)."""
        spec = cls()
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = (s.strip() for s in line.partition("="))
            if key in ("shapes", "colors", "positions"):
                setattr(spec, key, tuple(v.strip() for v in value.split(",") if v.strip()))
            elif key == "image_size":
                spec.image_size = int(value)
            elif key == "caption_template":
                spec.caption_template = value
            else:
                raise KeyError(f"unknown synthetic-spec key {key!r}")
        unknown = [c for c in spec.colors if c not in PALETTE]
        if unknown:
            raise KeyError(f"unknown colors {unknown}")
        return spec


def _shape_mask(shape: str, yy, xx, cy, cx, r) -> np.ndarray:
    dy, dx = yy - cy, xx - cx
    if shape == "circle":
        return dy * dy + dx * dx <= r * r
    if shape == "square":
        return (np.abs(dy) <= 0.85 * r) & (np.abs(dx) <= 0.85 * r)
    if shape == "triangle":
        return (dy <= 0.8 * r) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.6)
    if shape == "cross":
        arm = 0.35 * r
        return ((np.abs(dy) <= arm) & (np.abs(dx) <= r)) | ((np.abs(dx) <= arm) & (np.abs(dy) <= r))
    if shape == "ring":
        d2 = dy * dy + dx * dx
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    raise KeyError(f"unknown shape {shape!r}")


def render_scene(rng: np.random.Generator, shape: str, color: str, position: str, size: int) -> np.ndarray:
    """A palette-coloured shape over a smooth, dull background gradient."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    c0 = rng.uniform(0.15, 0.55, size=3)
    c1 = rng.uniform(0.15, 0.55, size=3)
    angle = rng.uniform(0, 2 * np.pi)
    t = ((yy - size / 2) * np.sin(angle) + (xx - size / 2) * np.cos(angle)) / size + 0.5
    t = np.clip(t, 0.0, 1.0)[..., None]
    image = (1 - t) * c0 + t * c1
    fy, fx = POSITIONS[position]
    cy = fy * size + rng.uniform(-0.05, 0.05) * size
    cx = fx * size + rng.uniform(-0.05, 0.05) * size
    r = size * rng.uniform(0.17, 0.22)
    mask = _shape_mask(shape, yy, xx, cy, cx, r)
    image[mask] = PALETTE[color]
    return image.astype(np.float32)


def synthetic_label_map(image: np.ndarray, colors: Sequence[str]) -> np.ndarray:
    """Ground-truth labels for synthetic scenes: ``k + 1`` where a pixel has palette colour ``k``, else 0."""
    labels = np.zeros(image.shape[:2], dtype=np.int64)
    for k, name in enumerate(colors):
        hit = np.all(np.abs(image - np.asarray(PALETTE[name], dtype=np.float32)) < 1e-6, axis=-1)
        labels[hit] = k + 1
    return labels


def synthetic_attributes(caption: str, spec: SynthSpec) -> dict:
    """Recover shape/colour/position names from a synthetic caption."""
    words = caption
    out = {}
    for key, names in (("shape", spec.shapes), ("color", spec.colors), ("position", spec.positions)):
        found = [n for n in names if n in words]
        out[key] = max(found, key=len) if found else None
    return out


def make_synthetic_pairs(seed: int, n: int, spec: Optional[SynthSpec] = None, vocab=None,
                         planted_duplicates: int = 0) -> Iterator[PairRecord]:
    """Deterministic stream of ``n`` synthetic pairs.

    Attribute combinations are drawn by cycling through seeded permutations of
    the full shape x colour x position grid, so any ``n`` up to the grid size
    yields pairwise-distinct captions. With ``planted_duplicates = d`` the
    stream holds ``n - d`` distinct images plus ``d`` byte-identical copies
    (with a different caption) placed after their source.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0 <= planted_duplicates < n:
        raise ValueError("planted_duplicates must be in [0, n)")
    spec = spec or SynthSpec()
    rng = np.random.default_rng(seed)
    combos = [(s, c, p) for s in spec.shapes for c in spec.colors for p in spec.positions]
    unique = n - planted_duplicates
    order: list[int] = []
    while len(order) < unique:
        order.extend(rng.permutation(len(combos)).tolist())
    records = []
    for i in range(unique):
        shape, color, position = combos[order[i]]
        image = render_scene(rng, shape, color, position, spec.image_size)
        caption = spec.caption_template.format(shape=shape, color=color, position=position)
        records.append(make_record(image, caption, vocab))

    inserts: dict[int, list[PairRecord]] = {}
    for _ in range(planted_duplicates):
        src = int(rng.integers(unique))
        after = int(rng.integers(src, unique))
        shape, color, position = combos[int(rng.integers(len(combos)))]
        caption = "copy of " + spec.caption_template.format(shape=shape, color=color, position=position)
        inserts.setdefault(after, []).append(make_record(records[src].image.copy(), caption, vocab))
    for i, rec in enumerate(records):
        yield rec
        yield from inserts.get(i, ())


@dataclass
class QAExample:
    image: np.ndarray
    question: str
    answer: str


QUESTIONS = {
    "color": "what color is the shape?",
    "shape": "what shape is it?",
    "position": "where is the shape?",
}


def make_synthetic_qa(seed: int, n: int, spec: Optional[SynthSpec] = None, kind: str = "color") -> list[QAExample]:
    """Question/answer pairs over synthetic scenes; the answer is one attribute name."""
    if kind not in QUESTIONS:
        raise KeyError(f"unknown question kind {kind!r}")
    spec = spec or SynthSpec()
    out = []
    for rec in make_synthetic_pairs(seed, n, spec):
        answer = synthetic_attributes(rec.caption, spec)[kind]
        out.append(QAExample(rec.image, QUESTIONS[kind], answer))
    return out


def dedup_by_image_bytes(records: Iterable[PairRecord]) -> Iterator[PairRecord]:
    """Keep the first record for every distinct image digest, preserving order."""
    seen: set[bytes] = set()
    for rec in records:
        if rec.image_digest in seen:
            continue
        seen.add(rec.image_digest)
        yield rec


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Shuffle for one epoch; a pure function of ``(seed, epoch)``."""
    return np.random.default_rng([seed, epoch]).permutation(n)


# -- augmentation ---------------------------------------------------------------------------


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    H, W = image.shape[:2]
    ys = np.clip((np.arange(out_h) + 0.5) * H / out_h - 0.5, 0, H - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * W / out_w - 0.5, 0, W - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = image[y0][:, x0] * (1 - wx) + image[y0][:, x1] * wx
    bot = image[y1][:, x0] * (1 - wx) + image[y1][:, x1] * wx
    return (top * (1 - wy) + bot * wy).astype(image.dtype)


def random_resized_crop(image: np.ndarray, rng: np.random.Generator, scale=(0.6, 1.0),
                        ratio=(3 / 4, 4 / 3)) -> np.ndarray:
    """Crop a random area fraction in ``scale`` with aspect in ``ratio`` and resize back."""
    H, W = image.shape[:2]
    area = H * W
    for _ in range(10):
        target = area * rng.uniform(*scale)
        aspect = np.exp(rng.uniform(np.log(ratio[0]), np.log(ratio[1])))
        w = int(round(np.sqrt(target * aspect)))
        h = int(round(np.sqrt(target / aspect)))
        if 0 < w <= W and 0 < h <= H:
            top = int(rng.integers(0, H - h + 1))
            left = int(rng.integers(0, W - w + 1))
            return resize_bilinear(image[top:top + h, left:left + w], H, W)
    return image.copy()


def center_resize(image: np.ndarray, size: int) -> np.ndarray:
    """Deterministic eval-time preprocessing: central square crop resized to ``size``."""
    H, W = image.shape[:2]
    s = min(H, W)
    top, left = (H - s) // 2, (W - s) // 2
    crop = image[top:top + s, left:left + s]
    if s == size:
        return crop.copy()
    return resize_bilinear(crop, size, size)


# -- batching -------------------------------------------------------------------------------


@dataclass
class PairBatch:
    images: np.ndarray          # [B, H, W, C]
    patches: np.ndarray         # [B, n_patches, patch_dim]
    tokens: np.ndarray          # [B, L], PAD beyond each length
    lengths: np.ndarray         # [B]

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @property
    def token_valid(self) -> np.ndarray:
        return np.arange(self.tokens.shape[1])[None, :] < self.lengths[:, None]

    def subset(self, idx) -> "PairBatch":
        idx = np.asarray(idx)
        lengths = self.lengths[idx]
        L = int(lengths.max()) if len(idx) else 0
        return PairBatch(self.images[idx], self.patches[idx], self.tokens[idx, :L], lengths)


def fit_tokens(tokens: np.ndarray, max_seq: int) -> np.ndarray:
    if len(tokens) <= max_seq:
        return tokens
    return np.concatenate([tokens[: max_seq - 1], [EOS]]).astype(np.int64)


def collate(records: Sequence[PairRecord], patch_size: int, max_seq: int, dtype=np.float64,
            images: Optional[Sequence[np.ndarray]] = None) -> PairBatch:
    imgs = np.stack([r.image for r in records] if images is None else list(images)).astype(dtype)
    tokens, lengths = pad_token_lists([fit_tokens(r.tokens, max_seq) for r in records])
    return PairBatch(imgs, patchify(imgs, patch_size), tokens, lengths)


def pad_token_lists(seqs: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    out = np.full((len(seqs), int(lengths.max())), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out, lengths


# -- ITP1 dataset files ---------------------------------------------------------------------


def _write_record(fh: BinaryIO, rec: PairRecord) -> None:
    H, W, C = rec.image.shape
    fh.write(struct.pack("<III", H, W, C))
    fh.write(np.ascontiguousarray(rec.image, dtype="<f4").tobytes())
    fh.write(struct.pack("<I", len(rec.tokens)))
    fh.write(np.ascontiguousarray(rec.tokens, dtype="<u4").tobytes())
    fh.write(struct.pack("<I", len(rec.caption_bytes)))
    fh.write(rec.caption_bytes)


def write_dataset(path, records: Iterable[PairRecord]) -> int:
    count = 0
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        for rec in records:
            _write_record(fh, rec)
            count += 1
    return count


def _read_exact(fh: BinaryIO, n: int, what: str, index: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise DatasetFormatError(f"record {index}: truncated while reading {what}")
    return buf


def iter_dataset(path) -> Iterator[PairRecord]:
    """Stream records from an ITP1 file."""
    with open(path, "rb") as fh:
        if fh.read(4) != DATASET_MAGIC:
            raise DatasetFormatError("bad magic: not an ITP1 dataset file")
        index = 0
        while True:
            head = fh.read(12)
            if not head:
                return
            if len(head) != 12:
                raise DatasetFormatError(f"record {index}: truncated while reading image dims")
            H, W, C = struct.unpack("<III", head)
            pixels = np.frombuffer(_read_exact(fh, 4 * H * W * C, "pixels", index), dtype="<f4")
            (nt,) = struct.unpack("<I", _read_exact(fh, 4, "token count", index))
            ids = np.frombuffer(_read_exact(fh, 4 * nt, "token ids", index), dtype="<u4")
            (nc,) = struct.unpack("<I", _read_exact(fh, 4, "caption length", index))
            caption = _read_exact(fh, nc, "caption bytes", index)
            yield PairRecord(pixels.reshape(H, W, C).astype(np.float32), ids.astype(np.int64), caption)
            index += 1


def read_dataset(path) -> list[PairRecord]:
    return list(iter_dataset(path))


def dataset_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
