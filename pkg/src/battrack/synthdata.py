"""Deterministic synthetic RGB-T sequences with alternating dominant modality.

Draw order of :func:`generate_sequence` (one SplitMix64 stream per sequence,
seeded with ``spec.seed``; every draw is a double ``(u64 >> 11) * 2**-53``):

1. target width, then height: ``lo + floor(u * (hi - lo + 1))``
2. initial x, then y: ``u * (W - w)``, ``u * (H - h)``
3. target colour, 3 draws (R, G, B): ``0.75 + 0.25 * u``
4. visible texture, ``G*G*3`` draws, row-major with channel fastest
5. infrared texture, ``G*G`` draws, row-major
6. distractor initial x, then y, as in step 2
7. per frame t: for t > 0 a target step dx then dy, ``(2u - 1) * motion``,
   with the position reflected back into the frame, then a distractor step
   drawn the same way; then the noise field of the auxiliary modality,
   ``H*W*C`` draws row-major with channel fastest (C = 3 when visible is
   auxiliary, 1 otherwise).

Draws happen even at zero noise or zero distractor strength, so the stream
layout never depends on values.
"""
from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
TEXTURE_GRID = 8
ATTRIBUTES = ("NO", "LI", "HI", "AIV", "TC")


def _mix64(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def splitmix64(x: int) -> int:
    """One SplitMix64 output for state ``x`` (used for seed derivation)."""
    return _mix64((x + GAMMA) & MASK64)


class SplitMix64:
    def __init__(self, seed: int):
        self.state = int(seed) & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GAMMA) & MASK64
        return _mix64(self.state)

    def random(self) -> float:
        return (self.next_u64() >> 11) * 2.0 ** -53

    def u64_array(self, n: int) -> np.ndarray:
        """The next ``n`` outputs, vectorised; identical to ``n`` next_u64 calls."""
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * np.uint64(GAMMA)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        self.state = (self.state + n * GAMMA) & MASK64
        return z ^ (z >> np.uint64(31))

    def random_array(self, n: int) -> np.ndarray:
        return (self.u64_array(n) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53


def derive_seed(root_seed: int, index: int) -> int:
    return splitmix64((root_seed + index) & MASK64)


@dataclass(frozen=True)
class SequenceSpec:
    frames: int = 60
    frame_size: tuple[int, int] = (64, 64)  # (width, height)
    target_size: tuple[int, int] = (8, 14)
    motion: float = 2.0
    switch_period: int = 10
    noise: float = 0.3
    aux_contrast: float = 0.35
    clutter: float = 0.4  # background texture amplitude
    distractor: float = 0.0  # contrast of a target-like blob drawn in the auxiliary modality only
    attributes: tuple[str, ...] = ()
    seed: int = 0

    def __post_init__(self):
        if self.switch_period < 1:
            raise ValueError("switch_period must be >= 1")
        if not 0.0 <= self.noise <= 1.0:
            raise ValueError("noise must lie in [0, 1]")
        if not 0.0 <= self.distractor <= 1.0:
            raise ValueError("distractor must lie in [0, 1]")
        if self.frames < 1:
            raise ValueError("frames must be >= 1")
        lo, hi = self.target_size
        w, h = self.frame_size
        if not 1 <= lo <= hi:
            raise ValueError(f"bad target size range {self.target_size}")
        if hi >= min(w, h):
            raise ValueError(f"target size {hi} must be smaller than the frame {self.frame_size}")
        unknown = set(self.attributes) - set(ATTRIBUTES)
        if unknown:
            raise ValueError(f"unknown attributes {sorted(unknown)}")


@dataclass
class SequenceRecord:
    name: str
    visible: list[np.ndarray]        # (H, W, 3) uint8
    infrared: list[np.ndarray]       # (H, W) uint8
    gt_visible: np.ndarray           # (n, 4) x, y, w, h
    gt_infrared: np.ndarray
    attributes: list[str] = field(default_factory=list)
    dominant: list[str] | None = None  # per frame, "rgb" or "tir"; not stored on disk

    def __len__(self) -> int:
        return len(self.visible)

    def __post_init__(self):
        n = len(self.visible)
        if not (len(self.infrared) == n == len(self.gt_visible) == len(self.gt_infrared)):
            raise ValueError(f"sequence {self.name}: frame/annotation counts differ "
                             f"({n}, {len(self.infrared)}, {len(self.gt_visible)}, {len(self.gt_infrared)})")


def dominance_pattern(frames: int, period: int) -> list[str]:
    return ["rgb" if (t // period) % 2 == 0 else "tir" for t in range(frames)]


def _upsample(grid: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear upsampling of a coarse (g, g[, C]) grid to (H, W[, C])."""
    g = grid.shape[0]
    ys = (np.arange(height) + 0.5) * g / height - 0.5
    xs = (np.arange(width) + 0.5) * g / width - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, g - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, g - 1)
    y1 = np.clip(y0 + 1, 0, g - 1)
    x1 = np.clip(x0 + 1, 0, g - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)
    fx = np.clip(xs - x0, 0.0, 1.0)
    if grid.ndim == 3:
        fy, fx = fy[:, None, None], fx[None, :, None]
    else:
        fy, fx = fy[:, None], fx[None, :]
    top = grid[y0][:, x0] * (1 - fx) + grid[y0][:, x1] * fx
    bot = grid[y1][:, x0] * (1 - fx) + grid[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def _blob(width: int, height: int, box: tuple[int, int, int, int]) -> np.ndarray:
    """Soft-edged ellipse filling the box, weights in [0, 1]."""
    x, y, w, h = box
    yy, xx = np.mgrid[0:height, 0:width]
    u = (xx + 0.5 - (x + w / 2)) / (w / 2)
    v = (yy + 0.5 - (y + h / 2)) / (h / 2)
    return np.clip((1.0 - (u * u + v * v)) * 3.0, 0.0, 1.0)


def _reflect(pos: float, hi: float) -> float:
    if hi <= 0:
        return 0.0
    period = 2 * hi
    pos = pos % period
    return period - pos if pos > hi else pos


def generate_sequence(spec: SequenceSpec, name: str = "seq_0000") -> SequenceRecord:
    rng = SplitMix64(spec.seed)
    width, height = spec.frame_size
    lo, hi = spec.target_size
    tw = lo + int(rng.random() * (hi - lo + 1))
    th = lo + int(rng.random() * (hi - lo + 1))
    px = rng.random() * (width - tw)
    py = rng.random() * (height - th)
    colour = 0.75 + 0.25 * rng.random_array(3)
    g = TEXTURE_GRID
    tex_rgb = _upsample(rng.random_array(g * g * 3).reshape(g, g, 3), height, width)
    tex_tir = _upsample(rng.random_array(g * g).reshape(g, g), height, width)
    qx = rng.random() * (width - tw)
    qy = rng.random() * (height - th)

    attrs = set(spec.attributes)
    bg_rgb = 0.2 + spec.clutter * tex_rgb
    if "LI" in attrs:
        bg_rgb = bg_rgb * 0.5
    if "HI" in attrs:
        bg_rgb = 0.35 + 0.2 * tex_rgb
    bg_tir = 0.1 + spec.clutter * tex_tir
    if "TC" in attrs:
        bg_tir = 0.3 + 0.3 * tex_tir

    dominant = dominance_pattern(spec.frames, spec.switch_period)
    visible, infrared, boxes = [], [], []
    for t in range(spec.frames):
        if t > 0:
            px = _reflect(px + (2 * rng.random() - 1) * spec.motion, width - tw)
            py = _reflect(py + (2 * rng.random() - 1) * spec.motion, height - th)
            qx = _reflect(qx + (2 * rng.random() - 1) * spec.motion, width - tw)
            qy = _reflect(qy + (2 * rng.random() - 1) * spec.motion, height - th)
        box = (int(np.floor(px)), int(np.floor(py)), tw, th)
        boxes.append(box)
        a = _blob(width, height, box)
        d = spec.distractor * _blob(width, height, (int(np.floor(qx)), int(np.floor(qy)), tw, th))
        rgb_gain = 0.5 if ("AIV" in attrs and (t // 5) % 2 == 1) else 1.0
        c_rgb = 1.0 if dominant[t] == "rgb" else spec.aux_contrast
        c_tir = 1.0 if dominant[t] == "tir" else spec.aux_contrast
        rgb = bg_rgb * rgb_gain
        rgb = rgb * (1 - c_rgb * a[..., None]) + colour * (c_rgb * a[..., None])
        tir = bg_tir * (1 - c_tir * a) + 1.0 * (c_tir * a)
        if dominant[t] == "rgb":
            tir = tir * (1 - d) + d
        else:
            rgb = rgb * (1 - d[..., None]) + colour * d[..., None]
        if dominant[t] == "rgb":
            tir = tir + spec.noise * (rng.random_array(height * width).reshape(height, width) - 0.5)
        else:
            rgb = rgb + spec.noise * (rng.random_array(height * width * 3).reshape(height, width, 3) - 0.5)
        visible.append(_quantize(rgb))
        infrared.append(_quantize(tir))
    gt = np.array(boxes, dtype=np.int64)
    return SequenceRecord(name, visible, infrared, gt, gt.copy(), sorted(attrs, key=ATTRIBUTES.index), dominant)


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def make_specs(count: int, root_seed: int, frames: int = 60, switch_period: int = 10, noise: float = 0.3,
               **overrides) -> list[SequenceSpec]:
    """Per-sequence specs with seeds ``splitmix64(root_seed + i)`` and derived attribute tags."""
    specs = []
    for i in range(count):
        seed = derive_seed(root_seed, i)
        tag_rng = SplitMix64(seed ^ 0xA77A)
        tags = {ATTRIBUTES[int(tag_rng.random() * len(ATTRIBUTES))]}
        if tag_rng.random() < 0.3:
            tags.add(ATTRIBUTES[int(tag_rng.random() * len(ATTRIBUTES))])
        specs.append(SequenceSpec(frames=frames, switch_period=switch_period, noise=noise,
                                  attributes=tuple(sorted(tags, key=ATTRIBUTES.index)), seed=seed,
                                  **overrides))
    return specs


def generate_dataset(count: int, root_seed: int, **kwargs) -> list[SequenceRecord]:
    return [generate_sequence(spec, f"seq_{i:04d}") for i, spec in enumerate(make_specs(count, root_seed, **kwargs))]


# ------------------------------------------------------------------ PNM IO

class PnmError(ValueError):
    def __init__(self, path, offset: int, msg: str):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{path}: byte {offset}: {msg}")


def encode_pnm(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise ValueError(f"PNM frames must be uint8, got {img.dtype}")
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot encode image of shape {img.shape}")
    h, w = img.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img).tobytes()


def write_pnm(path, img: np.ndarray) -> None:
    Path(path).write_bytes(encode_pnm(img))




def decode_pnm(buf: bytes, path="<bytes>") -> np.ndarray:
    if len(buf) < 2 or buf[:2] not in (b"P5", b"P6"):
        raise PnmError(path, 0, f"bad magic {buf[:2]!r}, expected P5 or P6")
    channels = 1 if buf[:2] == b"P5" else 3
    pos = 2
    values = []
    while len(values) < 3:
        if pos >= len(buf):
            raise PnmError(path, pos, "truncated header")
        c = buf[pos:pos + 1]
        if c in (b" ", b"\t", b"\r", b"\n"):
            pos += 1
        elif c == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
        else:
            m = re.compile(rb"\d+").match(buf, pos)
            if m is None:
                raise PnmError(path, pos, f"expected a decimal header field, got {c!r}")
            values.append(int(m.group()))
            pos = m.end()
    if pos >= len(buf) or buf[pos:pos + 1] not in (b" ", b"\t", b"\r", b"\n"):
        raise PnmError(path, pos, "missing whitespace after maxval")
    pos += 1
    w, h, maxval = values
    if maxval != 255:
        raise PnmError(path, pos - 1, f"unsupported maxval {maxval} (only 255)")
    if w <= 0 or h <= 0:
        raise PnmError(path, pos - 1, f"bad dimensions {w}x{h}")
    need = w * h * channels
    if len(buf) - pos != need:
        raise PnmError(path, pos, f"expected {need} pixel bytes, found {len(buf) - pos}")
    data = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    return data.reshape(h, w) if channels == 1 else data.reshape(h, w, 3)


def read_pnm(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing frame file: {path}")
    return decode_pnm(path.read_bytes(), path).copy()


# ---------------------------------------------------------- dataset layout

def format_boxes(boxes, decimals: int | None = None) -> str:
    lines = []
    for b in np.asarray(boxes):
        if decimals is None:
            lines.append(",".join(str(int(v)) for v in b))
        else:
            lines.append(",".join(f"{float(v):.{decimals}f}" for v in b))
    return "\n".join(lines) + "\n"


def read_boxes(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing box file: {path}")
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = re.split(r"[,\s]+", line)
        if len(parts) != 4:
            raise ValueError(f"{path}:{lineno}: expected x,y,w,h, got {line!r}")
        try:
            rows.append([float(p) for p in parts])
        except ValueError:
            raise ValueError(f"{path}:{lineno}: non-numeric box {line!r}") from None
    return np.array(rows, dtype=np.float64).reshape(-1, 4)


def write_sequence(record: SequenceRecord, seq_dir) -> None:
    seq_dir = Path(seq_dir)
    (seq_dir / "visible").mkdir(parents=True, exist_ok=True)
    (seq_dir / "infrared").mkdir(parents=True, exist_ok=True)
    for t, (v, i) in enumerate(zip(record.visible, record.infrared)):
        write_pnm(seq_dir / "visible" / f"{t:06d}.ppm", v)
        write_pnm(seq_dir / "infrared" / f"{t:06d}.pgm", i)
    (seq_dir / "visible.txt").write_text(format_boxes(record.gt_visible))
    (seq_dir / "infrared.txt").write_text(format_boxes(record.gt_infrared))
    (seq_dir / "attributes.txt").write_text("".join(f"{a}\n" for a in record.attributes))


def read_sequence(seq_dir) -> SequenceRecord:
    seq_dir = Path(seq_dir)
    gt_v = read_boxes(seq_dir / "visible.txt")
    gt_i = read_boxes(seq_dir / "infrared.txt")
    attr_path = seq_dir / "attributes.txt"
    attrs = [a.strip() for a in attr_path.read_text().splitlines() if a.strip()] if attr_path.is_file() else []
    n = len(gt_v)
    visible = [read_pnm(seq_dir / "visible" / f"{t:06d}.ppm") for t in range(n)]
    infrared = [read_pnm(seq_dir / "infrared" / f"{t:06d}.pgm") for t in range(n)]
    return SequenceRecord(seq_dir.name, visible, infrared, gt_v, gt_i, attrs)


def write_dataset(records, root) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for rec in records:
        write_sequence(rec, root / rec.name)


def sequence_dirs(root) -> list[Path]:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root not found: {root}")
    return sorted(p for p in root.iterdir() if p.is_dir() and (p / "visible.txt").is_file())


def read_dataset(root) -> list[SequenceRecord]:
    return [read_sequence(d) for d in sequence_dirs(root)]


# ------------------------------------------------------------------- crops

@dataclass(frozen=True)
class CropWindow:
    """Square window in frame pixels mapped onto an ``out_size`` patch."""

    x0: float
    y0: float
    side: float
    out_size: int

    @property
    def scale(self) -> float:
        """Patch pixels per frame pixel."""
        return self.out_size / self.side

    def to_patch(self, box) -> np.ndarray:
        x, y, w, h = np.asarray(box, dtype=np.float64)
        s = self.scale
        return np.array([(x - self.x0) * s, (y - self.y0) * s, w * s, h * s])

    def to_frame(self, box) -> np.ndarray:
        x, y, w, h = np.asarray(box, dtype=np.float64)
        s = self.side / self.out_size
        return np.array([self.x0 + x * s, self.y0 + y * s, w * s, h * s])


def crop_window(box, factor: float, out_size: int) -> CropWindow:
    if not factor > 0:
        raise ValueError(f"context factor must be positive, got {factor}")
    x, y, w, h = (float(v) for v in box)
    if not (w > 0 and h > 0):
        raise ValueError(f"zero-area box {tuple(box)}")
    side = factor * np.sqrt(w * h)
    return CropWindow(x + w / 2 - side / 2, y + h / 2 - side / 2, side, out_size)


def _tap_matrix(start: float, step: float, out_size: int, length: int) -> np.ndarray:
    """(out, length + 1) bilinear weights; column ``length`` collects taps outside the frame."""
    pos = start + (np.arange(out_size) + 0.5) * step - 0.5
    lo = np.floor(pos).astype(np.int64)
    frac = pos - lo
    m = np.zeros((out_size, length + 1))
    rows = np.arange(out_size)
    for idx, wt in ((lo, 1.0 - frac), (lo + 1, frac)):
        np.add.at(m, (rows, np.where((idx >= 0) & (idx < length), idx, length)), wt)
    return m


def mean_bordered(frame: np.ndarray) -> np.ndarray:
    """(H+1, W+1, C) copy of ``frame`` with one extra row and column holding its mean."""
    img = np.asarray(frame, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    height, width, channels = img.shape
    ext = np.empty((height + 1, width + 1, channels))
    ext[:height, :width] = img
    ext[height, :] = img.mean(axis=(0, 1))
    ext[:height, width] = ext[height, 0]
    return ext


def sample_bordered(ext: np.ndarray, win: CropWindow) -> np.ndarray:
    """:func:`sample_window` on a frame already passed through :func:`mean_bordered`; returns (S, S, C)."""
    height, width, channels = ext.shape[0] - 1, ext.shape[1] - 1, ext.shape[2]
    n = win.out_size
    step = win.side / n
    ry = _tap_matrix(win.y0, step, n, height)
    rx = _tap_matrix(win.x0, step, n, width)
    rows = (ry @ ext.reshape(height + 1, -1)).reshape(n, width + 1, channels)
    out = rows.transpose(0, 2, 1).reshape(-1, width + 1) @ rx.T  # (S*C, S)
    return out.reshape(n, channels, n).transpose(0, 2, 1)


def sample_window(frame: np.ndarray, win: CropWindow) -> np.ndarray:
    """Bilinear resample of ``win``; taps outside the frame read the frame mean."""
    out = sample_bordered(mean_bordered(frame), win)
    return out[..., 0] if np.ndim(frame) == 2 else out


def crop_and_resize(frame: np.ndarray, box, factor: float, out_size: int) -> np.ndarray:
    """Square crop of side ``factor * sqrt(w*h)`` around the box centre, resampled to ``out_size``."""
    return sample_window(frame, crop_window(box, factor, out_size))


def dataset_checksum(root) -> str:
    """SHA-256 over relative paths and bytes of every file under ``root``."""
    h = hashlib.sha256()
    root = Path(root)
    for p in sorted(q for q in root.rglob("*") if q.is_file()):
        h.update(p.relative_to(root).as_posix().encode())
        h.update(p.read_bytes())
    return h.hexdigest()
