"""A toy paired world: shapes painted on a token grid, described by short captions.

Grid tokens: 0 is background; every color owns ``shades`` consecutive tokens.
Captions follow the fixed slot grammar ``a <color> <shape> here <pad>...``
with two interchangeable words per color. Because the joint law is known
exactly, cross-modal agreement of generated pairs can be measured.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DatasetError, RenderError
from .layout import ModalityLayout, new_layout

SHAPES = ("square", "cross", "stripe")
COLORS = ("red", "green", "blue")
SYNONYMS = {"red": ("red", "crimson"), "green": ("green", "emerald"), "blue": ("blue", "navy")}
PALETTE = {"red": (200, 40, 40), "green": (40, 160, 60), "blue": (40, 70, 200)}
MASK_RGB = (92, 58, 32)
BACKGROUND_RGB = (235, 235, 235)
DIGITS = "0123456789abcdefghijklmnopqrstuvwxyz"


@dataclass(frozen=True)
class WorldConfig:
    rows: int = 8
    cols: int = 8
    shades: int = 5
    caption_len: int = 8
    shapes: tuple = SHAPES
    colors: tuple = COLORS

    @property
    def grid_tokens(self) -> int:
        return 1 + len(self.colors) * self.shades

    @property
    def words(self) -> list[str]:
        out = ["<pad>", "a", "here", *self.shapes]
        for c in self.colors:
            out.extend(SYNONYMS[c])
        return out

    @property
    def lengths(self) -> tuple[int, int]:
        return self.rows * self.cols, self.caption_len

    def layout(self) -> ModalityLayout:
        return new_layout([self.grid_tokens, len(self.words)])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shapes"], d["colors"] = list(self.shapes), list(self.colors)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        d = dict(d)
        for key in ("shapes", "colors"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class SceneSpec:
    shape: str
    color: str
    shade: int
    row: int
    col: int
    vertical: bool = False


@dataclass(frozen=True)
class PairedRecord:
    grid: np.ndarray      # local grid tokens, (rows * cols,)
    caption: np.ndarray   # local word tokens, (caption_len,)
    scene: SceneSpec | None = None

    def fused(self, layout: ModalityLayout) -> np.ndarray:
        return np.concatenate([self.grid + layout.offsets[0], self.caption + layout.offsets[1]])


@dataclass
class ConsistencyResult:
    consistent: bool
    parsed_scene: tuple | None = None
    confidence: float = 0.0
    reason: str = ""


def _cells(shape: str, row: int, col: int, vertical: bool, world: WorldConfig) -> np.ndarray:
    mask = np.zeros((world.rows, world.cols), dtype=bool)
    if shape == "square":
        mask[row:row + 3, col:col + 3] = True
    elif shape == "cross":
        mask[row, col - 2:col + 3] = True
        mask[row - 2:row + 3, col] = True
    elif shape == "stripe":
        if vertical:
            mask[:, col] = True
        else:
            mask[row, :] = True
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return mask


def placements(shape: str, world: WorldConfig):
    """Every (row, col, vertical) at which ``shape`` fits on the grid."""
    R, C = world.rows, world.cols
    if shape == "square":
        return [(r, c, False) for r in range(R - 2) for c in range(C - 2)]
    if shape == "cross":
        return [(r, c, False) for r in range(2, R - 2) for c in range(2, C - 2)]
    return [(r, 0, False) for r in range(R)] + [(0, c, True) for c in range(C)]


def sample_scene(world: WorldConfig, rng: np.random.Generator) -> SceneSpec:
    shape = world.shapes[rng.integers(len(world.shapes))]
    color = world.colors[rng.integers(len(world.colors))]
    shade = int(rng.integers(world.shades))
    opts = placements(shape, world)
    r, c, v = opts[rng.integers(len(opts))]
    return SceneSpec(shape, color, shade, r, c, v)


def render_scene(scene: SceneSpec, world: WorldConfig, rng=None) -> np.ndarray:
    """Local grid tokens of a scene; deterministic (``rng`` is accepted and unused)."""
    cells = _cells(scene.shape, scene.row, scene.col, scene.vertical, world)
    token = 1 + world.colors.index(scene.color) * world.shades + scene.shade
    return np.where(cells, token, 0).reshape(-1).astype(np.int64)


def caption_scene(scene: SceneSpec, world: WorldConfig, rng: np.random.Generator) -> np.ndarray:
    words = world.words
    color_word = SYNONYMS[scene.color][rng.integers(2)]
    caption = ["a", color_word, scene.shape, "here"] + ["<pad>"] * (world.caption_len - 4)
    return np.array([words.index(w) for w in caption], dtype=np.int64)


def generate_dataset(n: int, seed: int, world: WorldConfig | None = None) -> list[PairedRecord]:
    if n < 1:
        raise DatasetError("dataset size must be >= 1")
    world = world or WorldConfig()
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        scene = sample_scene(world, rng)
        out.append(PairedRecord(render_scene(scene, world), caption_scene(scene, world, rng), scene))
    return out


def parse_caption(caption: np.ndarray, world: WorldConfig):
    """``(shape, color)`` from caption tokens, or ``None`` with a reason."""
    words = world.words
    caption = np.asarray(caption)
    if caption.size != world.caption_len or caption.min() < 0 or caption.max() >= len(words):
        return None, "caption has wrong length or out-of-vocabulary tokens"
    w = [words[i] for i in caption]
    if w[0] != "a" or w[3] != "here" or any(x != "<pad>" for x in w[4:]):
        return None, "caption breaks the slot grammar"
    color = next((c for c in world.colors if w[1] in SYNONYMS[c]), None)
    if color is None:
        return None, f"slot 2 holds {w[1]!r}, not a color word"
    if w[2] not in world.shapes:
        return None, f"slot 3 holds {w[2]!r}, not a shape word"
    return (w[2], color), ""


def classify_grid(grid: np.ndarray, world: WorldConfig):
    """Best-matching ``(shape, color)`` of a grid plus a confidence in [0, 1].

    Color is the majority color among painted cells; shape is the template
    with the highest intersection-over-union over all placements. A grid with
    no background left reads as a stripe (a stripe widened to fill the grid).
    """
    grid = np.asarray(grid).reshape(world.rows, world.cols)
    if grid.min() < 0 or grid.max() >= world.grid_tokens:
        return None, 0.0, "grid has out-of-range tokens"
    fg = grid > 0
    if not fg.any():
        return None, 0.0, "empty grid"
    families = (grid[fg] - 1) // world.shades
    counts = np.bincount(families, minlength=len(world.colors))
    color = world.colors[int(np.argmax(counts))]
    purity = counts.max() / fg.sum()
    if fg.all():
        return ("stripe", color), float(purity), ""
    best, best_iou = None, -1.0
    for shape in world.shapes:
        for r, c, v in placements(shape, world):
            cells = _cells(shape, r, c, v, world)
            iou = (cells & fg).sum() / (cells | fg).sum()
            if iou > best_iou:
                best, best_iou = shape, iou
    return (best, color), float(best_iou * purity), ""


def consistency_check(grid: np.ndarray, caption: np.ndarray, world: WorldConfig | None = None) -> ConsistencyResult:
    """Do a (local) grid and caption describe the same shape and color?"""
    world = world or WorldConfig()
    parsed, why = parse_caption(caption, world)
    if parsed is None:
        return ConsistencyResult(False, None, 0.0, why)
    seen, conf, why = classify_grid(grid, world)
    if seen is None:
        return ConsistencyResult(False, parsed, 0.0, why)
    if seen != parsed:
        return ConsistencyResult(False, parsed, conf, f"grid shows {seen}, caption says {parsed}")
    return ConsistencyResult(True, parsed, conf, "")


def analytic_chance_rate(world: WorldConfig | None = None) -> float:
    world = world or WorldConfig()
    return 1.0 / (len(world.shapes) * len(world.colors))


def _split_fused(tokens: np.ndarray, layout: ModalityLayout, m: int, world_tokens: int) -> np.ndarray:
    """Fused indices of modality m to local codes, mask -> ``world_tokens``."""
    tokens = np.asarray(tokens)
    seg = layout.segment(m)
    ok = ((tokens >= seg.start) & (tokens < seg.stop)) | (tokens == layout.mask_index)
    if not ok.all():
        raise RenderError(f"token outside the segment of modality {m}")
    return np.where(tokens == layout.mask_index, world_tokens, tokens - seg.start)


def render_text(grid_fused: np.ndarray, layout: ModalityLayout, world: WorldConfig | None = None) -> str:
    """One character per cell: base-36 digit of the local token, ``#`` for mask."""
    world = world or WorldConfig()
    local = _split_fused(grid_fused, layout, 0, world.grid_tokens).reshape(world.rows, world.cols)
    return "\n".join("".join("#" if v == world.grid_tokens else DIGITS[v] for v in row) for row in local)


def parse_text(text: str, layout: ModalityLayout, world: WorldConfig | None = None) -> np.ndarray:
    world = world or WorldConfig()
    rows = [line.strip() for line in text.strip().splitlines()]
    out = [layout.mask_index if ch == "#" else layout.offsets[0] + DIGITS.index(ch) for row in rows for ch in row]
    return np.array(out, dtype=np.int64)


def token_rgb(local: int, world: WorldConfig) -> tuple[int, int, int]:
    if local == world.grid_tokens:
        return MASK_RGB
    if local == 0:
        return BACKGROUND_RGB
    fam, shade = divmod(local - 1, world.shades)
    base = np.array(PALETTE[world.colors[fam]])
    lift = shade / max(world.shades - 1, 1) * 0.5
    return tuple(int(v) for v in np.round(base + (255 - base) * lift))


def render_ppm(grid_fused: np.ndarray, layout: ModalityLayout, world: WorldConfig | None = None,
               scale: int = 4) -> str:
    """Plain-text (P3) portable pixmap, ``scale`` pixels per cell."""
    world = world or WorldConfig()
    local = _split_fused(grid_fused, layout, 0, world.grid_tokens).reshape(world.rows, world.cols)
    lines = ["P3", f"{world.cols * scale} {world.rows * scale}", "255"]
    for row in local:
        pix = " ".join(" ".join(map(str, token_rgb(v, world))) for v in row for _ in range(scale))
        lines.extend([pix] * scale)
    return "\n".join(lines) + "\n"


def read_ppm(text: str) -> np.ndarray:
    vals = text.split()
    if vals[0] != "P3":
        raise RenderError("not a plain-text pixmap")
    w, h = int(vals[1]), int(vals[2])
    return np.array(vals[4:], dtype=np.int64).reshape(h, w, 3)


def caption_words(caption_fused: np.ndarray, layout: ModalityLayout, world: WorldConfig | None = None) -> str:
    world = world or WorldConfig()
    local = _split_fused(caption_fused, layout, 1, len(world.words))
    return " ".join("[MASK]" if v == len(world.words) else world.words[v] for v in local)


def render(record, layout: ModalityLayout | None = None, world: WorldConfig | None = None):
    """``(text, ppm)`` for a :class:`PairedRecord` or a fused grid-token array."""
    world = world or WorldConfig()
    layout = layout or world.layout()
    grid = record.fused(layout)[: world.rows * world.cols] if isinstance(record, PairedRecord) else record
    text = render_text(grid, layout, world)
    if isinstance(record, PairedRecord):
        text += "\n" + caption_words(record.caption + layout.offsets[1], layout, world)
    return text, render_ppm(grid, layout, world)


def dataset_header(world: WorldConfig) -> dict:
    layout = world.layout()
    return {"format": "unidiff-pairs", "version": 1, "sizes": list(layout.sizes),
            "lengths": list(world.lengths), "grid": [world.rows, world.cols], "world": world.to_dict()}


def save_dataset(records: list[PairedRecord], path, world: WorldConfig | None = None):
    world = world or WorldConfig()
    layout = world.layout()
    lines = [json.dumps(dataset_header(world), sort_keys=True)]
    lines += [" ".join(map(str, r.fused(layout))) for r in records]
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path) -> tuple[list[PairedRecord], WorldConfig]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise DatasetError(f"{path}: empty dataset file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: bad header line: {exc}") from None
    if header.get("format") != "unidiff-pairs" or header.get("version") != 1:
        raise DatasetError(f"{path}: unsupported dataset format {header.get('format')!r} v{header.get('version')}")
    world = WorldConfig.from_dict(header["world"])
    layout = world.layout()
    if list(layout.sizes) != header["sizes"] or list(world.lengths) != header["lengths"]:
        raise DatasetError(f"{path}: header layout disagrees with its world config")
    n_grid = world.rows * world.cols
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        toks = np.array(line.split(), dtype=np.int64)
        if toks.size != sum(world.lengths):
            raise DatasetError(f"{path}:{lineno}: expected {sum(world.lengths)} tokens, got {toks.size}")
        grid, cap = toks[:n_grid] - layout.offsets[0], toks[n_grid:] - layout.offsets[1]
        if grid.min() < 0 or grid.max() >= world.grid_tokens or cap.min() < 0 or cap.max() >= len(world.words):
            raise DatasetError(f"{path}:{lineno}: token outside its modality segment")
        records.append(PairedRecord(grid, cap))
    return records, world


def records_to_array(records: list[PairedRecord], layout: ModalityLayout) -> np.ndarray:
    return np.stack([r.fused(layout) for r in records])
