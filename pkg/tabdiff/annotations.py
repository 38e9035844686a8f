"""
Table-structure annotations: PASCAL-VOC XML in and out, the mask mapping
g(y), random structures, procedural toy-table images, and a projection-profile
extractor that reads rows/columns back out of an image.

Boxes use inclusive-min / exclusive-max pixel coordinates. Images handled here
are float32 arrays shaped (3, H, W) with values in [0, 1].
"""
import math
import warnings
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from tabdiff.errors import AnnotationParseError, AnnotationValidationError, StructureConstraintError
from tabdiff.numerics import generator

ROW = "table row"
COLUMN = "table column"


@dataclass(frozen=True)
class Box:
    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def check(self, width: int, height: int):
        if not (0 <= self.xmin < self.xmax <= width and 0 <= self.ymin < self.ymax <= height):
            raise AnnotationValidationError(f"box outside {width}x{height} image or inverted", self)

    def scaled(self, sx: float, sy: float, width: int, height: int) -> "Box":
        """Scale each axis independently, rounding half-up; keeps at least one pixel."""
        x0, x1 = _scale_span(self.xmin, self.xmax, sx, width)
        y0, y1 = _scale_span(self.ymin, self.ymax, sy, height)
        return Box(x0, y0, x1, y1)

    def interval(self, axis: str) -> tuple[float, float]:
        return (self.ymin, self.ymax) if axis == "rows" else (self.xmin, self.xmax)


def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def _scale_span(lo: float, hi: float, s: float, limit: int) -> tuple[int, int]:
    a = min(max(_round_half_up(lo * s), 0), limit)
    b = min(max(_round_half_up(hi * s), 0), limit)
    if b <= a:
        b = min(a + 1, limit)
        a = b - 1
    return a, b


@dataclass
class TableAnnotation:
    image_width: int
    image_height: int
    rows: list[Box] = field(default_factory=list)
    columns: list[Box] = field(default_factory=list)
    ignored_objects: int = field(default=0, compare=False)

    def __post_init__(self):
        if self.image_width <= 0 or self.image_height <= 0:
            raise AnnotationValidationError(f"image size must be positive, got {self.image_width}x{self.image_height}")
        for b in self.rows + self.columns:
            b.check(self.image_width, self.image_height)
        self.rows = sorted(self.rows, key=lambda b: (b.ymin, b.xmin))
        self.columns = sorted(self.columns, key=lambda b: (b.xmin, b.ymin))

    def labelled(self) -> list[tuple[str, Box]]:
        return [(ROW, b) for b in self.rows] + [(COLUMN, b) for b in self.columns]

    def scaled(self, height: int, width: int) -> "TableAnnotation":
        sx, sy = width / self.image_width, height / self.image_height
        return TableAnnotation(width, height,
                               [b.scaled(sx, sy, width, height) for b in self.rows],
                               [b.scaled(sx, sy, width, height) for b in self.columns])

    def to_dict(self) -> dict:
        return dict(width=self.image_width, height=self.image_height,
                    rows=[[b.xmin, b.ymin, b.xmax, b.ymax] for b in self.rows],
                    columns=[[b.xmin, b.ymin, b.xmax, b.ymax] for b in self.columns])

    @classmethod
    def from_dict(cls, d: dict) -> "TableAnnotation":
        return cls(d["width"], d["height"], [Box(*b) for b in d["rows"]], [Box(*b) for b in d["columns"]])


@dataclass
class StructureMask:
    height: int
    width: int
    bits: np.ndarray

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.uint8)
        if self.bits.shape != (self.height, self.width):
            raise AnnotationValidationError(f"mask bits shape {self.bits.shape} != ({self.height}, {self.width})")
        if self.bits.size and self.bits.max() > 1:
            raise AnnotationValidationError("mask values must be 0 or 1")

    def to_rgb(self) -> np.ndarray:
        """(3, H, W) float32 in [0, 1]: row/column pixels white, background black."""
        return np.repeat(self.bits[None].astype(np.float32), 3, axis=0)

    def save_png(self, path: str | Path):
        Image.fromarray(self.bits * 255).save(path)

    @classmethod
    def load_png(cls, path: str | Path) -> "StructureMask":
        arr = np.asarray(Image.open(path).convert("L"))
        return cls(arr.shape[0], arr.shape[1], (arr > 127).astype(np.uint8))

# -----------------------------------------------------------------------------
# VOC XML

def _byte_offset(document: bytes, line: int, column: int) -> int:
    lines = document.splitlines(keepends=True)
    return sum(len(l) for l in lines[:max(line - 1, 0)]) + column


def _number(el: ET.Element, tag: str, where: str) -> float:
    text = el.findtext(tag)
    if text is None:
        raise AnnotationParseError(f"{where}: missing <{tag}>")
    try:
        return float(text.strip())
    except ValueError:
        raise AnnotationParseError(f"{where}: <{tag}> is not a number: {text!r}") from None


def parse_voc_xml(document: bytes) -> TableAnnotation:
    try:
        root = ET.fromstring(document)
    except ET.ParseError as e:
        line, col = e.position
        raise AnnotationParseError(f"malformed XML ({e})", _byte_offset(document, line, col)) from None
    size = root.find("size")
    if size is None:
        raise AnnotationParseError("missing <size> element")
    width = int(_number(size, "width", "size"))
    height = int(_number(size, "height", "size"))
    rows, columns, ignored = [], [], 0
    for i, obj in enumerate(root.iter("object")):
        name = (obj.findtext("name") or "").strip()
        if name not in (ROW, COLUMN):
            ignored += 1
            continue
        bb = obj.find("bndbox")
        if bb is None:
            raise AnnotationParseError(f"object {i} ({name}): missing <bndbox>")
        where = f"object {i} bndbox"
        box = Box(*(_number(bb, k, where) for k in ("xmin", "ymin", "xmax", "ymax")))
        box.check(width, height)
        (rows if name == ROW else columns).append(box)
    if ignored:
        warnings.warn(f"ignored {ignored} object(s) that are neither {ROW!r} nor {COLUMN!r}")
    return TableAnnotation(width, height, rows, columns, ignored_objects=ignored)


def _fmt(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def write_voc_xml(y: TableAnnotation, filename: str = "", folder: str = "") -> bytes:
    root = ET.Element("annotation")
    ET.SubElement(root, "folder").text = folder
    ET.SubElement(root, "filename").text = filename
    size = ET.SubElement(root, "size")
    ET.SubElement(size, "width").text = str(y.image_width)
    ET.SubElement(size, "height").text = str(y.image_height)
    ET.SubElement(size, "depth").text = "3"
    for name, b in y.labelled():
        obj = ET.SubElement(root, "object")
        ET.SubElement(obj, "name").text = name
        ET.SubElement(obj, "difficult").text = "0"
        bb = ET.SubElement(obj, "bndbox")
        for k in ("xmin", "ymin", "xmax", "ymax"):
            ET.SubElement(bb, k).text = _fmt(getattr(b, k))
    ET.indent(root)
    return ET.tostring(root, encoding="utf-8", xml_declaration=True)

# -----------------------------------------------------------------------------
# Mask mapping g

def render_mask(y: TableAnnotation, H: int, W: int) -> StructureMask:
    """Filled row/column bands set to 1 (union), everything else 0."""
    bits = np.zeros((H, W), dtype=np.uint8)
    for _, b in y.scaled(H, W).labelled():
        bits[int(b.ymin):int(b.ymax), int(b.xmin):int(b.xmax)] = 1
    return StructureMask(H, W, bits)


def mask_to_annotation(mask: StructureMask) -> TableAnnotation:
    """Bands read back off a rendered mask (exact while bands cover under half of each axis)."""
    return extract_structure(1.0 - mask.to_rgb(), min_run=1)

# -----------------------------------------------------------------------------
# Random structures

@dataclass(frozen=True)
class StructureConstraints:
    height: int = 64
    width: int = 64
    rows: tuple[int, int] = (2, 5)
    cols: tuple[int, int] = (2, 5)
    margin: int = 4
    min_gap: int = 8
    line_thickness: tuple[int, int] = (2, 3)

    def check(self):
        for name, (lo, hi) in (("rows", self.rows), ("cols", self.cols), ("line_thickness", self.line_thickness)):
            if not 0 <= lo <= hi:
                raise StructureConstraintError(f"{name}: invalid range [{lo}, {hi}]")
        if self.line_thickness[0] < 1:
            raise StructureConstraintError("line_thickness: bands need at least 1 px")
        if self.margin < 0 or self.min_gap < 0:
            raise StructureConstraintError("margin and min_gap must be non-negative")
        t = self.line_thickness[1]
        for name, n, extent in (("rows", self.rows[1], self.height), ("cols", self.cols[1], self.width)):
            span = extent - 2 * self.margin
            need = n * t + max(n - 1, 0) * self.min_gap
            if need > span:
                raise StructureConstraintError(
                    f"{name} capacity: {n} bands of up to {t} px with {self.min_gap} px gaps need {need} px, "
                    f"only {span} px fit between margins")


def _place_bands(rng: np.random.Generator, n: int, extent: int, c: StructureConstraints) -> list[tuple[int, int]]:
    if n == 0:
        return []
    thick = rng.integers(c.line_thickness[0], c.line_thickness[1], size=n, endpoint=True)
    slack = extent - 2 * c.margin - int(thick.sum()) - (n - 1) * c.min_gap
    assert slack >= 0
    cuts = np.sort(rng.integers(0, slack, size=n, endpoint=True))
    extra = np.diff(np.concatenate([[0], cuts, [slack]]))
    bands, pos = [], c.margin + int(extra[0])
    for i in range(n):
        bands.append((pos, pos + int(thick[i])))
        pos += int(thick[i]) + c.min_gap + int(extra[i + 1])
    return bands


def random_structure(seed: int, constraints: StructureConstraints) -> TableAnnotation:
    c = constraints
    c.check()
    rng = generator(seed)
    n_rows = int(rng.integers(c.rows[0], c.rows[1], endpoint=True))
    n_cols = int(rng.integers(c.cols[0], c.cols[1], endpoint=True))
    rows = [Box(0, a, c.width, b) for a, b in _place_bands(rng, n_rows, c.height, c)]
    cols = [Box(a, 0, b, c.height) for a, b in _place_bands(rng, n_cols, c.width, c)]
    return TableAnnotation(c.width, c.height, rows, cols)

# -----------------------------------------------------------------------------
# Toy tables

def _segments(bands: list[tuple[int, int]], extent: int) -> list[tuple[int, int]]:
    """Complement of the bands inside [0, extent)."""
    out, pos = [], 0
    for a, b in sorted(bands):
        if a > pos:
            out.append((pos, a))
        pos = max(pos, b)
    if pos < extent:
        out.append((pos, extent))
    return out


def _centered(a: int, b: int, thickness: int) -> tuple[int, int]:
    if b - a <= thickness:
        return a, b
    a += (b - a - thickness) // 2
    return a, a + thickness


def generate_toy_table(y: TableAnnotation, style_seed: int, line_thickness: int = 3) -> np.ndarray:
    """
    White page, a dark separator line centered in each row/column band (the
    whole band when it is no wider than `line_thickness`), and pseudo-text
    blobs inside the cells between bands.

    Blobs cover at most half of a cell in each direction at a gray level no
    darker than 0.4, so no image row or column carries more than 0.2 extra
    darkness from text; separators are drawn at 0.85-0.95. This keeps
    extract_structure exact for bands >= 2 px separated by >= 8 px.
    """
    if line_thickness < 1:
        raise StructureConstraintError(f"line_thickness must be >= 1 px, got {line_thickness}")
    H, W = y.image_height, y.image_width
    rng = generator(style_seed)
    ink = rng.uniform(0.85, 0.95)
    text_ink = rng.uniform(0.25, 0.4)
    density = rng.uniform(0.5, 0.9)
    jitter = int(rng.integers(0, 3, endpoint=True))
    dark = np.zeros((H, W), dtype=np.float64)
    row_bands = [(_round_half_up(b.ymin), _round_half_up(b.ymax)) for b in y.rows]
    col_bands = [(_round_half_up(b.xmin), _round_half_up(b.xmax)) for b in y.columns]
    for y0, y1 in _segments(row_bands, H):
        for x0, x1 in _segments(col_bands, W):
            ch, cw = y1 - y0, x1 - x0
            if ch < 3 or cw < 3 or rng.random() > density:
                continue
            bh = int(np.clip(int(ch * rng.uniform(0.2, 0.5)), 1, ch // 2))
            bw = int(np.clip(int(cw * rng.uniform(0.2, 0.5)), 1, cw // 2))
            top = int(np.clip(y0 + (ch - bh) // 2 + rng.integers(-jitter, jitter, endpoint=True), y0, y1 - bh))
            left = int(np.clip(x0 + (cw - bw) // 2 + rng.integers(-jitter, jitter, endpoint=True), x0, x1 - bw))
            # glyphs: runs of 1-3 inked pixel columns separated by 1 px spaces
            x = left
            while x < left + bw:
                g = int(rng.integers(1, 3, endpoint=True))
                dark[top:top + bh, x:min(x + g, left + bw)] = text_ink
                x += g + 1
    for a, b in row_bands:
        a, b = _centered(a, b, line_thickness)
        dark[a:b, :] = ink
    for a, b in col_bands:
        a, b = _centered(a, b, line_thickness)
        dark[:, a:b] = ink
    return np.repeat((1.0 - dark)[None].astype(np.float32), 3, axis=0)

# -----------------------------------------------------------------------------
# Projection-profile extractor

def _runs(flags: np.ndarray, min_run: int) -> list[tuple[int, int]]:
    out, start = [], None
    for i, f in enumerate(list(flags) + [False]):
        if f and start is None:
            start = i
        elif not f and start is not None:
            if i - start >= min_run:
                out.append((start, i))
            start = None
    return out


def _as_array(image) -> np.ndarray:
    if hasattr(image, "detach"):
        image = image.detach().cpu().numpy()
    return np.asarray(image, dtype=np.float64)


def extract_structure(image, tau_dark: float = 0.25, min_run: int = 2) -> TableAnnotation:
    """
    Rows are maximal runs (>= min_run) of image rows whose darkness
    1 - mean intensity exceeds the page-median darkness by tau_dark; columns
    likewise. Each run becomes a full-width / full-height box.
    """
    img = _as_array(image)
    _, H, W = img.shape
    dark = 1.0 - img.mean(axis=0)
    row_prof, col_prof = dark.mean(axis=1), dark.mean(axis=0)
    rows = [Box(0, a, W, b) for a, b in _runs(row_prof > np.median(row_prof) + tau_dark, min_run)]
    cols = [Box(a, 0, b, H) for a, b in _runs(col_prof > np.median(col_prof) + tau_dark, min_run)]
    return TableAnnotation(W, H, rows, cols)

# -----------------------------------------------------------------------------
# Image I/O

def save_image_png(image, path: str | Path):
    img = np.clip(_as_array(image), 0.0, 1.0)
    Image.fromarray(np.round(img.transpose(1, 2, 0) * 255).astype(np.uint8)).save(path)


def load_image_png(path: str | Path, size: tuple[int, int] | None = None) -> np.ndarray:
    """(3, H, W) float32 in [0, 1]; optionally resized to size = (H, W)."""
    im = Image.open(path).convert("RGB")
    if size is not None and im.size != (size[1], size[0]):
        im = im.resize((size[1], size[0]), Image.BILINEAR)
    return (np.asarray(im, dtype=np.float32) / 255.0).transpose(2, 0, 1).copy()


def overlay_mask(image, mask: StructureMask, color=(1.0, 0.0, 0.0), alpha: float = 0.4) -> np.ndarray:
    """Blend `color` over the mask's 1-pixels."""
    img = _as_array(image).astype(np.float32)
    if img.shape[1:] != (mask.height, mask.width):
        raise AnnotationValidationError(f"mask {mask.height}x{mask.width} does not match image {img.shape[1:]}")
    m = mask.bits[None].astype(np.float32) * alpha
    tint = np.asarray(color, dtype=np.float32).reshape(3, 1, 1)
    return img * (1 - m) + tint * m


def load_voc_dir(xml_dir: str | Path, image_dir: str | Path | None = None,
                 size: tuple[int, int] | None = None) -> list[tuple[np.ndarray, TableAnnotation, str]]:
    """
    Ingest a directory of VOC XML files and their images (looked up by the
    <filename> element, else by stem with .png/.jpg). With `size` = (H, W),
    images are resized and annotations rescaled to match.
    """
    xml_dir = Path(xml_dir)
    image_dir = Path(image_dir) if image_dir is not None else xml_dir
    out = []
    for xml_path in sorted(xml_dir.glob("*.xml")):
        doc = xml_path.read_bytes()
        y = parse_voc_xml(doc)
        fname = (ET.fromstring(doc).findtext("filename") or "").strip()
        candidates = [image_dir / fname] if fname else []
        candidates += [image_dir / f"{xml_path.stem}{ext}" for ext in (".png", ".jpg", ".jpeg")]
        img_path = next((p for p in candidates if p.is_file()), None)
        if img_path is None:
            raise FileNotFoundError(f"no image found for {xml_path}")
        img = load_image_png(img_path, size)
        if size is not None:
            y = y.scaled(*size)
        out.append((img, y, xml_path.stem))
    return out
