"""Procedural traffic scenes with templated four-clause captions and one risk box.

Each scene is drawn from a small vector description (road layout, grey
distractor shapes, one saturated risk object) and rasterised twice, at
224x224 and 384x384. Captions are a pure function of the scenario label and
the risk object's attributes, so a model that reads the image correctly can
reproduce them exactly.
"""

import base64
import json
from dataclasses import dataclass, field

import numpy as np

from .rng import stream

SCHEMA_VERSION = 1
LO_SIZE = 224
HI_SIZE = 384

SCENARIOS = ("urban", "narrow", "intersection")
SCENARIO_PHRASE = {
    "urban": "on an urban road",
    "narrow": "on a narrow road",
    "intersection": "through an intersection",
}

COLORS = {
    "red": (220, 40, 40),
    "blue": (40, 90, 220),
    "green": (40, 170, 70),
    "yellow": (235, 205, 30),
    "purple": (150, 60, 200),
}

# category -> (shape, aspect range w/h)
CATEGORIES = {
    "car": ("rect", (1.4, 2.2)),
    "truck": ("rect", (0.6, 1.0)),
    "pedestrian": ("ellipse", (0.35, 0.6)),
    "cyclist": ("ellipse", (0.8, 1.25)),
}

# area ranges match the small/medium/large IoU buckets (0.01 / 0.1 cut points)
SIZE_BUCKETS = {
    "small": (0.003, 0.01),
    "medium": (0.01, 0.1),
    "large": (0.1, 0.35),
}
BUCKET_WEIGHTS = (0.2, 0.35, 0.45)
DISTANCE = {"small": "far ahead", "medium": "ahead", "large": "close by"}
SIDE_PHRASE = {"left": "on the left", "middle": "in the middle", "right": "on the right"}

PROMPT = ("What is the current driving scenario? Which object is at the highest risk? "
          "Then predict the intentions and suggestions for the ego-car.")

_ROAD = (70, 70, 75)
_SIDEWALK = (160, 160, 155)
_BUILDING = (105, 100, 95)
_SKY = (170, 185, 200)
_MARK = (235, 235, 235)


class SceneFormatError(ValueError):
    pass


@dataclass(frozen=True)
class NormBox:
    """Center-format box normalised to the unit square."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (0 < self.w <= 1 and 0 < self.h <= 1):
            raise ValueError(f"box extents must lie in (0, 1]: {self}")
        tol = 1e-12
        if (self.x - self.w / 2 < -tol or self.x + self.w / 2 > 1 + tol
                or self.y - self.h / 2 < -tol or self.y + self.h / 2 > 1 + tol):
            raise ValueError(f"box leaves the unit square: {self}")

    @property
    def area(self):
        return self.w * self.h

    def corners(self):
        return (self.x - self.w / 2, self.y - self.h / 2, self.x + self.w / 2, self.y + self.h / 2)

    def as_array(self):
        return np.array([self.x, self.y, self.w, self.h])

    @classmethod
    def from_corners(cls, x1, y1, x2, y2):
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)


@dataclass(eq=False)
class SceneRecord:
    """One scene. Rasters are uint8 RGB levels; ``image_lo()``/``image_hi()``
    give the same pixels as floats in [0, 1]."""

    id: str
    raster_lo: np.ndarray
    raster_hi: np.ndarray
    scenario: str
    caption: tuple
    box: NormBox
    object_attrs: dict = field(default_factory=dict)

    def image_lo(self):
        return self.raster_lo.astype(np.float64) / 255.0

    def image_hi(self):
        return self.raster_hi.astype(np.float64) / 255.0

    @property
    def caption_text(self):
        return caption_text(self.caption)

    def __eq__(self, other):
        if not isinstance(other, SceneRecord):
            return NotImplemented
        return (self.id == other.id and self.scenario == other.scenario
                and tuple(self.caption) == tuple(other.caption) and self.box == other.box
                and self.object_attrs == other.object_attrs
                and self.raster_lo.shape == other.raster_lo.shape
                and self.raster_hi.shape == other.raster_hi.shape
                and np.array_equal(self.raster_lo, other.raster_lo)
                and np.array_equal(self.raster_hi, other.raster_hi))


# ---------------------------------------------------------------------------
# captions
# ---------------------------------------------------------------------------


def side_of(x):
    if x < 1 / 3:
        return "left"
    if x > 2 / 3:
        return "right"
    return "middle"


def size_bucket(area, small=0.01, large=0.1):
    if area < small:
        return "small"
    return "medium" if area < large else "large"


def action_of(category, side):
    if category == "car":
        return {"left": "cutting in from the left", "right": "cutting in from the right",
                "middle": "braking in front"}[side]
    if category == "truck":
        return "moving slowly" if side == "middle" else "changing lanes"
    if category == "pedestrian":
        return "crossing the road"
    return "riding across the road"


def intention_of(scenario, side):
    if scenario == "urban":
        return "go straight"
    if scenario == "narrow":
        return "pass through carefully"
    return {"left": "turn right", "right": "turn left", "middle": "go straight"}[side]


def suggestion_of(distance_bucket, category):
    if distance_bucket == "large":
        return "stop and wait"
    if distance_bucket == "medium":
        return "slow down and yield" if category in ("pedestrian", "cyclist") else "slow down"
    return "keep a safe distance"


def build_caption(scenario, attrs):
    """Four clauses from the scenario and risk-object attributes."""
    color = attrs["color"]
    article = "an" if color[0] in "aeiou" else "a"
    return (
        f"the ego car is driving {SCENARIO_PHRASE[scenario]}.",
        f"the risk object is {article} {color} {attrs['category']} "
        f"{DISTANCE[attrs['size']]} {SIDE_PHRASE[attrs['side']]}, which is {attrs['action']}.",
        f"the ego car intends to {attrs['intention']}.",
        f"the ego car should {attrs['suggestion']}.",
    )


def caption_text(clauses):
    return " ".join(clauses)


def split_clauses(text):
    """Inverse of :func:`caption_text` for well-formed output; tolerant otherwise."""
    parts = [p.strip() for p in text.split(". ")]
    out = [p if p.endswith(".") else p + "." for p in parts if p]
    if text and not text.endswith("."):
        out[-1] = out[-1][:-1]
    return tuple(out)


def template_sentences():
    """Every sentence the generator can emit (tokenizer corpus + round-trip tests)."""
    out = set()
    for scenario in SCENARIOS:
        for color in COLORS:
            for cat in CATEGORIES:
                for size in SIZE_BUCKETS:
                    for side in SIDE_PHRASE:
                        attrs = {"color": color, "category": cat, "size": size, "side": side,
                                 "action": action_of(cat, side),
                                 "intention": intention_of(scenario, side),
                                 "suggestion": suggestion_of(size, cat)}
                        out.update(build_caption(scenario, attrs))
    return sorted(out)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def _pixel_grid(size):
    c = (np.arange(size) + 0.5) / size
    return c[None, :], c[:, None]  # u (columns), v (rows)


def _shape_mask(shape, box, u, v):
    x1, y1, x2, y2 = box.corners()
    if shape == "rect":
        return (u >= x1) & (u <= x2) & (v >= y1) & (v <= y2)
    return ((u - box.x) / (box.w / 2)) ** 2 + ((v - box.y) / (box.h / 2)) ** 2 <= 1.0


def _paint(img, mask, color):
    img[np.broadcast_to(mask, img.shape[:2])] = color


def render(layout, size):
    """Rasterise a scene layout to a (size, size, 3) uint8 image."""
    u, v = _pixel_grid(size)
    img = np.empty((size, size, 3), dtype=np.uint8)
    img[:] = _BUILDING
    horizon = layout["horizon"]
    _paint(img, v < horizon, _SKY)
    c, half = layout["road_center"], layout["road_half"]
    below = v >= horizon
    _paint(img, below & (np.abs(u - c) <= half + 0.05), _SIDEWALK)
    _paint(img, below & (np.abs(u - c) <= half), _ROAD)
    dash = (np.floor(v * 12) % 2 == 0)
    _paint(img, below & dash & (np.abs(u - c) <= 0.008), _MARK)
    if layout["scenario"] == "urban":
        for off in (-half / 2, half / 2):
            _paint(img, below & dash & (np.abs(u - c - off) <= 0.005), _MARK)
    if layout["scenario"] == "intersection":
        cy, ch = layout["cross_center"], layout["cross_half"]
        band = np.abs(v - cy) <= ch
        _paint(img, band & below, _ROAD)
        zebra = (np.abs(v - (cy + ch + 0.03)) <= 0.02) & (np.floor(u * 30) % 2 == 0)
        _paint(img, zebra & (np.abs(u - c) <= half), _MARK)
    for d in layout["distractors"]:
        _paint(img, _shape_mask(d["shape"], d["box"], u, v), (d["gray"],) * 3)
    obj = layout["object"]
    _paint(img, _shape_mask(obj["shape"], obj["box"], u, v), COLORS[obj["color"]])
    return img


def _overlaps(a, b, margin=0.0):
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    return not (ax2 + margin <= bx1 or bx2 + margin <= ax1 or ay2 + margin <= by1 or by2 + margin <= ay1)


def _sample_box(rng, area, aspect, max_extent=0.9):
    while True:
        a = area if area is not None else np.exp(rng.uniform(np.log(0.002), np.log(0.03)))
        r = rng.uniform(*aspect)
        w, h = np.sqrt(a * r), np.sqrt(a / r)
        if w <= max_extent and h <= max_extent:
            break
        area = None if area is None else area * 0.9
    x = rng.uniform(w / 2, 1 - w / 2)
    y = rng.uniform(h / 2, 1 - h / 2)
    return NormBox(float(x), float(y), float(w), float(h))


def sample_layout(rng):
    scenario = SCENARIOS[int(rng.integers(len(SCENARIOS)))]
    half = {"urban": rng.uniform(0.26, 0.32), "narrow": rng.uniform(0.1, 0.14),
            "intersection": rng.uniform(0.18, 0.24)}[scenario]
    layout = {
        "scenario": scenario,
        "horizon": float(rng.uniform(0.2, 0.3)),
        "road_center": float(rng.uniform(0.45, 0.55)),
        "road_half": float(half),
        "cross_center": float(rng.uniform(0.45, 0.6)),
        "cross_half": float(rng.uniform(0.1, 0.14)),
    }
    category = list(CATEGORIES)[int(rng.integers(len(CATEGORIES)))]
    shape, aspect = CATEGORIES[category]
    bucket = list(SIZE_BUCKETS)[int(rng.choice(3, p=BUCKET_WEIGHTS))]
    lo, hi = SIZE_BUCKETS[bucket]
    area = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
    box = _sample_box(rng, area, aspect)
    # shrinking to fit can cross a bucket edge; keep the label honest
    bucket = size_bucket(box.area)
    color = list(COLORS)[int(rng.integers(len(COLORS)))]
    layout["object"] = {"shape": shape, "box": box, "color": color, "category": category,
                        "size": bucket}
    distractors = []
    for _ in range(int(rng.integers(2, 6))):
        for _attempt in range(20):
            d_shape = "rect" if rng.random() < 0.5 else "ellipse"
            d_box = _sample_box(rng, None, (0.5, 2.0), max_extent=0.4)
            if not _overlaps(d_box, box, margin=0.01):
                distractors.append({"shape": d_shape, "box": d_box, "gray": int(rng.integers(25, 200))})
                break
    layout["distractors"] = distractors
    return layout


def _record_from_layout(rid, layout):
    obj = layout["object"]
    side = side_of(obj["box"].x)
    attrs = {
        "category": obj["category"],
        "color": obj["color"],
        "shape": obj["shape"],
        "side": side,
        "size": obj["size"],
        "action": action_of(obj["category"], side),
        "intention": intention_of(layout["scenario"], side),
        "suggestion": suggestion_of(obj["size"], obj["category"]),
        "distractors": [[d["box"].x, d["box"].y, d["box"].w, d["box"].h] for d in layout["distractors"]],
    }
    return SceneRecord(
        id=rid,
        raster_lo=render(layout, LO_SIZE),
        raster_hi=render(layout, HI_SIZE),
        scenario=layout["scenario"],
        caption=build_caption(layout["scenario"], attrs),
        box=obj["box"],
        object_attrs=attrs,
    )


def generate(seed, n):
    """``n`` scenes; scene i depends only on (seed, i)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return [_record_from_layout(f"scene-{seed}-{i:05d}", sample_layout(stream(seed, f"scene/{i}")))
            for i in range(n)]


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def _encode_raster(arr):
    return {"shape": list(arr.shape), "dtype": "uint8",
            "b64": base64.b64encode(np.ascontiguousarray(arr, dtype=np.uint8).tobytes()).decode("ascii")}


def _decode_raster(obj):
    raw = base64.b64decode(obj["b64"])
    shape = tuple(obj["shape"])
    if obj.get("dtype", "uint8") != "uint8" or len(raw) != int(np.prod(shape)):
        raise SceneFormatError(f"raster payload does not match declared shape {shape}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(shape).copy()


def record_to_json(rec):
    return {
        "id": rec.id,
        "schema_version": SCHEMA_VERSION,
        "scenario": rec.scenario,
        "caption": list(rec.caption),
        "box": [rec.box.x, rec.box.y, rec.box.w, rec.box.h],
        "raster_lo": _encode_raster(rec.raster_lo),
        "raster_hi": _encode_raster(rec.raster_hi),
        "object_attrs": rec.object_attrs,
    }


def record_from_json(obj):
    if obj.get("schema_version") != SCHEMA_VERSION:
        raise SceneFormatError(f"unsupported schema_version {obj.get('schema_version')!r}")
    caption = tuple(obj["caption"])
    if len(caption) != 4 or not all(caption):
        raise SceneFormatError("caption must hold four non-empty clauses")
    if obj["scenario"] not in SCENARIOS:
        raise SceneFormatError(f"unknown scenario {obj['scenario']!r}")
    return SceneRecord(
        id=obj["id"],
        raster_lo=_decode_raster(obj["raster_lo"]),
        raster_hi=_decode_raster(obj["raster_hi"]),
        scenario=obj["scenario"],
        caption=caption,
        box=NormBox(*obj["box"]),
        object_attrs=obj["object_attrs"],
    )


def write_jsonl(records, path):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(record_to_json(rec), separators=(",", ":")))
            fh.write("\n")


def read_jsonl(path):
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SceneFormatError(f"line {lineno}: malformed JSON ({exc.msg})") from exc
            try:
                records.append(record_from_json(obj))
            except SceneFormatError as exc:
                raise SceneFormatError(f"line {lineno}: {exc}") from exc
            except (KeyError, TypeError, ValueError) as exc:
                raise SceneFormatError(f"line {lineno}: invalid record ({exc})") from exc
    return records


def split(records, fractions=(0.7, 0.15, 0.15), seed=0):
    """Deterministic shuffled train/val/test partition."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three non-negatives summing to 1, got {fractions}")
    n = len(records)
    order = stream(seed, "split").permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = min(int(round(fractions[1] * n)), n - n_train)
    parts = np.split(order, [n_train, n_train + n_val])
    return tuple([records[i] for i in p] for p in parts)
