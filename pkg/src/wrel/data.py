"""Dataset model, synthetic scene generation, weak expressions, and splits.

A dataset on disk is a directory of `images/<id>.png` (8-bit RGB),
`masks/<id>.png` (8-bit grayscale, nonzero = foreground) and a
`manifest.jsonl` with one record per sample. Splits are stored as
`split.json` listing accurate/weak sample ids plus ratio and seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError, GenerationError
from .params import rng_for

DEFAULT_CLASSES = ("circle", "square", "triangle", "cross", "bar")

# Palette in 8-bit so float pixel values round-trip PNG encoding exactly.
DEFAULT_COLORS = ("red", "green", "blue", "yellow", "magenta", "cyan")
_COLOR_RGB = {
    "red": (217, 26, 26),
    "green": (26, 179, 38),
    "blue": (31, 64, 217),
    "yellow": (230, 217, 26),
    "magenta": (204, 38, 204),
    "cyan": (26, 191, 204),
}
_BACKGROUND = (46, 46, 51)

QUADRANTS = ("top-left", "top-right", "bottom-left", "bottom-right")

ACCURATE = "accurate"
WEAK = "weak"


@dataclass
class ReferringSample:
    """One image-mask-expression record.

    `image` is H x W x 3 float in [0, 1]; `mask` is H x W bool. Synthetic
    samples additionally carry `weak_expression`, the class-name expression
    with attributes dropped at the generator's corruption level, and the
    attribute pair used to build the accurate expression.
    """

    sample_id: str
    image: np.ndarray
    mask: np.ndarray
    expression: str
    category: str
    annotation_kind: str = ACCURATE
    weak_expression: str | None = None
    attributes: tuple[str, str] | None = None  # (color, quadrant), synthetic only


@dataclass
class DatasetManifest:
    samples: list[ReferringSample]
    categories: set[str]

    @property
    def n_accurate(self) -> int:
        return sum(1 for s in self.samples if s.annotation_kind == ACCURATE)

    @property
    def n_weak(self) -> int:
        return sum(1 for s in self.samples if s.annotation_kind == WEAK)

    def by_id(self) -> dict[str, ReferringSample]:
        return {s.sample_id: s for s in self.samples}


@dataclass
class SplitSpec:
    accurate_ratio: float
    seed: int
    stratify_by_category: bool = True

    def __post_init__(self):
        if not 0.0 < self.accurate_ratio < 1.0:
            raise ConfigError(f"accurate_ratio must lie in (0,1), got {self.accurate_ratio}")


@dataclass
class SyntheticSceneConfig:
    grid_size: int = 48
    classes: tuple[str, ...] = DEFAULT_CLASSES
    colors: tuple[str, ...] = DEFAULT_COLORS
    max_instances: int = 4
    corruption: float = 1.0  # probability each attribute is dropped from the weak expression
    seed: int = 0

    def __post_init__(self):
        if self.grid_size < 16:
            raise ConfigError("grid_size must be >= 16")
        if self.max_instances < 1:
            raise ConfigError("max_instances must be >= 1")
        if not 0.0 <= self.corruption <= 1.0:
            raise ConfigError("corruption must lie in [0,1]")
        unknown = [c for c in self.colors if c not in _COLOR_RGB]
        if unknown:
            raise ConfigError(f"unknown color names: {unknown}")


@dataclass
class Violation:
    sample_id: str | None
    rule: str
    detail: str = ""


# ---------------------------------------------------------------------------
# Weak expressions


def make_weak_expression(category: str, q: float, rng: np.random.Generator | None = None,
                         attributes: tuple[str, str] | None = None) -> str:
    """Map a class name to a weakly referring expression.

    The default mapping is the lower-cased class name. With `attributes`
    (color, quadrant) supplied, each attribute is independently retained
    with probability 1 - q and the retained ones are rendered with the
    accurate-expression template. Draws are consumed for both attributes
    regardless of q, so outputs at different q are coupled per rng state.
    """
    if not category:
        raise ConfigError("category must be nonempty")
    name = category.lower()
    if attributes is None:
        return name
    if rng is None:
        raise ConfigError("rng is required when attributes are supplied")
    color, quadrant = attributes
    keep_color = rng.random() >= q
    keep_quadrant = rng.random() >= q
    return render_expression(name, color if keep_color else None,
                             quadrant if keep_quadrant else None)


def render_expression(category: str, color: str | None, quadrant: str | None) -> str:
    if color and quadrant:
        return f"the {color} {category} in the {quadrant}"
    if color:
        return f"the {color} {category}"
    if quadrant:
        return f"the {category} in the {quadrant}"
    return category


def is_weak_expression_for(category: str, expression: str) -> bool:
    """True iff `expression` is a possible weak-mapping output for `category`."""
    name = category.lower()
    if expression == name:
        return True
    for color in (*_COLOR_RGB, None):
        for quadrant in (*QUADRANTS, None):
            if expression == render_expression(name, color, quadrant):
                return True
    return False


# ---------------------------------------------------------------------------
# Validation


def validate_manifest(manifest: DatasetManifest) -> list[Violation]:
    """Check every sample and manifest invariant; empty list means valid."""
    violations: list[Violation] = []
    seen: set[str] = set()
    for s in manifest.samples:
        if s.sample_id in seen:
            violations.append(Violation(s.sample_id, "duplicate-sample-id"))
        seen.add(s.sample_id)
        if s.category not in manifest.categories:
            violations.append(Violation(s.sample_id, "unknown-category", s.category))
        if s.annotation_kind not in (ACCURATE, WEAK):
            violations.append(Violation(s.sample_id, "bad-annotation-kind", s.annotation_kind))
        if not s.expression:
            violations.append(Violation(s.sample_id, "empty-expression"))
        if s.image.ndim != 3 or s.image.shape[2] != 3:
            violations.append(Violation(s.sample_id, "bad-image-shape", str(s.image.shape)))
        elif s.mask.shape != s.image.shape[:2]:
            violations.append(
                Violation(s.sample_id, "mask-image-shape-mismatch",
                          f"{s.mask.shape} vs {s.image.shape[:2]}"))
        if not np.any(s.mask):
            violations.append(Violation(s.sample_id, "empty-ground-truth-mask"))
        if s.image.size and (s.image.min() < 0.0 or s.image.max() > 1.0):
            violations.append(Violation(s.sample_id, "image-out-of-range"))
        if s.annotation_kind == WEAK and not is_weak_expression_for(s.category, s.expression):
            violations.append(
                Violation(s.sample_id, "weak-expression-mismatch", s.expression))
    return violations


# ---------------------------------------------------------------------------
# Synthetic scenes

_SHAPE_NAMES = set(DEFAULT_CLASSES)


def _raster_shape(kind: str, cy: int, cx: int, s: int, grid: int) -> np.ndarray:
    yy, xx = np.mgrid[0:grid, 0:grid]
    dy, dx = yy - cy, xx - cx
    if kind == "circle":
        return dy * dy + dx * dx <= s * s
    if kind == "square":
        return (np.abs(dy) <= s) & (np.abs(dx) <= s)
    if kind == "triangle":
        # Isoceles, apex up: row width grows linearly from apex to base.
        half = (dy + s) / 2.0
        return (dy >= -s) & (dy <= s) & (np.abs(dx) <= half)
    if kind == "cross":
        w = max(1, s // 3)
        return ((np.abs(dy) <= w) & (np.abs(dx) <= s)) | ((np.abs(dx) <= w) & (np.abs(dy) <= s))
    if kind == "bar":
        w = max(1, s // 3)
        return (np.abs(dy) <= w) & (np.abs(dx) <= s)
    raise ConfigError(f"unknown shape class {kind!r}")


def _dilate(mask: np.ndarray) -> np.ndarray:
    out = mask.copy()
    out[1:, :] |= mask[:-1, :]
    out[:-1, :] |= mask[1:, :]
    out[:, 1:] |= mask[:, :-1]
    out[:, :-1] |= mask[:, 1:]
    return out


def _quadrant(cy: int, cx: int, grid: int) -> str:
    vert = "top" if cy < grid / 2 else "bottom"
    horiz = "left" if cx < grid / 2 else "right"
    return f"{vert}-{horiz}"


def generate_synthetic(config: SyntheticSceneConfig, n: int) -> DatasetManifest:
    """Generate n scenes with one referred target each.

    Each image holds 1..max_instances non-overlapping shapes. The accurate
    expression is "the {color} {class} in the {quadrant}" and uniquely
    identifies the target within its image. The stored weak expression drops
    attributes independently at the corruption rate. Scene geometry and weak
    draws come from separate seeded streams, so scene pixels are identical
    across corruption levels for a fixed seed.
    """
    if n < 1:
        raise ConfigError("n must be >= 1")
    scene_rng = rng_for(config.seed, "synthetic-scenes")
    weak_rng = rng_for(config.seed, "synthetic-weak-expressions")
    grid = config.grid_size
    max_size = max(3, grid // 8)
    background = np.array(_BACKGROUND, dtype=np.uint8)

    samples: list[ReferringSample] = []
    for idx in range(n):
        sample = None
        for _attempt in range(64):
            sample = _try_scene(config, scene_rng, grid, max_size, background, idx)
            if sample is not None:
                break
        if sample is None:
            raise GenerationError("could not build a uniquely referable scene",
                                  seed=config.seed, index=idx)
        color, quadrant = sample.attributes
        sample.weak_expression = make_weak_expression(
            sample.category, config.corruption, weak_rng, (color, quadrant))
        samples.append(sample)
    return DatasetManifest(samples=samples, categories=set(config.classes))


def _try_scene(config: SyntheticSceneConfig, rng: np.random.Generator, grid: int,
               max_size: int, background: np.ndarray, idx: int) -> ReferringSample | None:
    n_inst = int(rng.integers(1, config.max_instances + 1))
    occupied = np.zeros((grid, grid), dtype=bool)
    image = np.tile(background, (grid, grid, 1)).astype(np.uint8)
    placed = []  # (class, color, quadrant, mask)
    for _ in range(n_inst):
        kind = str(rng.choice(config.classes))
        color = str(rng.choice(config.colors))
        mask = None
        for _try in range(32):
            s = int(rng.integers(3, max_size + 1))
            cy = int(rng.integers(s + 1, grid - s - 1))
            cx = int(rng.integers(s + 1, grid - s - 1))
            cand = _raster_shape(kind, cy, cx, s, grid)
            if not cand.any() or (_dilate(cand) & occupied).any():
                continue
            mask = cand
            break
        if mask is None:
            return None
        occupied |= _dilate(mask)
        image[mask] = _COLOR_RGB[color]
        placed.append((kind, color, _quadrant(cy, cx, grid), mask))

    signatures = [(k, c, q) for k, c, q, _ in placed]
    unique = [i for i, sig in enumerate(signatures) if signatures.count(sig) == 1]
    if not unique:
        return None
    target = unique[int(rng.integers(len(unique)))]
    kind, color, quadrant, mask = placed[target]
    return ReferringSample(
        sample_id=f"synth-{config.seed}-{idx:05d}",
        image=image.astype(np.float64) / 255.0,
        mask=mask.copy(),
        expression=render_expression(kind, color, quadrant),
        category=kind,
        annotation_kind=ACCURATE,
        attributes=(color, quadrant),
    )


# ---------------------------------------------------------------------------
# Splits


def stratified_split(manifest: DatasetManifest, spec: SplitSpec,
                     weak_source: str = "class-name"
                     ) -> tuple[list[ReferringSample], list[ReferringSample]]:
    """Partition a manifest into accurate and weak subsets, per category.

    Uses largest-remainder rounding per category with a coverage floor of
    one accurate sample per category. Weak-set samples get their expression
    replaced: `class-name` uses the bare lower-cased class name, `stored`
    uses the generator's per-sample weak expression.
    """
    if weak_source not in ("class-name", "stored"):
        raise ConfigError(f"unknown weak_source {weak_source!r}")
    by_cat: dict[str, list[ReferringSample]] = {}
    for s in manifest.samples:
        by_cat.setdefault(s.category, []).append(s)
    for cat in sorted(manifest.categories):
        if not by_cat.get(cat):
            raise ConfigError(f"category {cat!r} has no samples")

    ratio = spec.accurate_ratio
    total_target = round(ratio * len(manifest.samples))
    counts: dict[str, int] = {}
    remainders: list[tuple[float, str]] = []
    for cat in sorted(by_cat):
        ideal = ratio * len(by_cat[cat])
        base = max(1, math.floor(ideal))
        base = min(base, len(by_cat[cat]))
        counts[cat] = base
        remainders.append((ideal - math.floor(ideal), cat))
    # Bump floors toward the global target, largest remainder first.
    remainders.sort(key=lambda rc: (-rc[0], rc[1]))
    for _, cat in remainders:
        if sum(counts.values()) >= total_target:
            break
        if counts[cat] < min(len(by_cat[cat]), math.ceil(ratio * len(by_cat[cat]))):
            counts[cat] += 1

    rng = rng_for(spec.seed, "stratified-split")
    accurate: list[ReferringSample] = []
    weak: list[ReferringSample] = []
    for cat in sorted(by_cat):
        group = sorted(by_cat[cat], key=lambda s: s.sample_id)
        chosen = set(rng.choice(len(group), size=counts[cat], replace=False).tolist())
        for i, s in enumerate(group):
            if i in chosen:
                accurate.append(s)
            else:
                weak.append(_weaken(s, weak_source))
    accurate.sort(key=lambda s: s.sample_id)
    weak.sort(key=lambda s: s.sample_id)
    return accurate, weak


def _weaken(sample: ReferringSample, weak_source: str) -> ReferringSample:
    if weak_source == "stored" and sample.weak_expression is not None:
        expression = sample.weak_expression
    else:
        expression = make_weak_expression(sample.category, 1.0)
    return ReferringSample(
        sample_id=sample.sample_id,
        image=sample.image,
        mask=sample.mask,
        expression=expression,
        category=sample.category,
        annotation_kind=WEAK,
        weak_expression=expression,
        attributes=sample.attributes,
    )


def save_split(path: Path, accurate: list[ReferringSample], weak: list[ReferringSample],
               spec: SplitSpec, weak_source: str = "class-name") -> None:
    payload = {
        "ratio": spec.accurate_ratio,
        "seed": spec.seed,
        "weak_source": weak_source,
        "accurate_ids": [s.sample_id for s in accurate],
        "weak_ids": [s.sample_id for s in weak],
    }
    Path(path).write_text(
        json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def load_split(path: Path, manifest: DatasetManifest
               ) -> tuple[list[ReferringSample], list[ReferringSample]]:
    """Rebuild the (accurate, weak) sample lists recorded in a split.json."""
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"cannot read split file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed split file {path}: {exc}") from exc
    by_id = manifest.by_id()
    missing = [i for i in payload["accurate_ids"] + payload["weak_ids"] if i not in by_id]
    if missing:
        raise DataError(f"split references unknown sample ids: {missing[:5]}")
    weak_source = payload.get("weak_source", "class-name")
    accurate = [by_id[i] for i in payload["accurate_ids"]]
    weak = [_weaken(by_id[i], weak_source) for i in payload["weak_ids"]]
    return accurate, weak


# ---------------------------------------------------------------------------
# Disk I/O


def save_dataset(manifest: DatasetManifest, out_dir: Path, force: bool = False) -> None:
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise ConfigError(f"output directory {out_dir} is not empty (use force)")
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    lines = []
    for s in manifest.samples:
        img8 = np.clip(np.rint(s.image * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(img8, mode="RGB").save(out_dir / "images" / f"{s.sample_id}.png")
        mask8 = (s.mask.astype(np.uint8)) * 255
        Image.fromarray(mask8, mode="L").save(out_dir / "masks" / f"{s.sample_id}.png")
        record = {
            "sample_id": s.sample_id,
            "image_path": f"images/{s.sample_id}.png",
            "mask_path": f"masks/{s.sample_id}.png",
            "expression": s.expression,
            "category": s.category,
            "annotation_kind": s.annotation_kind,
        }
        if s.weak_expression is not None:
            record["weak_expression"] = s.weak_expression
        if s.attributes is not None:
            record["attributes"] = list(s.attributes)
        lines.append(json.dumps(record, sort_keys=True, separators=(",", ":")))
    (out_dir / "manifest.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_dataset(root: Path) -> DatasetManifest:
    root = Path(root)
    manifest_path = root / "manifest.jsonl"
    if not manifest_path.exists():
        raise DataError(f"no manifest.jsonl under {root}")
    try:
        text = manifest_path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {manifest_path}: {exc}") from exc
    samples = []
    categories: set[str] = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{manifest_path}:{lineno}: malformed record: {exc}") from exc
        required = {"sample_id", "image_path", "mask_path", "expression",
                    "category", "annotation_kind"}
        missing = required - set(record)
        if missing:
            raise DataError(f"{manifest_path}:{lineno}: missing fields {sorted(missing)}")
        try:
            image = np.asarray(Image.open(root / record["image_path"]).convert("RGB"),
                               dtype=np.float64) / 255.0
            mask = np.asarray(Image.open(root / record["mask_path"]).convert("L")) > 0
        except OSError as exc:
            raise DataError(f"{manifest_path}:{lineno}: unreadable image/mask: {exc}") from exc
        attrs = record.get("attributes")
        samples.append(ReferringSample(
            sample_id=record["sample_id"],
            image=image,
            mask=mask,
            expression=record["expression"],
            category=record["category"],
            annotation_kind=record["annotation_kind"],
            weak_expression=record.get("weak_expression"),
            attributes=tuple(attrs) if attrs else None,
        ))
        categories.add(record["category"])
    return DatasetManifest(samples=samples, categories=categories)
