"""Story-sample data model, synthetic dataset, loaders and splitting utilities."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from PIL import Image

from .config import ConfigError, DataSpec

# Color/shape palettes for the synthetic renderer. Character identity is the
# palette index; its shape is derived from the index so that a character is
# fully determined by one id.
CHAR_COLORS: list[tuple[str, tuple[int, int, int]]] = [
    ("red", (220, 50, 40)),
    ("green", (60, 180, 75)),
    ("blue", (55, 95, 230)),
    ("yellow", (240, 210, 50)),
    ("magenta", (230, 60, 200)),
    ("cyan", (70, 215, 220)),
    ("orange", (245, 130, 40)),
    ("purple", (140, 70, 200)),
    ("pink", (250, 160, 180)),
    ("teal", (0, 130, 128)),
    ("olive", (128, 128, 40)),
    ("maroon", (128, 30, 38)),
]

BACKGROUND_COLORS: list[tuple[int, int, int]] = [
    (32, 32, 40),
    (52, 72, 52),
    (78, 58, 42),
    (40, 58, 82),
    (70, 70, 70),
    (24, 48, 64),
]

SHAPES = ["square", "circle", "triangle"]
SIDES = ["left", "middle", "right"]


class DatasetValidationError(ValueError):
    """Raised with an itemized report when a dataset root fails validation."""

    def __init__(self, errors: list[str]):
        self.errors = errors
        preview = "\n".join(errors[:20])
        more = f"\n... and {len(errors) - 20} more" if len(errors) > 20 else ""
        super().__init__(f"{len(errors)} validation error(s):\n{preview}{more}")


@dataclass
class StorySample:
    """One story: T captions, T frames and per-frame character label sets.

    Frame 0 is the source frame; frames 1..T-1 are the targets.
    """

    id: str
    captions: list[str]
    frames: np.ndarray  # (T, h, w, 3) float32 in [0, 1]
    char_labels: list[set[int]]
    split: str

    def __post_init__(self):
        t = len(self.captions)
        if t < 2:
            raise ValueError(f"{self.id}: a story needs at least 2 frames, got {t}")
        if len(self.frames) != t or len(self.char_labels) != t:
            raise ValueError(
                f"{self.id}: captions/frames/labels length mismatch "
                f"({t}/{len(self.frames)}/{len(self.char_labels)})"
            )

    @property
    def n_frames(self) -> int:
        return len(self.captions)

    @property
    def source_frame(self) -> np.ndarray:
        return self.frames[0]

    @property
    def target_frames(self) -> np.ndarray:
        """Frames the model must generate; evaluation runs on exactly these."""
        return self.frames[1:]


@dataclass
class GeneratedStory:
    """Model output for one story: frames for timesteps 2..T plus sampler info."""

    sample_id: str
    frames: np.ndarray  # (T-1, h, w, 3)
    token_grids: np.ndarray  # (T-1, g, g)
    seed: int
    temperature: float
    top_k: int


class StoryRecord:
    """Lazy handle on one stored story; decodes frames on first access."""

    def __init__(self, id: str, split: str, captions: list[str],
                 char_labels: list[set[int]], frames: np.ndarray | None = None,
                 frame_paths: list[Path] | None = None):
        self.id = id
        self.split = split
        self.captions = captions
        self.char_labels = char_labels
        self._frames = frames
        self.frame_paths = frame_paths

    def sample(self) -> StorySample:
        if self._frames is None:
            self._frames = np.stack([load_image(p) for p in self.frame_paths])
        return StorySample(self.id, self.captions, self._frames, self.char_labels, self.split)


class StoryDataset:
    """Records grouped by split, plus dataset-level metadata."""

    def __init__(self, records: dict[str, list[StoryRecord]], meta: dict | None = None):
        self.records = records
        self.meta = meta or {}

    def counts(self) -> dict[str, int]:
        return {split: len(recs) for split, recs in self.records.items()}

    def samples(self, split: str) -> list[StorySample]:
        return [r.sample() for r in self.records.get(split, [])]

    def find(self, sample_id: str) -> StorySample:
        for recs in self.records.values():
            for r in recs:
                if r.id == sample_id:
                    return r.sample()
        raise KeyError(f"no story with id {sample_id!r}")

    def all_captions(self, split: str = "train") -> list[str]:
        return [c for r in self.records.get(split, []) for c in r.captions]

    def unseen_test_samples(self) -> list[StorySample]:
        """Test stories whose character never appears in the training split."""
        train_ids = set()
        for r in self.records.get("train", []):
            for labels in r.char_labels:
                train_ids |= set(labels)
        out = []
        for r in self.records.get("test", []):
            ids = set().union(*[set(l) for l in r.char_labels]) if r.char_labels else set()
            if ids and not ids <= train_ids:
                out.append(r.sample())
        return out


# ---------------------------------------------------------------------------
# Synthetic renderer


def render_frame(char_id: int, bg_id: int, x_frac: float, y_frac: float,
                 image_size: int) -> np.ndarray:
    """Draw one flat-shaded character on a flat background; uint8 (h, w, 3)."""
    h = w = image_size
    frame = np.empty((h, w, 3), dtype=np.uint8)
    frame[:] = BACKGROUND_COLORS[bg_id % len(BACKGROUND_COLORS)]
    if char_id < 0:
        return frame
    _, color = CHAR_COLORS[char_id % len(CHAR_COLORS)]
    shape = SHAPES[char_id % len(SHAPES)]
    r = max(3, int(round(image_size * 0.18)))
    cx = int(round(x_frac * (w - 1)))
    cy = int(round(y_frac * (h - 1)))
    ys, xs = np.mgrid[0:h, 0:w]
    if shape == "square":
        mask = (np.abs(xs - cx) <= r) & (np.abs(ys - cy) <= r)
    elif shape == "circle":
        mask = (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
    else:  # upward-pointing triangle
        rel_y = ys - (cy - r)
        half_width = np.clip(rel_y, 0, 2 * r) / 2.0
        mask = (rel_y >= 0) & (rel_y <= 2 * r) & (np.abs(xs - cx) <= half_width)
    frame[mask] = color
    return frame


def side_of(x_frac: float) -> str:
    if x_frac < 1 / 3:
        return SIDES[0]
    if x_frac < 2 / 3:
        return SIDES[1]
    return SIDES[2]


def char_caption(char_id: int, x_frac: float, first: bool) -> str:
    color = CHAR_COLORS[char_id % len(CHAR_COLORS)][0]
    shape = SHAPES[char_id % len(SHAPES)]
    verb = "stands at" if first else "walks to"
    return f"the {color} {shape} {verb} the {side_of(x_frac)}"


_X_STOPS = [0.18, 0.5, 0.82]


def _render_story(char_id: int, bg_id: int, path: tuple[int, int], y_frac: float,
                  t: int, image_size: int):
    """Render one story: the character moves from one x stop to another."""
    x0, x1 = _X_STOPS[path[0]], _X_STOPS[path[1]]
    captions, frames, labels = [], [], []
    for k in range(t):
        frac = k / (t - 1) if t > 1 else 0.0
        x = x0 + (x1 - x0) * frac
        captions.append(char_caption(char_id, x, first=(k == 0)))
        frames.append(render_frame(char_id, bg_id, x, y_frac, image_size))
        labels.append({char_id})
    return captions, np.stack(frames).astype(np.float32) / 255.0, labels


def generate_synthetic_dataset(spec: DataSpec) -> StoryDataset:
    """Deterministically generate a toy story-continuation dataset.

    Each story follows one colored shape moving across a flat background;
    captions name the character and its position, the background is visible
    only in the frames. Character ids ``[n_chars, n_chars + n_unseen_chars)``
    appear exclusively in the configured fraction of test stories, so their
    color words never occur in training captions.
    """
    total_chars = spec.n_chars + spec.n_unseen_chars
    if total_chars > len(CHAR_COLORS):
        raise ConfigError(f"at most {len(CHAR_COLORS)} characters supported, got {total_chars}")
    if spec.n_backgrounds > len(BACKGROUND_COLORS):
        raise ConfigError(f"at most {len(BACKGROUND_COLORS)} backgrounds supported")
    if spec.unseen_fraction > 0 and spec.n_unseen_chars == 0:
        raise ConfigError("unseen_fraction > 0 requires n_unseen_chars >= 1")

    rng = np.random.default_rng(spec.seed)
    paths = [(a, b) for a in range(3) for b in range(3) if a != b]

    def make_split(split: str, count: int) -> list[StoryRecord]:
        n_unseen = round(count * spec.unseen_fraction) if split == "test" else 0
        records = []
        for i in range(count):
            if i < n_unseen:
                char_id = int(rng.integers(spec.n_chars, total_chars))
            else:
                char_id = int(rng.integers(0, spec.n_chars))
            bg_id = int(rng.integers(0, spec.n_backgrounds))
            path = paths[int(rng.integers(0, len(paths)))]
            y = float(rng.uniform(0.35, 0.65))
            captions, frames, labels = _render_story(
                char_id, bg_id, path, y, spec.frames_per_story, spec.image_size)
            records.append(StoryRecord(f"{split}{i:04d}", split, captions, labels, frames))
        return records

    records = {
        "train": make_split("train", spec.train_count),
        "val": make_split("val", spec.val_count),
        "test": make_split("test", spec.test_count),
    }
    meta = {
        "kind": "synthetic",
        "spec": spec.__dict__.copy(),
        "label_space": list(range(total_chars)),
        "image_size": spec.image_size,
        "frames_per_story": spec.frames_per_story,
    }
    return StoryDataset(records, meta)


def make_classifier_frames(spec: DataSpec, per_char: int = 40, empty_per_bg: int = 10,
                           seed: int = 1234) -> tuple[np.ndarray, list[set[int]]]:
    """Single frames covering the full character space (plus empty scenes).

    Used to train the character classifier; intentionally includes the
    characters reserved for unseen-character test stories so the metric can
    score them.
    """
    rng = np.random.default_rng(seed)
    total_chars = spec.n_chars + spec.n_unseen_chars
    frames, labels = [], []
    for char_id in range(total_chars):
        for _ in range(per_char):
            bg = int(rng.integers(0, spec.n_backgrounds))
            x = float(rng.uniform(0.12, 0.88))
            y = float(rng.uniform(0.3, 0.7))
            frames.append(render_frame(char_id, bg, x, y, spec.image_size))
            labels.append({char_id})
    for bg in range(spec.n_backgrounds):
        for _ in range(empty_per_bg):
            frames.append(render_frame(-1, bg, 0.5, 0.5, spec.image_size))
            labels.append(set())
    order = rng.permutation(len(frames))
    frames = np.stack(frames).astype(np.float32) / 255.0
    return frames[order], [labels[i] for i in order]


# ---------------------------------------------------------------------------
# Splitting and frame selection


def sliding_window_split(frame_caption_sequence: Sequence[tuple], window: int,
                         base_id: str = "seq", split: str = "train") -> list[StorySample]:
    """Stride-1 windows over one source video's (caption, frame[, labels]) sequence.

    Windows overlap; a sequence shorter than the window yields no samples.
    All windows inherit the caller's split so a single video never straddles
    splits.
    """
    if window < 2:
        raise ValueError("window must be >= 2")
    items = list(frame_caption_sequence)
    if len(items) < window:
        return []
    samples = []
    for i in range(len(items) - window + 1):
        chunk = items[i:i + window]
        captions = [c[0] for c in chunk]
        frames = np.stack([np.asarray(c[1], dtype=np.float32) for c in chunk])
        labels = [set(c[2]) if len(c) > 2 else set() for c in chunk]
        samples.append(StorySample(f"{base_id}-w{i:03d}", captions, frames, labels, split))
    return samples


def select_frame(candidate_frames: Sequence[np.ndarray], caption: str,
                 scorer: Callable[[np.ndarray, str], float]) -> int:
    """Index of the best-scoring candidate; ties break toward the earliest."""
    if len(candidate_frames) == 0:
        raise ValueError("select_frame needs at least one candidate")
    best_idx, best_score = 0, None
    for i, frame in enumerate(candidate_frames):
        score = float(scorer(frame, caption))
        if best_score is None or score > best_score:
            best_idx, best_score = i, score
    return best_idx


# ---------------------------------------------------------------------------
# Disk format: stories.jsonl + images/ + optional manifest.json


def save_image(path: Path, frame: np.ndarray) -> None:
    arr = np.clip(np.asarray(frame), 0.0, 1.0)
    Image.fromarray((arr * 255.0).round().astype(np.uint8)).save(path)


def load_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def save_dataset(dataset: StoryDataset, root: str | Path) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for split in sorted(dataset.records):
        for rec in dataset.records[split]:
            sample = rec.sample()
            paths = []
            for t, frame in enumerate(sample.frames):
                rel = f"images/{sample.id}_f{t}.png"
                save_image(root / rel, frame)
                paths.append(rel)
            lines.append(json.dumps({
                "id": sample.id,
                "split": split,
                "captions": sample.captions,
                "frame_paths": paths,
                "char_labels": [sorted(l) for l in sample.char_labels],
            }))
    (root / "stories.jsonl").write_text("\n".join(lines) + "\n")
    manifest = {"counts": dataset.counts()}
    manifest.update({k: v for k, v in dataset.meta.items() if k != "spec"})
    if "spec" in dataset.meta:
        manifest["spec"] = dataset.meta["spec"]
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


_FORMAT_FRAMES = {"pororo": 5, "flintstones": 5, "didemo": 3, "synthetic": None}


def load_dataset(root: str | Path, format: str = "synthetic") -> StoryDataset:
    """Load and validate a dataset directory; frames decode lazily.

    Raises :class:`DatasetValidationError` with an itemized per-sample report
    when any record is malformed. When ``manifest.json`` declares per-split
    counts, the loaded counts must match them exactly.
    """
    if format not in _FORMAT_FRAMES:
        raise ValueError(f"unknown dataset format {format!r}")
    expected_t = _FORMAT_FRAMES[format]
    allow_empty_labels = format == "didemo"
    root = Path(root)
    stories = root / "stories.jsonl"
    if not stories.exists():
        raise DatasetValidationError([f"missing {stories}"])

    errors: list[str] = []
    records: dict[str, list[StoryRecord]] = {}
    for lineno, line in enumerate(stories.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
        except json.JSONDecodeError as e:
            errors.append(f"line {lineno}: bad json ({e})")
            continue
        missing = {"id", "split", "captions", "frame_paths", "char_labels"} - set(raw)
        if missing:
            errors.append(f"line {lineno}: missing keys {sorted(missing)}")
            continue
        sid = raw["id"]
        t = len(raw["captions"])
        if t < 2:
            errors.append(f"{sid}: needs at least 2 frames, got {t}")
            continue
        if len(raw["frame_paths"]) != t or len(raw["char_labels"]) != t:
            errors.append(
                f"{sid}: captions/frames/labels length mismatch "
                f"({t}/{len(raw['frame_paths'])}/{len(raw['char_labels'])})")
            continue
        if expected_t is not None and t != expected_t:
            errors.append(f"{sid}: {format} stories must have {expected_t} frames, got {t}")
            continue
        bad = False
        for labels in raw["char_labels"]:
            if not all(isinstance(l, int) and l >= 0 for l in labels):
                errors.append(f"{sid}: bad character label in {labels}")
                bad = True
                break
            if not labels and not allow_empty_labels and format != "synthetic":
                errors.append(f"{sid}: empty character label set not allowed for {format}")
                bad = True
                break
        if bad:
            continue
        paths = [root / p for p in raw["frame_paths"]]
        for p in paths:
            if not p.exists():
                errors.append(f"{sid}: missing image {p}")
                bad = True
        if bad:
            continue
        rec = StoryRecord(sid, raw["split"], list(raw["captions"]),
                          [set(l) for l in raw["char_labels"]], frame_paths=paths)
        records.setdefault(raw["split"], []).append(rec)

    if errors:
        raise DatasetValidationError(errors)

    meta = {}
    manifest_path = root / "manifest.json"
    if manifest_path.exists():
        meta = json.loads(manifest_path.read_text())
        declared = meta.get("counts", {})
        actual = {split: len(recs) for split, recs in records.items()}
        for split, n in declared.items():
            if actual.get(split, 0) != n:
                errors.append(
                    f"manifest declares {n} {split} samples, found {actual.get(split, 0)}")
        if errors:
            raise DatasetValidationError(errors)
    return StoryDataset(records, meta)


# ---------------------------------------------------------------------------
# Text vocabulary


class Vocabulary:
    """Whitespace-token vocabulary shared by the transformer and text encoders."""

    PAD = 0
    UNK = 1

    def __init__(self, words: Iterable[str]):
        self.words = ["<pad>", "<unk>"] + list(words)
        self.index = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    @staticmethod
    def tokenize(text: str) -> list[str]:
        return [w.strip(".,!?;:") for w in text.lower().split() if w.strip(".,!?;:")]

    @classmethod
    def build(cls, captions: Iterable[str], max_size: int | None = None) -> "Vocabulary":
        counts: dict[str, int] = {}
        for caption in captions:
            for tok in cls.tokenize(caption):
                counts[tok] = counts.get(tok, 0) + 1
        ranked = sorted(counts, key=lambda w: (-counts[w], w))
        if max_size is not None:
            ranked = ranked[:max_size - 2]
        return cls(ranked)

    def encode(self, caption: str, length: int) -> np.ndarray:
        ids = [self.index.get(tok, self.UNK) for tok in self.tokenize(caption)][:length]
        ids += [self.PAD] * (length - len(ids))
        return np.asarray(ids, dtype=np.int64)

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.words[i] for i in ids if i != self.PAD)

    def to_list(self) -> list[str]:
        return list(self.words)

    @classmethod
    def from_list(cls, words: list[str]) -> "Vocabulary":
        vocab = cls.__new__(cls)
        vocab.words = list(words)
        vocab.index = {w: i for i, w in enumerate(vocab.words)}
        return vocab
