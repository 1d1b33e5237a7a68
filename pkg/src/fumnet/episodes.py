"""Datasets, N-way K-shot episodes and channel vector sequences."""

from __future__ import annotations

import math
import queue
import threading
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

from .tensor import ShapeError, Tensor, concat, expand, mean, reshape, transpose

IMAGE_SIZE = 84
CROP_RATIO = 0.875
QUERY_SIZE = 16
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".ppm", ".tif", ".tiff"}


class DatasetError(Exception):
    """Raised for missing, malformed or undersized datasets."""


# -- seeding ----------------------------------------------------------------
def rng_stream(seed: int, name: str, *index: int) -> np.random.Generator:
    """Independent generator for the named stream of a root seed.

    Streams such as ``sampler``, ``init`` and ``eval`` never share state,
    and ``index`` picks one member (an episode number, a worker id) of a
    stream without having to draw the ones before it.
    """
    key = (zlib.crc32(name.encode()),) + tuple(int(i) for i in index)
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


# -- containers -------------------------------------------------------------
@dataclass
class ClassRecord:
    class_id: str
    images: np.ndarray | list[np.ndarray]  # (n, channels, H, W)

    def __len__(self) -> int:
        return len(self.images)


@dataclass
class Dataset:
    classes: list[ClassRecord]
    split: str = "train"

    def __post_init__(self):
        ids = [c.class_id for c in self.classes]
        if len(set(ids)) != len(ids):
            raise DatasetError("class ids must be unique")

    def __len__(self) -> int:
        return len(self.classes)

    def validate(self, n_way: int, k_shot: int, query_size: int = QUERY_SIZE) -> None:
        if len(self.classes) < n_way:
            raise DatasetError(
                f"{self.split} split has {len(self.classes)} classes, need at least {n_way} for {n_way}-way episodes"
            )
        need = k_shot + math.ceil(query_size / n_way)
        small = [c.class_id for c in self.classes if len(c) < need]
        if small:
            raise DatasetError(
                f"classes {small[:5]} have fewer than {need} samples ({k_shot} support + {need - k_shot} query)"
            )


@dataclass
class Episode:
    """One task. Labels are 0-based positions in the episode's class order."""

    n_way: int
    k_shot: int
    support: np.ndarray  # (n_way * k_shot, C, H, W), grouped by class
    support_labels: np.ndarray
    query: np.ndarray  # (q, C, H, W)
    query_labels: np.ndarray
    class_indices: np.ndarray  # dataset positions of the sampled classes
    support_ids: list[tuple[int, int]] = field(default_factory=list)
    query_ids: list[tuple[int, int]] = field(default_factory=list)

    @property
    def query_size(self) -> int:
        return len(self.query)


def query_counts(n_way: int, q: int, rng: np.random.Generator | None = None) -> list[int]:
    """Split q queries over n_way classes as evenly as possible.

    The q mod n_way leftover queries go to the first classes, or to randomly
    chosen classes when `rng` is given, so no label position is favoured.
    """
    base, extra = divmod(q, n_way)
    lucky = set(range(extra)) if rng is None else set(rng.choice(n_way, size=extra, replace=False).tolist())
    return [base + (i in lucky) for i in range(n_way)]


def sample_episode(dataset: Dataset, n_way: int, k_shot: int, q: int,
                   rng: np.random.Generator) -> Episode:
    dataset.validate(n_way, k_shot, q)
    chosen = rng.choice(len(dataset.classes), size=n_way, replace=False)
    counts = query_counts(n_way, q, rng)
    sup, sup_lab, qry, qry_lab, sup_ids, qry_ids = [], [], [], [], [], []
    for label, (ci, nq) in enumerate(zip(chosen, counts)):
        record = dataset.classes[ci]
        picks = rng.choice(len(record), size=k_shot + nq, replace=False)
        for j in picks[:k_shot]:
            sup.append(record.images[j])
            sup_lab.append(label)
            sup_ids.append((int(ci), int(j)))
        for j in picks[k_shot:]:
            qry.append(record.images[j])
            qry_lab.append(label)
            qry_ids.append((int(ci), int(j)))
    return Episode(
        n_way=n_way,
        k_shot=k_shot,
        support=np.stack(sup),
        support_labels=np.array(sup_lab),
        query=np.stack(qry),
        query_labels=np.array(qry_lab),
        class_indices=np.asarray(chosen),
        support_ids=sup_ids,
        query_ids=qry_ids,
    )


def episode_stream(dataset: Dataset, n_way: int, k_shot: int, q: int, seed: int,
                   count: int, stream: str = "sampler", start: int = 0,
                   workers: int = 0, buffer: int = 8) -> Iterator[Episode]:
    """Yield episodes ``start .. start+count-1`` of a seeded stream.

    Episode i always comes from ``rng_stream(seed, stream, i)``, so the
    sequence is the same with or without background workers. With
    ``workers > 0``, worker w produces the episodes with i % workers == w into
    its own bounded queue and the consumer reads the queues round-robin.
    """
    def make(i: int) -> Episode:
        return sample_episode(dataset, n_way, k_shot, q, rng_stream(seed, stream, i))

    if workers <= 0:
        for i in range(start, start + count):
            yield make(i)
        return

    queues = [queue.Queue(maxsize=buffer) for _ in range(workers)]
    stop = threading.Event()

    def produce(w: int) -> None:
        for i in range(start + w, start + count, workers):
            if stop.is_set():
                return
            try:
                item = make(i)
            except Exception as exc:  # surfaced on the consumer side
                item = exc
            while not stop.is_set():
                try:
                    queues[w].put(item, timeout=0.1)
                    break
                except queue.Full:
                    continue

    threads = [threading.Thread(target=produce, args=(w,), daemon=True) for w in range(workers)]
    for t in threads:
        t.start()
    try:
        for n in range(count):
            item = queues[n % workers].get()
            if isinstance(item, Exception):
                raise item
            yield item
    finally:
        stop.set()
        for t in threads:
            t.join(timeout=1.0)


# -- preprocessing ----------------------------------------------------------
def _as_chw_float(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image)
    if img.dtype == np.uint8:
        img = img.astype(np.float32) / 255.0
    else:
        img = img.astype(np.float32)
    if img.ndim == 2:
        img = np.repeat(img[None], 3, axis=0)
    if img.ndim != 3:
        raise ValueError(f"expected a (C, H, W) or (H, W) image, got shape {img.shape}")
    if img.shape[0] == 1:
        img = np.repeat(img, 3, axis=0)
    return img


def scaled_size(h: int, w: int, target: int = IMAGE_SIZE, ratio: float = CROP_RATIO) -> tuple[int, int]:
    """Size after scaling the shorter side to round(target / ratio)."""
    short = round(target / ratio)
    if h <= w:
        return short, max(short, round(w * short / h))
    return max(short, round(h * short / w)), short


def preprocess(image: np.ndarray, target: int = IMAGE_SIZE, mean=(0.5, 0.5, 0.5),
               std=(0.5, 0.5, 0.5), ratio: float = CROP_RATIO) -> np.ndarray:
    """Scale, center-crop to ``target``x``target`` and normalise per channel.

    `image` is (C, H, W) or (H, W), uint8 or float in [0, 1]; the result is a
    float32 (3, target, target) array.
    """
    img = _as_chw_float(image)
    c, h, w = img.shape
    if h < 1 or w < 1:
        raise ValueError(f"degenerate image of size {h}x{w}")
    sh, sw = scaled_size(h, w, target, ratio)
    if (sh, sw) != (h, w):
        img = np.stack([
            np.asarray(Image.fromarray(ch, mode="F").resize((sw, sh), Image.BILINEAR))
            for ch in img
        ])
    top, left = (sh - target) // 2, (sw - target) // 2
    crop = img[:, top:top + target, left:left + target]
    m = np.asarray(mean, dtype=np.float32)[:, None, None]
    s = np.asarray(std, dtype=np.float32)[:, None, None]
    return np.ascontiguousarray((crop - m) / s, dtype=np.float32)


def prepare_dataset(dataset: Dataset, target: int = IMAGE_SIZE, mean=(0.5, 0.5, 0.5),
                    std=(0.5, 0.5, 0.5)) -> Dataset:
    """Preprocess every image once, returning a new dataset."""
    classes = [
        ClassRecord(c.class_id, np.stack([preprocess(im, target, mean, std) for im in c.images]))
        for c in dataset.classes
    ]
    return Dataset(classes, dataset.split)


# -- class averaging and sequence construction ---------------------------------
def class_level_average(feature_maps: Tensor | Sequence[Tensor]) -> Tensor:
    """Elementwise mean of K feature maps of one class, (K, c, d) -> (c, d)."""
    if not isinstance(feature_maps, Tensor):
        if len(feature_maps) == 0:
            raise ValueError("class_level_average needs at least one feature map")
        shapes = {f.shape for f in feature_maps}
        if len(shapes) != 1:
            raise ShapeError(f"feature maps differ in shape: {sorted(shapes)}")
        feature_maps = concat([reshape(f, (1,) + f.shape) for f in feature_maps], axis=0)
    if feature_maps.shape[0] == 0:
        raise ValueError("class_level_average needs at least one feature map")
    return mean(feature_maps, axis=0)


@dataclass
class ChannelVectorSequence:
    data: Tensor  # (c, (n_way + 1) * d)
    c: int
    d: int
    n_way: int

    def class_slice(self, i: int) -> Tensor:
        """Channel vectors of class i (or the query when i == n_way)."""
        return self.data[:, i * self.d:(i + 1) * self.d]


def splice_channels(class_maps: Tensor, query_maps: Tensor) -> Tensor:
    """Channel-wise splice of N class maps with each of Q query maps.

    (N, c, d) and (Q, c, d) -> (Q, c, (N+1)*d); step t of sequence p is the
    t-th channel vector of every class in order followed by that of query p.
    """
    n, c, d = class_maps.shape
    if query_maps.ndim != 3 or query_maps.shape[1:] != (c, d):
        raise ShapeError(f"query maps {query_maps.shape} do not match class maps {class_maps.shape}")
    per_step = reshape(transpose(class_maps, (1, 0, 2)), (c, n * d))
    return concat([expand(per_step, query_maps.shape[0]), query_maps], axis=-1)


def build_channel_vector_sequence(class_maps: Sequence[Tensor] | Tensor,
                                  query_map: Tensor) -> ChannelVectorSequence:
    if not isinstance(class_maps, Tensor):
        shapes = {m.shape for m in class_maps} | {query_map.shape}
        if len(shapes) != 1:
            raise ShapeError(f"class and query maps must share (c, d), got {sorted(shapes)}")
        class_maps = concat([reshape(m, (1,) + m.shape) for m in class_maps], axis=0)
    n, c, d = class_maps.shape
    if query_map.shape != (c, d):
        raise ShapeError(f"query map {query_map.shape} does not match class maps ({c}, {d})")
    seq = splice_channels(class_maps, reshape(query_map, (1, c, d)))
    return ChannelVectorSequence(reshape(seq, (c, (n + 1) * d)), c, d, n)


# -- synthetic data ---------------------------------------------------------
def _smooth_field(rng: np.random.Generator, channels: int, size: int, grid: int) -> np.ndarray:
    coarse = rng.random((channels, grid, grid)).astype(np.float32)
    field = np.stack([
        np.asarray(Image.fromarray(ch, mode="F").resize((size, size), Image.BICUBIC)) for ch in coarse
    ])
    lo, hi = field.min(), field.max()
    return (field - lo) / (hi - lo) if hi > lo else np.zeros_like(field)


def class_prototype(seed: int, class_index: int, size: int = IMAGE_SIZE, channels: int = 3,
                    grid: int = 7) -> np.ndarray:
    return _smooth_field(rng_stream(seed, "prototype", class_index), channels, size, grid)


def generate_synthetic_dataset(num_classes: int, samples_per_class: int, noise_sigma: float,
                               seed: int, max_shift: int = 4, size: int = IMAGE_SIZE,
                               split: str = "train", check_sizes: bool = True) -> Dataset:
    """Seeded classes of noisy, shifted copies of a smooth random prototype.

    Images are float32 (3, size, size) in [0, 1]. With `check_sizes` off any
    positive size is accepted; episode sampling then rejects what is too small.
    """
    if check_sizes and (num_classes < 5 or samples_per_class < 6):
        raise ValueError(f"need num_classes >= 5 and samples_per_class >= 6, "
                         f"got {num_classes} and {samples_per_class}")
    if num_classes < 1 or samples_per_class < 1:
        raise ValueError("need at least one class and one sample per class")
    if noise_sigma < 0 or max_shift < 0:
        raise ValueError("noise_sigma and max_shift must be non-negative")
    classes = []
    for ci in range(num_classes):
        proto = class_prototype(seed, ci, size)
        rng = rng_stream(seed, "samples", ci)
        imgs = np.empty((samples_per_class,) + proto.shape, dtype=np.float32)
        for j in range(samples_per_class):
            img = proto + rng.normal(0.0, noise_sigma, proto.shape) if noise_sigma > 0 else proto.copy()
            if max_shift:
                dy, dx = rng.integers(-max_shift, max_shift + 1, size=2)
                img = np.roll(img, (int(dy), int(dx)), axis=(1, 2))
            imgs[j] = np.clip(img, 0.0, 1.0)
        classes.append(ClassRecord(f"class_{ci:03d}", imgs))
    return Dataset(classes, split)


def split_counts(num_classes: int) -> tuple[int, int, int]:
    """Default train/val/test class counts (2/3, 1/6, rest)."""
    train = num_classes * 2 // 3
    val = num_classes // 6
    return train, val, num_classes - train - val


def split_dataset(dataset: Dataset, counts: tuple[int, int, int] | None = None) -> dict[str, Dataset]:
    """Partition classes in order into train/val/test datasets."""
    counts = counts or split_counts(len(dataset))
    if sum(counts) != len(dataset):
        raise DatasetError(f"split counts {counts} do not add up to {len(dataset)} classes")
    out, start = {}, 0
    for name, n in zip(("train", "val", "test"), counts):
        out[name] = Dataset(dataset.classes[start:start + n], name)
        start += n
    return out


# -- folder datasets --------------------------------------------------------
def _read_split_file(path: Path) -> list[str]:
    try:
        names = [ln.strip() for ln in path.read_text().splitlines()]
    except OSError as exc:
        raise DatasetError(f"cannot read split file {path}: {exc}") from exc
    names = [n for n in names if n and not n.startswith("#")]
    if not names:
        raise DatasetError(f"split file {path} lists no classes")
    return names


def _decode(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except Exception as exc:
        raise DatasetError(f"unreadable image {path}: {exc}") from exc
    return arr.transpose(2, 0, 1)


def load_folder_dataset(root, split_file, split: str | None = None) -> Dataset:
    """Load the classes named in `split_file` from ``root/<class>/<images>``.

    Images come back as uint8 (3, H, W) arrays, stacked per class when they
    share a size and kept as a list otherwise; run :func:`prepare_dataset`
    before sampling episodes.
    """
    root, split_file = Path(root), Path(split_file)
    names = _read_split_file(split_file)
    classes = []
    for name in names:
        folder = root / name
        if not folder.is_dir():
            raise DatasetError(f"class {name!r} listed in {split_file} has no directory under {root}")
        files = sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if len(files) < 2:
            raise DatasetError(f"class {name!r} has {len(files)} images, need at least 2")
        images = [_decode(p) for p in files]
        if len({im.shape for im in images}) == 1:
            images = np.stack(images)
        classes.append(ClassRecord(name, images))
    return Dataset(classes, split or split_file.stem)


def save_folder_dataset(dataset: Dataset, root, counts: tuple[int, int, int] | None = None) -> dict[str, Path]:
    """Write images as PNG under ``root/<class>/`` plus train/val/test split files."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for record in dataset.classes:
        folder = root / record.class_id
        folder.mkdir(exist_ok=True)
        for j, img in enumerate(record.images):
            arr = np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
            Image.fromarray(arr, mode="RGB").save(folder / f"{j:04d}.png", optimize=False)
    paths = {}
    for name, part in split_dataset(dataset, counts).items():
        p = root / f"{name}.txt"
        p.write_text("".join(f"{c.class_id}\n" for c in part.classes))
        paths[name] = p
    return paths
