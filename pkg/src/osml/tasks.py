"""Task streams: IDX loading, Rainbow MNIST variants, synthetic mode mixtures.

Every stream is a finite list of Episodes (support/query/test splits) in a
seed-shuffled order, normalized to zero mean using support statistics only.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def derive_rng(*parts) -> np.random.Generator:
    """Deterministic child generator from integer key parts."""
    return np.random.default_rng(tuple(int(p) for p in parts))


def derive_seed(*parts) -> int:
    """Deterministic integer seed from integer key parts."""
    return int(derive_rng(*parts).integers(2**62))


@dataclass
class Episode:
    """One task: disjoint support/query/test splits and a stream tag."""

    tag: str
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray

    def splits(self):
        return (
            (self.support_x, self.support_y),
            (self.query_x, self.query_y),
            (self.test_x, self.test_y),
        )

    @property
    def n_classes(self) -> int:
        return int(max(self.support_y.max(), self.query_y.max(), self.test_y.max())) + 1


def load_idx_images(path) -> np.ndarray:
    """(n, rows, cols) float32 scaled to [0, 1]."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 16:
        raise ValueError("idx image file truncated (no header)")
    magic, n, rows, cols = struct.unpack(">IIII", data[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise ValueError(f"bad idx image magic 0x{magic:08x}")
    need = 16 + n * rows * cols
    if len(data) < need:
        raise ValueError(f"idx image file truncated: need {need} bytes, have {len(data)}")
    pixels = np.frombuffer(data, dtype=np.uint8, count=n * rows * cols, offset=16)
    return pixels.reshape(n, rows, cols).astype(np.float32) / 255.0


def load_idx_labels(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 8:
        raise ValueError("idx label file truncated (no header)")
    magic, n = struct.unpack(">II", data[:8])
    if magic != IDX_LABELS_MAGIC:
        raise ValueError(f"bad idx label magic 0x{magic:08x}")
    if len(data) < 8 + n:
        raise ValueError(f"idx label file truncated: need {8 + n} bytes, have {len(data)}")
    return np.frombuffer(data, dtype=np.uint8, count=n, offset=8).astype(np.int64)


# Rainbow MNIST -------------------------------------------------------------

RAINBOW_HUES = tuple(i / 7 for i in range(7))
RAINBOW_SCALES = (1.0, 0.5)
RAINBOW_ROTATIONS = (0, 90, 180, 270)


@dataclass(frozen=True)
class TransformSpec:
    hue: float
    scale: float
    rotation: int

    @property
    def tag(self) -> str:
        return f"hue{self.hue:.3f}_s{self.scale:g}_r{self.rotation}"


def rainbow_transforms() -> list:
    return [
        TransformSpec(h, s, r)
        for h in RAINBOW_HUES
        for s in RAINBOW_SCALES
        for r in RAINBOW_ROTATIONS
    ]


def _hue_rgb(h: float) -> np.ndarray:
    """Fully saturated RGB for a hue in [0, 1)."""
    i = int(h * 6) % 6
    f = h * 6 - int(h * 6)
    q, t = 1.0 - f, f
    table = [(1, t, 0), (q, 1, 0), (0, 1, t), (0, q, 1), (t, 0, 1), (1, 0, q)]
    return np.asarray(table[i], dtype=np.float32)


def apply_rainbow_transform(images: np.ndarray, spec: TransformSpec) -> np.ndarray:
    """Grayscale (n, 28, 28) in [0, 1] -> tinted (n, 3, 28, 28), still in [0, 1]."""
    out = images
    if spec.scale != 1.0:
        if spec.scale != 0.5:
            raise ValueError("only scales 1.0 and 0.5 are supported")
        n, h, w = out.shape
        small = out.reshape(n, h // 2, 2, w // 2, 2).mean(axis=(2, 4))
        canvas = np.zeros_like(out)
        top, left = (h - h // 2) // 2, (w - w // 2) // 2
        canvas[:, top : top + h // 2, left : left + w // 2] = small
        out = canvas
    k = (spec.rotation // 90) % 4
    if k:
        out = np.rot90(out, k=k, axes=(1, 2))
    rgb = _hue_rgb(spec.hue)
    return np.ascontiguousarray(out[:, None, :, :] * rgb[None, :, None, None], dtype=np.float32)


def _episode_from_pools(
    tag, train_x, train_y, test_x, test_y, support_per_class, query_per_class,
    test_per_class, classes, rng,
):
    sup_x, sup_y, qry_x, qry_y, te_x, te_y = [], [], [], [], [], []
    for c in classes:
        idx = np.flatnonzero(train_y == c)
        if idx.size < support_per_class + query_per_class:
            raise ValueError(
                f"class {c}: train pool has {idx.size} samples, "
                f"need {support_per_class + query_per_class}"
            )
        perm = rng.permutation(idx)
        sup = perm[:support_per_class]
        qry = perm[support_per_class : support_per_class + query_per_class]
        sup_x.append(train_x[sup])
        sup_y.append(train_y[sup])
        qry_x.append(train_x[qry])
        qry_y.append(train_y[qry])
        tidx = np.flatnonzero(test_y == c)
        take = min(test_per_class, tidx.size)
        te = rng.permutation(tidx)[:take]
        te_x.append(test_x[te])
        te_y.append(test_y[te])
    return Episode(
        tag,
        np.concatenate(sup_x),
        np.concatenate(sup_y),
        np.concatenate(qry_x),
        np.concatenate(qry_y),
        np.concatenate(te_x),
        np.concatenate(te_y),
    )


def normalize_stream(episodes: list) -> list:
    """Shift every split by the mean of all support inputs in the stream."""
    if not episodes:
        return episodes
    total = sum(float(e.support_x.sum()) for e in episodes)
    count = sum(e.support_x.size for e in episodes)
    mean = np.float32(total / count)
    out = []
    for e in episodes:
        out.append(
            Episode(
                e.tag,
                e.support_x - mean,
                e.support_y,
                e.query_x - mean,
                e.query_y,
                e.test_x - mean,
                e.test_y,
            )
        )
    return out


def rainbow_stream(
    images: np.ndarray,
    labels: np.ndarray,
    seed: int,
    support_per_class: int = 40,
    query_per_class: int = 40,
    test_per_class: int = 20,
    train_pool_per_class: int = 90,
    test_pool_per_class: int = 10,
) -> list:
    """All 56 hue/scale/rotation variants in seeded shuffled order.

    Each task draws a class-balanced 900/100 train/test pool from the source
    digits, applies its transform, then splits episodes 40/40 per class from
    the train pool and up to 20 per class from the test pool.
    """
    if images.ndim != 3 or images.shape[0] != labels.shape[0]:
        raise ValueError("images and labels disagree on sample count")
    classes = np.arange(10)
    specs = rainbow_transforms()
    order = derive_rng(seed, 1).permutation(len(specs))
    episodes = []
    for task_index, spec_i in enumerate(order):
        spec = specs[spec_i]
        rng = derive_rng(seed, 2, task_index)
        pool_train_idx, pool_test_idx = [], []
        for c in classes:
            idx = np.flatnonzero(labels == c)
            need = train_pool_per_class + test_pool_per_class
            if idx.size < need:
                raise ValueError(f"class {c}: source has {idx.size} samples, need {need}")
            perm = rng.permutation(idx)
            pool_train_idx.append(perm[:train_pool_per_class])
            pool_test_idx.append(perm[train_pool_per_class:need])
        tr = np.concatenate(pool_train_idx)
        te = np.concatenate(pool_test_idx)
        train_x = apply_rainbow_transform(images[tr], spec)
        test_x = apply_rainbow_transform(images[te], spec)
        episodes.append(
            _episode_from_pools(
                spec.tag, train_x, labels[tr], test_x, labels[te],
                support_per_class, query_per_class, test_per_class, classes, rng,
            )
        )
    return normalize_stream(episodes)


# synthetic heterogeneous stream --------------------------------------------


@dataclass
class ModeSpec:
    """One task family: where its class signal lives and how it is offset.

    A mode embeds every task's class prototypes into `signal_coords` and
    fills the remaining coordinates with mode-independent distractor noise,
    then shifts everything by `bias`. Modes built together get disjoint
    coordinate sets, so each mode's informative coordinates are another
    mode's distractor coordinates: a single shared representation cannot
    suppress the distractors of every mode at once, while one representation
    per mode can.
    """

    index: int
    family: str  # "coordset" or "identity"
    signal_coords: np.ndarray  # indices carrying class information
    bias: np.ndarray  # (dims,) fixed input offset
    proto_seed: int  # seeds the per-task class-prototype draws
    distractor_scale: float = 2.0

    @property
    def tag(self) -> str:
        return f"mode{self.index}"


def make_modes(
    n_modes: int,
    dims: int,
    seed: int,
    signal_dims: int = 8,
    bias_scale: float = 1.5,
    distractor_scale: float = 2.0,
) -> list:
    """Sample n_modes with disjoint signal coordinate sets.

    The bias (scale 1.5 vs unit prototype noise) dominates raw input
    statistics, so a linear probe separates modes from raw points even
    though class structure needs the signal coordinates.
    """
    if n_modes < 1:
        raise ValueError("need at least one mode")
    if signal_dims < 1 or n_modes * signal_dims > dims:
        raise ValueError(
            f"cannot fit {n_modes} disjoint sets of {signal_dims} coords in {dims} dims"
        )
    perm = derive_rng(seed, 10).permutation(dims)
    modes = []
    for m in range(n_modes):
        coords = np.sort(perm[m * signal_dims : (m + 1) * signal_dims])
        bias = (derive_rng(seed, 10, m).standard_normal(dims) * bias_scale).astype(np.float64)
        modes.append(
            ModeSpec(m, "coordset", coords, bias, derive_seed(seed, 13, m), distractor_scale)
        )
    return modes


def identity_mode(dims: int, seed: int = 0) -> ModeSpec:
    """Degenerate mode: prototypes occupy every coordinate, no offset."""
    return ModeSpec(0, "identity", np.arange(dims), np.zeros(dims), derive_seed(seed, 13, 0))


def _mode_episode(mode: ModeSpec, task_index, n_classes, dims, split_sizes, noise):
    rng = derive_rng(mode.proto_seed, task_index)
    k = len(mode.signal_coords)
    protos = rng.standard_normal((n_classes, k))

    def draw(per_class):
        xs, ys = [], []
        for c in range(n_classes):
            x = rng.standard_normal((per_class, dims)) * mode.distractor_scale
            x[:, mode.signal_coords] = protos[c] + rng.standard_normal((per_class, k)) * noise
            xs.append(x + mode.bias)
            ys.append(np.full(per_class, c, dtype=np.int64))
        return np.concatenate(xs).astype(np.float32), np.concatenate(ys)

    sx, sy = draw(split_sizes[0])
    qx, qy = draw(split_sizes[1])
    tx, ty = draw(split_sizes[2])
    return Episode(mode.tag, sx, sy, qx, qy, tx, ty)


def synthetic_hetero_stream(
    modes: list,
    tasks_per_mode: int,
    n_classes: int = 5,
    dims: int = 24,
    seed: int = 0,
    support_per_class: int = 10,
    query_per_class: int = 10,
    test_per_class: int = 20,
    noise: float = 0.5,
) -> list:
    """Interleaved stream of tasks drawn from the given modes.

    Every task draws fresh Gaussian class prototypes, so nothing transfers
    across tasks except mode structure: which coordinates matter and which
    are distractors.
    """
    if tasks_per_mode < 1:
        raise ValueError("tasks_per_mode must be >= 1")
    if not modes:
        raise ValueError("need at least one mode")
    if dims < 1:
        raise ValueError("dims must be >= 1")
    for mode in modes:
        if len(mode.bias) != dims or int(np.max(mode.signal_coords)) >= dims:
            raise ValueError(f"mode {mode.index} was built for a different dims")
    if min(support_per_class, query_per_class, test_per_class) < 1:
        raise ValueError("split sizes must be >= 1")
    sizes = (support_per_class, query_per_class, test_per_class)
    order = np.repeat(np.arange(len(modes)), tasks_per_mode)
    order = derive_rng(seed, 12).permutation(order)
    episodes = [
        _mode_episode(modes[m], t, n_classes, dims, sizes, noise)
        for t, m in enumerate(order)
    ]
    return normalize_stream(episodes)


def split_episode(pools: list, supp_n: int, query_n: int, test_n: int, rng, tag="task") -> Episode:
    """Disjoint support/query/test draws from per-class sample pools."""
    if supp_n < 1:
        raise ValueError("support split must be non-empty")
    if query_n < 1 or test_n < 1:
        raise ValueError("query and test splits must be non-empty")
    need = supp_n + query_n + test_n
    parts = {"s": ([], []), "q": ([], []), "t": ([], [])}
    for c, pool in enumerate(pools):
        pool = np.asarray(pool)
        if pool.shape[0] < need:
            raise ValueError(f"class {c}: pool has {pool.shape[0]} samples, need {need}")
        perm = rng.permutation(pool.shape[0])
        cuts = (perm[:supp_n], perm[supp_n : supp_n + query_n], perm[supp_n + query_n : need])
        for key, take in zip(("s", "q", "t"), cuts):
            parts[key][0].append(pool[take])
            parts[key][1].append(np.full(len(take), c, dtype=np.int64))
    (sx, sy), (qx, qy), (tx, ty) = (
        (np.concatenate(xs).astype(np.float32), np.concatenate(ys))
        for xs, ys in (parts["s"], parts["q"], parts["t"])
    )
    return Episode(tag, sx, sy, qx, qy, tx, ty)


def idx_mode_stream(
    root_dir,
    tasks_per_mode: int,
    seed: int,
    support_per_class: int = 40,
    query_per_class: int = 40,
    test_per_class: int = 20,
) -> list:
    """Stream from user-supplied per-mode IDX datasets.

    Each subdirectory of root_dir is one mode and must hold images.idx and
    labels.idx; per task, every class contributes a fresh disjoint
    support/query/test draw. Lets externally filtered corpora stand in for
    the procedural modes.
    """
    import os

    subdirs = sorted(
        d for d in os.listdir(root_dir) if os.path.isdir(os.path.join(root_dir, d))
    )
    if not subdirs:
        raise ValueError(f"{root_dir} has no mode subdirectories")
    pools_by_mode = []
    for d in subdirs:
        images = load_idx_images(os.path.join(root_dir, d, "images.idx"))
        labels = load_idx_labels(os.path.join(root_dir, d, "labels.idx"))
        classes = np.unique(labels)
        pools_by_mode.append([images[labels == c] for c in classes])
    order = np.repeat(np.arange(len(subdirs)), tasks_per_mode)
    order = derive_rng(seed, 12).permutation(order)
    episodes = [
        split_episode(
            pools_by_mode[m], support_per_class, query_per_class, test_per_class,
            derive_rng(seed, 11, t), tag=subdirs[m],
        )
        for t, m in enumerate(order)
    ]
    return normalize_stream(episodes)
