"""Datasets, Market-1501 style ingestion, synthetic domains, PK sampling, augmentation."""
from __future__ import annotations

import csv
import math
import os
import re
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .errors import InsufficientClasses, InvalidConfig, MalformedName

SOURCE = "source"
TARGET = "target"
DOMAINS = (SOURCE, TARGET)

MANIFEST = "manifest.csv"
MANIFEST_FIELDS = ("sample_id", "person_id", "camera_id", "domain", "file")
SPLITS = ("bounding_box_train", "query", "bounding_box_test")

_MARKET_RE = re.compile(r"^(-?\d+)_c(\d+)s(\d+)_(\d+)_(\d+)\.jpg$")


@dataclass(frozen=True)
class SampleMeta:
    sample_id: int
    person_id: int
    camera_id: int
    domain: str
    path: Optional[str] = None
    image: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.person_id < -1:
            raise ValueError(f"person_id must be >= -1, got {self.person_id}")
        if self.domain not in DOMAINS:
            raise ValueError(f"unknown domain {self.domain!r}")

    @property
    def is_distractor(self):
        return self.person_id == -1


class Dataset:
    """Ordered, immutable collection of samples from one domain.

    Images are uint8 arrays of shape (H, W, 3); samples backed by a path are
    decoded and resized to ``image_size`` on access.
    """

    def __init__(self, samples: Sequence[SampleMeta], image_size=None, name=""):
        self.samples = tuple(samples)
        self.image_size = tuple(image_size) if image_size is not None else None
        self.name = name
        index = {}
        for i, s in enumerate(self.samples):
            if s.person_id >= 0:
                index.setdefault(s.person_id, []).append(i)
        self.identity_index = {pid: tuple(idx) for pid, idx in index.items()}

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @property
    def size(self):
        return len(self.samples)

    @property
    def person_ids(self):
        return np.array([s.person_id for s in self.samples], dtype=np.int64)

    @property
    def camera_ids(self):
        return np.array([s.camera_id for s in self.samples], dtype=np.int64)

    @property
    def num_identities(self):
        return len(self.identity_index)

    def image(self, i) -> np.ndarray:
        s = self.samples[i]
        if s.image is not None:
            return s.image
        img = Image.open(s.path).convert("RGB")
        if self.image_size is not None:
            h, w = self.image_size
            img = img.resize((w, h), Image.BILINEAR)
        return np.asarray(img, dtype=np.uint8)

    def images(self, indices=None) -> np.ndarray:
        if indices is None:
            indices = range(len(self))
        return np.stack([self.image(i) for i in indices])

    def without_distractors(self):
        return Dataset([s for s in self.samples if not s.is_distractor],
                       self.image_size, self.name)

    def dense_labels(self):
        """Ground-truth person ids remapped to 0..C-1 (distractors stay -1)."""
        pids = self.person_ids
        mapping = {pid: k for k, pid in enumerate(sorted(self.identity_index))}
        return np.array([mapping.get(p, -1) for p in pids], dtype=np.int64)


# ---------------------------------------------------------------------------
# ingestion

def parse_market_filename(name: str, domain=TARGET, sample_id=0) -> SampleMeta:
    base = os.path.basename(name)
    m = _MARKET_RE.match(base)
    if m is None:
        raise MalformedName(f"not a Market-1501 filename: {name!r}")
    pid, cam = int(m.group(1)), int(m.group(2))
    if pid < -1 or cam < 1:
        raise MalformedName(f"invalid person/camera id in {name!r}")
    return SampleMeta(sample_id=sample_id, person_id=pid, camera_id=cam,
                      domain=domain, path=name)


def load_image_dir(directory, domain=TARGET, image_size=(256, 128)) -> Dataset:
    """Load a directory of Market-named jpgs, or a manifest-backed directory."""
    if not os.path.isdir(directory):
        raise FileNotFoundError(directory)
    if os.path.exists(os.path.join(directory, MANIFEST)):
        return read_manifest_dir(directory, image_size)
    samples = []
    for fname in sorted(os.listdir(directory)):
        if not fname.endswith(".jpg"):
            continue
        meta = parse_market_filename(os.path.join(directory, fname), domain, len(samples))
        samples.append(meta)
    return Dataset(samples, image_size, name=os.path.basename(directory.rstrip("/")))


def load_domain_root(root, domain=TARGET, image_size=(256, 128), splits=SPLITS):
    """Read ``<root>/bounding_box_train``, ``query``, ``bounding_box_test``."""
    out = {}
    for split in splits:
        path = os.path.join(root, split)
        if not os.path.isdir(path):
            raise FileNotFoundError(path)
        out[split] = load_image_dir(path, domain, image_size)
    return out


def write_manifest_dir(dataset: Dataset, directory):
    os.makedirs(os.path.join(directory, "images"), exist_ok=True)
    with open(os.path.join(directory, MANIFEST), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_FIELDS)
        for i, s in enumerate(dataset.samples):
            fname = os.path.join("images", f"{s.sample_id:06d}.png")
            Image.fromarray(dataset.image(i)).save(os.path.join(directory, fname))
            writer.writerow([s.sample_id, s.person_id, s.camera_id, s.domain, fname])


def read_manifest_dir(directory, image_size=None) -> Dataset:
    samples = []
    with open(os.path.join(directory, MANIFEST), newline="") as fh:
        for row in csv.DictReader(fh):
            samples.append(SampleMeta(
                sample_id=int(row["sample_id"]), person_id=int(row["person_id"]),
                camera_id=int(row["camera_id"]), domain=row["domain"],
                path=os.path.join(directory, row["file"])))
    return Dataset(samples, image_size, name=os.path.basename(directory.rstrip("/")))


# ---------------------------------------------------------------------------
# synthetic domains

PALETTE = np.array([
    [0.85, 0.15, 0.15], [0.15, 0.7, 0.2], [0.15, 0.25, 0.85], [0.9, 0.85, 0.15],
    [0.15, 0.8, 0.85], [0.8, 0.2, 0.8], [0.92, 0.92, 0.92], [0.25, 0.25, 0.25]])
HAIR = np.array([[0.08, 0.06, 0.05], [0.4, 0.25, 0.1], [0.9, 0.8, 0.45], [0.6, 0.6, 0.6]])
SKIN = np.array([[0.9, 0.75, 0.6], [0.55, 0.4, 0.3]])
SHOES = np.array([[0.1, 0.1, 0.1], [0.95, 0.95, 0.95], [0.5, 0.3, 0.15]])
BACKGROUND = 0.45
ATTRIBUTES = (("hair", len(HAIR)), ("skin", len(SKIN)), ("torso", len(PALETTE)),
              ("torso_pattern", 3), ("legs", len(PALETTE)), ("legs_pattern", 2),
              ("shoes", len(SHOES)))
BAND_EDGES = (0.0, 0.1, 0.22, 0.58, 0.9, 1.0)


class SyntheticWorld:
    """Procedural renderer for two camera networks.

    An identity is a combination of discrete attributes (hair, skin, torso
    color and pattern, leg color and pattern, shoes) drawn from small
    palettes and rendered as horizontal bands; identities within one split
    differ in at least ``min_attr_diff`` attributes. Every camera applies a
    global color gain and images get a random shift, brightness jitter and
    pixel noise.

    The target domain differs from the source in framing (people sit lower),
    a channel mix and a low-frequency color field, all scaled by
    ``domain_shift``, plus a cluttered background strip on both sides of the
    person with strength ``clutter``. ``target_camera_mix`` optionally adds a
    per-camera color cast to the target cameras.
    """

    def __init__(self, domain_shift=0.6, n_cams=4, image_size=(32, 16), seed=0,
                 noise=0.04, max_shift=1, camera_jitter=0.1, brightness=0.1,
                 clutter=0.5, target_camera_mix=0.0, min_attr_diff=2):
        self.domain_shift = float(domain_shift)
        self.n_cams = int(n_cams)
        self.image_size = tuple(image_size)
        self.noise = noise
        self.max_shift = max_shift
        self.brightness = brightness
        self.min_attr_diff = min_attr_diff
        self.clutter = clutter
        rng = np.random.default_rng([seed, 7919])
        h, w = self.image_size
        self.camera_gain = {
            d: rng.uniform(1 - camera_jitter, 1 + camera_jitter, size=(self.n_cams, 3))
            for d in DOMAINS}
        # per-camera color casts that only the target cameras carry
        cams = rng.normal(size=(self.n_cams, 3, 3))
        self.camera_mix = {SOURCE: np.stack([np.eye(3)] * self.n_cams),
                           TARGET: np.eye(3) + 0.5 * target_camera_mix * cams}
        yy, xx = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
        mix = rng.normal(size=(3, 3))
        coef = rng.normal(scale=0.5, size=(3, 3))
        self.domain_mix = {SOURCE: np.eye(3), TARGET: np.eye(3) + 0.5 * self.domain_shift * mix}
        # target cameras frame people lower in the image
        self.domain_offset = {SOURCE: 0, TARGET: int(round(self.domain_shift * h / 4))}
        self.domain_field = {
            SOURCE: np.zeros((h, w, 3)),
            TARGET: 0.5 * self.domain_shift * (coef[0] * yy[..., None] + coef[1] * xx[..., None]
                                               + coef[2] * (yy * xx)[..., None]),
        }

    def identity_latent(self, rng):
        """Palette indices for one identity."""
        return {name: int(rng.integers(n)) for name, n in ATTRIBUTES}

    def distinct_latents(self, n, rng, min_diff=2, max_tries=10000):
        """``n`` identities, each pair differing in at least ``min_diff`` attributes."""
        latents = []
        for _ in range(max_tries):
            if len(latents) == n:
                break
            cand = self.identity_latent(rng)
            if all(sum(cand[k] != other[k] for k in cand) >= min_diff for other in latents):
                latents.append(cand)
        if len(latents) < n:
            raise InvalidConfig(f"could not draw {n} distinct identities")
        return latents

    def render(self, latent, camera_id, domain, rng) -> np.ndarray:
        h, w = self.image_size
        rows = [int(round(f * h)) for f in BAND_EDGES]
        img = np.empty((h, w, 3))
        bands = [HAIR[latent["hair"]], SKIN[latent["skin"]], PALETTE[latent["torso"]],
                 PALETTE[latent["legs"]], SHOES[latent["shoes"]]]
        for k, color in enumerate(bands):
            img[rows[k]:rows[k + 1]] = color
        torso = img[rows[2]:rows[3]]
        if latent["torso_pattern"] == 1:
            torso[::2] *= 0.5
        elif latent["torso_pattern"] == 2:
            torso[:, ::2] *= 0.5
        if latent["legs_pattern"] == 1:
            img[rows[3]:rows[4], : w // 2] *= 0.6
        dy, dx = rng.integers(-self.max_shift, self.max_shift + 1, size=2)
        img = np.roll(img, (dy, dx), axis=(0, 1))
        off = self.domain_offset[domain]
        if off:
            img = np.concatenate([np.full((off, w, 3), BACKGROUND), img[:h - off]], axis=0)
        img *= rng.uniform(1 - self.brightness, 1 + self.brightness)
        img *= self.camera_gain[domain][camera_id - 1][None, None, :]
        if domain == TARGET and self.clutter:
            # people are narrower than the frame; the rest is textured background
            margin = max(1, w // 5)
            bg = BACKGROUND + self.clutter * rng.uniform(-1, 1, size=(h // 4 + 1, 2, 3))
            bg = np.repeat(bg, 4, axis=0)[:h]
            img[:, :margin] = bg[:, :1]
            img[:, w - margin:] = bg[:, 1:]
        mix = self.domain_mix[domain] @ self.camera_mix[domain][camera_id - 1]
        img = (img - 0.5) @ mix.T + 0.5 + self.domain_field[domain]
        img += rng.normal(scale=self.noise, size=img.shape)
        return (np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)

    def make_dataset(self, domain, pids, per_id, rng, name="", start_id=0):
        samples = []
        pids = list(pids)
        for pid, latent in zip(pids, self.distinct_latents(len(pids), rng, self.min_attr_diff)):
            for j in range(per_id):
                cam = j % self.n_cams + 1
                img = self.render(latent, cam, domain, rng)
                img.setflags(write=False)
                samples.append(SampleMeta(start_id + len(samples), int(pid), cam,
                                          domain, image=img))
        return Dataset(samples, self.image_size, name=name)


def _check_counts(n_ids, per_id):
    if n_ids < 2 or per_id < 2:
        raise InvalidConfig(f"need n_ids >= 2 and per_id >= 2, got {n_ids}, {per_id}")


def generate_synthetic_domains(n_ids=20, per_id=8, domain_shift=0.6, seed=0,
                               image_size=(32, 16), n_cams=4):
    """Return ``(source, target)`` with disjoint identities.

    Target person ids are kept on the samples as hidden ground truth; training
    code must only read them through evaluation oracles.
    """
    return tuple(make_benchmark(n_ids, per_id, domain_shift, seed, image_size,
                                n_cams, with_test=False)[k]
                 for k in ("source", "target"))


def make_benchmark(n_ids=20, per_id=8, domain_shift=0.6, seed=0, image_size=(32, 16),
                   n_cams=4, with_test=True, n_test_ids=None, **world_kw):
    """Two-domain benchmark: train sets plus held-out query/gallery splits per domain.

    Test identities are disjoint from train identities, as in Re-ID protocols.
    Each test identity contributes at most one query per camera; the rest form the gallery.
    """
    _check_counts(n_ids, per_id)
    n_test_ids = n_ids if n_test_ids is None else n_test_ids
    world = SyntheticWorld(domain_shift, n_cams, image_size, seed, **world_kw)
    out = {}
    for k, domain in enumerate(DOMAINS):
        # fixed id ranges and per-split streams keep train sets independent of with_test
        offset = k * (n_ids + n_test_ids)
        train_pids = range(offset + 1, offset + n_ids + 1)
        rng = np.random.default_rng([seed, k, 0])
        out[domain] = world.make_dataset(domain, train_pids, per_id, rng, name=f"{domain}_train")
        if with_test:
            test_pids = range(offset + n_ids + 1, offset + n_ids + n_test_ids + 1)
            rng = np.random.default_rng([seed, k, 1])
            full = world.make_dataset(domain, test_pids, per_id, rng, name=f"{domain}_test")
            q, g = split_query_gallery(full)
            out[f"{domain}_query"], out[f"{domain}_gallery"] = q, g
    return out


def split_query_gallery(dataset: Dataset):
    """First image per (identity, camera) becomes a query, the rest the gallery.

    A query is demoted to the gallery while it would have no cross-camera
    match left there, so every query is answerable.
    """
    groups = {}
    for pos, s in enumerate(dataset.samples):
        groups.setdefault(s.person_id, []).append(pos)
    is_query = np.zeros(len(dataset), bool)
    for members in groups.values():
        seen, queries = set(), []
        for pos in members:
            cam = dataset.samples[pos].camera_id
            if cam not in seen:
                queries.append(pos)
            seen.add(cam)

        def answerable(q, queries):
            qs = set(queries)
            cam = dataset.samples[q].camera_id
            return any(dataset.samples[g].camera_id != cam for g in members if g not in qs)

        while queries and not all(answerable(q, queries) for q in queries):
            queries.pop()
        is_query[queries] = True
    query = [s for s, q in zip(dataset.samples, is_query) if q]
    gallery = [s for s, q in zip(dataset.samples, is_query) if not q]
    return (Dataset(query, dataset.image_size, dataset.name + "_query"),
            Dataset(gallery, dataset.image_size, dataset.name + "_gallery"))


def write_benchmark(bench, out_dir):
    """Persist a benchmark as ``<out>/<domain>/{bounding_box_train,query,bounding_box_test}``."""
    for domain in DOMAINS:
        root = os.path.join(out_dir, domain)
        write_manifest_dir(bench[domain], os.path.join(root, "bounding_box_train"))
        if f"{domain}_query" in bench:
            write_manifest_dir(bench[f"{domain}_query"], os.path.join(root, "query"))
            write_manifest_dir(bench[f"{domain}_gallery"], os.path.join(root, "bounding_box_test"))


# ---------------------------------------------------------------------------
# sampling

def pk_sample(dataset, P, K, labels=None, rng=None) -> np.ndarray:
    """Draw one batch of P classes with K samples each.

    Negative labels (outliers, distractors) are never drawn. Classes with
    fewer than K members are sampled with replacement.
    """
    rng = np.random.default_rng() if rng is None else rng
    labels = dataset.person_ids if labels is None else np.asarray(labels)
    if len(labels) != len(dataset):
        raise ValueError("labels must cover every sample")
    classes = np.unique(labels[labels >= 0])
    if len(classes) < P:
        raise InsufficientClasses(f"need {P} classes, only {len(classes)} available")
    chosen = rng.choice(classes, size=P, replace=False)
    batch = []
    for c in chosen:
        members = np.flatnonzero(labels == c)
        batch.append(rng.choice(members, size=K, replace=len(members) < K))
    return np.concatenate(batch)


def steps_per_epoch(n_labeled, P, K):
    return max(1, math.ceil(n_labeled / (P * K)))


# ---------------------------------------------------------------------------
# augmentation

@dataclass(frozen=True)
class AugmentPolicy:
    flip_prob: float = 0.5
    erase_prob: float = 0.5
    crop_enabled: bool = False
    image_size: tuple = (256, 128)
    crop_pad: int = 0
    erase_area: tuple = (0.02, 0.4)
    erase_ratio: float = 0.3

    def __post_init__(self):
        for p in (self.flip_prob, self.erase_prob):
            if not 0.0 <= p <= 1.0:
                raise InvalidConfig(f"probability out of range: {p}")
        if min(self.image_size) <= 0:
            raise InvalidConfig(f"image_size must be positive: {self.image_size}")

    @property
    def pad(self):
        return self.crop_pad or max(1, self.image_size[0] // 16)

    @classmethod
    def identity(cls, image_size):
        return cls(flip_prob=0.0, erase_prob=0.0, crop_enabled=False, image_size=image_size)


def hflip(image):
    return image[:, ::-1]


def random_erase(image, rng, area=(0.02, 0.4), ratio=0.3):
    h, w = image.shape[:2]
    out = image.copy()
    for _ in range(100):
        target = rng.uniform(*area) * h * w
        aspect = math.exp(rng.uniform(math.log(ratio), math.log(1 / ratio)))
        eh = int(round(math.sqrt(target * aspect)))
        ew = int(round(math.sqrt(target / aspect)))
        if 0 < eh < h and 0 < ew < w:
            y = rng.integers(0, h - eh + 1)
            x = rng.integers(0, w - ew + 1)
            out[y:y + eh, x:x + ew] = rng.integers(0, 256, size=(eh, ew, image.shape[2]),
                                                   dtype=np.uint8)
            return out
    return out


def random_crop(image, rng, pad):
    h, w = image.shape[:2]
    padded = np.pad(image, ((pad, pad), (pad, pad), (0, 0)))
    y, x = rng.integers(0, 2 * pad + 1, size=2)
    return padded[y:y + h, x:x + w]


def augment(image, policy: AugmentPolicy, rng) -> np.ndarray:
    if image.shape[:2] != tuple(policy.image_size):
        raise ValueError(f"image {image.shape[:2]} does not match policy {policy.image_size}")
    out = image
    if policy.flip_prob > 0 and rng.random() < policy.flip_prob:
        out = hflip(out)
    if policy.crop_enabled:
        out = random_crop(out, rng, policy.pad)
    if policy.erase_prob > 0 and rng.random() < policy.erase_prob:
        out = random_erase(out, rng, policy.erase_area, policy.erase_ratio)
    return np.ascontiguousarray(out)


def augment_batch(images, policy, rng):
    return np.stack([augment(img, policy, rng) for img in images])
