"""Synthetic recapture corpus, on-disk manifest format, preprocessing and
evaluation protocols.

Corpus layout::

    <root>/manifest.csv            path,split,label,pai,video_id,frame_index
    <root>/dataset.json            name, generator config, config hash
    <root>/<split>/<video_id>/fNNN.ppm
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

PAIS = ("print_halftone", "replay_moire", "replay_banding", "print_colorcast")
LABELS = ("bonafide", "attack")
SPLITS = ("train", "dev", "eval")
MANIFEST_HEADER = ["path", "split", "label", "pai", "video_id", "frame_index"]

# 4x4 Bayer threshold matrix, normalized to (0, 1)
_BAYER4 = (np.array([[0, 8, 2, 10], [12, 4, 14, 6], [3, 11, 1, 9], [15, 7, 13, 5]]) + 0.5) / 16


class DataError(Exception):
    """Malformed corpus, manifest, image or protocol request."""


class ProtocolError(DataError):
    """A protocol split is empty or lacks a required class."""


# -- catalog types -------------------------------------------------------------

@dataclass(frozen=True)
class Sample:
    path: str
    label: str
    pai: str
    video_id: str
    frame_index: int
    split: str

    def __post_init__(self):
        if self.label not in LABELS:
            raise DataError(f"unknown label {self.label!r}")
        if (self.label == "bonafide") != (self.pai == "none"):
            raise DataError(f"label {self.label!r} inconsistent with pai {self.pai!r}")
        if self.pai != "none" and self.pai not in PAIS:
            raise DataError(f"unknown pai {self.pai!r}")
        if self.split not in SPLITS:
            raise DataError(f"unknown split {self.split!r}")
        if self.frame_index < 0:
            raise DataError(f"negative frame index {self.frame_index}")

    @property
    def y(self) -> float:
        return 1.0 if self.label == "bonafide" else 0.0


@dataclass
class Manifest:
    samples: list
    name: str = "dataset"
    config_hash: str = ""
    root: Path = field(default_factory=Path)

    def __len__(self):
        return len(self.samples)

    def split(self, name: str) -> list:
        return [s for s in self.samples if s.split == name]

    def resolve(self, sample: Sample) -> Path:
        return Path(self.root) / sample.path

    def validate(self) -> None:
        seen = set()
        video_split = {}
        for s in self.samples:
            key = (s.video_id, s.frame_index)
            if key in seen:
                raise DataError(f"duplicate frame {key}")
            seen.add(key)
            if video_split.setdefault(s.video_id, s.split) != s.split:
                raise DataError(f"video {s.video_id} spans splits")

    def write(self, root) -> Path:
        root = Path(root)
        path = root / "manifest.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(MANIFEST_HEADER)
            for s in self.samples:
                w.writerow([s.path, s.split, s.label, s.pai, s.video_id, s.frame_index])
        return path

    @classmethod
    def read(cls, root) -> "Manifest":
        root = Path(root)
        path = root / "manifest.csv" if root.is_dir() else root
        root = path.parent
        try:
            fh = open(path, newline="")
        except OSError as exc:
            raise DataError(f"cannot read manifest {path}: {exc.strerror}") from exc
        samples = []
        with fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != MANIFEST_HEADER:
                raise DataError(f"{path}: bad header {header}")
            for lineno, row in enumerate(reader, start=2):
                if len(row) != len(MANIFEST_HEADER):
                    raise DataError(f"{path}:{lineno}: expected 6 fields, got {len(row)}")
                try:
                    samples.append(Sample(row[0], row[2], row[3], row[4], int(row[5]), row[1]))
                except (DataError, ValueError) as exc:
                    raise DataError(f"{path}:{lineno}: {exc}") from exc
        name, chash = root.name, ""
        meta = root / "dataset.json"
        if meta.exists():
            info = json.loads(meta.read_text())
            name, chash = info.get("name", name), info.get("config_hash", "")
        m = cls(samples, name, chash, root)
        m.validate()
        return m


@dataclass(frozen=True)
class GeneratorConfig:
    image_size: int = 64
    subjects: int = 12
    bonafide_videos: int = 1
    attack_videos: int = 2
    frames: int = 20
    # per-PAI artifact strength, ordered as PAIS; documented range [0, 2]
    strengths: tuple = (1.0, 1.0, 1.0, 1.0)
    # per-video multiplicative spread of the strength, uniform in [1-j, 1+j]
    strength_jitter: float = 0.2
    seed: int = 7
    name: str = "synth"

    def validate(self) -> None:
        for key in ("image_size", "subjects", "bonafide_videos", "attack_videos", "frames"):
            if getattr(self, key) < 1:
                raise DataError(f"{key} must be >= 1")
        if self.image_size < 16:
            raise DataError("image_size must be >= 16")
        if self.subjects < 3:
            raise DataError("need at least 3 subjects for train/dev/eval")
        if len(self.strengths) != len(PAIS) or not all(0 <= s <= 2 for s in self.strengths):
            raise DataError(f"strengths must be {len(PAIS)} values in [0, 2]")
        if not 0 <= self.strength_jitter < 1:
            raise DataError("strength_jitter must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["strengths"] = list(self.strengths)
        return d

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# -- image I/O -----------------------------------------------------------------

def write_ppm(path, image: np.ndarray) -> None:
    """Write an H x W x 3 image in [0, 1] (or uint8) as binary PPM."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8)
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM (P6, 8-bit) into an H x W x 3 uint8 array."""
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated PPM header")
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != b"P6":
        raise DataError(f"{path}: not a binary PPM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise DataError(f"{path}: bad PPM header") from exc
    if maxval != 255:
        raise DataError(f"{path}: only 8-bit PPM supported")
    n = w * h * 3
    if len(data) - pos < n:
        raise DataError(f"{path}: expected {n} pixel bytes, found {len(data) - pos}")
    return np.frombuffer(data, dtype=np.uint8, count=n, offset=pos).reshape(h, w, 3)


# -- rendering -----------------------------------------------------------------

def _smoothstep(edge0, edge1, x):
    t = np.clip((x - edge0) / (edge1 - edge0), 0, 1)
    return t * t * (3 - 2 * t)


def subject_params(subject_id: int, seed: int = 0) -> dict:
    rng = np.random.default_rng([seed, 0, subject_id])
    return {
        "center": (0.5 + rng.uniform(-0.03, 0.03), 0.52 + rng.uniform(-0.03, 0.03)),
        "axes": (rng.uniform(0.26, 0.33), rng.uniform(0.34, 0.41)),
        "skin": np.array([0.78, 0.58, 0.46]) * rng.uniform(0.6, 1.1) + rng.uniform(-0.06, 0.06, 3),
        # near-neutral backdrop: a gray level plus a mild tint, so backdrop
        # color is not confounded with the color-cast attack
        "background": rng.uniform(0.2, 0.8) + rng.uniform(-0.08, 0.08, 3),
        "bg_tilt": rng.uniform(-0.25, 0.25, 2),
        "eye_dx": rng.uniform(0.09, 0.13),
        "eye_y": rng.uniform(-0.12, -0.06),
        "eye_size": rng.uniform(0.022, 0.035),
        "mouth_y": rng.uniform(0.14, 0.2),
        "mouth_w": rng.uniform(0.06, 0.1),
        "light": rng.uniform(-1, 1, 2),
        "hair": rng.uniform(0.05, 0.35, 3),
    }


def render_bonafide(subject_id: int, frame_index: int, rng=None, size: int = 64, seed: int = 0) -> np.ndarray:
    """Face-like H x W x 3 image in [0, 1].

    Geometry and colors are fixed per (seed, subject); pose, illumination
    and sensor noise are drawn per frame from ``rng`` (derived from
    (seed, subject, frame) when omitted).
    """
    p = subject_params(subject_id, seed)
    if rng is None:
        rng = np.random.default_rng([seed, 1, subject_id, frame_index])
    shift = rng.uniform(-0.06, 0.06, 2)
    scale = rng.uniform(0.92, 1.08)
    gain = rng.uniform(0.8, 1.2) * rng.uniform(0.92, 1.08, 3)  # exposure and white balance
    noise = rng.uniform(0.008, 0.018)
    light = p["light"] + rng.uniform(-0.5, 0.5, 2)
    bg_level = rng.uniform(-0.1, 0.1)

    yy, xx = np.mgrid[0:size, 0:size]
    u = (xx + 0.5) / size
    v = (yy + 0.5) / size
    cx, cy = p["center"][0] + shift[0], p["center"][1] + shift[1]
    ax, ay = p["axes"][0] * scale, p["axes"][1] * scale
    dx, dy = (u - cx) / ax, (v - cy) / ay
    r = np.sqrt(dx * dx + dy * dy)

    bg = p["background"][None, None, :] + bg_level + (p["bg_tilt"][0] * (u - 0.5) + p["bg_tilt"][1] * (v - 0.5))[..., None]
    face_mask = 1 - _smoothstep(0.92, 1.02, r)
    # pseudo-3D shading: brighter toward the light direction, darker at the rim
    shade = 1 + 0.15 * (light[0] * dx + light[1] * dy) - 0.25 * r ** 2
    face = p["skin"][None, None, :] * shade[..., None]
    img = bg * (1 - face_mask[..., None]) + face * face_mask[..., None]

    hair = (1 - _smoothstep(-0.75, -0.6, dy)) * face_mask * (r > 0.55)
    img = img * (1 - hair[..., None]) + p["hair"][None, None, :] * hair[..., None]

    def blob(px, py, sx, sy):
        return np.exp(-(((u - px) / sx) ** 2 + ((v - py) / sy) ** 2) / 2)

    eyes = blob(cx - p["eye_dx"] * scale, cy + p["eye_y"] * scale, p["eye_size"], p["eye_size"] * 0.7)
    eyes += blob(cx + p["eye_dx"] * scale, cy + p["eye_y"] * scale, p["eye_size"], p["eye_size"] * 0.7)
    img *= 1 - 0.8 * np.clip(eyes, 0, 1)[..., None]
    nose = blob(cx, cy + 0.03 * scale, 0.012, 0.05)
    img *= 1 - 0.25 * nose[..., None]
    mouth = blob(cx, cy + p["mouth_y"] * scale, p["mouth_w"] * scale, 0.015)
    img = img * (1 - 0.6 * mouth[..., None]) + 0.6 * mouth[..., None] * np.array([0.55, 0.2, 0.2])

    img = img * gain + rng.normal(0, noise, img.shape)
    return np.clip(img, 0, 1)


def gaussian_blur(image: np.ndarray, sigma: float, radius: int | None = None) -> np.ndarray:
    """Separable Gaussian blur with edge replication, applied over the first two axes."""
    if sigma <= 0:
        return image.copy()
    radius = int(np.ceil(3 * sigma)) if radius is None else radius
    t = np.arange(-radius, radius + 1)
    k = np.exp(-t ** 2 / (2 * sigma ** 2))
    k /= k.sum()
    pad = [(radius, radius), (radius, radius)] + [(0, 0)] * (image.ndim - 2)
    xp = np.pad(image, pad, mode="edge")
    h, w = image.shape[:2]
    tmp = sum(k[i] * xp[i:i + h] for i in range(len(k)))
    return sum(k[i] * tmp[:, i:i + w] for i in range(len(k)))


def _gray(image):
    return image @ np.array([0.299, 0.587, 0.114])


def apply_attack_artifact(image: np.ndarray, pai: str, strength: float = 1.0, rng=None) -> np.ndarray:
    """Simulate the degradation of one presentation attack instrument."""
    if pai not in PAIS:
        raise DataError(f"unknown pai {pai!r}")
    if strength == 0:
        return image.copy()
    rng = np.random.default_rng() if rng is None else rng
    h, w = image.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    s = strength
    if pai == "print_halftone":
        oy, ox = rng.integers(0, 4, 2)
        thr = np.tile(np.roll(_BAYER4, (oy, ox), axis=(0, 1)), (h // 4 + 1, w // 4 + 1))[:h, :w]
        dots = (image > thr[..., None]).astype(np.float64)
        gray = _gray(image)[..., None]
        out = image + min(0.35 * s, 1) * (dots - image)
        out = out + min(0.3 * s, 1) * (gray - out)
    elif pai == "replay_moire":
        freq = rng.uniform(0.2, 0.3)
        theta = rng.uniform(np.pi / 9, 4 * np.pi / 9)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
        out = image + 0.07 * s * wave[..., None]
    elif pai == "replay_banding":
        period = rng.uniform(5, 10)
        phase = rng.uniform(0, 2 * np.pi)
        bands = 1 + 0.12 * s * np.sin(2 * np.pi * yy / period + phase)
        # specular streak along a random diagonal line
        angle = rng.uniform(-np.pi / 4, np.pi / 4)
        offset = rng.uniform(0.2, 0.8) * w
        dist = np.abs(np.cos(angle) * xx + np.sin(angle) * yy - offset)
        streak = 0.3 * s * np.exp(-(dist / (0.06 * w)) ** 2)
        out = image * bands[..., None] + streak[..., None]
    else:  # print_colorcast
        gains = 1 + s * np.array([0.18, -0.04, -0.18]) * rng.uniform(0.8, 1.2, 3)
        out = gaussian_blur(image * gains, 1.1 * s)
    return np.clip(out, 0, 1)


# -- corpus generation -----------------------------------------------------------

def assign_splits(subjects: int, seed: int) -> dict:
    """Subject-disjoint 60/20/20 split from a seeded permutation."""
    order = np.random.default_rng([seed, 3]).permutation(subjects)
    n_train = int(round(0.6 * subjects))
    n_dev = max(1, int(round(0.2 * subjects)))
    n_train = min(n_train, subjects - n_dev - 1)
    split = {}
    for rank, sid in enumerate(order):
        split[int(sid)] = "train" if rank < n_train else "dev" if rank < n_train + n_dev else "eval"
    return split


def plan_videos(config: GeneratorConfig) -> list:
    """(subject, split, label, pai, video_number) for every video, in generation order.

    PAIs rotate within each split so small splits still cover every PAI.
    """
    split_of = assign_splits(config.subjects, config.seed)
    counters = {s: 0 for s in SPLITS}
    videos = []
    for sid in range(config.subjects):
        split = split_of[sid]
        for v in range(config.bonafide_videos):
            videos.append((sid, split, "bonafide", "none", v))
        for v in range(config.attack_videos):
            pai = PAIS[counters[split] % len(PAIS)]
            counters[split] += 1
            videos.append((sid, split, "attack", pai, v))
    return videos


def generate_dataset(config: GeneratorConfig, out_dir) -> Manifest:
    config.validate()
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out}: {exc.strerror}") from exc
    size = config.image_size
    samples = []
    for sid, split, label, pai, v in plan_videos(config):
        tag = label if pai == "none" else pai
        video_id = f"s{sid:03d}_{tag}_{v}"
        vdir = out / split / video_id
        try:
            vdir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise DataError(f"cannot create {vdir}: {exc.strerror}") from exc
        vrng = np.random.default_rng([config.seed, 2, sid, v, PAIS.index(pai) + 1 if pai != "none" else 0])
        strength = 0.0
        if pai != "none":
            j = config.strength_jitter
            strength = config.strengths[PAIS.index(pai)] * vrng.uniform(1 - j, 1 + j)
        # attack videos re-image frames the bonafide camera never produced
        frame_offset = 0 if pai == "none" else 1000 * (v + 1) + 100 * PAIS.index(pai)
        for f in range(config.frames):
            img = render_bonafide(sid, f + frame_offset, size=size, seed=config.seed)
            if pai != "none":
                img = apply_attack_artifact(img, pai, strength, np.random.default_rng([config.seed, 4, sid, v, f]))
            rel = f"{split}/{video_id}/f{f:03d}.ppm"
            try:
                write_ppm(out / rel, img)
            except OSError as exc:
                raise DataError(f"cannot write {out / rel}: {exc.strerror}") from exc
            samples.append(Sample(rel, label, pai, video_id, f, split))
    manifest = Manifest(samples, config.name, config.hash(), out)
    manifest.validate()
    manifest.write(out)
    info = {"name": config.name, "config_hash": config.hash(), "generator": config.to_dict()}
    (out / "dataset.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    return manifest


def corpus_hash(manifest: Manifest) -> str:
    """sha256 over manifest rows and every referenced image's bytes."""
    h = hashlib.sha256()
    for s in manifest.samples:
        h.update(f"{s.path},{s.split},{s.label},{s.pai},{s.video_id},{s.frame_index}\n".encode())
        h.update(manifest.resolve(s).read_bytes())
    return h.hexdigest()


def summarize(manifest: Manifest) -> dict:
    """Frame and video counts per (split, pai)."""
    out = {}
    for s in manifest.samples:
        d = out.setdefault(s.split, {}).setdefault(s.pai, {"frames": 0, "videos": set()})
        d["frames"] += 1
        d["videos"].add(s.video_id)
    return {
        split: {pai: {"frames": d["frames"], "videos": len(d["videos"])} for pai, d in sorted(v.items())}
        for split, v in out.items()
    }


# -- preprocessing ----------------------------------------------------------------

def _resize_axis(arr, n_out, axis):
    n_in = arr.shape[axis]
    if n_in == n_out:
        return arr
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    shape = [1] * arr.ndim
    shape[axis] = n_out
    frac = frac.reshape(shape)
    return np.take(arr, i0, axis=axis) * (1 - frac) + np.take(arr, i1, axis=axis) * frac


def resize_bilinear(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize with half-pixel centers and edge clamping."""
    out = _resize_axis(np.asarray(image, dtype=np.float64), height, 0)
    return _resize_axis(out, width, 1)


def preprocess(image: np.ndarray, target=(64, 64)) -> np.ndarray:
    """Center square crop, bilinear resize, channels-first float32 in [0, 1]."""
    arr = np.asarray(image)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DataError(f"expected an H x W x 3 image, got shape {arr.shape}")
    h, w = arr.shape[:2]
    if h < 8 or w < 8:
        raise DataError(f"image {h}x{w} is smaller than 8x8")
    scaled = arr.astype(np.float64) / 255.0 if arr.dtype == np.uint8 else arr.astype(np.float64)
    side = min(h, w)
    top, left = (h - side) // 2, (w - side) // 2
    crop = scaled[top:top + side, left:left + side]
    out = resize_bilinear(crop, target[0], target[1])
    return np.clip(out, 0, 1).transpose(2, 0, 1).astype(np.float32)


def load_frames(manifest: Manifest, samples, target=(64, 64)) -> np.ndarray:
    """Preprocessed N x 3 x H x W float32 stack for ``samples``."""
    out = np.empty((len(samples), 3) + tuple(target), dtype=np.float32)
    for i, s in enumerate(samples):
        path = manifest.resolve(s)
        try:
            out[i] = preprocess(read_ppm(path), target)
        except OSError as exc:
            raise DataError(f"cannot read {path}: {exc.strerror}") from exc
    return out


# -- frame selection and protocols ------------------------------------------------

def frame_indices(total: int, n: int) -> list:
    """``n`` uniformly spaced indices out of ``total`` (all of them if fewer)."""
    if total < 1 or n < 1:
        raise ValueError("need total >= 1 and n >= 1")
    if total <= n:
        return list(range(total))
    if n == 1:
        return [0]
    # round half up; Python's round() is banker's rounding
    return [int(np.floor(i * (total - 1) / (n - 1) + 0.5)) for i in range(n)]


def select_frames(video_frames: list, n: int) -> list:
    return [video_frames[i] for i in frame_indices(len(video_frames), n)]


def group_videos(samples) -> dict:
    """video_id -> frames sorted by frame_index, in first-seen video order."""
    videos = {}
    for s in samples:
        videos.setdefault(s.video_id, []).append(s)
    return {vid: sorted(fr, key=lambda s: s.frame_index) for vid, fr in videos.items()}


@dataclass(frozen=True)
class ProtocolSpec:
    name: str
    purpose: str  # grandtest | unseen-attack | cross
    # allowed attack PAIs per split; None admits every PAI
    allowed: dict = field(default_factory=dict)

    def admits(self, split: str, pai: str) -> bool:
        if pai == "none":
            return True
        allowed = self.allowed.get(split)
        return allowed is None or pai in allowed


_NO_BANDING = tuple(p for p in PAIS if p != "replay_banding")

PROTOCOLS = {
    "grandtest": ProtocolSpec("grandtest", "grandtest"),
    "unseen-replay": ProtocolSpec(
        "unseen-replay", "unseen-attack", {"train": _NO_BANDING, "dev": _NO_BANDING, "eval": PAIS}
    ),
    "cross": ProtocolSpec("cross", "cross"),
}


def get_protocol(name: str) -> ProtocolSpec:
    try:
        return PROTOCOLS[name]
    except KeyError:
        raise DataError(f"unknown protocol {name!r}; choose from {sorted(PROTOCOLS)}") from None


def apply_protocol(manifest: Manifest, spec, other: Manifest | None = None) -> dict:
    """Filter a manifest into {split: [Sample]} under a protocol.

    ``cross`` takes train/dev from ``manifest`` and eval from ``other``.
    """
    if isinstance(spec, str):
        spec = get_protocol(spec)
    for allowed in spec.allowed.values():
        unknown = set(allowed) - set(PAIS)
        if unknown:
            raise DataError(f"protocol {spec.name} references unknown PAIs {sorted(unknown)}")
    if spec.purpose == "cross":
        if other is None:
            raise DataError("cross protocol needs a second manifest")
        sources = {"train": manifest, "dev": manifest, "eval": other}
    else:
        sources = {split: manifest for split in SPLITS}
    out = {}
    for split in SPLITS:
        rows = [s for s in sources[split].split(split) if spec.admits(split, s.pai)]
        if not rows:
            raise ProtocolError(f"protocol {spec.name}: split {split!r} is empty")
        out[split] = rows
    return out
