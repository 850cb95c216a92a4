"""Training data: noise synthesis, grayscale image I/O and manifests."""
import os
from dataclasses import dataclass, field

import numpy as np

from .exceptions import CorruptFile, InvalidParam, IoFailure, ShapeMismatch, UnsupportedFormat


@dataclass(frozen=True)
class TrainingPair:
    """Ground truth ``clean`` and its noisy observation ``noisy``."""

    clean: np.ndarray
    noisy: np.ndarray
    id: str = ""

    def __post_init__(self):
        clean = np.array(self.clean, dtype=float)
        noisy = np.array(self.noisy, dtype=float)
        if clean.ndim == 1:
            clean = clean[None, :]
        if noisy.ndim == 1:
            noisy = noisy[None, :]
        if clean.shape != noisy.shape or clean.ndim != 2:
            raise ShapeMismatch(f"clean {clean.shape} and noisy {noisy.shape} images differ")
        clean.setflags(write=False)
        noisy.setflags(write=False)
        object.__setattr__(self, "clean", clean)
        object.__setattr__(self, "noisy", noisy)

    @property
    def shape(self):
        return self.clean.shape


@dataclass
class Dataset:
    pairs: list
    role: str = "train"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.pairs = list(self.pairs)
        if not self.pairs:
            raise InvalidParam("a dataset needs at least one pair")
        if self.role not in ("train", "validate"):
            raise InvalidParam(f"unknown dataset role {self.role!r}")
        shapes = {p.shape for p in self.pairs}
        if len(shapes) != 1:
            raise ShapeMismatch(f"dataset mixes image shapes {sorted(shapes)}")

    @property
    def shape(self):
        return self.pairs[0].shape

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def __getitem__(self, i):
        return self.pairs[i]


def as_pairs(dataset):
    """List of TrainingPair from a Dataset, a pair or a list of pairs."""
    if isinstance(dataset, TrainingPair):
        return [dataset]
    pairs = list(dataset.pairs if isinstance(dataset, Dataset) else dataset)
    if not pairs:
        raise InvalidParam("dataset is empty")
    return pairs


# ---------------------------------------------------------------------------
# noise


def standard_normal(shape, seed):
    """Box-Muller normals from a Philox counter-based stream.

    Uniforms are the generator's 53-bit doubles; pairs ``(u1, u2)`` map to
    ``sqrt(-2 log(1 - u1)) * cos(2 pi u2)`` and the matching sine.
    """
    size = int(np.prod(shape))
    half = (size + 1) // 2
    gen = np.random.Generator(np.random.Philox(int(seed)))
    uni = gen.random((half, 2))
    r = np.sqrt(-2.0 * np.log1p(-uni[:, 0]))
    theta = 2.0 * np.pi * uni[:, 1]
    z = np.column_stack([r * np.cos(theta), r * np.sin(theta)]).ravel()
    return z[:size].reshape(shape)


def add_gaussian_noise(u, sigma, seed):
    """``u + sigma * N(0, 1)`` with a seeded stream; values are not clipped."""
    if not sigma >= 0:
        raise InvalidParam("noise level must be nonnegative")
    u = np.asarray(u, dtype=float)
    if sigma == 0:
        return u.copy()
    return u + sigma * standard_normal(u.shape, seed)


# ---------------------------------------------------------------------------
# synthetic images


def piecewise_smooth_image(m1=128, m2=128, seed=0):
    """Seeded test image: shaded background plus flat and smooth shapes.

    Values lie in [0, 1]. The layout (a disc, a bar, a wedge and a soft
    blob over a linear ramp) loosely mimics a portrait-like scene.
    """
    rng = np.random.default_rng(seed)
    y, x = np.mgrid[0:m1, 0:m2]
    y = (y + 0.5) / m1
    x = (x + 0.5) / m2
    img = 0.55 + 0.25 * (x - 0.5) + 0.1 * rng.uniform(-1, 1) * (y - 0.5)
    cy, cx = rng.uniform(0.3, 0.45), rng.uniform(0.3, 0.5)
    rad = rng.uniform(0.12, 0.2)
    disc = (y - cy) ** 2 + (x - cx) ** 2 < rad ** 2
    img[disc] = 0.15 + 0.1 * (y[disc] - cy) / rad
    bar = (np.abs(x - rng.uniform(0.6, 0.75)) < 0.06) & (y > 0.35)
    img[bar] = 0.1
    wedge = (y > 0.75) & (x < 0.9) & (y - 0.75 > 0.5 * np.abs(x - 0.45) - 0.05)
    img[wedge] = 0.35
    blob = np.exp(-((y - 0.2) ** 2 + (x - 0.8) ** 2) / 0.01)
    img += 0.3 * blob
    return np.clip(img, 0.0, 1.0)


def synthetic_dataset(n_pairs=1, shape=(128, 128), sigma=0.05, seed=0, role="train"):
    """Pairs of seeded piecewise-smooth images and their noisy versions."""
    pairs = []
    for i in range(n_pairs):
        clean = piecewise_smooth_image(shape[0], shape[1], seed + i)
        noisy = add_gaussian_noise(clean, sigma, 1000 + seed + i)
        pairs.append(TrainingPair(clean, noisy, f"synthetic{seed + i}"))
    return Dataset(pairs, role)


def two_pixel_dataset():
    """The 1x2 pair ``f = (0, 1)``, ``ubar = (1/4, 3/4)``; scalar optimum 1/4."""
    return Dataset([TrainingPair([[0.25, 0.75]], [[0.0, 1.0]], "two-pixel")])


# ---------------------------------------------------------------------------
# image I/O


def _pgm_tokens(data):
    """Header fields of a binary PGM and the offset of the raster."""
    tokens = []
    pos = 0
    n = len(data)
    while len(tokens) < 4:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise CorruptFile("truncated PGM header")
        tokens.append(data[start:pos])
    if pos >= n:
        raise CorruptFile("PGM header not terminated")
    return tokens, pos + 1


def read_pgm(data):
    if data[:2] != b"P5":
        raise UnsupportedFormat("only binary (P5) PGM files are supported")
    tokens, offset = _pgm_tokens(data)
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise CorruptFile("non-numeric PGM header field") from None
    if width <= 0 or height <= 0 or not 0 < maxval < 65536:
        raise CorruptFile(f"bad PGM header {width}x{height} maxval {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height
    if len(data) - offset < count * dtype.itemsize:
        raise CorruptFile("PGM raster is truncated")
    raster = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
    return raster.reshape(height, width).astype(float) / maxval


def write_pgm(u):
    u = np.asarray(u, dtype=float)
    if u.ndim == 1:
        u = u[None, :]
    head = f"P5\n{u.shape[1]} {u.shape[0]}\n255\n".encode("ascii")
    return head + quantize(u).astype(np.uint8).tobytes()


def quantize(u):
    """8-bit codes of ``u`` clipped to [0, 1]; ties round away from zero."""
    x = np.clip(np.asarray(u, dtype=float), 0.0, 1.0) * 255.0
    return np.floor(x + 0.5)


def _read_png(path):
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as img:
            img.load()
            mode = img.mode
            if mode in ("I;16", "I;16B", "I;16L", "I"):
                arr = np.asarray(img, dtype=float)
                return arr / (65535.0 if mode.startswith("I;16") or arr.max() > 255 else 255.0)
            if mode == "L":
                return np.asarray(img, dtype=float) / 255.0
            rgb = np.asarray(img.convert("RGB"), dtype=float)
    except UnidentifiedImageError as exc:
        raise CorruptFile(f"{path}: {exc}") from None
    except (SyntaxError, ValueError) as exc:
        raise CorruptFile(f"{path}: {exc}") from None
    # Rec. 601 luma
    return (rgb @ np.array([0.299, 0.587, 0.114])) / 255.0


def load_image(path):
    """Grayscale image in [0, 1] from a P5 PGM, a PNG or a ``.npy`` array."""
    path = os.fspath(path)
    ext = os.path.splitext(path)[1].lower()
    if ext not in (".pgm", ".png", ".npy"):
        raise UnsupportedFormat(f"unsupported image format {ext!r}")
    if not os.path.isfile(path):
        raise IoFailure(f"no such image file: {path}")
    try:
        if ext == ".npy":
            try:
                arr = np.load(path, allow_pickle=False)
            except ValueError as exc:
                raise CorruptFile(f"{path}: {exc}") from None
            arr = np.asarray(arr, dtype=float)
            if arr.ndim == 1:
                arr = arr[None, :]
            if arr.ndim != 2:
                raise CorruptFile(f"{path}: expected a 2-D array, got shape {arr.shape}")
            return arr
        if ext == ".png":
            return _read_png(path)
        with open(path, "rb") as fh:
            return read_pgm(fh.read())
    except OSError as exc:
        if isinstance(exc, IoFailure):
            raise
        raise IoFailure(f"{path}: {exc}") from exc


def save_image(path, u):
    """Write ``u`` as 8-bit PGM or PNG (clipped to [0, 1]) or as raw ``.npy``."""
    path = os.fspath(path)
    ext = os.path.splitext(path)[1].lower()
    u = np.asarray(u, dtype=float)
    try:
        if ext == ".pgm":
            with open(path, "wb") as fh:
                fh.write(write_pgm(u))
        elif ext == ".png":
            from PIL import Image

            img = u if u.ndim == 2 else u[None, :]
            Image.fromarray(quantize(img).astype(np.uint8), mode="L").save(path)
        elif ext == ".npy":
            np.save(path, u)
        else:
            raise UnsupportedFormat(f"unsupported image format {ext!r}")
    except OSError as exc:
        raise IoFailure(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# manifests


def parse_manifest(text, base_dir="."):
    """Entries of a manifest: ``clean noisy`` or ``clean SYNTH sigma seed`` per line."""
    entries = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) == 2:
            entries.append((os.path.join(base_dir, parts[0]), os.path.join(base_dir, parts[1]),
                            None, None))
        elif len(parts) == 4 and parts[1] == "SYNTH":
            try:
                sigma, seed = float(parts[2]), int(parts[3])
            except ValueError:
                raise InvalidParam(f"manifest line {lineno}: bad sigma/seed") from None
            entries.append((os.path.join(base_dir, parts[0]), None, sigma, seed))
        else:
            raise InvalidParam(f"manifest line {lineno}: expected 'clean noisy' or "
                               f"'clean SYNTH sigma seed'")
    if not entries:
        raise InvalidParam("manifest lists no image pairs")
    return entries


def load_manifest(path, role="train"):
    """Dataset described by a manifest file; relative paths resolve against it."""
    path = os.fspath(path)
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise IoFailure(f"{path}: {exc}") from exc
    pairs = []
    for i, (clean_path, noisy_path, sigma, seed) in enumerate(
            parse_manifest(text, os.path.dirname(os.path.abspath(path)))):
        clean = load_image(clean_path)
        noisy = load_image(noisy_path) if noisy_path else add_gaussian_noise(clean, sigma, seed)
        pairs.append(TrainingPair(clean, noisy, os.path.basename(clean_path) or str(i)))
    return Dataset(pairs, role)
