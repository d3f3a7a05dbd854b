"""Deterministic heterogeneous binary-classification image data.

Each client's fake samples are Gaussian noise plus two additive cues: one
pattern common to all clients and one client-specific pattern; real
samples are plain noise.  The cue patterns are seeded Gaussian mixtures of
plane waves, one disjoint spatial-frequency band per role, orthonormalized
in pixel space.  Distinct bands keep the patterns exactly orthogonal while
giving every client a signature that a small convolutional detector can
actually pick up.

Everything is a pure function of (seed, client id).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError, FormatError
from .model import Batch

Array = np.ndarray

# One (fy, fx) plane-wave band per cue role (first = shared cue, rest =
# client cues in order).  Frequencies stay below Nyquist so the sine and
# cosine phases are both non-degenerate on a 16x16 grid, and are spread in
# orientation/frequency so small conv kernels can tell the bands apart.
_CUE_BANDS: tuple[tuple[int, int], ...] = (
    (0, 5),
    (5, 0),
    (4, 4),
    (4, -4),
    (0, 7),
    (7, 0),
    (2, 6),
    (6, 2),
    (6, -2),
    (2, -6),
    (3, 3),
    (3, -3),
    (0, 3),
    (3, 0),
    (5, 5),
    (5, -5),
)

_DATA_MAGIC = b"FPRD"
_DATA_VERSION = 1


@dataclass
class SyntheticSpec:
    """Parameters of the generated federation-wide dataset."""

    clients: int = 4
    samples_per_client: int = 600
    image_size: tuple[int, int, int] = (1, 16, 16)
    shared_cue_strength: float = 2.0
    personal_cue_strength: float = 3.0
    noise_sigma: float = 1.0
    train_fraction: float = 0.7
    seed: int = 0

    def validate(self) -> None:
        if self.clients < 1:
            raise ConfigError(f"clients must be >= 1, got {self.clients}")
        if self.clients + 1 > len(_CUE_BANDS):
            raise ConfigError(
                f"at most {len(_CUE_BANDS) - 1} clients supported, got {self.clients}"
            )
        if self.samples_per_client < 4:
            raise ConfigError(
                f"samples_per_client must be >= 4, got {self.samples_per_client}"
            )
        if len(self.image_size) != 3 or any(d < 1 for d in self.image_size):
            raise ConfigError(f"bad image_size {self.image_size}")
        if self.image_size[1] < 16 or self.image_size[2] < 16:
            raise ConfigError("image sides must be >= 16 to host the cue bands")
        if self.shared_cue_strength < 0 or self.personal_cue_strength < 0:
            raise ConfigError("cue strengths must be >= 0")
        if self.noise_sigma <= 0:
            raise ConfigError(f"noise_sigma must be > 0, got {self.noise_sigma}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")


@dataclass
class LabeledSample:
    image: Tensor
    label: int  # 0 = real, 1 = fake
    client_id: int


@dataclass
class ClientData:
    """One client's private train/test split."""

    client_id: int
    train: list[LabeledSample] = field(default_factory=list)
    test: list[LabeledSample] = field(default_factory=list)


def _grating(fy: int, fx: int, h: int, w: int, phase_sin: bool) -> Array:
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    angle = 2.0 * np.pi * (fy * ys / h + fx * xs / w)
    return np.sin(angle) if phase_sin else np.cos(angle)


def cue_patterns(spec: SyntheticSpec) -> tuple[Array, list[Array]]:
    """The shared pattern and the per-client patterns, orthonormal in pixel space."""
    spec.validate()
    c, h, w = spec.image_size
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(0,)))
    raw = []
    for role in range(spec.clients + 1):
        fy, fx = _CUE_BANDS[role]
        pattern = np.zeros((c, h, w))
        coeffs = rng.standard_normal((c, 2))
        for ch in range(c):
            pattern[ch] = coeffs[ch, 0] * _grating(fy, fx, h, w, False)
            pattern[ch] += coeffs[ch, 1] * _grating(fy, fx, h, w, True)
        raw.append(pattern.ravel())

    # Disjoint bands are already orthogonal; Gram-Schmidt removes the
    # residual floating-point leakage and normalizes.
    basis: list[Array] = []
    for vec in raw:
        v = vec.copy()
        for b in basis:
            v -= (v @ b) * b
        v /= np.linalg.norm(v)
        basis.append(v)
    shaped = [v.reshape(c, h, w) for v in basis]
    return shaped[0], shaped[1:]


def _split_indices(n: int, fraction: float) -> int:
    cut = int(round(fraction * n))
    return min(max(cut, 1), n - 1)


def generate(spec: SyntheticSpec) -> list[ClientData]:
    """Per-client train/test sample lists, fully determined by (seed, client)."""
    spec.validate()
    shared_pattern, client_patterns = cue_patterns(spec)
    c, h, w = spec.image_size
    out = []
    for k in range(spec.clients):
        rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(1, k)))
        n_fake = spec.samples_per_client // 2
        n_real = spec.samples_per_client - n_fake
        signal = (
            spec.shared_cue_strength * shared_pattern
            + spec.personal_cue_strength * client_patterns[k]
        )
        real = rng.normal(0.0, spec.noise_sigma, size=(n_real, c, h, w))
        fake = rng.normal(0.0, spec.noise_sigma, size=(n_fake, c, h, w)) + signal

        cut_real = _split_indices(n_real, spec.train_fraction)
        cut_fake = _split_indices(n_fake, spec.train_fraction)
        splits = {
            "train": [(img, 0) for img in real[:cut_real]] + [(img, 1) for img in fake[:cut_fake]],
            "test": [(img, 0) for img in real[cut_real:]] + [(img, 1) for img in fake[cut_fake:]],
        }
        data = ClientData(client_id=k)
        for part, pairs in splits.items():
            order = rng.permutation(len(pairs))
            samples = [
                LabeledSample(image=Tensor(pairs[i][0]), label=pairs[i][1], client_id=k)
                for i in order
            ]
            getattr(data, part).extend(samples)
        out.append(data)
    return out


def batches(
    dataset: Sequence[LabeledSample],
    batch_size: int,
    rng: np.random.Generator,
) -> Iterator[Batch]:
    """One epoch of shuffled batches; an incomplete final batch is dropped."""
    if len(dataset) == 0:
        raise ConfigError("cannot batch an empty dataset")
    if batch_size < 2:
        raise ConfigError(f"batch_size must be >= 2 for pairing, got {batch_size}")
    order = rng.permutation(len(dataset))
    for start in range(0, (len(dataset) // batch_size) * batch_size, batch_size):
        chunk = [dataset[i] for i in order[start : start + batch_size]]
        yield Batch(
            images=Tensor(np.stack([s.image.data for s in chunk])),
            labels=np.array([s.label for s in chunk], dtype=np.int64),
        )


# ---------------------------------------------------------------------------
# flat binary export/import
#
# Layout (little-endian): magic "FPRD", u32 version, u32 K, then per client
# u32 train and test counts, then u32 C, H, W; followed per client by train
# images (float32), train labels (u8), test images, test labels.


def write_dataset(clients: Sequence[ClientData], path) -> None:
    if not clients:
        raise ConfigError("nothing to write: no clients")
    first = clients[0].train[0].image.data.shape
    with open(path, "wb") as fh:
        fh.write(_DATA_MAGIC)
        fh.write(struct.pack("<II", _DATA_VERSION, len(clients)))
        for cd in clients:
            fh.write(struct.pack("<II", len(cd.train), len(cd.test)))
        fh.write(struct.pack("<III", *first))
        for cd in clients:
            for part in (cd.train, cd.test):
                for s in part:
                    fh.write(s.image.data.astype("<f4").tobytes())
                fh.write(np.array([s.label for s in part], dtype=np.uint8).tobytes())


def read_dataset(path) -> list[ClientData]:
    with open(path, "rb") as fh:
        blob = fh.read()

    def take(n: int, offset: int) -> tuple[bytes, int]:
        if offset + n > len(blob):
            raise FormatError(f"dataset file truncated at byte {offset}")
        return blob[offset : offset + n], offset + n

    raw, pos = take(4, 0)
    if raw != _DATA_MAGIC:
        raise FormatError(f"bad magic {raw!r}, expected {_DATA_MAGIC!r}")
    raw, pos = take(8, pos)
    version, k = struct.unpack("<II", raw)
    if version != _DATA_VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    counts = []
    for _ in range(k):
        raw, pos = take(8, pos)
        counts.append(struct.unpack("<II", raw))
    raw, pos = take(12, pos)
    c, h, w = struct.unpack("<III", raw)
    image_bytes = c * h * w * 4

    out = []
    for client_id, (n_train, n_test) in enumerate(counts):
        data = ClientData(client_id=client_id)
        for part_name, count in (("train", n_train), ("test", n_test)):
            images = []
            for _ in range(count):
                raw, pos = take(image_bytes, pos)
                images.append(np.frombuffer(raw, dtype="<f4").reshape(c, h, w).astype(np.float64))
            raw, pos = take(count, pos)
            labels = np.frombuffer(raw, dtype=np.uint8)
            if labels.max(initial=0) > 1:
                raise FormatError(f"label {labels.max()} outside {{0, 1}} in client {client_id}")
            getattr(data, part_name).extend(
                LabeledSample(image=Tensor(img), label=int(lab), client_id=client_id)
                for img, lab in zip(images, labels)
            )
        out.append(data)
    if pos != len(blob):
        raise FormatError(f"{len(blob) - pos} trailing bytes after dataset payload")
    return out
