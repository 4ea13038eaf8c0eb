"""Dataset construction, trigger application, and training-set poisoning.

Datasets carry per-sample provenance (clean vs poisoned, with the original
label) so that downstream splits can guarantee a clean validation pool and
metrics can distinguish attack success from ordinary error.

Images are float64 in [0, 1]. Synthetic images are quantized to the 1/255
grid at generation time, so exporting to IDX (unsigned bytes) and reading
back reproduces them bit-exactly.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, replace

import numpy as np

from .numerics import RngState


class SynthSpecError(ValueError):
    """Synthetic-data parameters are unusable (e.g. image too small)."""


class GeometryError(ValueError):
    """A trigger does not fit inside the image."""


class CapacityError(ValueError):
    """Not enough eligible samples to meet the poison plan."""


class SplitError(ValueError):
    """A stratified split cannot give every class at least one sample."""


class IdxFormatError(ValueError):
    """An IDX or CIFAR binary file does not parse; reports the byte offset."""

    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (byte offset {offset})")


@dataclass
class Dataset:
    images: np.ndarray           # (n, channels, h, w) float64 in [0, 1]
    labels: np.ndarray           # (n,) int64 in [0, class_count)
    class_count: int
    poisoned: np.ndarray         # (n,) bool provenance tag
    original_labels: np.ndarray  # (n,) int64; equals labels where clean

    @property
    def n(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.images.shape[1:]

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.images.tobytes())
        h.update(self.labels.tobytes())
        h.update(self.poisoned.tobytes())
        h.update(self.original_labels.tobytes())
        return h.hexdigest()

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.class_count,
                       self.poisoned[idx], self.original_labels[idx])


def make_clean_dataset(images: np.ndarray, labels: np.ndarray, class_count: int) -> Dataset:
    n = images.shape[0]
    labels = labels.astype(np.int64)
    return Dataset(images, labels, class_count,
                   np.zeros(n, dtype=bool), labels.copy())


# ---------------------------------------------------------------------------
# triggers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TriggerSpec:
    """A static input perturbation: corner patch, blended pattern, or sinusoid."""

    kind: str  # patch | blend | sig
    size: int = 3
    position: tuple[int, int] | None = None  # patch top-left; None = bottom-right
    intensity: float = 1.0
    alpha: float = 0.2
    pattern_seed: int = 7
    amplitude: float = 0.08
    frequency: float = 6.0

    @property
    def eps(self) -> float:
        """Max-norm budget of the perturbation implied by the parameters."""
        if self.kind == "patch":
            return max(self.intensity, 1.0 - self.intensity)
        if self.kind == "blend":
            return self.alpha
        return self.amplitude

    def describe(self) -> str:
        if self.kind == "patch":
            return f"patch size={self.size} intensity={self.intensity:g}"
        if self.kind == "blend":
            return f"blend alpha={self.alpha:g} seed={self.pattern_seed}"
        return f"sig amplitude={self.amplitude:g} frequency={self.frequency:g}"


def patch_trigger(size: int = 3, position: tuple[int, int] | None = None,
                  intensity: float = 1.0) -> TriggerSpec:
    return TriggerSpec("patch", size=size, position=position, intensity=intensity)


def blend_trigger(alpha: float = 0.2, pattern_seed: int = 7) -> TriggerSpec:
    return TriggerSpec("blend", alpha=alpha, pattern_seed=pattern_seed)


def sig_trigger(amplitude: float = 0.08, frequency: float = 6.0) -> TriggerSpec:
    return TriggerSpec("sig", amplitude=amplitude, frequency=frequency)


def blend_pattern(trigger: TriggerSpec, shape: tuple[int, int, int]) -> np.ndarray:
    """The fixed uniform-random image a blend trigger mixes in."""
    gen = RngState(trigger.pattern_seed).derive("blend-pattern").generator()
    return gen.uniform(0.0, 1.0, size=shape)


def apply_trigger(x: np.ndarray, trigger: TriggerSpec) -> np.ndarray:
    """Return a triggered copy of one (channels, h, w) image; ``x`` unmodified."""
    if x.ndim != 3:
        raise GeometryError(f"expected (channels, h, w) image, got shape {x.shape}")
    ch, h, w = x.shape
    out = x.copy()
    if trigger.kind == "patch":
        s = trigger.size
        if s == 0:
            return out
        pos = trigger.position if trigger.position is not None else (h - s, w - s)
        r, c = pos
        if r < 0 or c < 0 or r + s > h or c + s > w:
            raise GeometryError(f"patch {s}x{s} at {pos} outside {h}x{w} image")
        out[:, r : r + s, c : c + s] = trigger.intensity
    elif trigger.kind == "blend":
        pattern = blend_pattern(trigger, (ch, h, w))
        out = (1.0 - trigger.alpha) * out + trigger.alpha * pattern
    elif trigger.kind == "sig":
        cols = np.arange(w, dtype=np.float64)
        wave = trigger.amplitude * np.sin(2.0 * np.pi * cols * trigger.frequency / w)
        out = out + wave[None, None, :]
    else:
        raise ValueError(f"unknown trigger kind {trigger.kind!r}")
    return np.clip(out, 0.0, 1.0)


def apply_trigger_batch(images: np.ndarray, trigger: TriggerSpec) -> np.ndarray:
    return np.stack([apply_trigger(img, trigger) for img in images])


# ---------------------------------------------------------------------------
# poisoning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PoisonPlan:
    trigger: TriggerSpec
    poison_rate: float
    mapping: str = "one"       # "one": y -> target; "all": y -> (y + shift) mod c
    target: int = 0            # used by "one"
    shift: int = 1             # used by "all"
    clean_label: bool = False  # poison only class `target` samples, keep labels

    def validate(self, class_count: int) -> None:
        if not 0.0 <= self.poison_rate < 1.0:
            raise ValueError(f"poison_rate must be in [0, 1), got {self.poison_rate}")
        if self.mapping not in ("one", "all"):
            raise ValueError(f"unknown mapping {self.mapping!r}")
        if self.mapping == "one" and not 0 <= self.target < class_count:
            raise ValueError(f"target {self.target} outside [0, {class_count})")
        if self.clean_label and self.mapping != "one":
            raise ValueError("clean_label poisoning requires the one-target mapping")


def poison_dataset(d: Dataset, plan: PoisonPlan, rng: RngState) -> Dataset:
    """Trigger exactly floor(poison_rate * n) samples and relabel per the plan.

    Selection is uniform without replacement (restricted to the target class
    for clean-label plans); the result is reshuffled deterministically.
    """
    plan.validate(d.class_count)
    n = d.n
    k = int(math.floor(plan.poison_rate * n))

    if plan.clean_label:
        eligible = np.where(d.labels == plan.target)[0]
        if k > eligible.size:
            raise CapacityError(
                f"clean-label plan needs {k} class-{plan.target} samples, "
                f"only {eligible.size} available"
            )
    else:
        eligible = np.arange(n)

    gen = rng.derive("poison-select").generator()
    chosen = np.sort(gen.choice(eligible, size=k, replace=False)) if k else np.array([], dtype=int)

    images = d.images.copy()
    labels = d.labels.copy()
    poisoned = d.poisoned.copy()
    original = d.original_labels.copy()
    for i in chosen:
        images[i] = apply_trigger(d.images[i], plan.trigger)
        original[i] = d.labels[i]
        poisoned[i] = True
        if not plan.clean_label:
            if plan.mapping == "one":
                labels[i] = plan.target
            else:
                labels[i] = (d.labels[i] + plan.shift) % d.class_count

    order = rng.derive("poison-shuffle").generator().permutation(n)
    return Dataset(images[order], labels[order], d.class_count,
                   poisoned[order], original[order])


def make_poison_testset(d: Dataset, trigger: TriggerSpec, target: int) -> Dataset:
    """Trigger every test sample not already of the target class.

    Labels keep the TRUE class; attack success is measured against ``target``
    separately, so correct classification never counts as a successful attack.
    """
    keep = np.where(d.labels != target)[0]
    images = np.stack([apply_trigger(d.images[i], trigger) for i in keep]) \
        if keep.size else d.images[:0].copy()
    labels = d.labels[keep]
    return Dataset(images, labels, d.class_count,
                   np.ones(keep.size, dtype=bool), labels.copy())


def split_validation(d: Dataset, fraction: float, rng: RngState) -> tuple[Dataset, Dataset]:
    """Class-stratified clean validation split; returns (val, rest).

    Only clean-tagged samples are eligible for the validation side, and the
    two sides partition the input exactly.
    """
    if not 0.0 < fraction <= 1.0:
        raise SplitError(f"fraction must be in (0, 1], got {fraction}")
    gen = rng.derive("val-split").generator()
    val_idx = []
    for cls in range(d.class_count):
        members = np.where((d.labels == cls) & ~d.poisoned)[0]
        take = int(math.floor(fraction * members.size)) if fraction < 1.0 else members.size
        if take < 1:
            raise SplitError(
                f"fraction {fraction} gives zero validation samples for class {cls}"
            )
        val_idx.append(gen.choice(members, size=take, replace=False))
    val_idx = np.sort(np.concatenate(val_idx))
    mask = np.zeros(d.n, dtype=bool)
    mask[val_idx] = True
    return d.subset(val_idx), d.subset(np.where(~mask)[0])


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def _class_template(cls: int, class_count: int, shape: tuple[int, int, int]) -> np.ndarray:
    """Deterministic per-class base image: a Gaussian blob in a class cell."""
    ch, h, w = shape
    grid = math.ceil(math.sqrt(class_count))
    cell_h, cell_w = h / grid, w / grid
    row, col = divmod(cls, grid)
    center_r = (row + 0.5) * cell_h
    center_c = (col + 0.5) * cell_w
    sigma = 0.55 * min(cell_h, cell_w)
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    bump = np.exp(-((rr - center_r) ** 2 + (cc - center_c) ** 2) / (2.0 * sigma**2))
    base = np.empty(shape, dtype=np.float64)
    for c in range(ch):
        # per-class, per-channel amplitude keeps channels informative
        amp = 0.55 + 0.4 * math.sin(2.0 * math.pi * (cls / class_count + c / max(ch, 1)))
        base[c] = abs(amp) * bump
    return base


def gen_synth(rng: RngState, class_count: int, per_class: int,
              dims: tuple[int, int, int] = (1, 16, 16),
              noise: float = 0.1,
              distractor_prob: float = 0.0,
              distractor_size: int = 4,
              distractor_saturated: float = 0.05) -> Dataset:
    """Balanced class-conditional blob images, shuffled deterministically.

    With ``distractor_prob`` > 0 (and noise > 0), that fraction of images
    additionally carries a uniform bright square in one of the four corners,
    intensity drawn from [0.5, 1.0] and pinned at exactly 1.0 with
    probability ``distractor_saturated``. Corner highlights are part of the
    clean distribution, so corner-patch perturbations are not automatically
    out-of-distribution; real photographs behave the same way under crops
    and bright textures.

    Pixels are quantized to the 1/255 grid so IDX export round-trips exactly.
    """
    if class_count < 2 or per_class < 1:
        raise SynthSpecError("need class_count >= 2 and per_class >= 1")
    ch, h, w = dims
    if h < 8 or w < 8:
        raise SynthSpecError(f"images must be at least 8x8, got {h}x{w}")

    noise_gen = rng.derive("synth-noise").generator()
    n = class_count * per_class
    images = np.empty((n, ch, h, w), dtype=np.float64)
    labels = np.empty(n, dtype=np.int64)
    ds = distractor_size
    corners = [(0, 0), (0, w - ds), (h - ds, 0), (h - ds, w - ds)]
    i = 0
    for cls in range(class_count):
        base = _class_template(cls, class_count, dims)
        for _ in range(per_class):
            img = base
            if noise > 0:
                img = np.clip(img + noise * noise_gen.standard_normal(dims), 0.0, 1.0)
                if distractor_prob > 0 and noise_gen.uniform() < distractor_prob:
                    r0, c0 = corners[noise_gen.integers(0, 4)]
                    if noise_gen.uniform() < distractor_saturated:
                        shade = 1.0
                    else:
                        shade = noise_gen.uniform(0.5, 1.0)
                    img[:, r0 : r0 + ds, c0 : c0 + ds] = shade
            images[i] = np.clip(img, 0.0, 1.0)
            labels[i] = cls
            i += 1
    images = np.round(images * 255.0) / 255.0

    order = rng.derive("synth-shuffle").generator().permutation(n)
    return make_clean_dataset(images[order], labels[order], class_count)


# ---------------------------------------------------------------------------
# on-disk formats: IDX and CIFAR-10 binary
# ---------------------------------------------------------------------------

_IDX_UBYTE = 0x08


def read_idx_array(path) -> np.ndarray:
    """Read one IDX file (big-endian, unsigned-byte payload) to an ndarray."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4:
        raise IdxFormatError("file shorter than an IDX magic", 0)
    zero1, zero2, dtype, ndim = struct.unpack(">BBBB", raw[:4])
    if zero1 != 0 or zero2 != 0 or dtype != _IDX_UBYTE or ndim < 1:
        raise IdxFormatError(f"bad IDX magic {raw[:4].hex()}", 0)
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise IdxFormatError("truncated IDX dimension table", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    expected = int(np.prod(dims))
    payload = raw[header_len:]
    if len(payload) != expected:
        raise IdxFormatError(
            f"IDX payload has {len(payload)} bytes, dims {dims} need {expected}",
            header_len + min(len(payload), expected),
        )
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def write_idx_array(array: np.ndarray, path) -> None:
    a = np.ascontiguousarray(array, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">BBBB", 0, 0, _IDX_UBYTE, a.ndim))
        for d in a.shape:
            f.write(struct.pack(">I", d))
        f.write(a.tobytes())


def load_idx(images_path, labels_path, class_count: int | None = None) -> Dataset:
    """Load an IDX image file (magic ..03 or ..04) plus its label file (..01)."""
    images = read_idx_array(images_path)
    labels = read_idx_array(labels_path)
    if labels.ndim != 1:
        raise IdxFormatError(f"label file must be 1-dimensional, got {labels.ndim}", 3)
    if images.ndim == 3:
        images = images[:, None, :, :]
    elif images.ndim != 4:
        raise IdxFormatError(f"image file must be 3- or 4-dimensional, got {images.ndim}", 3)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(
            f"image count {images.shape[0]} != label count {labels.shape[0]}", 4)
    c = class_count if class_count is not None else int(labels.max()) + 1
    return make_clean_dataset(images.astype(np.float64) / 255.0, labels.astype(np.int64), c)


def save_idx(d: Dataset, images_path, labels_path) -> None:
    """Export a dataset to IDX (provenance is not representable and is dropped)."""
    imgs = np.round(d.images * 255.0).astype(np.uint8)
    if imgs.shape[1] == 1:
        imgs = imgs[:, 0]
    write_idx_array(imgs, images_path)
    write_idx_array(d.labels.astype(np.uint8), labels_path)


_CIFAR_RECORD = 3073  # 1 label byte + 3 * 32 * 32 pixels, channel-major


def load_cifar_bin(paths, class_count: int = 10) -> Dataset:
    """Load CIFAR-10 binary batches (3073-byte records)."""
    if isinstance(paths, (str, bytes)) or not hasattr(paths, "__iter__"):
        paths = [paths]
    images, labels = [], []
    for path in paths:
        with open(path, "rb") as f:
            raw = f.read()
        if len(raw) % _CIFAR_RECORD != 0:
            k = len(raw) // _CIFAR_RECORD
            raise IdxFormatError(
                f"CIFAR batch {path} truncated record {k}", _CIFAR_RECORD * k)
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, _CIFAR_RECORD)
        labels.append(rec[:, 0].astype(np.int64))
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0)
    return make_clean_dataset(np.concatenate(images), np.concatenate(labels), class_count)
