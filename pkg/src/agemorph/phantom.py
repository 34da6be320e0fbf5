"""Procedural aging brain phantoms.

Each phantom is a pure function of (identity, age, resolution), so any
counterfactual render is available as ground truth. Identity controls the
skull ellipse, cortical texture, sulcal pattern, and ventricle placement;
age controls ventricle size (affine area growth) and the width of the dark
fluid rim under the skull. Everything else is age-invariant by construction.

Geometry is defined in normalized coordinates: image coordinates u span
(-1, 1) per axis, and skull coordinates v = u / skull_axes map the skull
interior to the unit ball. Region edges are blended over roughly one pixel
so boundaries move smoothly with age instead of snapping between renders.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .image import Image

AGE_LO = 48
AGE_HI = 80
MIN_EXTENT = 32

# Tissue intensities, ordered dark to bright like a T1 slice.
BACKGROUND = 0.0
CSF = 0.12
VENTRICLE = 0.10
SULCUS = 0.36
GRAY = 0.55
WHITE = 0.82

VENTRICLE_GROWTH_PER_YEAR = 0.04  # fraction of the age-48 ventricle area
CSF_RIM_BASE = 0.05               # rim width at age 48, in skull radii
CSF_RIM_GROWTH_PER_DECADE = 0.005  # widening per decade, in skull radii
GROOVE_INNER = 0.84               # sulcal grooves live outside this skull radius

# Dark-pixel measurement: ventricles are the only structure darker than this
# threshold inside the central ellipse (sulci and the rim sit outside it for
# every identity in the sampling ranges below).
AREA_THRESHOLD = 0.3
MEASURE_RADIUS = 0.55

_TEXTURE_GRID = 6
_SULCI_GRID = 16


@dataclass(frozen=True)
class PhantomIdentity:
    """Age-invariant description of one synthetic subject."""

    seed: int
    skull_axes: tuple[float, ...]
    ventricle_base: float
    sulci_seed: int
    texture_seed: int
    asymmetry: float = 0.0

    def __post_init__(self):
        axes = tuple(float(a) for a in self.skull_axes)
        if len(axes) not in (2, 3):
            raise ValueError("skull_axes must have 2 or 3 entries")
        if any(not 0.5 <= a <= 0.95 for a in axes):
            raise ValueError("skull semi-axes must lie in [0.5, 0.95]")
        object.__setattr__(self, "skull_axes", axes)
        if not 0.01 <= self.ventricle_base <= 0.08:
            raise ValueError("ventricle_base must lie in [0.01, 0.08]")
        if abs(self.asymmetry) > 0.1:
            raise ValueError("asymmetry must lie in [-0.1, 0.1]")
        for name in ("seed", "sulci_seed", "texture_seed"):
            if int(getattr(self, name)) < 0:
                raise ValueError(f"{name} must be a non-negative integer")

    @property
    def dimensionality(self) -> int:
        return len(self.skull_axes)

    @classmethod
    def sample(cls, rng: np.random.Generator, dimensionality: int = 2) -> "PhantomIdentity":
        """Draw a random identity from the supported population."""
        if dimensionality == 2:
            axes = (rng.uniform(0.74, 0.88), rng.uniform(0.68, 0.84))
            vent = rng.uniform(0.035, 0.055)
        elif dimensionality == 3:
            axes = (
                rng.uniform(0.74, 0.88),
                rng.uniform(0.68, 0.84),
                rng.uniform(0.62, 0.78),
            )
            vent = rng.uniform(0.018, 0.030)
        else:
            raise ValueError("dimensionality must be 2 or 3")
        return cls(
            seed=int(rng.integers(2**31)),
            skull_axes=axes,
            ventricle_base=float(vent),
            sulci_seed=int(rng.integers(2**31)),
            texture_seed=int(rng.integers(2**31)),
            asymmetry=float(rng.uniform(-0.06, 0.06)),
        )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["skull_axes"] = list(self.skull_axes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomIdentity":
        d = dict(d)
        d["skull_axes"] = tuple(d["skull_axes"])
        return cls(**d)


def _smooth_noise(seed: int, grid: int, shape: tuple[int, ...]) -> np.ndarray:
    """Standard-normal noise on a coarse grid, bilinearly resampled to shape."""
    rng = np.random.default_rng(seed)
    coarse = rng.standard_normal((grid,) * len(shape))
    axes = [np.linspace(0.0, grid - 1.0, n) for n in shape]
    coords = np.stack(np.meshgrid(*axes, indexing="ij"))
    return ndimage.map_coordinates(coarse, coords, order=1, mode="nearest")


def _soft_inside(dist: np.ndarray, threshold: float, edge: float) -> np.ndarray:
    """Coverage ramp: 1 well inside dist < threshold, 0 well outside."""
    return np.clip((threshold - dist) / edge + 0.5, 0.0, 1.0)


@dataclass(frozen=True)
class _Geometry:
    """Identity-derived shape constants (one deterministic draw per identity)."""

    rho: float        # anterior-posterior ventricle elongation
    rho2: float       # through-plane ventricle elongation (3-D)
    anterior: float   # common ventricle shift along axis 0
    lateral: float    # ventricle half-separation along axis 1
    gray_inner: float  # skull-relative radius of the gray/white boundary


def _derived_geometry(identity: PhantomIdentity) -> _Geometry:
    rng = np.random.default_rng(identity.seed)
    return _Geometry(
        rho=float(rng.uniform(1.9, 2.3)),
        rho2=float(rng.uniform(1.3, 1.5)),
        anterior=float(rng.uniform(-0.06, 0.0)),
        lateral=float(rng.uniform(0.18, 0.23)),
        gray_inner=float(rng.uniform(0.75, 0.81)),
    )


def _ventricle_pair(identity: PhantomIdentity, age: float, geo: _Geometry):
    """Centers and semi-axes (in skull coordinates) of the two ventricles.

    The mirrored pair shares a total area (2-D) or volume (3-D) equal to
    ventricle_base * (1 + 0.04 * (age - 48)) of the skull, split between the
    sides by an identity-fixed imbalance.
    """
    scale = identity.ventricle_base * (1.0 + VENTRICLE_GROWTH_PER_YEAR * (age - AGE_LO))
    share = float(np.clip(2.0 * identity.asymmetry, -0.2, 0.2))
    pair = []
    for side in (1.0, -1.0):
        fraction = scale * (1.0 + side * share) / 2.0
        if identity.dimensionality == 2:
            b = float(np.sqrt(fraction / geo.rho))
            size = (geo.rho * b, b)
            center = (geo.anterior, side * geo.lateral + identity.asymmetry)
        else:
            b = float(np.cbrt(fraction / (geo.rho * geo.rho2)))
            size = (geo.rho * b, b, geo.rho2 * b)
            center = (geo.anterior, side * geo.lateral + identity.asymmetry, 0.0)
        pair.append((center, size))
    return pair


def generate_phantom(
    identity: PhantomIdentity, age: float, resolution: tuple[int, ...]
) -> Image:
    """Render one phantom. Pure and bit-deterministic in its arguments."""
    if not AGE_LO <= age <= AGE_HI:
        raise ValueError(f"age {age} outside supported range [{AGE_LO}, {AGE_HI}]")
    resolution = tuple(int(n) for n in resolution)
    if len(resolution) != identity.dimensionality:
        raise ValueError(
            f"resolution has {len(resolution)} axes but identity is "
            f"{identity.dimensionality}-D"
        )
    if any(n < MIN_EXTENT for n in resolution):
        raise ValueError(f"every axis must be at least {MIN_EXTENT}")

    axes = identity.skull_axes
    # Image coordinates in (-1, 1); skull coordinates with the skull as unit ball.
    u = np.meshgrid(
        *[(np.arange(n) - (n - 1) / 2.0) / (n / 2.0) for n in resolution],
        indexing="ij",
        sparse=True,
    )
    v = [ui / a for ui, a in zip(u, axes)]
    r = np.sqrt(sum(vi**2 for vi in v))
    # Blend edges over about one pixel of the coarsest axis.
    edge = max(2.0 / (n * a) for n, a in zip(resolution, axes))

    geo = _derived_geometry(identity)
    skull_cov = _soft_inside(r, 1.0, edge)
    rim_width = CSF_RIM_BASE + CSF_RIM_GROWTH_PER_DECADE * (age - AGE_LO) / 10.0
    gray_outer_cov = _soft_inside(r, 1.0 - rim_width, edge)
    white_cov = _soft_inside(r, geo.gray_inner, edge)

    texture = _smooth_noise(identity.texture_seed, _TEXTURE_GRID, resolution)
    tex_mod = np.clip(1.0 + 0.05 * texture, 0.85, 1.15)
    sulci = _smooth_noise(identity.sulci_seed, _SULCI_GRID, resolution)
    groove_cov = np.clip((sulci - 0.55) / 0.3 + 0.5, 0.0, 1.0)
    groove_cov = groove_cov * _soft_inside(-r, -GROOVE_INNER, edge)

    img = np.zeros(resolution, dtype=np.float64)
    img = img + (CSF - img) * skull_cov
    gray_paint = GRAY * tex_mod + (SULCUS - GRAY * tex_mod) * groove_cov
    img = img + (gray_paint - img) * gray_outer_cov
    img = img + (WHITE * tex_mod - img) * white_cov

    pair = _ventricle_pair(identity, age, geo)
    vent_cov = np.zeros(resolution, dtype=np.float64)
    for center, size in pair:
        vr = np.sqrt(
            sum(((vi - c) / s) ** 2 for vi, c, s in zip(v, center, size))
        )
        vent_cov = np.maximum(vent_cov, _soft_inside(vr, 1.0, edge))
    img = img + (VENTRICLE - img) * vent_cov

    return Image(np.clip(img, 0.0, 1.0).astype(np.float32))


def ventricle_area(image) -> int:
    """Count of dark pixels inside the central measurement ellipse.

    Works on any render or model output of a supported phantom: within the
    central ellipse (55% of each half-extent) only ventricle fluid falls
    below the threshold, so the count tracks ventricle size.
    """
    data = image.data if isinstance(image, Image) else np.asarray(image)
    u = np.meshgrid(
        *[(np.arange(n) - (n - 1) / 2.0) / (n / 2.0) for n in data.shape],
        indexing="ij",
        sparse=True,
    )
    central = sum((ui / MEASURE_RADIUS) ** 2 for ui in u) < 1.0
    return int(np.count_nonzero((data < AREA_THRESHOLD) & central))


def skull_mask(image) -> np.ndarray:
    """Boolean mask of non-background pixels (age-invariant per identity)."""
    data = image.data if isinstance(image, Image) else np.asarray(image)
    return data > 0.0


@dataclass(frozen=True)
class SubjectRecord:
    """One image in a dataset: a subject identifier, its age, and where the
    pixels come from (a file path, an inline Image, or None to render from
    the manifest's generator config)."""

    subject_id: str
    age: int
    image_ref: str | Image | None = None


@dataclass
class DatasetManifest:
    """Record list plus enough generator state to rebuild every image."""

    records: list[SubjectRecord]
    age_min: int = AGE_LO
    age_max: int = AGE_HI
    dimensionality: int = 2
    generator_config: dict | None = None

    def __post_init__(self):
        seen = set()
        for rec in self.records:
            if not self.age_min <= rec.age <= self.age_max:
                raise ValueError(
                    f"record {rec.subject_id} age {rec.age} outside "
                    f"[{self.age_min}, {self.age_max}]"
                )
            key = (rec.subject_id, rec.age)
            if key in seen:
                raise ValueError(f"duplicate record for {key}")
            seen.add(key)

    @property
    def resolution(self) -> tuple[int, ...] | None:
        if self.generator_config and "resolution" in self.generator_config:
            return tuple(self.generator_config["resolution"])
        return None

    def identity_of(self, subject_id: str) -> PhantomIdentity:
        if not self.generator_config or "identities" not in self.generator_config:
            raise KeyError("manifest carries no generator identities")
        return PhantomIdentity.from_dict(self.generator_config["identities"][subject_id])


def build_dataset(
    n_per_age: int,
    age_min: int = AGE_LO,
    age_max: int = AGE_HI,
    resolution: tuple[int, ...] = (64, 64),
    seed: int = 0,
    longitudinal_gap: int | None = None,
) -> DatasetManifest:
    """Sample identities and lay out a phantom dataset manifest.

    Identity draws are keyed by (seed, record index) so the same call is
    bit-reproducible and identities are disjoint across records. With
    ``longitudinal_gap`` set, each subject instead contributes a pair of
    records ``gap`` years apart (counterfactual ground truth for the same
    identity).
    """
    if n_per_age < 1:
        raise ValueError("n_per_age must be at least 1")
    if not (AGE_LO <= age_min < age_max <= AGE_HI):
        raise ValueError(f"age range must satisfy {AGE_LO} <= min < max <= {AGE_HI}")
    if longitudinal_gap is not None:
        if longitudinal_gap < 3:
            raise ValueError("longitudinal gap must be at least 3 years")
        if age_min + longitudinal_gap > age_max:
            raise ValueError("longitudinal gap exceeds the age range")
    ndim = len(resolution)

    records: list[SubjectRecord] = []
    identities: dict[str, dict] = {}
    index = 0
    if longitudinal_gap is None:
        base_ages = range(age_min, age_max + 1)
    else:
        base_ages = range(age_min, age_max - longitudinal_gap + 1)
    for age in base_ages:
        for _ in range(n_per_age):
            rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))
            ident = PhantomIdentity.sample(rng, ndim)
            sid = f"p{index:05d}"
            identities[sid] = ident.to_dict()
            records.append(SubjectRecord(sid, age))
            if longitudinal_gap is not None:
                records.append(SubjectRecord(sid, age + longitudinal_gap))
            index += 1

    return DatasetManifest(
        records=records,
        age_min=age_min,
        age_max=age_max,
        dimensionality=ndim,
        generator_config={
            "kind": "phantom",
            "seed": seed,
            "resolution": list(resolution),
            "n_per_age": n_per_age,
            "longitudinal_gap": longitudinal_gap,
            "identities": identities,
        },
    )


def render_record(manifest: DatasetManifest, record: SubjectRecord) -> Image:
    """Render a record's image from the manifest's generator config."""
    ident = manifest.identity_of(record.subject_id)
    return generate_phantom(ident, record.age, manifest.resolution)
