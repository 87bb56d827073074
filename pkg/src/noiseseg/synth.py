"""Seeded synthetic TRAP-like microscopy slides with exact ground truth.

Cells are unions of Fourier-perturbed ellipses filled with a purple stain;
nuclei are lighter disks inside them. A cell with three or more nuclei is an
osteoclast and is annotated; cells with one or two nuclei are pre-osteoclast
distractors and are not. Two appearance domains are provided: a mouse-like
plastic plate and a human-like bone chip.
"""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np
from scipy import ndimage

from .annotations import AnnotationSet
from .geometry import OSTEOCLAST, Detection
from .masks import InstanceMask, mask_to_box, rle_decode, rle_encode

MIN_OSTEOCLAST_AREA = 2000
MIN_OSTEOCLAST_NUCLEI = 3
PALE_NUCLEUS = np.array([0.86, 0.80, 0.90])


@dataclass(frozen=True)
class DomainSpec:
    name: str
    background: tuple[float, float, float]
    vignette: float
    texture_amplitude: float
    texture_scales: tuple[float, ...]
    cell_color: tuple[float, float, float]
    cell_color_jitter: float
    nucleus_lightness: float
    area_per_nucleus: tuple[float, float]
    ellipses: tuple[int, int]
    fourier_amplitude: float
    blur_sigma: float
    noise_sigma: float
    osteoclasts_per_mpx: float = 30.0
    preosteoclasts_per_mpx: float = 25.0
    nucleus_radius: tuple[float, float] = (5.0, 9.0)
    osteoclast_nuclei: tuple[int, int] = (3, 9)
    preosteoclast_scale: float = 1.0
    blotches_per_mpx: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


MOUSE = DomainSpec(
    name="mouse-like",
    background=(0.88, 0.86, 0.84),
    vignette=0.12,
    texture_amplitude=0.015,
    texture_scales=(3.0,),
    cell_color=(0.56, 0.36, 0.63),
    cell_color_jitter=0.04,
    nucleus_lightness=0.55,
    area_per_nucleus=(600.0, 850.0),
    ellipses=(3, 5),
    fourier_amplitude=0.08,
    blur_sigma=0.8,
    noise_sigma=0.02,
)

HUMAN = DomainSpec(
    name="human-like",
    background=(0.76, 0.66, 0.52),
    vignette=0.05,
    texture_amplitude=0.09,
    texture_scales=(2.0, 6.0, 18.0),
    cell_color=(0.47, 0.24, 0.43),
    cell_color_jitter=0.06,
    nucleus_lightness=0.45,
    area_per_nucleus=(850.0, 1200.0),
    ellipses=(5, 8),
    fourier_amplitude=0.18,
    blur_sigma=1.1,
    noise_sigma=0.03,
    preosteoclast_scale=2.0,
    blotches_per_mpx=40.0,
)

DOMAINS = {"mouse": MOUSE, "human": HUMAN, MOUSE.name: MOUSE, HUMAN.name: HUMAN}
BATCHES = {"mouse-like": ("M1", "M2", "M3", "M4", "M5"), "human-like": ("H1", "H2")}


def get_domain(name: str | DomainSpec) -> DomainSpec:
    if isinstance(name, DomainSpec):
        return name
    try:
        return DOMAINS[name]
    except KeyError:
        raise ValueError(f"unknown domain {name!r}; choose mouse or human") from None


@dataclass
class SynthCell:
    mask: InstanceMask
    nuclei: list[tuple[float, float]]

    @property
    def is_osteoclast(self) -> bool:
        return len(self.nuclei) >= MIN_OSTEOCLAST_NUCLEI


@dataclass
class SynthSlide:
    image: np.ndarray
    cells: list[SynthCell]
    seed: int
    domain: str
    nucleus_radii: list[float] = field(default_factory=list, repr=False)

    @property
    def width(self) -> int:
        return self.image.shape[1]

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def nuclei(self) -> list[tuple[float, float]]:
        return [p for c in self.cells for p in c.nuclei]

    @property
    def osteoclasts(self) -> list[SynthCell]:
        return [c for c in self.cells if c.is_osteoclast]

    def annotations(self) -> AnnotationSet:
        inst = [Detection(mask_to_box(c.mask.decode()), OSTEOCLAST, 1.0, c.mask) for c in self.osteoclasts]
        return AnnotationSet(self.width, self.height, inst, list(self.nuclei))


def _slide_rng(seed: int, domain: DomainSpec, size: tuple[int, int]) -> np.random.Generator:
    tag = zlib.crc32(domain.name.encode())
    return np.random.default_rng([int(seed), tag, int(size[0]), int(size[1])])


def _background(rng, domain: DomainSpec, h: int, w: int) -> np.ndarray:
    img = np.empty((h, w, 3), dtype=np.float64)
    img[:] = domain.background
    yy, xx = np.mgrid[:h, :w]
    r2 = ((xx - w / 2) / (w / 2)) ** 2 + ((yy - h / 2) / (h / 2)) ** 2
    img *= (1 - domain.vignette * r2 / 2)[..., None]
    tex = np.zeros((h, w))
    for s in domain.texture_scales:
        n = ndimage.gaussian_filter(rng.normal(size=(h, w)), s)
        tex += n / (n.std() + 1e-9)
    if domain.texture_scales:
        tex /= len(domain.texture_scales)
    tint = np.array([1.0, 0.92, 0.8])
    img += domain.texture_amplitude * tex[..., None] * tint
    return img


def _cell_shape(rng, domain: DomainSpec, radius: float) -> np.ndarray:
    """Union of perturbed ellipses on a local canvas."""
    half = int(np.ceil(radius * 2.2)) + 4
    yy, xx = np.mgrid[-half:half + 1, -half:half + 1].astype(np.float64)
    out = np.zeros(xx.shape, dtype=bool)
    k = int(rng.integers(domain.ellipses[0], domain.ellipses[1] + 1))
    for i in range(k):
        off = rng.normal(0, radius * 0.35, 2) if i else np.zeros(2)
        a = radius * rng.uniform(0.55, 0.95)
        b = a * rng.uniform(0.55, 1.0)
        th = rng.uniform(0, np.pi)
        dx, dy = xx - off[0], yy - off[1]
        u = dx * np.cos(th) + dy * np.sin(th)
        v = -dx * np.sin(th) + dy * np.cos(th)
        rho = np.sqrt((u / a) ** 2 + (v / b) ** 2)
        ang = np.arctan2(v, u)
        bound = np.ones_like(ang)
        for order in range(2, 6):
            bound += domain.fourier_amplitude / order * rng.normal() * np.cos(order * ang + rng.uniform(0, 2 * np.pi))
        out |= rho <= bound
    return out


def _paint_blotches(rng, domain: DomainSpec, img: np.ndarray) -> None:
    """Nucleus-free stained patches on the substrate (unlabelled background)."""
    h, w = img.shape[:2]
    for _ in range(int(rng.poisson(domain.blotches_per_mpx * w * h / 1e6))):
        shape = _cell_shape(rng, domain, float(rng.uniform(15, 35)))
        sh, sw = shape.shape
        if sh >= h or sw >= w:
            continue
        x0, y0 = int(rng.integers(0, w - sw + 1)), int(rng.integers(0, h - sh + 1))
        color = np.clip(np.array(domain.cell_color) + rng.normal(0, domain.cell_color_jitter, 3), 0, 1)
        a = ndimage.gaussian_filter(shape.astype(np.float64), 1.5)[..., None] * rng.uniform(0.35, 0.7)
        region = img[y0:y0 + sh, x0:x0 + sw]
        region[:] = region * (1 - a) + color * a


def _place_nuclei(rng, shape: np.ndarray, n: int, radii: np.ndarray) -> Optional[list[tuple[float, float]]]:
    inner = ndimage.binary_erosion(shape, iterations=int(np.ceil(radii.max())) + 1)
    ys, xs = np.nonzero(inner)
    if len(xs) == 0:
        return None
    pts: list[tuple[float, float]] = []
    for i in range(n):
        for _ in range(60):
            j = int(rng.integers(len(xs)))
            p = (xs[j] + 0.5, ys[j] + 0.5)
            if all(np.hypot(p[0] - q[0], p[1] - q[1]) >= radii[i] + radii[k] + 1.5 for k, q in enumerate(pts)):
                pts.append(p)
                break
        else:
            return None
    return pts


def _make_cell(rng, domain: DomainSpec, n_nuclei: int, osteoclast: bool):
    lo, hi = domain.area_per_nucleus
    target = n_nuclei * rng.uniform(lo, hi) * (1.0 if osteoclast else domain.preosteoclast_scale)
    radius = np.sqrt(target / np.pi)
    for _ in range(40):
        shape = _cell_shape(rng, domain, radius)
        area = int(shape.sum())
        if osteoclast and area < MIN_OSTEOCLAST_AREA:
            radius *= 1.1
            continue
        radii = rng.uniform(*domain.nucleus_radius, size=n_nuclei)
        nuclei = _place_nuclei(rng, shape, n_nuclei, radii)
        if nuclei is None:
            radius *= 1.08
            continue
        return shape, nuclei, radii
    raise RuntimeError("could not construct a cell satisfying the generator invariants")


def generate_slide(domain: str | DomainSpec, seed: int, size: int | tuple[int, int] = 512) -> SynthSlide:
    """Deterministic synthetic slide for ``(domain, seed, size)``.

    ``size`` is ``(width, height)`` or a single side length.
    """
    domain = get_domain(domain)
    w, h = (size, size) if isinstance(size, int) else size
    rng = _slide_rng(seed, domain, (w, h))
    img = _background(rng, domain, h, w)
    occupied = np.zeros((h, w), dtype=bool)
    mpx = w * h / 1e6
    kinds = [True] * max(1, int(rng.poisson(domain.osteoclasts_per_mpx * mpx))) + \
            [False] * int(rng.poisson(domain.preosteoclasts_per_mpx * mpx))
    rng.shuffle(kinds)
    cells: list[SynthCell] = []
    all_radii: list[float] = []
    _paint_blotches(rng, domain, img)
    tex = ndimage.gaussian_filter(rng.normal(size=(h, w)), 2.0)
    tex /= tex.std() + 1e-9
    alpha = np.zeros((h, w))
    cell_rgb = np.zeros((h, w, 3))
    for osteo in kinds:
        n = int(rng.integers(*domain.osteoclast_nuclei, endpoint=True)) if osteo else int(rng.integers(1, 3))
        shape, nuclei, radii = _make_cell(rng, domain, n, osteo)
        sh, sw = shape.shape
        if sh >= h or sw >= w:
            continue
        grown = ndimage.binary_dilation(shape, iterations=4)
        for _ in range(50):
            x0 = int(rng.integers(0, w - sw + 1))
            y0 = int(rng.integers(0, h - sh + 1))
            if not (occupied[y0:y0 + sh, x0:x0 + sw] & grown).any():
                break
        else:
            continue
        occupied[y0:y0 + sh, x0:x0 + sw] |= grown
        full = np.zeros((h, w), dtype=bool)
        full[y0:y0 + sh, x0:x0 + sw] = shape
        pts = [(x0 + px, y0 + py) for px, py in nuclei]
        cells.append(SynthCell(rle_encode(full, frame="slide"), pts))
        all_radii.extend(float(r) for r in radii)

        color = np.clip(np.array(domain.cell_color) + rng.normal(0, domain.cell_color_jitter, 3), 0, 1)
        soft = ndimage.gaussian_filter(shape.astype(np.float64), 0.8)
        density = 0.85 + 0.1 * rng.uniform()
        # nuclei: lighter disks on the stained cytoplasm
        yy, xx = np.mgrid[:sh, :sw] + 0.5
        nuc = np.zeros((sh, sw))
        for (px, py), r in zip(nuclei, radii):
            d = np.sqrt((xx - px) ** 2 + (yy - py) ** 2)
            nuc = np.maximum(nuc, np.clip(r + 0.5 - d, 0, 1))
        mix = (domain.nucleus_lightness * nuc)[..., None]
        local = color * (1 - mix) + PALE_NUCLEUS * mix
        region = (slice(y0, y0 + sh), slice(x0, x0 + sw))
        touched = soft > 1e-3
        cell_rgb[region][touched] = local[touched]
        alpha[region] = np.maximum(alpha[region], soft * density)

    cell_rgb *= 1 + 0.04 * tex[..., None]
    a = alpha[..., None]
    img = img * (1 - a) + cell_rgb * a
    if domain.blur_sigma > 0:
        img = ndimage.gaussian_filter(img, (domain.blur_sigma, domain.blur_sigma, 0))
    img += rng.normal(0, domain.noise_sigma, img.shape)
    image = np.clip(np.round(img * 255), 0, 255).astype(np.uint8)
    slide = SynthSlide(image, cells, int(seed), domain.name, all_radii)
    check_slide(slide)
    return slide


def check_slide(slide: SynthSlide) -> None:
    """Emit-time invariants; raises AssertionError on violation."""
    for c in slide.cells:
        dense = c.mask.decode()
        for x, y in c.nuclei:
            assert dense[int(y), int(x)], "nucleus outside its cell"
        if c.is_osteoclast:
            assert len(c.nuclei) >= MIN_OSTEOCLAST_NUCLEI
            assert c.mask.area >= MIN_OSTEOCLAST_AREA, f"osteoclast area {c.mask.area} below floor"
        else:
            assert 1 <= len(c.nuclei) <= 2


def degrade(slide: SynthSlide, blur_sigma: float) -> SynthSlide:
    """Gaussian-blur the image only; cells and nuclei are shared unchanged."""
    if blur_sigma <= 0:
        return replace(slide, image=slide.image.copy())
    img = ndimage.gaussian_filter(slide.image.astype(np.float64), (blur_sigma, blur_sigma, 0))
    return replace(slide, image=np.clip(np.round(img), 0, 255).astype(np.uint8))


def texture_energy(image: np.ndarray) -> float:
    gray = np.asarray(image, dtype=np.float64).mean(-1) / 255.0
    return float(np.mean(ndimage.laplace(ndimage.gaussian_filter(gray, 1.0)) ** 2) ** 0.5)


def domain_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Mean-colour distance plus texture-energy difference of two images."""
    ca = np.asarray(a, dtype=np.float64).reshape(-1, 3).mean(0) / 255.0
    cb = np.asarray(b, dtype=np.float64).reshape(-1, 3).mean(0) / 255.0
    return float(np.linalg.norm(ca - cb) + abs(texture_energy(a) - texture_energy(b)) * 10)


def batch_ids(domain: str | DomainSpec) -> tuple[str, ...]:
    return BATCHES[get_domain(domain).name]


def generate_corpus(domain: str | DomainSpec, n_slides: int, seed: int, size: int = 512,
                    out_dir=None) -> list[tuple[str, SynthSlide]]:
    """``n_slides`` slides with batch labels assigned round-robin.

    Slide ``i`` uses seed ``seed * 1000 + i``. When ``out_dir`` is given the
    corpus is written in the dataset layout read by :mod:`noiseseg.io`.
    """
    domain = get_domain(domain)
    batches = batch_ids(domain)
    corpus = [(batches[i % len(batches)], generate_slide(domain, seed * 1000 + i, size)) for i in range(n_slides)]
    if out_dir is not None:
        from .io import write_corpus

        write_corpus(out_dir, corpus, domain, seed, size)
    return corpus
