"""Synthetic paired-view "stone fragment" images.

Each fragment yields one surface (SUR) and one section (SEC) image. The
appearance is driven by four per-class knobs: base color, color spread
between fragments, a texture frequency band and a blob density. Section
images add concentric layering around a darker nucleus. A second domain is
produced by pushing the same generative family through a fixed degradation
chain (blur, noise, vignette, contrast jitter).
"""

from __future__ import annotations

import colorsys
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .data_pipeline import DatasetManifest, ImageEntry, write_manifest
from .errors import SynthError

DEFAULT_CLASS_NAMES = ("WW", "WD", "UA", "STR", "BRU", "CYS")
SIDECAR = "synth_spec.json"


@dataclass(frozen=True)
class ClassTexture:
    color_mean: tuple[float, float, float]
    color_spread: float
    freq_band: tuple[float, float]  # cycles per pixel
    blob_density: float  # fraction of the image covered by blobs


@dataclass(frozen=True)
class Degradation:
    strength: float = 0.0
    blur_sigma: float = 1.6
    noise_std: float = 0.01
    vignette: float = 0.45
    contrast_jitter: float = 0.3


@dataclass(frozen=True)
class SynthSpec:
    num_classes: int = 6
    images_per_class_per_view: int = 25
    image_size: tuple[int, int] = (288, 384)
    texture_params: tuple[ClassTexture, ...] | None = None
    view_correlation: float = 0.5
    seed: int = 0
    class_names: tuple[str, ...] | None = None
    dataset_id: str = "synthA"
    degradation: Degradation = field(default_factory=Degradation)

    def resolved(self) -> "SynthSpec":
        spec = self
        if spec.texture_params is None:
            spec = replace(spec, texture_params=default_texture_params(spec.num_classes))
        if spec.class_names is None:
            names = DEFAULT_CLASS_NAMES if spec.num_classes == len(DEFAULT_CLASS_NAMES) else tuple(
                f"C{k}" for k in range(spec.num_classes)
            )
            spec = replace(spec, class_names=tuple(names))
        return spec

    def validate(self) -> None:
        if self.num_classes < 1:
            raise SynthError("num_classes must be positive")
        if self.images_per_class_per_view < 1:
            raise SynthError("images_per_class_per_view must be positive")
        if min(self.image_size) < 8:
            raise SynthError("image_size too small")
        if not 0.0 <= self.view_correlation <= 1.0:
            raise SynthError("view_correlation must lie in [0, 1]")
        if self.degradation.strength < 0:
            raise SynthError("degradation strength must be non-negative")
        spec = self.resolved()
        if len(spec.texture_params) != spec.num_classes or len(spec.class_names) != spec.num_classes:
            raise SynthError("texture_params/class_names length differs from num_classes")
        if len(set(spec.class_names)) != spec.num_classes:
            raise SynthError("class names must be distinct")
        keys = [
            (t.color_mean, t.color_spread, t.freq_band, t.blob_density) for t in spec.texture_params
        ]
        if len(set(keys)) != len(keys):
            raise SynthError("class texture parameters must be pairwise distinct")

    def to_dict(self) -> dict:
        d = asdict(self.resolved())
        d["texture_params"] = [asdict(t) for t in self.resolved().texture_params]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        if d.get("texture_params") is not None:
            d["texture_params"] = tuple(
                ClassTexture(tuple(t["color_mean"]), t["color_spread"], tuple(t["freq_band"]), t["blob_density"])
                for t in d["texture_params"]
            )
        if d.get("class_names") is not None:
            d["class_names"] = tuple(d["class_names"])
        d["image_size"] = tuple(d["image_size"])
        d["degradation"] = Degradation(**d.get("degradation", {}))
        return cls(**d)


def default_texture_params(num_classes: int) -> tuple[ClassTexture, ...]:
    out = []
    for k in range(num_classes):
        hue = k / num_classes
        rgb = colorsys.hsv_to_rgb(hue, 0.45, 0.72)
        lo = 0.03 + 0.05 * (k % 3)
        out.append(
            ClassTexture(
                color_mean=tuple(round(0.15 + 0.7 * c, 4) for c in rgb),
                color_spread=0.04,
                freq_band=(round(lo, 4), round(lo + 0.06, 4)),
                blob_density=(0.08, 0.22, 0.36)[(k // 3 + k) % 3],
            )
        )
    return tuple(out)


# --------------------------------------------------------------------------
# generation
# --------------------------------------------------------------------------


def _bandpass(z: np.ndarray, band: tuple[float, float]) -> np.ndarray:
    h, w = z.shape
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    r = np.sqrt(fx**2 + fy**2)
    mask = (r >= band[0]) & (r <= band[1])
    out = np.real(np.fft.ifft2(np.fft.fft2(z) * mask))
    s = out.std()
    return out / s if s > 0 else out


def fragment_latents(spec: SynthSpec, class_idx: int, frag_idx: int) -> dict[str, dict]:
    """Latent draws for the SUR and SEC image of one fragment.

    SEC fields are ``c * sur + sqrt(1 - c^2) * independent`` with ``c`` the
    view correlation, so ``c = 1`` gives identical draws.
    """
    spec = spec.resolved()
    h, w = spec.image_size
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, class_idx, frag_idx]))
    tex = spec.texture_params[class_idx]
    color = np.clip(np.asarray(tex.color_mean) + rng.normal(0, tex.color_spread, 3), 0.05, 0.95)
    sur_t, sur_b = rng.standard_normal((h, w)), rng.standard_normal((h, w))
    ind_t, ind_b = rng.standard_normal((h, w)), rng.standard_normal((h, w))
    c = spec.view_correlation
    k = math.sqrt(max(0.0, 1.0 - c * c))
    center = (h / 2 + rng.uniform(-0.1, 0.1) * h, w / 2 + rng.uniform(-0.1, 0.1) * w)
    sur = {"color": color, "texture": sur_t, "blobs": sur_b}
    sec = {"color": color, "texture": c * sur_t + k * ind_t, "blobs": c * sur_b + k * ind_b, "center": center}
    return {"SUR": sur, "SEC": sec}


def _render(spec: SynthSpec, class_idx: int, latent: dict, view: str) -> np.ndarray:
    h, w = spec.image_size
    tex = spec.texture_params[class_idx]
    texture = _bandpass(latent["texture"], tex.freq_band)
    blob_field = ndimage.gaussian_filter(latent["blobs"], sigma=max(2.0, min(h, w) / 40))
    blob_field = (blob_field - blob_field.mean()) / (blob_field.std() + 1e-12)
    thr = float(np.quantile(blob_field, 1.0 - tex.blob_density))
    mask = 1.0 / (1.0 + np.exp(-4.0 * (blob_field - thr)))
    base = latent["color"]
    blob_color = np.clip(1.0 - base, 0.05, 0.95)
    shade = 1.0 + 0.3 * texture
    img = (base[None, None, :] * (1 - mask[..., None]) + blob_color[None, None, :] * mask[..., None]) * shade[..., None]
    if view == "SEC":
        cy, cx = latent["center"]
        yy, xx = np.mgrid[0:h, 0:w]
        radius = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        period = 1.0 / sum(tex.freq_band)
        rings = 0.5 * (1 + np.cos(2 * math.pi * radius / period))
        nucleus = np.exp(-((radius / (0.12 * min(h, w))) ** 2))
        img = img * (0.7 + 0.3 * rings[..., None]) * (1 - 0.5 * nucleus[..., None])
    return np.clip(img, 0.0, 1.0)


def degrade(img: np.ndarray, deg: Degradation, rng: np.random.Generator) -> np.ndarray:
    """Blur, then noise, then vignette, then contrast jitter."""
    if deg.strength == 0:
        return img
    s = deg.strength
    out = ndimage.gaussian_filter(img, sigma=(deg.blur_sigma * s, deg.blur_sigma * s, 0))
    out = out + rng.normal(0, deg.noise_std * s, out.shape)
    h, w = out.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w]
    r2 = ((yy - h / 2) ** 2 + (xx - w / 2) ** 2) / ((h / 2) ** 2 + (w / 2) ** 2)
    out = out * (1 - deg.vignette * s * r2)[..., None]
    factor = 1 + deg.contrast_jitter * s * rng.uniform(-1, 1)
    mean = out.mean(axis=(0, 1), keepdims=True)
    out = (out - mean) * factor + mean
    return np.clip(out, 0.0, 1.0)


def render_fragment(spec: SynthSpec, class_idx: int, frag_idx: int) -> dict[str, np.ndarray]:
    """Float RGB images ``(H, W, 3)`` for both views of one fragment."""
    spec = spec.resolved()
    latents = fragment_latents(spec, class_idx, frag_idx)
    out = {}
    for vi, view in enumerate(("SUR", "SEC")):
        img = _render(spec, class_idx, latents[view], view)
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, class_idx, frag_idx, 7919, vi]))
        out[view] = degrade(img, spec.degradation, rng)
    return out


def _to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(img * 255.0).astype(np.uint8)


def generate_dataset(spec: SynthSpec, out) -> DatasetManifest:
    """Write images, ``manifest.csv`` and a JSON sidecar of the SynthSpec."""
    spec.validate()
    spec = spec.resolved()
    out = Path(out)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise SynthError(f"cannot write to {out}: {exc}") from exc
    h, w = spec.image_size
    entries = []
    for k, cls in enumerate(spec.class_names):
        for j in range(spec.images_per_class_per_view):
            views = render_fragment(spec, k, j)
            frag = f"{spec.dataset_id}-{cls}-{j:04d}"
            for view in ("SUR", "SEC"):
                image_id = f"{frag}_{view}"
                path = out / "images" / f"{image_id}.png"
                Image.fromarray(_to_uint8(views[view])).save(path)
                entries.append(ImageEntry(image_id, path, view, cls, w, h))
    manifest = DatasetManifest(spec.dataset_id, entries, list(spec.class_names))
    manifest.validate(expected_classes=None)
    write_manifest(manifest, out / "manifest.csv")
    (out / SIDECAR).write_text(json.dumps(spec.to_dict(), indent=2) + "\n", encoding="utf-8")
    return manifest


def default_pair_specs(
    per_class: int = 25,
    seed: int = 0,
    num_classes: int = 6,
    image_size: tuple[int, int] = (288, 384),
    strength: float = 1.0,
) -> tuple[SynthSpec, SynthSpec]:
    """Clean domain A and degraded domain B, with disjoint fragment draws."""
    a = SynthSpec(
        num_classes=num_classes,
        images_per_class_per_view=per_class,
        image_size=tuple(image_size),
        seed=seed,
        dataset_id="synthA",
    ).resolved()
    b = replace(a, seed=seed + 100_003, dataset_id="synthB", degradation=Degradation(strength=strength))
    return a, b


def two_domain_pair(spec_a: SynthSpec, spec_b: SynthSpec, out) -> tuple[DatasetManifest, DatasetManifest]:
    """Generate domain A under ``out/A`` and domain B under ``out/B``.

    Domain B reuses A's class texture family; only its own seed, size and
    degradation settings are taken from ``spec_b``.
    """
    if spec_a.num_classes != spec_b.num_classes:
        raise SynthError(f"class-count mismatch: {spec_a.num_classes} vs {spec_b.num_classes}")
    a = spec_a.resolved()
    b = replace(spec_b, texture_params=a.texture_params, class_names=spec_b.class_names or a.class_names)
    out = Path(out)
    return generate_dataset(a, out / "A"), generate_dataset(b, out / "B")


def laplacian_variance(img: np.ndarray) -> float:
    """Sharpness proxy: variance of the Laplacian of the gray image."""
    gray = img.mean(axis=2) if img.ndim == 3 else img
    return float(ndimage.laplace(gray.astype(np.float64)).var())
