"""Procedural toy domains: a lung-like paired-ellipse family and a brain-like
ring family. Desk-scale stand-ins for the chest X-ray and brain MR datasets;
every image comes with a ground-truth anatomy mask and a patient manifest.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..errors import require
from ..image import Image, SegMask, save_image
from ..tensorfile import write_tensor

FAMILIES = ("ellipse-pair", "ring")


@dataclass(frozen=True)
class DomainSpec:
    name: str
    family: str
    size: int = 64
    n_patients: int = 10
    images_per_patient: int = 3
    texture_strength: float = 0.18
    seed: int = 0

    def __post_init__(self):
        require(self.family in FAMILIES, f"family must be one of {FAMILIES}")
        require(self.n_patients >= 2, "need at least 2 patients")
        require(self.size % 4 == 0, "size must be divisible by 4")
        require(self.images_per_patient >= 1, "need at least one image per patient")


def _smooth_noise(shape, rng, cells=6):
    """Bilinearly upsampled coarse noise in [0, 1]."""
    coarse = rng.random((cells + 2, cells + 2))
    ys = np.linspace(0, cells, shape[0])
    xs = np.linspace(0, cells, shape[1])
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    u = (ys - y0)[:, None]
    v = (xs - x0)[None, :]
    c00 = coarse[y0][:, x0]
    c01 = coarse[y0][:, x0 + 1]
    c10 = coarse[y0 + 1][:, x0]
    c11 = coarse[y0 + 1][:, x0 + 1]
    return c00 * (1 - u) * (1 - v) + c01 * (1 - u) * v + c10 * u * (1 - v) + c11 * u * v


def _ellipse_field(shape, center, axes, angle):
    """Normalized quadratic distance: <= 1 inside the ellipse."""
    rr, cc = np.meshgrid(np.arange(shape[0], dtype=float),
                         np.arange(shape[1], dtype=float), indexing="ij")
    dr = rr - center[0]
    dc = cc - center[1]
    u = np.cos(angle) * dr + np.sin(angle) * dc
    v = -np.sin(angle) * dr + np.cos(angle) * dc
    return (u / axes[0]) ** 2 + (v / axes[1]) ** 2


def _soft_edge(d, steep=9.0):
    return 1.0 / (1.0 + np.exp(np.clip((d - 1.0) * steep, -60.0, 60.0)))


def _render_ellipse_pair(spec, geom, rng):
    s = spec.size
    shape = (s, s)
    img = np.full(shape, 0.08)
    mask = np.zeros(shape, dtype=np.uint8)
    for center, axes, angle in geom:
        d = _ellipse_field(shape, center, axes, angle)
        soft = _soft_edge(d)
        tex = 1.0 + spec.texture_strength * (2.0 * _smooth_noise(shape, rng) - 1.0)
        img = np.maximum(img, soft * 0.78 * tex)
        mask |= (d <= 1.0).astype(np.uint8)
    img += 0.01 * (2.0 * _smooth_noise(shape, rng, cells=12) - 1.0)
    return Image(np.clip(img, 0.0, 1.0)), SegMask(mask)


def _render_ring(spec, geom, rng):
    s = spec.size
    shape = (s, s)
    center, r_out, r_in, vent = geom
    img = np.full(shape, 0.08)
    d_out = _ellipse_field(shape, center, (r_out, r_out * 0.92), 0.0)
    d_in = _ellipse_field(shape, center, (r_in, r_in * 0.92), 0.0)
    ring_soft = _soft_edge(d_out) * (1.0 - _soft_edge(d_in, steep=7.0))
    tex = 1.0 + spec.texture_strength * (2.0 * _smooth_noise(shape, rng) - 1.0)
    img = np.maximum(img, ring_soft * 0.8 * tex)
    img = np.maximum(img, _soft_edge(d_in, steep=7.0) * 0.3)
    d_vent = _ellipse_field(shape, vent[0], vent[1], vent[2])
    img = np.where(_soft_edge(d_vent) > 0.5, 0.16, img)
    img += 0.01 * (2.0 * _smooth_noise(shape, rng, cells=12) - 1.0)
    mask = ((d_out <= 1.0) & (d_in > 1.0)).astype(np.uint8)
    return Image(np.clip(img, 0.0, 1.0)), SegMask(mask)


def _patient_geometry(spec, patient_rng):
    s = spec.size
    if spec.family == "ellipse-pair":
        cy = s * 0.5 + patient_rng.uniform(-2, 2)
        gap = s * 0.21 + patient_rng.uniform(-1.5, 1.5)
        a = s * 0.27 * (1 + patient_rng.uniform(-0.08, 0.08))
        b = s * 0.13 * (1 + patient_rng.uniform(-0.08, 0.08))
        tilt = patient_rng.uniform(-0.12, 0.12)
        return {"cy": cy, "gap": gap, "a": a, "b": b, "tilt": tilt}
    r_out = s * 0.33 * (1 + patient_rng.uniform(-0.07, 0.07))
    r_in = r_out * (0.58 + patient_rng.uniform(-0.04, 0.04))
    vy = s * 0.5 + patient_rng.uniform(-2, 2)
    vx = s * 0.5 + patient_rng.uniform(-2, 2)
    va = s * 0.07 * (1 + patient_rng.uniform(-0.15, 0.15))
    return {"r_out": r_out, "r_in": r_in, "vy": vy, "vx": vx, "va": va}


def _visit_image(spec, base_geom, patient_idx, visit_idx):
    rng = np.random.default_rng([spec.seed, patient_idx, visit_idx])
    s = spec.size
    dy = rng.uniform(-1.5, 1.5)
    dx = rng.uniform(-1.5, 1.5)
    dtheta = rng.uniform(-0.06, 0.06)
    scale = 1.0 + rng.uniform(-0.03, 0.03)
    if spec.family == "ellipse-pair":
        g = base_geom
        cy = g["cy"] + dy
        geom = []
        for side in (-1.0, 1.0):
            cx = s * 0.5 + side * g["gap"] + dx
            geom.append(((cy, cx), (g["a"] * scale, g["b"] * scale),
                         side * g["tilt"] + dtheta))
        return _render_ellipse_pair(spec, geom, rng)
    g = base_geom
    center = (s * 0.5 + dy, s * 0.5 + dx)
    vent = ((g["vy"] + dy, g["vx"] + dx), (g["va"], g["va"] * 1.4), dtheta)
    return _render_ring(spec, (center, g["r_out"] * scale, g["r_in"] * scale, vent), rng)


def generate_domain(spec: DomainSpec):
    """All patients in memory: list of (patient_id, [(Image, SegMask), ...])."""
    out = []
    for p in range(spec.n_patients):
        patient_rng = np.random.default_rng([spec.seed, p, 10_000])
        base_geom = _patient_geometry(spec, patient_rng)
        visits = [_visit_image(spec, base_geom, p, v)
                  for v in range(spec.images_per_patient)]
        out.append((f"p{p:03d}", visits))
    return out


def synth_domain(spec: DomainSpec, out_dir) -> dict:
    """Emit images (16-bit PNG), masks (SART tensors) and the patient manifest."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    patients = []
    for patient_id, visits in generate_domain(spec):
        entries = []
        for v, (img, mask) in enumerate(visits):
            img_rel = f"images/{patient_id}_v{v}.png"
            mask_rel = f"masks/{patient_id}_v{v}.sart"
            save_image(img, out_dir / img_rel, bits=16)
            write_tensor(out_dir / mask_rel, mask.pixels)
            entries.append({"image": img_rel, "mask": mask_rel})
        patients.append({"id": patient_id, "images": entries})
    manifest = {"name": spec.name, "spec": asdict(spec), "patients": patients}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest
