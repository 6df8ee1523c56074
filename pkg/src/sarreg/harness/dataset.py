"""Dataset ingestion: the manifest layout written by synth_domain doubles as
the ingestion format for real datasets (images + masks + manifest.json)."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from ..errors import require
from ..image import Image, SegMask, load_image
from ..tensorfile import read_tensor


@dataclass(frozen=True)
class PatientCase:
    patient_id: str
    images: tuple[Image, ...]
    masks: tuple[SegMask, ...]

    def __post_init__(self):
        require(len(self.images) == len(self.masks) >= 1,
                "each image needs a mask")


def load_domain(domain_dir) -> list[PatientCase]:
    domain_dir = Path(domain_dir)
    manifest_path = domain_dir / "manifest.json"
    require(manifest_path.exists(), f"no manifest.json in {domain_dir}")
    manifest = json.loads(manifest_path.read_text())
    cases = []
    for patient in manifest["patients"]:
        images = []
        masks = []
        for entry in patient["images"]:
            images.append(load_image(domain_dir / entry["image"]))
            masks.append(SegMask(read_tensor(domain_dir / entry["mask"])))
        cases.append(PatientCase(patient["id"], tuple(images), tuple(masks)))
    require(len(cases) >= 1, "manifest lists no patients")
    return cases
