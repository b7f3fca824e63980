"""Dataset manifest: one JSON document describing slides, splits and patch labels.

Paths inside the manifest are stored relative to the manifest file so a
dataset directory can be moved wholesale.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ManifestError

MANIFEST_VERSION = 1

DIAGNOSES = ("positive", "negative", "unknown")
SPLITS = ("train", "test", "unassigned")
PATCH_LABELS = ("positive", "negative", "unlabeled")


@dataclass
class PatchRecord:
    patch_path: str
    origin: tuple[int, int]
    label: str = "unlabeled"


@dataclass
class SlideRecord:
    slide_id: str
    image_path: str
    diagnosis: str = "unknown"
    split: str = "unassigned"
    patches: list[PatchRecord] = field(default_factory=list)


@dataclass
class Manifest:
    slides: list[SlideRecord] = field(default_factory=list)
    version: int = MANIFEST_VERSION
    root: Path | None = None  # directory of the manifest file, set on load/save

    def resolve(self, rel_path: str) -> Path:
        if self.root is None:
            return Path(rel_path)
        return self.root / rel_path

    def slides_in(self, split: str | None = None, diagnosis: str | None = None):
        out = self.slides
        if split is not None:
            out = [s for s in out if s.split == split]
        if diagnosis is not None:
            out = [s for s in out if s.diagnosis == diagnosis]
        return out

    def validate(self, check_paths: bool = True) -> None:
        """Reject duplicate ids, unknown enum values and dangling paths."""
        seen = set()
        for s in self.slides:
            if s.slide_id in seen:
                raise ManifestError(f"duplicate slide_id {s.slide_id!r}")
            seen.add(s.slide_id)
            if s.diagnosis not in DIAGNOSES:
                raise ManifestError(f"slide {s.slide_id!r}: bad diagnosis {s.diagnosis!r}")
            if s.split not in SPLITS:
                raise ManifestError(f"slide {s.slide_id!r}: bad split {s.split!r}")
            for p in s.patches:
                if p.label not in PATCH_LABELS:
                    raise ManifestError(
                        f"slide {s.slide_id!r}: patch {p.patch_path!r} has bad label {p.label!r}"
                    )
            if check_paths:
                if not self.resolve(s.image_path).is_file():
                    raise ManifestError(
                        f"slide {s.slide_id!r}: missing image {s.image_path!r}"
                    )
                for p in s.patches:
                    if p.label != "unlabeled" and not self.resolve(p.patch_path).is_file():
                        raise ManifestError(
                            f"slide {s.slide_id!r}: missing labeled patch {p.patch_path!r}"
                        )

    def to_json(self) -> str:
        doc = {
            "version": self.version,
            "slides": [
                {
                    "slide_id": s.slide_id,
                    "image_path": s.image_path,
                    "diagnosis": s.diagnosis,
                    "split": s.split,
                    "patches": [
                        {
                            "patch_path": p.patch_path,
                            "origin": list(p.origin),
                            "label": p.label,
                        }
                        for p in s.patches
                    ],
                }
                for s in self.slides
            ],
        }
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"

    def save(self, path) -> None:
        path = Path(path)
        self.root = path.parent
        path.write_text(self.to_json())


def load_manifest(path, check_paths: bool = True) -> Manifest:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict) or "slides" not in doc:
        raise ManifestError(f"{path}: missing 'slides' key")
    version = doc.get("version")
    if version != MANIFEST_VERSION:
        raise ManifestError(f"{path}: unsupported manifest version {version!r}")
    slides = []
    try:
        for s in doc["slides"]:
            patches = [
                PatchRecord(
                    patch_path=p["patch_path"],
                    origin=(int(p["origin"][0]), int(p["origin"][1])),
                    label=p.get("label", "unlabeled"),
                )
                for p in s.get("patches", [])
            ]
            slides.append(
                SlideRecord(
                    slide_id=s["slide_id"],
                    image_path=s["image_path"],
                    diagnosis=s.get("diagnosis", "unknown"),
                    split=s.get("split", "unassigned"),
                    patches=patches,
                )
            )
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise ManifestError(f"{path}: malformed slide entry ({exc})") from exc
    manifest = Manifest(slides=slides, version=version, root=path.parent)
    manifest.validate(check_paths=check_paths)
    return manifest
