"""Manifest-driven export: one FPYR file plus one ``.meta.json`` sidecar
per image, written atomically. The sidecar records exactly which
extraction produced the file (model id, timestep, pathway, backend) so
downstream experiments stay comparable.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field

from .backends import make_backend
from .errors import InputError
from .fpyr import write_fpyr
from .preprocess import preprocess, read_manifest

DEFAULT_MODEL_ID = "runwayml/stable-diffusion-v1-5"


@dataclass
class ExportConfig:
    model_id: str = DEFAULT_MODEL_ID
    timestep: int = 0
    pathway: str = "latent"  # latent | pixel
    backend: str = "hub"  # hub | surrogate
    out_dir: str = "features"

    def validate(self) -> None:
        if self.pathway not in ("latent", "pixel"):
            raise InputError(f"pathway must be latent|pixel, got {self.pathway!r}")
        if self.timestep < 0:
            raise InputError(f"timestep must be >= 0, got {self.timestep}")

    def meta(self, backend_name: str) -> dict:
        return {
            "model_id": self.model_id,
            "timestep": self.timestep,
            "pathway": self.pathway,
            "backend": backend_name,
        }


def _write_json_atomic(path: str, payload: dict) -> None:
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".json.tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            json.dump(payload, f, sort_keys=True)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def export(manifest_path: str, cfg: ExportConfig, root_dir: str | None = None) -> list[str]:
    """Extract and write a pyramid for every manifest image; returns the
    FPYR paths in manifest order."""
    cfg.validate()
    rows = read_manifest(manifest_path)
    backend = make_backend(cfg.backend, cfg.model_id, cfg.timestep, cfg.pathway)
    os.makedirs(cfg.out_dir, exist_ok=True)

    written = []
    meta = cfg.meta(backend.name)
    for name, _score in rows:
        img = preprocess(name, root_dir=root_dir)
        scales = backend.extract(img)
        stem = os.path.splitext(os.path.basename(name))[0]
        out_path = os.path.join(cfg.out_dir, stem + ".fpyr")
        write_fpyr(out_path, scales)
        _write_json_atomic(os.path.join(cfg.out_dir, stem + ".meta.json"), meta)
        written.append(out_path)
    return written
