"""
Geometry manifests: one JSON schema for simulated and real acquisitions.

    {
      "volume":   {"shape": [W, H, D], "spacing": [sx, sy, sz]},
      "detector": {"shape": [w, h], "spacing": [p_u, p_v]},
      "circular": {"n_views": N, "start_angle": 0.0, "delta_theta": 360 / N,
                   "source_to_object": L_sb, "object_to_detector": L_bd},
      "views":    [{"source": [...], "detector_center": [...],
                    "u": [...], "v": [...]}, ...],
      "normalization": {"mean": 0.0, "std": 1.0}
    }

Exactly one of "circular" and "views" is present. Circular manifests expand
to poses through geometry.view_pose; explicit views are used verbatim
(detector "spacing" is then optional since u and v carry it).
"""

from dataclasses import dataclass
import json
from pathlib import Path
import re

import numpy as np

from cbct_lab.config import GEOMETRY_PRESETS
from cbct_lab.errors import ManifestError
from cbct_lab.geometry import ScanConfig, ViewPose, circular_poses

TOP_LEVEL_KEYS = {"format", "volume", "detector", "circular", "views", "normalization"}
CIRCULAR_KEYS = {"n_views", "start_angle", "delta_theta", "source_to_object", "object_to_detector"}
VIEW_KEYS = ("source", "detector_center", "u", "v")


@dataclass(eq=False)
class GeometryManifest:
    volume_shape: tuple[int, int, int]
    volume_spacing: tuple[float, float, float]
    detector_shape: tuple[int, int]
    detector_spacing: tuple[float, float] | None = None
    scan: ScanConfig | None = None
    views: list[dict] | None = None
    normalization: tuple[float, float] | None = None

    def __post_init__(self):
        if (self.scan is None) == (self.views is None):
            raise ManifestError("exactly one of 'circular' and 'views' must be given")

    @property
    def n_views(self) -> int:
        return self.scan.n_views if self.scan is not None else len(self.views)

    @property
    def is_circular(self) -> bool:
        return self.scan is not None

    def poses(self) -> list[ViewPose]:
        if self.scan is not None:
            return circular_poses(self.scan)
        return [ViewPose.from_vectors(v["source"], v["detector_center"], v["u"], v["v"],
                                      self.detector_shape) for v in self.views]

    def to_dict(self) -> dict:
        out = {
            "volume": {"shape": list(self.volume_shape), "spacing": list(self.volume_spacing)},
            "detector": {"shape": list(self.detector_shape)},
        }
        if self.detector_spacing is not None:
            out["detector"]["spacing"] = list(self.detector_spacing)
        if self.scan is not None:
            out["circular"] = {
                "n_views": self.scan.n_views,
                "start_angle": self.scan.start_angle,
                "delta_theta": self.scan.delta_theta,
                "source_to_object": self.scan.source_to_object,
                "object_to_detector": self.scan.object_to_detector,
            }
        else:
            out["views"] = [{k: [float(x) for x in v[k]] for k in VIEW_KEYS} for v in self.views]
        if self.normalization is not None:
            out["normalization"] = {"mean": self.normalization[0], "std": self.normalization[1]}
        return out

    def to_text(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def with_normalization(self, mean, std) -> "GeometryManifest":
        return GeometryManifest(self.volume_shape, self.volume_spacing, self.detector_shape,
                                self.detector_spacing, self.scan, self.views,
                                (float(mean), float(std)))


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

def _line_of(text, key):
    match = re.search(rf'"{re.escape(key)}"\s*:', text)
    return text.count("\n", 0, match.start()) + 1 if match else None


def _require(section, key, text, where):
    if not isinstance(section, dict) or key not in section:
        raise ManifestError(f"missing required key in {where}", field=f"{where}.{key}",
                            line=_line_of(text, where))
    return section[key]


def _numbers(value, count, field, text, integer=False, positive=True):
    line = _line_of(text, field.split(".")[-1])
    if not isinstance(value, list) or len(value) != count:
        raise ManifestError(f"expected a list of {count} numbers", field=field, line=line)
    out = []
    for x in value:
        if isinstance(x, bool) or not isinstance(x, (int, float)) or not np.isfinite(x):
            raise ManifestError(f"non-numeric or non-finite value {x!r}", field=field, line=line)
        if integer and int(x) != x:
            raise ManifestError(f"expected integers, got {x!r}", field=field, line=line)
        if positive and not x > 0:
            raise ManifestError(f"values must be > 0, got {x!r}", field=field, line=line)
        out.append(int(x) if integer else float(x))
    return tuple(out)


def parse_manifest(text: str) -> GeometryManifest:
    """Validate a manifest document; errors carry the offending line and field."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"malformed manifest: {exc.msg}", line=exc.lineno) from exc
    if not isinstance(doc, dict):
        raise ManifestError("manifest must be a key/value document", line=1)
    unknown = set(doc) - TOP_LEVEL_KEYS
    if unknown:
        key = sorted(unknown)[0]
        raise ManifestError("unknown key", field=key, line=_line_of(text, key))

    has_circular, has_views = "circular" in doc, "views" in doc
    if has_circular and has_views:
        raise ManifestError("'circular' and 'views' are mutually exclusive",
                            field="views", line=_line_of(text, "views"))
    if not has_circular and not has_views:
        raise ManifestError("one of 'circular' or 'views' is required", field="circular")

    volume = _require(doc, "volume", text, "manifest")
    volume_shape = _numbers(_require(volume, "shape", text, "volume"), 3, "volume.shape", text,
                            integer=True)
    volume_spacing = _numbers(_require(volume, "spacing", text, "volume"), 3, "volume.spacing", text)
    detector = _require(doc, "detector", text, "manifest")
    detector_shape = _numbers(_require(detector, "shape", text, "detector"), 2, "detector.shape",
                              text, integer=True)
    detector_spacing = None
    if "spacing" in detector:
        detector_spacing = _numbers(detector["spacing"], 2, "detector.spacing", text)

    scan, views = None, None
    if has_circular:
        scan = _parse_circular(doc["circular"], detector_shape, detector_spacing, text)
    else:
        views = _parse_views(doc["views"], text)

    normalization = None
    if "normalization" in doc:
        norm = doc["normalization"]
        mean = _numbers([_require(norm, "mean", text, "normalization")], 1, "normalization.mean",
                        text, positive=False)[0]
        std = _numbers([_require(norm, "std", text, "normalization")], 1, "normalization.std",
                       text)[0]
        normalization = (mean, std)

    return GeometryManifest(volume_shape, volume_spacing, detector_shape, detector_spacing,
                            scan, views, normalization)


def _parse_circular(section, detector_shape, detector_spacing, text):
    if not isinstance(section, dict):
        raise ManifestError("'circular' must be a key/value section", field="circular",
                            line=_line_of(text, "circular"))
    unknown = set(section) - CIRCULAR_KEYS
    if unknown:
        key = sorted(unknown)[0]
        raise ManifestError("unknown key", field=f"circular.{key}", line=_line_of(text, key))
    if detector_spacing is None:
        raise ManifestError("circular manifests need detector spacing", field="detector.spacing",
                            line=_line_of(text, "detector"))
    n_views = _numbers([_require(section, "n_views", text, "circular")], 1, "circular.n_views",
                       text, integer=True)[0]
    values = {
        "source_to_object": _require(section, "source_to_object", text, "circular"),
        "object_to_detector": _require(section, "object_to_detector", text, "circular"),
        "start_angle": section.get("start_angle", 0.0),
        "delta_theta": section.get("delta_theta", 360.0 / n_views),
    }
    for key, value in values.items():
        _numbers([value], 1, f"circular.{key}", text, positive=False)
    try:
        return ScanConfig(n_views=n_views, detector_shape=detector_shape,
                          detector_spacing=detector_spacing,
                          **{k: float(v) for k, v in values.items()})
    except ValueError as exc:
        raise ManifestError(str(exc), field="circular", line=_line_of(text, "circular")) from exc


def _parse_views(section, text):
    if not isinstance(section, list) or not section:
        raise ManifestError("'views' must be a non-empty list", field="views",
                            line=_line_of(text, "views"))
    views = []
    for i, view in enumerate(section):
        if not isinstance(view, dict):
            raise ManifestError("each view must be a key/value section", field=f"views[{i}]",
                                line=_line_of(text, "views"))
        parsed = {}
        for key in VIEW_KEYS:
            if key not in view:
                raise ManifestError("missing view vector", field=f"views[{i}].{key}",
                                    line=_line_of(text, "views"))
            parsed[key] = _numbers(view[key], 3, f"views[{i}].{key}", text, positive=False)
        if np.linalg.norm(np.cross(parsed["u"], parsed["v"])) == 0:
            raise ManifestError("u and v are parallel", field=f"views[{i}]",
                                line=_line_of(text, "views"))
        views.append(parsed)
    return views


def load_manifest(path) -> GeometryManifest:
    return parse_manifest(Path(path).read_text())


def write_manifest(manifest: GeometryManifest, path):
    Path(path).write_text(manifest.to_text() + "\n")


# ---------------------------------------------------------------------------
# Presets and converters
# ---------------------------------------------------------------------------

def preset_manifest(name, n_views, start_angle=0.0) -> GeometryManifest:
    """Uniform circular manifest (delta_theta = 360 / n_views) for a named preset."""
    if name not in GEOMETRY_PRESETS:
        raise ValueError(f"unknown geometry preset {name!r}; choose from {sorted(GEOMETRY_PRESETS)}")
    p = GEOMETRY_PRESETS[name]
    scan = ScanConfig.uniform(n_views, p["source_to_object"], p["object_to_detector"],
                              p["detector_shape"], p["detector_spacing"], start_angle)
    return GeometryManifest(tuple(p["volume_shape"]), tuple(p["volume_spacing"]),
                            tuple(p["detector_shape"]), tuple(p["detector_spacing"]), scan=scan)


def load_walnut_geometry(path, detector_shape, volume_shape, volume_spacing, n_views=None,
                         normalization=None) -> GeometryManifest:
    """
    Convert a twelve-column cone-vector file into an explicit-view manifest.

    Each row holds source (3), detector center (3), u (3) and v (3) in mm,
    u along detector columns. n_views keeps that many uniformly spaced rows.
    """
    vecs = np.atleast_2d(np.loadtxt(path))
    if vecs.shape[1] != 12:
        raise ManifestError(f"expected 12 columns, got {vecs.shape[1]}", field="vectors", line=1)
    if not np.all(np.isfinite(vecs)):
        bad = int(np.argmax(~np.all(np.isfinite(vecs), axis=1)))
        raise ManifestError("non-finite geometry vector", field="vectors", line=bad + 1)
    if n_views is not None:
        if not 1 <= n_views <= len(vecs):
            raise ValueError(f"n_views must lie in [1, {len(vecs)}], got {n_views}")
        vecs = vecs[np.linspace(0, len(vecs), n_views, endpoint=False).astype(int)]
    views = [dict(zip(VIEW_KEYS, (tuple(row[i:i + 3]) for i in range(0, 12, 3)))) for row in vecs]
    return GeometryManifest(tuple(volume_shape), tuple(volume_spacing), tuple(detector_shape),
                            views=views, normalization=normalization)
