"""Ingestion of VOC-style XML annotation directories."""

from __future__ import annotations

import xml.etree.ElementTree as ET
from pathlib import Path

from .manifest import DatasetManifest, ManifestError, manifest_from_records


def _parse_voc_file(path: Path) -> dict:
    try:
        root = ET.parse(path).getroot()
    except ET.ParseError as exc:
        raise ManifestError(f"{path}: malformed XML: {exc}") from exc

    size = root.find("size")
    if size is None or size.find("width") is None or size.find("height") is None:
        raise ManifestError(f"{path}: missing <size> with width/height")
    width = int(size.findtext("width"))
    height = int(size.findtext("height"))

    filename = root.findtext("filename") or path.with_suffix(".jpg").name
    objects = []
    for obj in root.findall("object"):
        name = obj.findtext("name")
        if not name:
            raise ManifestError(f"{path}: object without a class name")
        bnd = obj.find("bndbox")
        if bnd is None:
            raise ManifestError(f"{path}: object '{name}' without <bndbox>")
        try:
            xmin = float(bnd.findtext("xmin"))
            ymin = float(bnd.findtext("ymin"))
            xmax = float(bnd.findtext("xmax"))
            ymax = float(bnd.findtext("ymax"))
        except (TypeError, ValueError) as exc:
            raise ManifestError(f"{path}: object '{name}' has a bad bndbox") from exc
        if xmax <= xmin or ymax <= ymin:
            raise ManifestError(f"{path}: object '{name}' has empty extent")
        objects.append({
            "class": name,
            "u": xmin, "v": ymin, "w": xmax - xmin, "h": ymax - ymin,
            "difficult": (obj.findtext("difficult") or "0").strip() == "1",
        })
    return {"image": filename, "width": width, "height": height, "objects": objects}


def load_voc_annotations(annotation_directory, known_classes=None) -> DatasetManifest:
    """Parse every .xml file in a VOC annotation directory into a manifest.

    Boxes convert from (xmin, ymin, xmax, ymax) to (u, v, w, h). When
    `known_classes` is given, any other class name is rejected; otherwise the
    class map is derived from the names seen, in sorted (alphabetical) order.
    Entries are ordered by image path so ingestion is deterministic.
    """
    directory = Path(annotation_directory)
    if not directory.is_dir():
        raise ManifestError(f"{directory} is not a directory")
    records = []
    for xml_path in sorted(directory.glob("*.xml")):
        rec = _parse_voc_file(xml_path)
        if known_classes is not None:
            for obj in rec["objects"]:
                if obj["class"] not in known_classes:
                    raise ManifestError(f"{xml_path}: unknown class '{obj['class']}'")
        records.append(rec)
    return manifest_from_records(records, root=str(directory))
