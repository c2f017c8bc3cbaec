"""Semantic label taxonomy and instance-id scheme shared by all modules.

Semantic codes: 0 is background, 1-10 are the vertebra substructures
(endplate is 10), 11 is the intervertebral disc, 12 the spinal canal,
13 the spinal cord, and 14 the sacrum.

Instance ids: vertebra instances are numbered 1..N from the most superior
vertebra downward; the disc below vertebra k carries id 100+k and the
endplate group attached below vertebra k carries id 200+k. Spinal canal,
cord, and sacrum have a single instance by nature and carry no id.
"""

from __future__ import annotations

import json
from enum import IntEnum
from pathlib import Path


class Structure(IntEnum):
    BACKGROUND = 0
    CORPUS = 1
    ARCUS = 2
    SPINOUS_PROCESS = 3
    ARTICULAR_INFERIOR_LEFT = 4
    ARTICULAR_INFERIOR_RIGHT = 5
    ARTICULAR_SUPERIOR_LEFT = 6
    ARTICULAR_SUPERIOR_RIGHT = 7
    COSTAL_PROCESS_LEFT = 8
    COSTAL_PROCESS_RIGHT = 9
    ENDPLATE = 10
    IVD = 11
    SPINAL_CANAL = 12
    SPINAL_CORD = 13
    SACRUM = 14


#: Structures that get merged instances derived from the semantic mask only.
SINGLE_INSTANCE_CODES = frozenset(
    {Structure.SPINAL_CANAL, Structure.SPINAL_CORD, Structure.SACRUM}
)

IVD_ID_BASE = 100
ENDPLATE_ID_BASE = 200

_KIND_BY_CODE = {
    Structure.BACKGROUND: "background",
    Structure.IVD: "ivd",
    Structure.SPINAL_CANAL: "spinal_canal",
    Structure.SPINAL_CORD: "spinal_cord",
    Structure.SACRUM: "sacrum",
}


def vertebra_substructure_codes() -> frozenset[int]:
    """Codes 1-10: the ten per-vertebra substructures, endplate included.

    Used to binarize "vertebra" as a whole for global overlap metrics.
    """
    return frozenset(range(Structure.CORPUS, Structure.ENDPLATE + 1))


def instance_relevant_codes() -> frozenset[int]:
    """Semantic codes whose voxels must carry an instance id (1-11)."""
    return vertebra_substructure_codes() | {int(Structure.IVD)}


def vertebra_id(order_index: int) -> int:
    return order_index


def ivd_id(order_index: int) -> int:
    return IVD_ID_BASE + order_index


def endplate_id(order_index: int) -> int:
    return ENDPLATE_ID_BASE + order_index


def classify_instance_id(value: int) -> tuple[str, int]:
    """Split an instance id into (kind, order_index).

    Ids 1-99 are vertebrae, 101-199 discs, 201-299 endplate groups; the
    order index counts top-down starting at 1.
    """
    value = int(value)
    if 1 <= value <= 99:
        return "vertebra", value
    if IVD_ID_BASE + 1 <= value <= IVD_ID_BASE + 99:
        return "ivd", value - IVD_ID_BASE
    if ENDPLATE_ID_BASE + 1 <= value <= ENDPLATE_ID_BASE + 99:
        return "endplate", value - ENDPLATE_ID_BASE
    raise ValueError(f"instance id {value} is outside all known ranges")


def label_map() -> list[dict]:
    """Machine-readable label taxonomy, one entry per semantic code."""
    entries = []
    for member in Structure:
        kind = _KIND_BY_CODE.get(member, "vertebra_substructure")
        entries.append({"code": int(member), "name": member.name.lower(), "kind": kind})
    return entries


def name_to_code() -> dict[str, int]:
    return {member.name.lower(): int(member) for member in Structure}


def write_labels_json(path: str | Path) -> None:
    Path(path).write_text(json.dumps(label_map(), indent=2) + "\n")
