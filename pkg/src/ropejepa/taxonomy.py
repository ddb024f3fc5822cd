"""The 14-class damage taxonomy and everything keyed on it.

Class order is fixed and load-bearing: the classifier head, per-class gates,
split tables, and confusion matrices all index into this table.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import Optional

CHAFING = "Chafing"
CUT_STRANDS = "CutStrands"
PLACKING = "Placking"
COMPRESSION = "Compression"
CORE_OUT = "CoreOut"

DAMAGE_TYPES = (CHAFING, CUT_STRANDS, PLACKING, COMPRESSION, CORE_OUT)

# types that carry a High/Medium/Low grade
SEVERITY_TYPES = (CHAFING, CUT_STRANDS, PLACKING)

SEVERITY_ORDINALS = {"Low": 0, "Medium": 1, "High": 2}


class Action(IntEnum):
    IMMEDIATE_REPLACE = 0
    SCHEDULE_REPAIR = 1
    CONTINUE_MONITORING = 2
    NO_ACTION = 3


ACTION_NAMES = {
    Action.IMMEDIATE_REPLACE: "ImmediateReplace",
    Action.SCHEDULE_REPAIR: "ScheduleRepair",
    Action.CONTINUE_MONITORING: "ContinueMonitoring",
    Action.NO_ACTION: "NoAction",
}

ACTION_URGENCY = {
    Action.IMMEDIATE_REPLACE: 1.0,
    Action.SCHEDULE_REPAIR: 0.66,
    Action.CONTINUE_MONITORING: 0.33,
    Action.NO_ACTION: 0.0,
}

ACTION_COLORS = {
    Action.IMMEDIATE_REPLACE: "red",
    Action.SCHEDULE_REPAIR: "orange",
    Action.CONTINUE_MONITORING: "yellow",
    Action.NO_ACTION: "green",
}


@dataclass(frozen=True)
class DamageClass:
    index: int
    name: str
    damage_type: str
    severity: Optional[str]          # None for compound / structural classes
    partner_type: Optional[str]      # second overlay for compound classes
    action: Action

    @property
    def severity_ordinal(self) -> Optional[int]:
        return None if self.severity is None else SEVERITY_ORDINALS[self.severity]

    @property
    def is_compound(self) -> bool:
        return self.partner_type is not None


def _graded(idx, typ, sev):
    action = {"High": Action.IMMEDIATE_REPLACE,
              "Medium": Action.SCHEDULE_REPAIR,
              "Low": Action.CONTINUE_MONITORING}[sev]
    return DamageClass(idx, f"{typ}/{sev}", typ, sev, None, action)


CLASSES: tuple[DamageClass, ...] = (
    _graded(0, CHAFING, "High"),
    _graded(1, CHAFING, "Medium"),
    _graded(2, CHAFING, "Low"),
    _graded(3, CUT_STRANDS, "High"),
    _graded(4, CUT_STRANDS, "Medium"),
    _graded(5, CUT_STRANDS, "Low"),
    _graded(6, PLACKING, "High"),
    _graded(7, PLACKING, "Medium"),
    _graded(8, PLACKING, "Low"),
    DamageClass(9, "Compression", COMPRESSION, None, None, Action.NO_ACTION),
    DamageClass(10, "Compression+Chafing", COMPRESSION, None, CHAFING,
                Action.SCHEDULE_REPAIR),
    DamageClass(11, "Compression+CutStrands", COMPRESSION, None, CUT_STRANDS,
                Action.SCHEDULE_REPAIR),
    DamageClass(12, "CoreOut+CutStrands", CORE_OUT, None, CUT_STRANDS,
                Action.IMMEDIATE_REPLACE),
    # structural core damage outgrows monitoring but is not an automatic pull
    DamageClass(13, "Strand Coreout", CORE_OUT, None, None, Action.SCHEDULE_REPAIR),
)

NUM_CLASSES = len(CLASSES)

CLASS_BY_NAME = {c.name: c for c in CLASSES}


def class_by_index(index: int) -> DamageClass:
    if not 0 <= index < NUM_CLASSES:
        raise ValueError(f"class index out of range: {index}")
    return CLASSES[index]


def severity_bin(s: float) -> str:
    """Severity scalar in [0, 1] -> grade label, thirds of the range."""
    if not 0.0 <= s <= 1.0:
        raise ValueError(f"severity scalar outside [0, 1]: {s}")
    if s < 1.0 / 3.0:
        return "Low"
    if s < 2.0 / 3.0:
        return "Medium"
    return "High"


def same_type(i: int, j: int) -> bool:
    return CLASSES[i].damage_type == CLASSES[j].damage_type


def action_for_class(index: int) -> Action:
    return class_by_index(index).action
