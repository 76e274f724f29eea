"""Alert records raised by the secure world."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum


class AlertKind(Enum):
    WXN_DISABLE = "WXN_DISABLE"
    MMU_DISABLE = "MMU_DISABLE"
    VECTOR_REBASE = "VECTOR_REBASE"
    BAD_TTBR = "BAD_TTBR"
    BAD_TTBCR = "BAD_TTBCR"
    ILLEGAL_PTE_UPDATE = "ILLEGAL_PTE_UPDATE"
    DOUBLE_MAP = "DOUBLE_MAP"
    PXN_VIOLATION_CONFIG = "PXN_VIOLATION_CONFIG"
    UNEXPECTED_SMC = "UNEXPECTED_SMC"
    BOOT_GATE_FAIL = "BOOT_GATE_FAIL"


@dataclass(frozen=True)
class Alert:
    kind: AlertKind
    detail: str
    counter: int

    def as_dict(self) -> dict:
        return {"counter": self.counter, "kind": self.kind.value, "detail": self.detail}
