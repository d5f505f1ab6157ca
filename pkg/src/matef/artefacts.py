"""Artefact types and type combinations shared by the oracle and tool adapters."""

from __future__ import annotations

import enum
from itertools import combinations
from typing import Iterable, Mapping


class ArtefactType(str, enum.Enum):
    FILE = "File"
    MUTEX = "Mutex"
    REGISTRY = "Registry"
    PORT = "Port"
    RPORT = "RPort"

    @classmethod
    def parse(cls, name: str) -> "ArtefactType":
        """Accept either the canonical name ("RPort") or any-case variant ("rport")."""
        key = name.strip().lower()
        for member in cls:
            if member.value.lower() == key:
                return member
        raise ValueError(f"unknown artefact type {name!r}")


ALL_TYPES: tuple[ArtefactType, ...] = tuple(ArtefactType)


class TypeCombo(frozenset):
    """Non-empty set of artefact types counted together in a dataset."""

    def __new__(cls, types: Iterable[ArtefactType | str] = ()):
        members = [t if isinstance(t, ArtefactType) else ArtefactType.parse(t) for t in types]
        if not members:
            raise ValueError("a type combination must contain at least one artefact type")
        return super().__new__(cls, members)

    @property
    def name(self) -> str:
        for preset, combo in PRESETS.items():
            if combo == self:
                return preset
        return "+".join(t.value for t in ALL_TYPES if t in self)

    @classmethod
    def parse(cls, text: str) -> "TypeCombo":
        """Parse a preset name ("PortOnly") or a '+'/','-separated type list ("File+Mutex")."""
        if text in PRESETS:
            return PRESETS[text]
        parts = [p for p in text.replace(",", "+").split("+") if p.strip()]
        return cls(parts)

    def total(self, counts: Mapping[ArtefactType, int]) -> int:
        return sum(counts.get(t, 0) for t in self)

    def __repr__(self) -> str:
        return f"TypeCombo({self.name})"


PRESETS: dict[str, TypeCombo] = {}
PRESETS.update(
    FileOrMutex=TypeCombo([ArtefactType.FILE, ArtefactType.MUTEX]),
    RegistryOnly=TypeCombo([ArtefactType.REGISTRY]),
    PortOnly=TypeCombo([ArtefactType.PORT]),
    RPortOnly=TypeCombo([ArtefactType.RPORT]),
    FileOnly=TypeCombo([ArtefactType.FILE]),
    MutexOnly=TypeCombo([ArtefactType.MUTEX]),
    All=TypeCombo(ALL_TYPES),
)


def all_combos() -> list[TypeCombo]:
    """Every non-empty subset of the five artefact types (31 combos)."""
    return [
        TypeCombo(subset)
        for size in range(1, len(ALL_TYPES) + 1)
        for subset in combinations(ALL_TYPES, size)
    ]


def zero_counts() -> dict[ArtefactType, int]:
    return {t: 0 for t in ALL_TYPES}
