"""Lesion taxonomy shared by the detector, few-shot classifier and reports."""

from enum import Enum


class LesionClass(Enum):
    MICROANEURYSM = "microaneurysm"
    DOT_BLOT_HEMORRHAGE = "dot-blot hemorrhage"
    HARD_EXUDATE = "hard exudate"
    COTTON_WOOL_SPOT = "cotton-wool spot"

    @property
    def plural(self) -> str:
        return self.value + "s"

    @property
    def key(self) -> str:
        return self.name.lower()


SHORT_NAMES = {
    "ma": LesionClass.MICROANEURYSM,
    "hem": LesionClass.DOT_BLOT_HEMORRHAGE,
    "he": LesionClass.HARD_EXUDATE,
    "cws": LesionClass.COTTON_WOOL_SPOT,
}

# "soft exudate" is the older name for a cotton-wool spot
SYNONYMS = {
    "microaneurysm": LesionClass.MICROANEURYSM,
    "hemorrhage": LesionClass.DOT_BLOT_HEMORRHAGE,
    "dot-blot hemorrhage": LesionClass.DOT_BLOT_HEMORRHAGE,
    "hard exudate": LesionClass.HARD_EXUDATE,
    "hard exudates": LesionClass.HARD_EXUDATE,
    "cotton-wool spot": LesionClass.COTTON_WOOL_SPOT,
    "soft exudate": LesionClass.COTTON_WOOL_SPOT,
    "soft exudates": LesionClass.COTTON_WOOL_SPOT,
}


def parse_lesion_class(name: str) -> LesionClass:
    key = name.strip().lower()
    for cls in LesionClass:
        if key in (cls.key, cls.value):
            return cls
    if key in SHORT_NAMES:
        return SHORT_NAMES[key]
    if key in SYNONYMS:
        return SYNONYMS[key]
    raise ValueError(f"unknown lesion class {name!r}")
