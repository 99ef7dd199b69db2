"""A small built-in first-name pool for runs that do not supply name files."""

from __future__ import annotations

from .scenarios import NamePool

MALE = (
    "Aarav", "Bashir", "Callum", "Dario", "Emeka", "Farid", "Goran", "Hiroshi", "Ismael", "Jonas",
    "Kwame", "Lorenzo", "Mateo", "Nikolai", "Omar", "Pavel", "Quentin", "Rafael", "Soren", "Tariq",
    "Umar", "Viktor", "Wesley", "Xavier", "Yusuf", "Zoltan", "Anders", "Benedikt", "Cyrus", "Dmitri",
)
FEMALE = (
    "Amara", "Beatriz", "Chiara", "Dalia", "Elif", "Freya", "Giulia", "Hana", "Ingrid", "Jasmin",
    "Keiko", "Leila", "Marisol", "Nadia", "Olena", "Priya", "Quinn", "Rosalind", "Sakura", "Tamsin",
    "Ulla", "Vesna", "Wanjiru", "Ximena", "Yara", "Zofia", "Anouk", "Brigid", "Celeste", "Dagny",
)


def default_pool() -> NamePool:
    return NamePool(MALE, FEMALE)
