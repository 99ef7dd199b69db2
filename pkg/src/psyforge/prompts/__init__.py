"""Versioned prompt templates shipped as package data.

Each template is a pair of files ``<name>.system.txt`` / ``<name>.user.txt``.
Placeholders are ``{snake_case}`` names; any other brace text (JSON examples
in the judge prompt, for instance) is left untouched.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

_PLACEHOLDER = re.compile(r"\{([a-z][a-z0-9_]*)\}")

TEMPLATE_NAMES = (
    "pattern_trait",
    "pattern_social",
    "compatibility",
    "scenario",
    "conversation",
    "roleplay",
    "judge",
    "checklist_generate",
    "checklist_validate",
    "checklist_generalize",
)


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    system: str
    user: str

    @property
    def placeholders(self) -> frozenset[str]:
        return frozenset(_PLACEHOLDER.findall(self.system) + _PLACEHOLDER.findall(self.user))

    def render(self, **values: object) -> tuple[str, str]:
        missing = self.placeholders - values.keys()
        if missing:
            raise KeyError(f"template {self.name!r} missing values for {sorted(missing)}")
        return _fill(self.system, values), _fill(self.user, values)

    @property
    def digest(self) -> str:
        return hashlib.sha256(f"{self.name}\0{self.system}\0{self.user}".encode()).hexdigest()


def _fill(text: str, values: dict[str, object]) -> str:
    return _PLACEHOLDER.sub(lambda m: str(values[m.group(1)]) if m.group(1) in values else m.group(0), text)


@lru_cache(maxsize=None)
def get_template(name: str) -> PromptTemplate:
    if name not in TEMPLATE_NAMES:
        raise KeyError(f"unknown prompt template {name!r}")
    root = resources.files(__name__)
    system = root.joinpath(f"{name}.system.txt").read_text(encoding="utf-8").rstrip("\n")
    user = root.joinpath(f"{name}.user.txt").read_text(encoding="utf-8").rstrip("\n")
    return PromptTemplate(name, system, user)


def templates_digest() -> str:
    """Hash of every shipped template; part of the run config hash."""
    h = hashlib.sha256()
    for name in TEMPLATE_NAMES:
        h.update(get_template(name).digest.encode())
    return h.hexdigest()
