"""A deterministic stand-in provider that answers every prompt family.

Each reply is a pure function of the request text, so pipelines run on it
are reproducible byte for byte regardless of scheduling or parallelism.
The replies are structurally valid but semantically bland: they exercise
parsers and validators, not psychology.
"""

from __future__ import annotations

import json
import re

from ._util import derive_seed
from .gateway import ChatRequest, LLMProviderHandle, ProviderError

_PATTERN_HEAD = re.compile(r"^### Pattern: (.+?) \((.+)\)$", re.M)
_NUMBERED = re.compile(r"^\s*\d+\.\s*(.+?)\s*$")

_THOUGHTS = (
    "I need to stay calm here.",
    "This is not going the way I hoped.",
    "They are watching me closely.",
    "Maybe I should say what I really think.",
    "I can turn this around.",
    "Why does this always happen to me?",
)
_ACTIONS = (
    "glances around the room",
    "folds their arms",
    "leans forward slightly",
    "taps a pen on the table",
    "takes a slow breath",
    "looks down at their notes",
)
_LINES = (
    "Let's go through what happened, step by step.",
    "I think we both know that is not the whole story.",
    "Fine. Tell me what you need from me.",
    "I did what anyone would have done in my place.",
    "Can we at least agree on the facts?",
    "That is exactly the point I was trying to make.",
    "I hear you, but I see it differently.",
    "We should decide before the end of the day.",
)


class SyntheticBackend:
    """Backend whose reply is derived from (tag, system, user)."""

    def __init__(self, judge_bias: int = 0):
        self.judge_bias = judge_bias

    def send(self, handle: LLMProviderHandle, request: ChatRequest) -> tuple[str, dict[str, int]]:
        handler = getattr(self, f"_on_{request.tag}", None)
        if handler is None:
            raise ProviderError(f"synthetic backend cannot answer tag {request.tag!r}")
        text = handler(request)
        return text, {"prompt_tokens": len(request.user.split()), "completion_tokens": len(text.split())}

    # ----------------------------------------------------------- helpers

    @staticmethod
    def _rng(*parts: object) -> int:
        return derive_seed("synthetic", *parts)

    @staticmethod
    def _turn(seed: int) -> str:
        return (
            f"[{_THOUGHTS[seed % len(_THOUGHTS)]}] ({_ACTIONS[(seed // 7) % len(_ACTIONS)]}) "
            f"{_LINES[(seed // 49) % len(_LINES)]}"
        )

    @staticmethod
    def _checklist(user: str) -> list[str]:
        chunk = user.split("[Checklist Chunk]", 1)[-1]
        return [m.group(1) for line in chunk.splitlines() if (m := _NUMBERED.match(line))]

    # ----------------------------------------------------------- tags

    def _on_pattern_synth(self, req: ChatRequest) -> str:
        name = re.search(r"Construct Name: (.+)", req.user).group(1).strip()  # type: ignore[union-attr]
        return (
            f"# Definition\n{name} is a recurring way of perceiving and responding to social situations.\n\n"
            f"# Core Mechanisms\nPeople showing {name} weigh cues selectively and act on that weighting.\n\n"
            f"# Real-World Manifestation\nIn meetings and families alike, {name} shapes what people notice and say."
        )

    def _on_compat(self, req: ChatRequest) -> str:
        poles: dict[str, set[str]] = {}
        for _, label in _PATTERN_HEAD.findall(req.user):
            m = re.match(r"Personality Trait, (\w+), (\w+) pole", label)
            if m:
                poles.setdefault(m.group(1), set()).add(m.group(2))
        clash = sorted(d for d, p in poles.items() if len(p) > 1)
        if clash:
            return json.dumps({"compatible": False, "reason": f"opposite poles of {clash[0]} in one combination"})
        return json.dumps({"compatible": True, "reason": "the patterns can co-occur in everyday situations"})

    def _on_scenario(self, req: ChatRequest) -> str:
        names_line = re.search(r"Candidate Names: (.+?) \(5 Males", req.user).group(1)  # type: ignore[union-attr]
        candidates = [n.strip() for n in names_line.split(",")]
        patterns = [n for n, _ in _PATTERN_HEAD.findall(req.user)]
        seed = self._rng(req.user, req.seed)
        n_chars = 3 + seed % 2
        start = seed % len(candidates)
        cast = [candidates[(start + 3 * i) % len(candidates)] for i in range(n_chars)]
        protagonist, supporting = cast[0], cast[1:]
        # Protagonist takes every pattern but the last; the last goes to the first supporting character.
        bearer_of = {p: protagonist for p in patterns[:-1]}
        bearer_of[patterns[-1]] = supporting[0]
        rationale = " ".join(f"{bearer_of[p]} carries the {p} pattern, which drives the central tension." for p in patterns)
        tendencies = {}
        for who in (protagonist, supporting[0]):
            mine = [p for p in patterns if bearer_of[p] == who]
            items = []
            for p in mine:
                items.append(f"shows {p} when the pressure rises")
                items.append(f"explains their own choices through {p}")
            tendencies[who] = items[:6]
        tendencies[supporting[-1]] = ["keeps the discussion moving", "asks for concrete facts"]
        tendency_lines = "\n".join(
            f"@ [{who}]: " + "; ".join(f"{i}. {t}" for i, t in enumerate(items, 1)) for who, items in tendencies.items()
        )
        profiles = []
        for i, who in enumerate(cast):
            head = f"### Protagonist: {who}" if i == 0 else f"### Supporting Character {i}: {who}"
            others = "\n".join(f"  * {o}: {who} has worked with {o} for years and trusts them only partly." for o in cast if o != who)
            profiles.append(f"{head}\n* About Self:\n  {who} is a careful person with a stake in today's outcome.\n* About Others:\n{others}")
        return (
            "## Part 1: Scenario Design Analysis\n\n"
            f"Design Rationale:\n{rationale}\n\n"
            "Catalyst Details:\n"
            "* A missed deadline: forces everyone to account for their choices.\n"
            "* An unexpected visitor: raises the social stakes.\n\n"
            f"Expected Character Tendencies:\n{tendency_lines}\n\n"
            "## Part 2: Complete Scenario\n\n"
            f"Story Background:\nLate in the afternoon, {', '.join(cast)} meet in a small office to settle a dispute "
            "about a project that went wrong. Papers cover the table and nobody has touched the coffee.\n\n"
            "Characters' Profiles:\n\n" + "\n\n".join(profiles) + "\n"
        )

    def _on_conversation(self, req: ChatRequest) -> str:
        protagonist = re.search(r"\*\*Protagonist\*\*: (.+)", req.user).group(1).strip()  # type: ignore[union-attr]
        support = re.search(r"\*\*Supporting Characters\*\*: (.+)", req.user).group(1)  # type: ignore[union-attr]
        others = [s.strip() for s in support.split(",") if s.strip()]
        seed = self._rng(req.user, req.seed)
        n = 12 + seed % 9
        lines = []
        for i in range(n):
            speaker = protagonist if i == n - 1 or (i % 2 == 1) else others[(i // 2) % len(others)]
            lines.append(f"{speaker}: {self._turn(self._rng(seed, i))}")
        return "\n".join(lines)

    def _on_checklist_generate(self, req: ChatRequest) -> str:
        name = re.search(r'for the pattern "(.+?)"', req.user).group(1)  # type: ignore[union-attr]
        count = int(re.search(r"write (\d+) universal", req.user).group(1))  # type: ignore[union-attr]
        contexts = ("In group settings", "Under time pressure", "When receiving feedback", "After a setback",
                    "When meeting strangers", "During a disagreement", "When plans change")
        return "\n".join(
            f"{i}. {contexts[i % len(contexts)]}, does the subject show behavior typical of {name} (cue {i})?"
            for i in range(1, count + 1)
        )

    def _on_checklist_validate(self, req: ChatRequest) -> str:
        items = self._checklist(req.user)
        return json.dumps({"results": [
            {"criterion": c, "score": 1, "observable": True, "reason": "visible in the dialogue"} for c in items
        ]})

    def _on_checklist_generalize(self, req: ChatRequest) -> str:
        item = req.user.rsplit("Item:", 1)[-1].strip()
        words = item.split()
        out = [w if i == 0 or not w[:1].isupper() else "someone" for i, w in enumerate(words)]
        return " ".join(out)

    def _on_roleplay(self, req: ChatRequest) -> str:
        return self._turn(self._rng("roleplay", req.system, req.user, req.seed))

    def _on_simulator(self, req: ChatRequest) -> str:
        return self._turn(self._rng("simulator", req.system, req.user, req.seed))

    def _on_judge(self, req: ChatRequest) -> str:
        dialogue = req.user.split("[Checklist Chunk]", 1)[0]
        results = []
        for c in self._checklist(req.user):
            score = (self._rng(dialogue, c) % 3) - 1 + self.judge_bias
            score = max(-1, min(1, score))
            results.append({"criterion": c, "score": score, "reason": "judged from the protagonist's turns"})
        return json.dumps({"results": results})
