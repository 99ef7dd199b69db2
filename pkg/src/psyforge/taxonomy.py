"""The built-in two-dimensional pattern taxonomy.

Personality traits are Goldberg's 100 unipolar Big Five markers (ten per
dimension/pole cell). Social-cognitive patterns are grouped into four
theoretical traditions, 144 in total.
"""

from __future__ import annotations

import enum
import re


class Dimension(str, enum.Enum):
    EXTRAVERSION = "Extraversion"
    AGREEABLENESS = "Agreeableness"
    CONSCIENTIOUSNESS = "Conscientiousness"
    EMOTIONAL_STABILITY = "EmotionalStability"
    INTELLECT = "Intellect"


class Pole(str, enum.Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"


class Category(str, enum.Enum):
    COGNITIVE_BIASES_HEURISTICS = "CognitiveBiasesHeuristics"
    SOCIAL_INFLUENCE = "SocialInfluence"
    EVOLUTIONARY_ADAPTATIONS = "EvolutionaryAdaptations"
    MOTIVATIONAL_PROCESSES = "MotivationalProcesses"


TRAITS: dict[tuple[Dimension, Pole], tuple[str, ...]] = {
    (Dimension.EXTRAVERSION, Pole.POSITIVE): (
        "talkative", "assertive", "active", "energetic", "outgoing",
        "enthusiastic", "daring", "gregarious", "bold", "spontaneous",
    ),
    (Dimension.EXTRAVERSION, Pole.NEGATIVE): (
        "quiet", "reserved", "shy", "inhibited", "timid",
        "withdrawn", "unassertive", "introverted", "silent", "unenergetic",
    ),
    (Dimension.AGREEABLENESS, Pole.POSITIVE): (
        "sympathetic", "kind", "appreciative", "affectionate", "soft-hearted",
        "warm", "generous", "trusting", "helpful", "cooperative",
    ),
    (Dimension.AGREEABLENESS, Pole.NEGATIVE): (
        "cold", "unsympathetic", "harsh", "rude", "unkind",
        "cruel", "quarrelsome", "critical", "antagonistic", "callous",
    ),
    (Dimension.CONSCIENTIOUSNESS, Pole.POSITIVE): (
        "organized", "responsible", "dependable", "thorough", "efficient",
        "practical", "deliberate", "conscientious", "neat", "careful",
    ),
    (Dimension.CONSCIENTIOUSNESS, Pole.NEGATIVE): (
        "disorganized", "careless", "irresponsible", "undependable", "sloppy",
        "impractical", "haphazard", "negligent", "untidy", "rash",
    ),
    (Dimension.EMOTIONAL_STABILITY, Pole.POSITIVE): (
        "relaxed", "calm", "at ease", "unemotional", "poised",
        "composed", "secure", "stable", "content", "placid",
    ),
    (Dimension.EMOTIONAL_STABILITY, Pole.NEGATIVE): (
        "anxious", "moody", "envious", "touchy", "fretful",
        "temperamental", "insecure", "nervous", "jealous", "high-strung",
    ),
    (Dimension.INTELLECT, Pole.POSITIVE): (
        "creative", "imaginative", "intellectual", "philosophical", "complex",
        "deep", "artistic", "bright", "perceptive", "introspective",
    ),
    (Dimension.INTELLECT, Pole.NEGATIVE): (
        "uncreative", "unimaginative", "unintellectual", "unphilosophical", "simple",
        "shallow", "unartistic", "dull", "imperceptive", "uninquisitive",
    ),
}

SOCIAL_COGNITIVE: dict[Category, tuple[str, ...]] = {
    Category.COGNITIVE_BIASES_HEURISTICS: (
        "actor-observer asymmetry", "defensive attribution hypothesis",
        "effort justification", "egocentric bias", "false consensus effect",
        "Forer effect", "fundamental attribution error", "hard-easy effect",
        "illusion of control", "illusory superiority", "optimism bias",
        "overconfidence effect", "risk compensation", "self-serving bias",
        "social desirability bias", "third-person effect", "decoy effect",
        "reactance", "social comparison bias", "status quo bias",
        "backfire effect", "endowment effect", "loss aversion",
        "pseudocertainty effect", "sunk cost fallacy", "zero-risk bias",
        "hyperbolic discounting", "identifiable victim effect", "ambiguity bias",
        "belief bias", "information bias", "less-is-better effect",
        "denomination effect", "mental accounting", "normalcy bias",
        "subadditivity effect", "survivorship bias", "zero-sum bias",
        "anthropomorphism", "illusion of validity", "illusory correlation",
        "curse of knowledge", "illusion of asymmetric insight",
        "illusion of transparency", "spotlight effect", "negativity bias",
        "choice-supportive bias", "confirmation bias", "continued influence effect",
        "expectation bias", "observer effect", "observer-expectancy effect",
        "ostrich effect", "bias blind spot", "naive cynicism", "naive realism",
        "attentional bias", "availability heuristic", "base rate fallacy",
        "context effect", "empathy gap", "illusory truth effect",
        "mere exposure effect", "mood-congruent memory bias", "omission bias",
        "anchoring", "conservatism", "contrast effect", "distinction bias",
        "focusing effect", "framing effect", "fading affect bias",
        "implicit association", "implicit stereotypes", "false memory",
        "misattribution of memory", "source confusion", "misinformation effect",
        "peak-end rule",
    ),
    Category.SOCIAL_INFLUENCE: (
        "authority bias", "automation bias", "bandwagon effect",
        "group attribution error", "just-world hypothesis", "stereotyping",
        "ultimate attribution error", "halo effect", "in-group bias",
        "out-group homogeneity bias", "positivity effect", "reactive devaluation",
        "hindsight bias", "impact bias", "outcome bias", "pessimism bias",
        "planning fallacy", "projection bias", "restraint bias",
        "self-consistency bias", "groupthink", "bystander effect",
        "social facilitation", "diffusion of responsibility", "conformity",
        "obedience to authority", "reciprocity principle",
    ),
    Category.EVOLUTIONARY_ADAPTATIONS: (
        "delayed reciprocity", "asymmetrical investment", "survival imperative",
        "aversion response", "kin selection & inclusive fitness",
        "asymmetrical parental investment", "formation of dominance hierarchies",
        "territoriality", "mating strategies", "jealousy", "paternity uncertainty",
    ),
    Category.MOTIVATIONAL_PROCESSES: (
        "narrative self", "hedonic adaptation", "self-determination theory",
        "pleasure principle & reality principle", "search for meaning",
        "moral licensing effect", "choice overload", "decision fatigue", "awe",
        "mortality salience & legacy drive", "flow principle",
        "gratitude mechanism", "post-traumatic growth",
        "skin hunger & the law of touch", "self-handicapping paradox",
        "the allure of the forbidden", "sadistic pleasure",
        "the utility principle of self-deception", "play impulse principle",
        "attribution theory", "social comparison theory", "self-perception theory",
        "terror management theory", "cognitive dissonance theory",
        "psychological reactance theory", "social learning theory",
        "social identity theory",
    ),
}

TRAITS_PER_CELL = 10
FULL_TRAIT_COUNT = 100
FULL_SOCIAL_COUNT = 144


def slugify(name: str) -> str:
    """Stable pattern id: lowercase, '&' spelled out, non-alphanumerics collapsed to '-'."""
    s = name.lower().replace("&", " and ")
    s = re.sub(r"[^a-z0-9]+", "-", s)
    return s.strip("-")
