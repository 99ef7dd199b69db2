from __future__ import annotations

import json
import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from psyforge.gateway import MockProvider, mock_gateway
from psyforge.patterns import (
    CompatibilityValidator,
    DuplicatePatternError,
    Pattern,
    PatternParseError,
    PersonalityTrait,
    Registry,
    RegistryError,
    SocialCognitive,
    kind_from_spec,
    load_registry,
    parse_pattern_sections,
    parse_verdict,
    serialize_registry,
    synthesize_pattern,
    validate_combination,
)
from psyforge.taxonomy import SOCIAL_COGNITIVE, TRAITS, Category, Dimension, Pole, slugify


def test_taxonomy_sizes(registry):
    traits, social = registry.counts()
    assert (traits, social) == (100, 144)
    assert len(registry) == 244
    assert registry.is_full()
    assert all(n == 10 for n in registry.cell_counts().values())
    sizes = {c: len(registry.by_category(c)) for c in Category}
    assert sizes == {
        Category.COGNITIVE_BIASES_HEURISTICS: 79,
        Category.SOCIAL_INFLUENCE: 27,
        Category.EVOLUTIONARY_ADAPTATIONS: 11,
        Category.MOTIVATIONAL_PROCESSES: 27,
    }


def test_taxonomy_names_unique_after_slugging():
    names = [n for ns in TRAITS.values() for n in ns] + [n for ns in SOCIAL_COGNITIVE.values() for n in ns]
    assert len({slugify(n) for n in names}) == len(names) == 244


@pytest.mark.parametrize(
    "pid",
    ["just-world-hypothesis", "egocentric-bias", "effort-justification", "social-desirability-bias",
     "rash", "dull", "nervous", "introverted", "spotlight-effect", "ultimate-attribution-error", "unartistic"],
)
def test_known_ids_present(registry, pid):
    assert pid in registry


def test_slugify_examples():
    assert slugify("kin selection & inclusive fitness") == "kin-selection-and-inclusive-fitness"
    assert slugify("at ease") == "at-ease"
    assert slugify("Forer effect") == "forer-effect"


def test_trait_lookup_by_dimension(registry):
    neg = registry.by_dimension(Dimension.EXTRAVERSION, Pole.NEGATIVE)
    assert len(neg) == 10 and all(p.kind == PersonalityTrait(Dimension.EXTRAVERSION, Pole.NEGATIVE) for p in neg)
    assert len(registry.by_dimension(Dimension.INTELLECT)) == 20


def test_registry_rejects_duplicates():
    p = Pattern("x", "x", SocialCognitive(Category.SOCIAL_INFLUENCE))
    with pytest.raises(DuplicatePatternError):
        Registry([p, p])


def test_registry_round_trip(tmp_path, registry):
    serialize_registry(registry, tmp_path)
    assert load_registry(tmp_path) == registry


def test_empty_dir_loads_empty_registry(tmp_path):
    assert len(load_registry(tmp_path)) == 0


def test_missing_path_is_an_error(tmp_path):
    with pytest.raises(RegistryError):
        load_registry(tmp_path / "nope")


def test_duplicate_across_files_names_both(tmp_path):
    rec = Pattern("dup", "dup", SocialCognitive(Category.SOCIAL_INFLUENCE)).to_dict()
    (tmp_path / "a.json").write_text(json.dumps(rec))
    (tmp_path / "b.jsonl").write_text(json.dumps(rec) + "\n")
    with pytest.raises(DuplicatePatternError) as err:
        load_registry(tmp_path)
    assert "a.json" in str(err.value) and "b.jsonl" in str(err.value)


def test_require_sections(tmp_path, registry):
    serialize_registry(Registry([registry["rash"]]), tmp_path)
    with pytest.raises(RegistryError):
        load_registry(tmp_path, require_sections=True)


def test_kind_spec_parsing():
    assert kind_from_spec("trait:Intellect:negative") == PersonalityTrait(Dimension.INTELLECT, Pole.NEGATIVE)
    assert kind_from_spec("social:SocialInfluence") == SocialCognitive(Category.SOCIAL_INFLUENCE)


def test_section_parser_heading_variants():
    text = "**Definition:**\nA.\n\n## core mechanisms\nB\nB2\nReal World Manifestations:\nC"
    assert parse_pattern_sections(text) == {"definition": "A.", "core_mechanisms": "B\nB2", "manifestations": "C"}


def test_section_parser_missing_section_stays_empty():
    out = parse_pattern_sections("# Description\nonly this")
    assert out == {"definition": "only this", "core_mechanisms": "", "manifestations": ""}


def test_section_parser_requires_a_heading():
    with pytest.raises(PatternParseError):
        parse_pattern_sections("no headings at all")


@settings(max_examples=50)
@given(st.lists(st.text(alphabet="abc xyz.,", min_size=1, max_size=30).filter(lambda s: s.strip()), min_size=3, max_size=3))
def test_section_parser_is_verbatim(parts):
    text = f"# Definition\n{parts[0]}\n# Core Mechanisms\n{parts[1]}\n# Real-World Manifestation\n{parts[2]}"
    out = parse_pattern_sections(text)
    assert [out["definition"], out["core_mechanisms"], out["manifestations"]] == [p.strip() for p in parts]


def test_synthesize_pattern_copies_sections(synthetic_gateway):
    p = synthesize_pattern("spotlight effect", SocialCognitive(Category.COGNITIVE_BIASES_HEURISTICS),
                           ["some notes"], synthetic_gateway)
    assert p.id == "spotlight-effect" and p.is_complete
    assert p.definition.startswith("spotlight effect is")


def test_synthesize_pattern_rejects_empty_corpus(synthetic_gateway):
    with pytest.raises(ValueError):
        synthesize_pattern("rash", PersonalityTrait(Dimension.CONSCIENTIOUSNESS, Pole.NEGATIVE), [], synthetic_gateway)


@pytest.mark.parametrize(
    "text,expected",
    [('{"compatible": true, "reason": "ok"}', True), ('{"compatible": false, "reason": "x"}', False),
     ("Compatible. They fit.", True), ("incompatible: opposite poles", False)],
)
def test_parse_verdict(text, expected):
    assert parse_verdict(text).compatible is expected


def test_parse_verdict_garbage():
    with pytest.raises(PatternParseError):
        parse_verdict("maybe?")


def test_validate_combination_caches_by_sorted_ids(registry):
    provider = MockProvider(fallback='{"compatible": true, "reason": "fine"}')
    validator = CompatibilityValidator(registry, mock_gateway(provider))
    assert validator(["rash", "nervous"]).compatible
    assert validator(["nervous", "rash"]).compatible
    assert len(provider.calls) == 1
    assert provider.calls[0].temperature == 0.0


@pytest.mark.parametrize("ids,exc", [(["rash"], ValueError), (["rash", "rash"], ValueError),
                                     (["rash", "not-a-pattern"], KeyError), (["a", "b", "c", "d", "e", "f"], ValueError)])
def test_validate_combination_input_errors(registry, ids, exc):
    with pytest.raises(exc):
        validate_combination(ids, registry, mock_gateway(MockProvider(fallback="compatible")), {}, threading.Lock())


def test_synthetic_compat_flags_opposite_poles(registry, synthetic_gateway):
    assert not validate_combination(["talkative", "quiet"], registry, synthetic_gateway).compatible
    assert validate_combination(["talkative", "spotlight-effect"], registry, synthetic_gateway).compatible
