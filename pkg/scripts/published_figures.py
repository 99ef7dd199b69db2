"""Recompute the dataset figures that follow from the published counts.

Checks three things without any model calls:

* the 4:4:2 mixture anchored on the full SFT pool gives 30543/30543/15272;
* SFT samples per training scenario (one sample per pattern-bearing character);
* that OOD selection reproduces the published held-out set when the
  frequencies make those patterns the rarest.
"""
from __future__ import annotations

import random

from psyforge.dataset import MixtureSpec, resolve_mixture, select_ood_patterns
from psyforge.patterns import taxonomy_registry

SFT_SAMPLES = 30543
TRAIN_SCENARIOS = 10265
PUBLISHED_OOD = {
    "social": {"just-world-hypothesis", "egocentric-bias", "effort-justification", "social-desirability-bias"},
    "traits": {"rash", "dull", "nervous", "introverted"},
}


def main() -> None:
    counts = resolve_mixture(MixtureSpec((4, 4, 2)), (SFT_SAMPLES, 10**6, 10**6))
    print(f"mixture 4:4:2 -> {counts}, total {sum(counts)}")

    print(f"SFT samples per training scenario: {SFT_SAMPLES / TRAIN_SCENARIOS:.2f}")

    registry = taxonomy_registry()
    rng = random.Random(0)
    freq = {p.id: rng.randint(6, 60) for p in registry}
    freq.update({pid: 0 for pid in PUBLISHED_OOD["social"]})
    freq.update({pid: k for k, pid in enumerate(sorted(PUBLISHED_OOD["traits"]), 1)})
    ood = select_ood_patterns(registry, freq)
    same = set(ood.social) == PUBLISHED_OOD["social"] and set(ood.traits) == PUBLISHED_OOD["traits"]
    print(f"OOD selection: social={sorted(ood.social)} traits={sorted(ood.traits)} matches={same}")


if __name__ == "__main__":
    main()
