"""Tools for building and evaluating psychologically grounded role-play data.

The modules follow the pipeline: ``patterns`` (registry and synthesis),
``scenarios`` (scenario and conversation generation), ``dialogue`` (the
thought/action/speech turn grammar), ``checklists``, ``dataset`` (splits,
SFT export, mixtures, statistics) and ``evaluation`` (judging and scores).
``gateway`` is the provider layer and ``pipeline``/``cli`` tie stages together.
"""

__version__ = "0.1.0"
