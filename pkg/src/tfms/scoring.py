"""Deterministic value model.

``pctr`` is a seeded synthetic stand-in for a click model: a splitmix64
mix of (seed, user, ad) squashed through a logistic into [0.001, 0.1].
Every matcher, the cache pipelines and the harness share one
``ValueModel`` so oracle comparisons are exact.
"""

from __future__ import annotations

import math

from .domain import AdCrowdPair, AdId, Campaign, CampaignStatus, Timestamp, UserId
from .errors import ContractViolation

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15

PCTR_MIN = 0.001
PCTR_MAX = 0.1
# logit range fed to the squashing function
_SPREAD = 6.0


def _splitmix64(x: int) -> int:
    z = (x + _GOLDEN) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def mix64(*parts: int) -> int:
    """Order-sensitive 64-bit hash of integer parts."""
    h = 0
    for p in parts:
        h = _splitmix64(h ^ (p & _MASK64))
    return h


def unit_draw(*parts: int) -> float:
    """Uniform draw in [0, 1) keyed by ``parts``."""
    return (mix64(*parts) >> 11) * (1.0 / (1 << 53))


class ValueModel:
    """r_u(a, c) = pctr(u, a) * bid(a, c) * 1000, in eCPM units.

    The measure is pluggable: subclasses may override ``pctr`` or
    ``value_measure`` as long as both stay pure.
    """

    def __init__(self, seed: int = 0):
        self.seed = seed

    def pctr(self, user: UserId, ad: AdId) -> float:
        u = unit_draw(self.seed, 0x5C, user, ad)
        x = (2.0 * u - 1.0) * _SPREAD
        squashed = 1.0 / (1.0 + math.exp(-x))
        return PCTR_MIN + (PCTR_MAX - PCTR_MIN) * squashed

    def value_measure(self, user: UserId, pair: AdCrowdPair, bid: float) -> float:
        if bid < 0:
            raise ContractViolation(f"negative_bid: {pair} bid={bid}")
        return self.pctr(user, pair.ad) * bid * 1000.0

    def expected_revenue(self, user: UserId, pair: AdCrowdPair, bid: float) -> float:
        """Per-impression expected value (pctr x bid), before the mille scale."""
        return self.pctr(user, pair.ad) * bid


def is_valid(campaign: Campaign, pair: AdCrowdPair, at: Timestamp) -> bool:
    """Serving-time validity of a cached pair against the campaign state at ``at``.

    The caller passes the campaign as it stands at ``at``; the timestamp is
    part of the contract so callers cannot confuse cache time and serve time.
    """
    if pair.ad != campaign.ad:
        raise ContractViolation(f"ad_mismatch: pair={pair.ad} campaign_ad={campaign.ad}")
    return (
        campaign.status is CampaignStatus.ACTIVE
        and campaign.budget_remaining > 0
        and campaign.targeting_for(pair.crowd) is not None
    )
