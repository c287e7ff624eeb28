import os
import sys

import pytest

# Make the `src` layout importable without an installed package.
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..", "src")))

from tfms.workload import WorkloadSpec, generate  # noqa: E402


@pytest.fixture(scope="session")
def small_spec():
    return WorkloadSpec(
        seed=3,
        users=150,
        crowds=40,
        campaigns=120,
        max_crowds_per_user=15,
        max_targetings_per_campaign=10,
        visits_per_user_per_day=3.0,
        advertiser_events_per_day=150.0,
        user_events_per_day=80.0,
        horizon_days=2,
        history_days=1,
    )


@pytest.fixture(scope="session")
def small_workload(small_spec):
    return generate(small_spec)


@pytest.fixture(scope="session")
def quiet_workload(small_spec):
    # same world, no mutations after t = 0
    from dataclasses import replace

    return generate(replace(small_spec, advertiser_events_per_day=0.0, user_events_per_day=0.0))
