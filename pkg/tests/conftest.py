from pathlib import Path

import pytest

from nomadgrid.config import StudyConfig, parse_config
from nomadgrid.scenario import HourLayout

ROOT = Path(__file__).resolve().parents[1]
DESK = ROOT / "configs" / "desk.toml"


@pytest.fixture(scope="session")
def desk_cfg() -> StudyConfig:
    return parse_config(DESK)


@pytest.fixture(scope="session")
def small_cfg() -> StudyConfig:
    """Three gers over two years, one day per month: fast but covers both seasons."""
    return StudyConfig().replace(study={"n_gers": 3, "horizon_months": 24, "rep_days": 1,
                                        "n_eval": 8, "n_fit": 8, "n_bounds": 8})


@pytest.fixture(scope="session")
def small_layout(small_cfg) -> HourLayout:
    return HourLayout.from_config(small_cfg)
