from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
import tempfile

import pandas as pd
import pytest

from mobgap.income import IncomeObservation, classify, load_bracket_map, load_threshold_table
from mobgap.survey import data_path, derive_all_features, load_geography_map, load_survey
from mobgap.synth import SurveySpec, synthesize

# one line per acceptance check, printed at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)


@dataclass
class Fixture:
    seed: int
    paths: dict
    store: object
    features: dict
    classes: dict
    truth: pd.DataFrame


_ROOT = Path(tempfile.mkdtemp(prefix="mobgap-fixtures-"))


@lru_cache(maxsize=None)
def default_fixture(seed: int, n_households: int = 2000) -> Fixture:
    """Default planted survey, loaded and classified against the very-low table."""
    paths = synthesize(SurveySpec.default(n_households), seed, _ROOT / f"seed{seed}_{n_households}")
    store = load_survey(paths["households"], paths["persons"], paths["trips"])
    table = load_threshold_table(data_path("thresholds_2017.csv"), "HUD-very-low-2017")
    brackets = load_bracket_map(data_path("nhts2017_income_brackets.csv"))
    classes = {}
    for h, _ in store.iter_households():
        obs = IncomeObservation(h.region_code, h.size, bracket_id=h.income, metro_code=h.metro_code)
        classes[h.household_id] = classify(obs, table, brackets)
    features = derive_all_features(store, load_geography_map(data_path("nys_geography.csv")))
    truth = pd.read_csv(paths["truth"], dtype={"HOUSEID": str}).set_index("HOUSEID")
    return Fixture(seed, paths, store, features, classes, truth)


@pytest.fixture(scope="session")
def fixture7() -> Fixture:
    return default_fixture(7)
