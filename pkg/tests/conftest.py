import json
from pathlib import Path

import pytest

SCENARIO_DIR = Path(__file__).resolve().parent.parent / "scenarios"


@pytest.fixture(scope="session")
def scenario_dir() -> Path:
    return SCENARIO_DIR


def load_doc(name: str) -> dict:
    return json.loads((SCENARIO_DIR / f"{name}.json").read_text())
