import json
from pathlib import Path

import pytest

CORPUS_PATH = Path(__file__).resolve().parents[2] / "tests" / "data" / "conformance_corpus.json"


@pytest.fixture(scope="session")
def corpus() -> dict:
    return json.loads(CORPUS_PATH.read_text())
